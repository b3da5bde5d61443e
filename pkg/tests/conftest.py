import torch

from mmchange.core import torch_generator


def dyadic(shape, *seed_parts, scale=256):
    """Random tensor whose entries are exact multiples of 1/scale.

    Offset-invariance checks need (a + c) - (b + c) to equal a - b bitwise,
    which holds when all values are dyadic rationals with headroom.
    """
    gen = torch_generator("dyadic", *seed_parts)
    ints = torch.randint(-2 * scale, 2 * scale + 1, shape, generator=gen)
    return ints.to(torch.float32) / scale


def randn(shape, *seed_parts, dtype=torch.float32):
    return torch.randn(shape, generator=torch_generator("randn", *seed_parts), dtype=dtype)

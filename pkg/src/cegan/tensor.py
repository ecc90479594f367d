"""Tensor primitives.

Tensors are plain ``numpy.ndarray`` objects. Image batches use N x C x H x W
layout. Training runs in float32; gradient checks switch to float64.

Randomness comes from ``numpy.random.Generator`` backed by PCG64, seeded
with a 64-bit integer. Same seed, same numpy build -> same stream.
"""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np

DEFAULT_DTYPE = np.float32
CHECK_DTYPE = np.float64

# element counts beyond this cannot be indexed on the platform
_MAX_ELEMENTS = np.iinfo(np.intp).max


class ShapeError(ValueError):
    """Tensor extents are invalid or incompatible."""


def make_rng(seed: int) -> np.random.Generator:
    if seed < 0 or seed >= 2**64:
        raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
    return np.random.Generator(np.random.PCG64(seed))


def check_shape(dims: Sequence[int]) -> tuple[int, ...]:
    dims = tuple(int(d) for d in dims)
    if not dims:
        raise ShapeError("shape must have at least one extent")
    if any(d < 1 for d in dims):
        raise ShapeError(f"all extents must be >= 1, got {list(dims)}")
    if math.prod(dims) > _MAX_ELEMENTS:
        raise ShapeError(f"element count of {list(dims)} overflows the addressable range")
    return dims


def tensor_fill(dims: Sequence[int], value: float, dtype=DEFAULT_DTYPE) -> np.ndarray:
    return np.full(check_shape(dims), value, dtype=dtype)


def tensor_randn(dims: Sequence[int], rng: np.random.Generator, stddev: float = 1.0,
                 dtype=DEFAULT_DTYPE) -> np.ndarray:
    if not stddev > 0:
        raise ValueError(f"stddev must be positive, got {stddev}")
    dims = check_shape(dims)
    # draw in float64 so the stream does not depend on the requested dtype
    return (rng.standard_normal(dims) * stddev).astype(dtype)


def concat_channels(parts: Sequence[np.ndarray]) -> np.ndarray:
    """Stack N x C_k x H x W tensors along the channel axis, in order."""
    if not parts:
        raise ShapeError("concat_channels needs at least one part")
    ref = parts[0].shape
    for p in parts:
        if p.ndim != 4 or p.shape[0] != ref[0] or p.shape[2:] != ref[2:]:
            raise ShapeError(f"cannot concatenate {p.shape} with {ref}: N/H/W must agree")
    if len(parts) == 1:
        return parts[0].copy()
    return np.concatenate(parts, axis=1)


def split_channels(x: np.ndarray, widths: Sequence[int]) -> list[np.ndarray]:
    """Inverse of :func:`concat_channels` given each part's channel count."""
    if sum(widths) != x.shape[1]:
        raise ShapeError(f"channel widths {list(widths)} do not sum to {x.shape[1]}")
    offsets = np.cumsum([0, *widths])
    return [x[:, offsets[i]:offsets[i + 1]] for i in range(len(widths))]


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    return a @ b


def derive_rng(seed: int, *keys: int) -> np.random.Generator:
    """Independent PCG64 stream for a (seed, key...) tuple."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, *keys])))


def derive_seed(seed: int, *keys: int) -> int:
    """A 64-bit seed for a sub-task, independent of the parent stream."""
    return int(np.random.SeedSequence([seed, *keys]).generate_state(1, np.uint64)[0])

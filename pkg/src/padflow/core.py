"""Image tensors, padding, and the flattening order shared by every layer.

Images are numpy arrays of shape (H, W, C) or (N, H, W, C), row-major with
the channel axis fastest.  Under that layout the flat index of element
(i, j, c) is ``c + C*j + C*W*i``, so ``x.reshape(-1)`` on an (H, W, C) array
is exactly the vectorization used when a convolution is written as a matrix.

Functions here never mutate their inputs; treat arrays as values.
"""

from dataclasses import dataclass

import numpy as np

DEFAULT_DTYPE = np.float64


class PadflowError(Exception):
    """Base class for errors raised by this package."""


class ShapeError(PadflowError):
    """Input shapes are inconsistent with what an operation requires."""


@dataclass(frozen=True)
class PadSpec:
    """Zero padding widths (top, bottom, left, right), in pixels."""

    top: int
    bottom: int
    left: int
    right: int

    def __post_init__(self):
        if min(self.top, self.bottom, self.left, self.right) < 0:
            raise ValueError(f"pad widths must be non-negative, got {self}")

    @classmethod
    def causal(cls, k):
        """Top-left only padding (k-1, 0, k-1, 0) for a k x k window.

        This is the configuration that makes the convolution's matrix
        (block) lower triangular in the flat pixel order.
        """
        return cls(k - 1, 0, k - 1, 0)

    @classmethod
    def symmetric(cls, k):
        """Same-size padding ((k-1)/2 on every side) for odd k."""
        if k % 2 == 0:
            raise ValueError("symmetric same-size padding needs odd k")
        p = (k - 1) // 2
        return cls(p, p, p, p)


def as_batch(x):
    """View x as (N, H, W, C); returns (batched, had_batch_dim)."""
    x = np.asarray(x)
    if x.ndim == 3:
        return x[None], False
    if x.ndim == 4:
        return x, True
    raise ShapeError(f"expected rank 3 or 4 image tensor, got shape {x.shape}")


def pad(x, spec):
    """Zero-pad the spatial axes of an (H, W, C) or (N, H, W, C) tensor.

    output[i, j, c] = x[i - top, j - left, c] where that index exists,
    zero elsewhere.  No bias is added and original values are preserved.
    """
    xb, batched = as_batch(x)
    widths = ((0, 0), (spec.top, spec.bottom), (spec.left, spec.right), (0, 0))
    out = np.pad(xb, widths, mode="constant")
    return out if batched else out[0]


def unpad(x, spec):
    """Strip the padding added by :func:`pad` (exact inverse on values)."""
    xb, batched = as_batch(x)
    h = xb.shape[1] - spec.top - spec.bottom
    w = xb.shape[2] - spec.left - spec.right
    if h <= 0 or w <= 0:
        raise ShapeError(f"padding {spec} larger than tensor {x.shape}")
    out = xb[:, spec.top:spec.top + h, spec.left:spec.left + w, :]
    return out if batched else out[0]


def flat_index(i, j, c, shape):
    """Flat position of element (i, j, c) in an image of shape (H, W, C).

    Returns ``c + C*j + C*W*i``: strictly monotone in lexicographic
    (i, j, c), and a bijection onto range(H*W*C).
    """
    h, w, ch = shape
    if not (0 <= i < h and 0 <= j < w and 0 <= c < ch):
        raise IndexError(f"index ({i}, {j}, {c}) out of range for shape {shape}")
    return c + ch * j + ch * w * i


def unflat_index(q, shape):
    """Inverse of :func:`flat_index`: flat position -> (i, j, c)."""
    h, w, ch = shape
    n = h * w * ch
    if not 0 <= q < n:
        raise IndexError(f"flat index {q} out of range for shape {shape}")
    i, rest = divmod(q, ch * w)
    j, c = divmod(rest, ch)
    return i, j, c


def raster_positions(h, w):
    """Pixel coordinates (i, j) in raster order: left to right, top to bottom."""
    for i in range(h):
        for j in range(w):
            yield i, j


def flatten_image(x):
    """Vectorize one (H, W, C) image in the documented flat order."""
    x = np.asarray(x)
    if x.ndim != 3:
        raise ShapeError(f"flatten_image expects (H, W, C), got {x.shape}")
    return x.reshape(-1)


def unflatten_image(v, shape):
    """Inverse of :func:`flatten_image`."""
    v = np.asarray(v)
    h, w, c = shape
    if v.size != h * w * c:
        raise ShapeError(f"vector of length {v.size} does not fill shape {shape}")
    return v.reshape(h, w, c)


def split_channels(x, parts=2):
    """Split along the channel axis into equal parts."""
    c = np.asarray(x).shape[-1]
    if c % parts != 0:
        raise ShapeError(f"cannot split {c} channels into {parts} equal parts")
    return [a for a in np.split(x, parts, axis=-1)]


def concat_channels(parts):
    """Concatenate along the channel axis; inverse of :func:`split_channels`."""
    return np.concatenate(parts, axis=-1)


def channel_matmul(x, w):
    """Mix channels per pixel: out[..., o] = sum_i w[o, i] * x[..., i]."""
    x = np.asarray(x)
    w = np.asarray(w)
    if w.ndim != 2 or w.shape[1] != x.shape[-1]:
        raise ShapeError(f"weight {w.shape} does not match {x.shape[-1]} channels")
    return x @ w.T

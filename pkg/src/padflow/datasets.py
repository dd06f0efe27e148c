"""Synthetic 8-bit image datasets, regenerated deterministically from a seed."""

import os
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from .core import PadflowError
from .tensorio import read_image

KINDS = ("gaussian-blobs", "checkerboard", "bars", "gaussian-iid", "image-folder")


@dataclass(frozen=True)
class DatasetSpec:
    kind: str
    height: int = 8
    width: int = 8
    channels: int = 1
    size: int = 512
    seed: int = 7
    cell: int = 2          # checkerboard cell size, pixels
    low: int = 64          # dark level (checkerboard, bars background)
    high: int = 192        # bright level
    mean: float = 128.0    # gaussian-iid pixel mean
    std: float = 32.0      # gaussian-iid pixel standard deviation
    image_dir: str = ""    # image-folder source


def generate(spec):
    """Materialize the dataset as uint8 of shape (size, H, W, C)."""
    if spec.kind not in KINDS:
        raise PadflowError(f"unknown dataset kind {spec.kind!r}; choose from {KINDS}")
    rng = np.random.default_rng(spec.seed)
    maker = {
        "checkerboard": _checkerboard,
        "gaussian-iid": _gaussian_iid,
        "gaussian-blobs": _gaussian_blobs,
        "bars": _bars,
        "image-folder": _image_folder,
    }[spec.kind]
    data = maker(spec, rng)
    assert data.dtype == np.uint8 and data.shape == (spec.size, spec.height, spec.width, spec.channels)
    return data


def _checkerboard(spec, rng):
    i, j = np.indices((spec.height, spec.width))
    pattern = ((i // spec.cell + j // spec.cell) % 2).astype(np.uint8)
    img = (spec.low + pattern * (spec.high - spec.low)).astype(np.uint8)
    img = np.repeat(img[..., None], spec.channels, axis=-1)
    return np.broadcast_to(img, (spec.size, *img.shape)).copy()


def _gaussian_iid(spec, rng):
    v = rng.normal(spec.mean, spec.std, size=(spec.size, spec.height, spec.width, spec.channels))
    return np.clip(np.rint(v), 0, 255).astype(np.uint8)


def _gaussian_blobs(spec, rng):
    ii, jj = np.indices((spec.height, spec.width))
    out = np.empty((spec.size, spec.height, spec.width, spec.channels), dtype=np.uint8)
    for n in range(spec.size):
        field = np.zeros((spec.height, spec.width, spec.channels))
        for _ in range(int(rng.integers(1, 4))):
            ci = rng.uniform(0, spec.height)
            cj = rng.uniform(0, spec.width)
            sigma = rng.uniform(0.8, 0.25 * max(spec.height, spec.width))
            amp = rng.uniform(0.4, 1.0, size=spec.channels)
            bump = np.exp(-((ii - ci) ** 2 + (jj - cj) ** 2) / (2 * sigma ** 2))
            field += bump[..., None] * amp
        peak = field.max()
        if peak > 0:
            field /= peak
        out[n] = np.clip(np.rint(255 * field), 0, 255).astype(np.uint8)
    return out


def _bars(spec, rng):
    out = np.full((spec.size, spec.height, spec.width, spec.channels), spec.low, dtype=np.uint8)
    for n in range(spec.size):
        horizontal = bool(rng.integers(0, 2))
        count = int(rng.integers(1, max(2, spec.height // 2)))
        span = spec.height if horizontal else spec.width
        lines = rng.choice(span, size=min(count, span), replace=False)
        for line in lines:
            if horizontal:
                out[n, line, :, :] = spec.high
            else:
                out[n, :, line, :] = spec.high
    return out


def _image_folder(spec, rng):
    if not spec.image_dir:
        raise PadflowError("image-folder dataset needs image_dir")
    names = sorted(
        f for f in os.listdir(spec.image_dir)
        if f.lower().endswith((".pgm", ".ppm", ".pnm"))
    )
    if not names:
        raise PadflowError(f"no PGM/PPM images in {spec.image_dir}")
    images = []
    for name in names[:spec.size]:
        img = read_image(os.path.join(spec.image_dir, name))
        if img.shape != (spec.height, spec.width, spec.channels):
            raise PadflowError(
                f"{name}: shape {img.shape} does not match dataset spec "
                f"({spec.height}, {spec.width}, {spec.channels})"
            )
        images.append(img)
    if len(images) < spec.size:
        raise PadflowError(
            f"image-folder holds {len(images)} usable images, spec asks for {spec.size}"
        )
    return np.stack(images)


def discrete_gaussian_entropy_bits(mean, std):
    """Entropy (bits per value) of round-and-clip quantized N(mean, std^2).

    The analytic target for training on gaussian-iid data: bin v < 255
    collects the mass below v + 0.5, with the clip bins absorbing the
    tails.
    """
    edges = (np.arange(256, dtype=np.float64)[:-1] + 0.5 - mean) / std
    cdf = np.concatenate([[0.0], ndtr(edges), [1.0]])
    p = np.diff(cdf)
    p = p[p > 0]
    return float(-np.sum(p * np.log2(p)))

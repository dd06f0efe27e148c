"""File formats: raw tensors and plain PGM/PPM images.

Raw tensor format (little-endian throughout):

    bytes 0..3    magic b"PFTN"
    bytes 4..7    u32 format version (currently 1)
    bytes 8..11   u32 element type: 0 = float64, 1 = float32
    bytes 12..15  u32 reserved (zero)
    next          u32 rank, then rank * u32 dims
    payload       IEEE-754 values in the documented layout
                  (row-major, channel fastest)

Images are read and written as uint8 arrays of shape (H, W, 1) for PGM and
(H, W, 3) for PPM, in the 0..255 quantized range.
"""

import json
import struct

import numpy as np

from .core import PadflowError
from .invconv import ConvKernel

MAGIC = b"PFTN"
FORMAT_VERSION = 1

_DTYPE_CODES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}
_CODE_FOR_KIND = {"f8": 0, "f4": 1}


class TensorFormatError(PadflowError):
    """A tensor or image file is malformed or has the wrong version."""


def tensor_bytes(arr):
    """Serialize an array to raw tensor bytes."""
    arr = np.asarray(arr)
    if arr.dtype == np.float32:
        code = 1
        data = np.ascontiguousarray(arr, dtype="<f4")
    else:
        code = 0
        data = np.ascontiguousarray(arr, dtype="<f8")
    head = MAGIC + struct.pack("<III", FORMAT_VERSION, code, 0)
    head += struct.pack("<I", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + data.tobytes()


def read_tensor_from(buf, offset=0):
    """Parse one tensor from a bytes-like object; returns (array, next_offset)."""
    if buf[offset:offset + 4] != MAGIC:
        raise TensorFormatError("bad magic; not a raw tensor")
    version, code, _ = struct.unpack_from("<III", buf, offset + 4)
    if version != FORMAT_VERSION:
        raise TensorFormatError(f"unsupported tensor format version {version}")
    if code not in _DTYPE_CODES:
        raise TensorFormatError(f"unknown element type code {code}")
    (rank,) = struct.unpack_from("<I", buf, offset + 16)
    if rank > 8:
        raise TensorFormatError(f"implausible rank {rank}")
    dims = struct.unpack_from(f"<{rank}I", buf, offset + 20)
    dtype = _DTYPE_CODES[code]
    start = offset + 20 + 4 * rank
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    end = start + count * dtype.itemsize
    if end > len(buf):
        raise TensorFormatError("truncated tensor payload")
    arr = np.frombuffer(buf[start:end], dtype=dtype).reshape(dims)
    return arr.astype(dtype.newbyteorder("=")), end


def save_tensor(path, arr):
    with open(path, "wb") as f:
        f.write(tensor_bytes(arr))


def load_tensor(path):
    with open(path, "rb") as f:
        buf = f.read()
    arr, end = read_tensor_from(buf)
    if end != len(buf):
        raise TensorFormatError(f"{path} has {len(buf) - end} trailing bytes")
    return arr


# --- kernel fixtures ----------------------------------------------------

def save_kernel(path, kernel):
    """Write a kernel as <path> (raw tensor) plus a <path>.json sidecar."""
    save_tensor(path, kernel.weights)
    sidecar = {"k": kernel.k, "C": kernel.channels, "variant": kernel.variant}
    with open(f"{path}.json", "w") as f:
        f.write(json.dumps(sidecar, sort_keys=True) + "\n")


def load_kernel(path):
    weights = load_tensor(path)
    try:
        with open(f"{path}.json") as f:
            sidecar = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise TensorFormatError(f"{path}: missing or malformed kernel sidecar") from exc
    kernel = ConvKernel(weights, sidecar.get("variant", "masked"))
    if kernel.k != sidecar.get("k") or kernel.channels != sidecar.get("C"):
        raise TensorFormatError(f"{path}: sidecar does not match tensor shape")
    return kernel


# --- PGM / PPM ---------------------------------------------------------

def _tokens(data):
    # whitespace-separated tokens, skipping '#' comments to end of line
    i, n = 0, len(data)
    while i < n:
        ch = data[i:i + 1]
        if ch.isspace():
            i += 1
        elif ch == b"#":
            while i < n and data[i:i + 1] != b"\n":
                i += 1
        else:
            j = i
            while j < n and not data[j:j + 1].isspace():
                j += 1
            yield i, data[i:j]
            i = j


def read_image(path):
    """Read a P2/P3/P5/P6 image as uint8 (H, W, 1) or (H, W, 3)."""
    with open(path, "rb") as f:
        data = f.read()
    toks = _tokens(data)
    try:
        _, magic = next(toks)
        channels = {b"P2": 1, b"P3": 3, b"P5": 1, b"P6": 3}[magic]
        binary = magic in (b"P5", b"P6")
        _, wtok = next(toks)
        _, htok = next(toks)
        pos, mtok = next(toks)
        w, h, maxval = int(wtok), int(htok), int(mtok)
    except (StopIteration, KeyError, ValueError) as exc:
        raise TensorFormatError(f"{path}: malformed PNM header") from exc
    if not 0 < maxval <= 255:
        raise TensorFormatError(f"{path}: only 8-bit images supported (maxval {maxval})")
    count = h * w * channels
    if binary:
        start = pos + len(mtok) + 1  # single whitespace byte after maxval
        raster = data[start:start + count]
        if len(raster) != count:
            raise TensorFormatError(f"{path}: truncated raster")
        pixels = np.frombuffer(raster, dtype=np.uint8)
    else:
        vals = []
        for _, tok in toks:
            vals.append(int(tok))
            if len(vals) == count:
                break
        if len(vals) != count:
            raise TensorFormatError(f"{path}: truncated raster")
        pixels = np.asarray(vals, dtype=np.uint8)
    if pixels.max(initial=0) > maxval:
        raise TensorFormatError(f"{path}: sample exceeds declared maxval")
    return pixels.reshape(h, w, channels)


def write_image(path, pixels):
    """Write uint8 (H, W, 1) as P5 or (H, W, 3) as P6."""
    pixels = np.asarray(pixels)
    if pixels.dtype != np.uint8 or pixels.ndim != 3 or pixels.shape[-1] not in (1, 3):
        raise TensorFormatError(f"expected uint8 (H, W, 1|3), got {pixels.dtype} {pixels.shape}")
    magic = b"P5" if pixels.shape[-1] == 1 else b"P6"
    header = b"%s\n%d %d\n255\n" % (magic, pixels.shape[1], pixels.shape[0])
    with open(path, "wb") as f:
        f.write(header)
        f.write(pixels.tobytes())

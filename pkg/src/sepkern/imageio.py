"""File formats: 8-bit PNG images and the SKF1 flat float container.

SKF1 layout (little-endian): magic b"SKF1", u32 ndim, u32 extents[ndim],
then float32 data in row-major order. It exists to move bit-exact test
vectors and kernel fields between runs.
"""

import struct

import numpy as np
from PIL import Image as PILImage

from .errors import ContractViolation, DataError

_MAGIC = b"SKF1"


def read_png(path):
    """Load an 8-bit PNG as float32 [C, H, W] with values mapped to [0, 1]."""
    try:
        with PILImage.open(path) as im:
            im = im.convert("RGB") if im.mode not in ("L", "RGB") else im.copy()
    except OSError as exc:
        raise DataError(f"cannot read PNG {path}: {exc}") from exc
    arr = np.asarray(im, dtype=np.float32) / 255.0
    if arr.ndim == 2:
        arr = arr[None, :, :]
    else:
        arr = np.ascontiguousarray(arr.transpose(2, 0, 1))
    return arr


def write_png(path, img):
    """Write a float [C, H, W] image (nominal range [0, 1]) as 8-bit PNG."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[0] not in (1, 3):
        raise ContractViolation(f"PNG writer expects [1|3, H, W], got {img.shape}")
    u8 = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    if u8.shape[0] == 1:
        pil = PILImage.fromarray(u8[0], mode="L")
    else:
        pil = PILImage.fromarray(u8.transpose(1, 2, 0), mode="RGB")
    pil.save(path, format="PNG")


def write_skf1(fh_or_path, arr):
    """Serialize one float32 tensor in the SKF1 format."""
    arr = np.ascontiguousarray(arr, dtype=np.float32)
    header = _MAGIC + struct.pack("<I", arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = header + arr.tobytes()
    if hasattr(fh_or_path, "write"):
        fh_or_path.write(payload)
    else:
        with open(fh_or_path, "wb") as fh:
            fh.write(payload)


def _read_exact(fh, n, what):
    buf = fh.read(n)
    if len(buf) != n:
        raise DataError(f"truncated SKF1 stream while reading {what}")
    return buf


def read_skf1(fh_or_path):
    """Read one SKF1 tensor record; raises DataError on corruption."""
    if hasattr(fh_or_path, "read"):
        return _read_skf1_stream(fh_or_path)
    with open(fh_or_path, "rb") as fh:
        return _read_skf1_stream(fh)


def _read_skf1_stream(fh):
    magic = _read_exact(fh, 4, "magic")
    if magic != _MAGIC:
        raise DataError(f"bad SKF1 magic {magic!r}")
    (ndim,) = struct.unpack("<I", _read_exact(fh, 4, "ndim"))
    if ndim == 0 or ndim > 8:
        raise DataError(f"implausible SKF1 ndim {ndim}")
    shape = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim, "extents"))
    count = 1
    for ext in shape:
        count *= ext
    data = _read_exact(fh, 4 * count, "payload")
    return np.frombuffer(data, dtype="<f4").reshape(shape).copy()


# Kernel-field container: four consecutive SKF1 records in this fixed order.
KERNEL_FIELD_ORDER = ("k1h", "k1v", "k2h", "k2v")


def save_kernel_field_arrays(path, k1h, k1v, k2h, k2v):
    with open(path, "wb") as fh:
        for arr in (k1h, k1v, k2h, k2v):
            write_skf1(fh, arr)


def load_kernel_field_arrays(path):
    with open(path, "rb") as fh:
        return tuple(_read_skf1_stream(fh) for _ in KERNEL_FIELD_ORDER)

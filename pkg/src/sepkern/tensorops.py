"""Elementary deterministic tensor operations.

Images are dense numpy arrays in [C, H, W] row-major layout, float32 by
default with float64 variants reserved for oracle computations. Values are
nominally in [0, 1] for color data. All functions here are pure: they never
mutate their inputs and are safe to call concurrently.
"""

import math

import numpy as np

from .errors import ContractViolation

EPS_SIGMA = 1e-6


def as_image(arr, name="image"):
    """Validate a [C, H, W] array and return it as contiguous float input."""
    a = np.asarray(arr)
    if a.ndim != 3:
        raise ContractViolation(f"{name} must be [C, H, W], got shape {a.shape}")
    c, h, w = a.shape
    if h < 1 or w < 1:
        raise ContractViolation(f"{name} needs H >= 1 and W >= 1, got {a.shape}")
    return np.ascontiguousarray(a)


def kahan_sum(values, dtype=np.float64):
    """Compensated (Kahan) summation of a 1-D sequence of scalars.

    The compensation term bounds the accumulated rounding error
    independently of the sequence length, up to the final rounding.
    Returns a plain Python float; empty input sums to 0.
    """
    vals = np.asarray(values, dtype=dtype).ravel()
    zero = dtype(0) if not isinstance(dtype, type) else np.dtype(dtype).type(0)
    s = zero
    comp = zero
    for v in vals:
        y = v - comp
        t = s + y
        comp = (t - s) - y
        s = t
    return float(s)


def kahan_sum_planes(planes, dtype=None):
    """Elementwise Kahan sum over an iterable of equally shaped arrays.

    Accumulates in the order given, one compensation buffer per element.
    This is the vector form used inside the convolution kernels.
    """
    it = iter(planes)
    try:
        first = next(it)
    except StopIteration:
        raise ContractViolation("kahan_sum_planes needs at least one plane")
    dt = np.dtype(dtype) if dtype is not None else np.asarray(first).dtype
    s = np.asarray(first, dtype=dt).copy()
    comp = np.zeros_like(s)
    for plane in it:
        y = np.asarray(plane, dtype=dt) - comp
        t = s + y
        comp = (t - s) - y
        s = t
    return s


def replicate_pad(img, pad):
    """Extend a [C, H, W] image by `pad` pixels on every spatial side,
    clamping out-of-range coordinates to the nearest valid pixel."""
    if pad < 0:
        raise ContractViolation(f"pad must be >= 0, got {pad}")
    img = as_image(img)
    if pad == 0:
        return img.copy()
    return np.pad(img, ((0, 0), (pad, pad), (pad, pad)), mode="edge")


def center_crop(img, pad):
    """Inverse of replicate_pad: remove `pad` pixels from every spatial side."""
    if pad < 0:
        raise ContractViolation(f"pad must be >= 0, got {pad}")
    img = as_image(img)
    if pad == 0:
        return img.copy()
    if img.shape[1] <= 2 * pad or img.shape[2] <= 2 * pad:
        raise ContractViolation(f"cannot crop {pad} from shape {img.shape}")
    return np.ascontiguousarray(img[:, pad:-pad, pad:-pad])


# The eight elements of the dihedral group acting on the spatial axes.
# rot90 is counterclockwise in (H, W) index space; flip_h mirrors the W axis
# (left-right), flip_v the H axis. transpose swaps H and W (main diagonal),
# anti_transpose mirrors across the anti-diagonal.
SPATIAL_TRANSFORMS = (
    "identity",
    "flip_h",
    "flip_v",
    "rot180",
    "rot90",
    "rot270",
    "transpose",
    "anti_transpose",
)

TRANSFORM_INVERSE = {
    "identity": "identity",
    "flip_h": "flip_h",
    "flip_v": "flip_v",
    "rot180": "rot180",
    "rot90": "rot270",
    "rot270": "rot90",
    "transpose": "transpose",
    "anti_transpose": "anti_transpose",
}


def spatial_transform(img, transform):
    """Apply one of the eight dihedral transforms to a [C, H, W] image.

    Pure pixel permutation: exact, invertible (see TRANSFORM_INVERSE), and
    composition obeys the dihedral group laws.
    """
    img = as_image(img)
    if transform == "identity":
        out = img
    elif transform == "flip_h":
        out = img[:, :, ::-1]
    elif transform == "flip_v":
        out = img[:, ::-1, :]
    elif transform == "rot180":
        out = img[:, ::-1, ::-1]
    elif transform == "rot90":
        out = np.rot90(img, k=1, axes=(1, 2))
    elif transform == "rot270":
        out = np.rot90(img, k=3, axes=(1, 2))
    elif transform == "transpose":
        out = np.swapaxes(img, 1, 2)
    elif transform == "anti_transpose":
        out = np.swapaxes(img, 1, 2)[:, ::-1, ::-1]
    else:
        raise ContractViolation(f"unknown spatial transform {transform!r}")
    return np.ascontiguousarray(out)


def mse(a, b):
    """Mean squared error over all elements, accumulated in 64-bit."""
    a = as_image(a)
    b = as_image(b)
    if a.shape != b.shape:
        raise ContractViolation(f"shape mismatch {a.shape} vs {b.shape}")
    d = a.astype(np.float64) - b.astype(np.float64)
    return float(np.mean(d * d))


def psnr(a, b, peak=1.0):
    """Peak signal-to-noise ratio in dB: 10*log10(peak^2 / MSE).

    Identical inputs (zero MSE) report +inf; comparisons treat the sentinel
    as greater than any finite value.
    """
    if peak <= 0:
        raise ContractViolation(f"peak must be > 0, got {peak}")
    err = mse(a, b)
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / err)

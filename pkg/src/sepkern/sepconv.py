"""The adaptive separable convolution operator.

Each output pixel carries four 1-D kernels (horizontal and vertical, one
pair per input frame). Filtering a frame applies the rank-1 outer product
of its pair at every pixel; the interpolation result is the sum of the two
filtered frames, optionally divided by the same filtering applied to a
ones mask so the effective kernel weights sum to one.

Hot loops live in the backend modules; this file owns contracts, the
64-bit brute-force oracle, and the normalization algebra.
"""

from dataclasses import dataclass

import numpy as np

from . import backend
from .errors import ContractViolation
from .imageio import load_kernel_field_arrays, save_kernel_field_arrays
from .tensorops import as_image, kahan_sum_planes, replicate_pad

# Below this magnitude the normalization divisor is treated as 1 (the
# numerator passes through unnormalized); the quotient is meaningless at
# zero mass.
EPS_DENOM = 1e-6


@dataclass
class SeparableKernelField:
    """Per-pixel 1-D kernel tensors, each [K, H, W], kernel size K odd."""

    k1h: np.ndarray
    k1v: np.ndarray
    k2h: np.ndarray
    k2v: np.ndarray

    def __post_init__(self):
        shape = self.k1h.shape
        for name in ("k1h", "k1v", "k2h", "k2v"):
            arr = getattr(self, name)
            if arr.ndim != 3 or arr.shape != shape:
                raise ContractViolation(
                    f"kernel field {name} must match shape {shape}, got {arr.shape}"
                )
        if shape[0] % 2 == 0 or shape[0] < 1:
            raise ContractViolation(f"kernel size must be odd, got {shape[0]}")

    @property
    def kernel_size(self):
        return self.k1h.shape[0]

    @property
    def spatial_shape(self):
        return self.k1h.shape[1:]

    def scaled(self, s):
        return SeparableKernelField(
            self.k1h * s, self.k1v * s, self.k2h * s, self.k2v * s
        )

    def astype(self, dtype):
        return SeparableKernelField(
            *(getattr(self, n).astype(dtype) for n in ("k1h", "k1v", "k2h", "k2v"))
        )

    def save(self, path):
        save_kernel_field_arrays(path, self.k1h, self.k1v, self.k2h, self.k2v)

    @classmethod
    def load(cls, path):
        return cls(*load_kernel_field_arrays(path))


@dataclass
class OperatorTape:
    """State retained by a forward call for the analytic backward pass."""

    padded: np.ndarray
    kh: np.ndarray
    kv: np.ndarray


def _check_forward_shapes(padded, kh, kv):
    if kh.shape != kv.shape:
        raise ContractViolation(f"kh {kh.shape} and kv {kv.shape} must match")
    K, H, W = kh.shape
    if K % 2 == 0:
        raise ContractViolation(f"kernel size must be odd, got {K}")
    if padded.ndim != 3 or padded.shape[1] != H + K - 1 or padded.shape[2] != W + K - 1:
        raise ContractViolation(
            f"padded image {padded.shape} incompatible with kernels {kh.shape}; "
            f"expected [(C, {H + K - 1}, {W + K - 1})]"
        )


def sepconv_forward(padded, kh, kv, backend_name=None):
    """Filter a replicate-padded [C, H+K-1, W+K-1] image with per-pixel
    separable kernels, returning [C, H, W]. Kahan-compensated accumulation
    in fixed tap order makes the result deterministic."""
    padded = np.ascontiguousarray(padded)
    kh = np.ascontiguousarray(kh)
    kv = np.ascontiguousarray(kv)
    _check_forward_shapes(padded, kh, kv)
    K, H, W = kh.shape
    out = np.empty((padded.shape[0], H, W), dtype=padded.dtype)
    impl = backend.get_backend(backend_name)
    impl.sepconv_forward(padded, kh, kv, out, backend.resolve_threads())
    return out


def sepconv_forward_batch(padded, kh, kv, backend_name=None):
    """Batched forward over leading dim B; per-sample results are identical
    to sepconv_forward."""
    b, c = padded.shape[:2]
    K, H, W = kh.shape[1:]
    out = np.empty((b, c, H, W), dtype=padded.dtype)
    impl = backend.get_backend(backend_name)
    impl.sepconv_forward_batch(
        np.ascontiguousarray(padded), np.ascontiguousarray(kh),
        np.ascontiguousarray(kv), out, backend.resolve_threads(),
    )
    return out


def sepconv_backward(tape, grad_out, backend_name=None):
    """Exact partial derivatives of sepconv_forward with respect to the
    padded image and both kernel tensors."""
    padded, kh, kv = tape.padded, tape.kh, tape.kv
    _check_forward_shapes(padded, kh, kv)
    K, H, W = kh.shape
    grad_out = np.ascontiguousarray(grad_out)
    if grad_out.shape != (padded.shape[0], H, W):
        raise ContractViolation(
            f"grad_out {grad_out.shape} must be {(padded.shape[0], H, W)}"
        )
    grad_padded = np.empty_like(padded)
    grad_kh = np.empty_like(kh)
    grad_kv = np.empty_like(kv)
    impl = backend.get_backend(backend_name)
    impl.sepconv_backward(
        padded, kh, kv, grad_out, grad_padded, grad_kh, grad_kv,
        backend.resolve_threads(),
    )
    return grad_padded, grad_kh, grad_kv


def full2d_oracle(img, kh, kv):
    """Brute-force reference: the explicit K x K outer-product kernel of
    every pixel applied by a double loop, entirely in 64-bit. Pads the
    unpadded input internally. Ground truth for equivalence tests."""
    img = as_image(img)
    if kh.shape != kv.shape:
        raise ContractViolation(f"kh {kh.shape} and kv {kv.shape} must match")
    K, H, W = kh.shape
    if img.shape[1] != H or img.shape[2] != W:
        raise ContractViolation(f"image {img.shape} does not match kernels {kh.shape}")
    pad = (K - 1) // 2
    p64 = replicate_pad(img.astype(np.float64), pad)
    kh64 = kh.astype(np.float64)
    kv64 = kv.astype(np.float64)
    out = np.empty((img.shape[0], H, W), dtype=np.float64)
    for y in range(H):
        for x in range(W):
            k2d = np.outer(kv64[:, y, x], kh64[:, y, x])
            window = p64[:, y:y + K, x:x + K]
            out[:, y, x] = (window * k2d[None, :, :]).sum(axis=(1, 2))
    return out


def tap_sums(kf):
    """Kahan sums over taps: (sum_i k1h, sum_j k1v, sum_i k2h, sum_j k2v),
    each [H, W]."""
    return (
        kahan_sum_planes(kf.k1h),
        kahan_sum_planes(kf.k1v),
        kahan_sum_planes(kf.k2h),
        kahan_sum_planes(kf.k2v),
    )


def kernel_grads(padded, kh, kv, grad_out):
    """Gradients of sepconv_forward w.r.t. the kernel tensors only.

    Used where the input gradient is never needed (the synthesis path:
    frames and frozen features are data, not parameters). Contracted via
    windowed views, so it is backend-independent and substantially faster
    than the full adjoint.
    """
    K, H, W = kh.shape
    windows = np.lib.stride_tricks.sliding_window_view(padded, (H, W), axis=(1, 2))
    # windows[c, j, i, y, x] == padded[c, y + j, x + i]
    s = np.einsum("cyx,cjiyx->jiyx", grad_out, windows, optimize=True)
    grad_kh = np.einsum("jyx,jiyx->iyx", kv, s, optimize=True)
    grad_kv = np.einsum("iyx,jiyx->jyx", kh, s, optimize=True)
    return grad_kh, grad_kv


def kernel_grads_batch(padded, kh, kv, grad_out):
    """Batched kernel_grads over leading dim B."""
    K, H, W = kh.shape[1:]
    windows = np.lib.stride_tricks.sliding_window_view(padded, (H, W), axis=(2, 3))
    s = np.einsum("bcyx,bcjiyx->bjiyx", grad_out, windows, optimize=True)
    grad_kh = np.einsum("bjyx,bjiyx->biyx", kv, s, optimize=True)
    grad_kv = np.einsum("biyx,bjiyx->bjyx", kh, s, optimize=True)
    return grad_kh, grad_kv


def normalization_denominator(kf, h, w):
    """Per-pixel effective kernel mass of both frames, shape [1, H, W].

    Equals filtering a ones image with each kernel pair and summing: since
    replicate-padded ones stay ones, that is (sum_i kh[i]) * (sum_j kv[j])
    per frame.
    """
    if kf.spatial_shape != (h, w):
        raise ContractViolation(
            f"kernel field spatial shape {kf.spatial_shape} != ({h}, {w})"
        )
    s1h, s1v, s2h, s2v = tap_sums(kf)
    return (s1h * s1v + s2h * s2v)[None, :, :]


@dataclass
class SynthTape:
    """Forward state of one interpolation (padded frames + kernel field)."""

    p1: np.ndarray
    p2: np.ndarray
    kf: SeparableKernelField
    num: np.ndarray
    normalized: bool
    sums: tuple | None
    den: np.ndarray | None
    divisor: np.ndarray | None
    guarded: np.ndarray | None


def synthesize_forward(p1, p2, kf, normalized=True):
    """Filter two replicate-padded frames with a kernel field and sum them,
    optionally dividing by the filtered ones mask. Returns (out, tape)."""
    num1 = sepconv_forward(p1, kf.k1h, kf.k1v)
    num2 = sepconv_forward(p2, kf.k2h, kf.k2v)
    num = num1 + num2
    if not normalized:
        return num, SynthTape(p1, p2, kf, num, False, None, None, None, None)
    sums = tap_sums(kf)
    s1h, s1v, s2h, s2v = sums
    den = s1h * s1v + s2h * s2v
    guarded = np.abs(den) < EPS_DENOM
    divisor = np.where(guarded, den.dtype.type(1), den)
    out = num / divisor[None, :, :]
    return out, SynthTape(p1, p2, kf, num, True, sums, den, divisor, guarded)


def synthesize_backward(tape, grad_out):
    """Gradients of synthesize_forward w.r.t. the four kernel tensors."""
    kf = tape.kf
    if tape.normalized:
        g_num = grad_out / tape.divisor[None, :, :]
        g_den = np.where(
            tape.guarded,
            tape.den.dtype.type(0),
            -(grad_out * tape.num).sum(axis=0) / (tape.divisor * tape.divisor),
        )
    else:
        g_num = grad_out
        g_den = None

    gk1h, gk1v = kernel_grads(tape.p1, kf.k1h, kf.k1v, g_num)
    gk2h, gk2v = kernel_grads(tape.p2, kf.k2h, kf.k2v, g_num)

    if g_den is not None:
        s1h, s1v, s2h, s2v = tape.sums
        gk1h += (g_den * s1v)[None, :, :]
        gk1v += (g_den * s1h)[None, :, :]
        gk2h += (g_den * s2v)[None, :, :]
        gk2v += (g_den * s2h)[None, :, :]
    return gk1h, gk1v, gk2h, gk2v


def interpolate_with_kernels(i1, i2, kf, normalized=True):
    """Synthesize the intermediate frame from two unpadded frames and a
    kernel field; frames are replicate-padded internally by (K-1)/2."""
    i1 = as_image(i1, "i1")
    i2 = as_image(i2, "i2")
    if i1.shape != i2.shape:
        raise ContractViolation(f"frame shapes differ: {i1.shape} vs {i2.shape}")
    if kf.spatial_shape != i1.shape[1:]:
        raise ContractViolation(
            f"kernel field {kf.spatial_shape} does not match frames {i1.shape[1:]}"
        )
    pad = (kf.kernel_size - 1) // 2
    out, _ = synthesize_forward(
        replicate_pad(i1, pad), replicate_pad(i2, pad), kf, normalized
    )
    return out

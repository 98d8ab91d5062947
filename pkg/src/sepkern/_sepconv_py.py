"""Pure-numpy fallback kernels for the adaptive separable convolution.

These mirror the compiled core in `_sepconv_cy` operation for operation:
same tap order (j over vertical taps outer, i over horizontal taps inner),
same operand grouping, and the same float32 Kahan accumulator per output
element, so the two backends produce bit-identical results.
"""

import numpy as np


def sepconv_forward(padded, kh, kv, out, num_threads=1):
    """out[c,y,x] = sum_j sum_i kv[j,y,x]*kh[i,y,x]*padded[c,y+j,x+i],
    Kahan-compensated in the input dtype. `num_threads` is ignored here;
    results do not depend on it in either backend."""
    K, H, W = kh.shape
    s = np.zeros(out.shape, dtype=padded.dtype)
    comp = np.zeros_like(s)
    tap = np.empty((H, W), dtype=padded.dtype)
    term = np.empty_like(s)
    yk = np.empty_like(s)
    t = np.empty_like(s)
    scratch = np.empty_like(s)
    for j in range(K):
        for i in range(K):
            np.multiply(kv[j], kh[i], out=tap)
            np.multiply(tap[None, :, :], padded[:, j:j + H, i:i + W], out=term)
            np.subtract(term, comp, out=yk)
            np.add(s, yk, out=t)
            np.subtract(t, s, out=scratch)
            np.subtract(scratch, yk, out=comp)
            s, t = t, s
    out[...] = s


def sepconv_forward_batch(padded, kh, kv, out, num_threads=1):
    """Batched forward: per-sample results identical to sepconv_forward."""
    for b in range(padded.shape[0]):
        sepconv_forward(padded[b], kh[b], kv[b], out[b], num_threads)


def sepconv_backward(padded, kh, kv, grad_out, grad_padded, grad_kh, grad_kv,
                     num_threads=1):
    """Analytic adjoint of sepconv_forward; accumulation order (c, j, i)
    matches the compiled core exactly."""
    K, H, W = kh.shape
    C = padded.shape[0]
    grad_padded[...] = 0
    grad_kh[...] = 0
    grad_kv[...] = 0
    for c in range(C):
        gc = grad_out[c]
        for j in range(K):
            g_kv = gc * kv[j]
            for i in range(K):
                window = padded[c, j:j + H, i:i + W]
                grad_kh[i] += g_kv * window
                grad_kv[j] += (gc * kh[i]) * window
                grad_padded[c, j:j + H, i:i + W] += (kv[j] * kh[i]) * gc

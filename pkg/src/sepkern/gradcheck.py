"""Finite-difference verification of the analytic backward passes.

The numeric side is always the float64 oracle: central differences of a
scalar loss evaluated along the 64-bit forward path. Analytic gradients
computed in float32 are compared against that oracle at the identical
parameter point (float32 values embed exactly in float64), so the 32-bit
tolerance reflects only the production path's rounding.

The end-to-end check shifts the L1 target by +-0.25 from the initial
prediction so no absolute-value kink sits inside the probing window.
"""

from dataclasses import dataclass

import numpy as np

from .net import HEAD_NAMES, KPNet, KPNetConfig
from .sepconv import (
    OperatorTape,
    SeparableKernelField,
    sepconv_backward,
    sepconv_forward,
    synthesize_backward,
    synthesize_forward,
)
from .tensorops import replicate_pad


def relative_errors(analytic, numeric, floor=1e-6):
    """|a - n| / max(|a|, |n|, floor) per coordinate."""
    a = np.asarray(analytic, dtype=np.float64)
    m = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(a), np.abs(m)), floor)
    return np.abs(a - m) / scale


def central_difference(loss_fn, arr, h=1e-3):
    """Central finite differences of loss_fn w.r.t. every element of arr,
    using the actually-stored step so non-representable offsets cancel.
    arr is probed in place and restored."""
    grad = np.zeros(arr.shape, dtype=np.float64)
    gflat = grad.reshape(-1)
    flat = arr.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = float(flat[i])
        lp = loss_fn()
        flat[i] = orig - h
        lo = float(flat[i])
        lm = loss_fn()
        flat[i] = orig
        gflat[i] = (lp - lm) / (hi - lo)
    return grad


@dataclass
class GradCheckResult:
    name: str
    max_rel_error: float
    worst_coordinate: tuple
    threshold: float

    @property
    def passed(self):
        return self.max_rel_error <= self.threshold


def _summarize(name, analytic, numeric, threshold, floor=1e-6):
    rel = relative_errors(analytic, numeric, floor)
    worst = np.unravel_index(int(np.argmax(rel)), rel.shape)
    return GradCheckResult(
        name=name,
        max_rel_error=float(rel.max()),
        worst_coordinate=tuple(int(v) for v in worst),
        threshold=threshold,
    )


def check_operator_gradients(seed, size=(6, 7), kernel_size=5, channels=3,
                             threshold=1e-6, h=1e-3):
    """FD check of the operator adjoint in float64 (the forward is bilinear
    so h=1e-3 central differences are exact up to rounding)."""
    rng = np.random.default_rng(seed)
    hh, ww = size
    k = kernel_size
    padded = rng.uniform(0, 1, (channels, hh + k - 1, ww + k - 1))
    kh = rng.uniform(-0.5, 0.5, (k, hh, ww))
    kv = rng.uniform(-0.5, 0.5, (k, hh, ww))
    g = rng.uniform(-1, 1, (channels, hh, ww))

    def loss():
        return float((sepconv_forward(padded, kh, kv) * g).sum())

    gp, gkh, gkv = sepconv_backward(OperatorTape(padded, kh, kv), g)
    return [
        _summarize("sepconv.grad_padded", gp,
                   central_difference(loss, padded, h), threshold),
        _summarize("sepconv.grad_kh", gkh,
                   central_difference(loss, kh, h), threshold),
        _summarize("sepconv.grad_kv", gkv,
                   central_difference(loss, kv, h), threshold),
    ]


def check_synthesis_gradients(seed, size=(5, 6), kernel_size=3, channels=1,
                              threshold=1e-6, h=1e-4):
    """FD check through kernel-normalized synthesis (rational in the
    kernels, hence the smaller step)."""
    rng = np.random.default_rng(seed)
    hh, ww = size
    k = kernel_size
    pad = (k - 1) // 2
    p1 = replicate_pad(rng.uniform(0, 1, (channels, hh, ww)), pad)
    p2 = replicate_pad(rng.uniform(0, 1, (channels, hh, ww)), pad)
    fields = [rng.uniform(0.05, 0.5, (k, hh, ww)) for _ in range(4)]
    g = rng.uniform(-1, 1, (channels, hh, ww))

    def loss():
        kf = SeparableKernelField(*fields)
        out, _ = synthesize_forward(p1, p2, kf, normalized=True)
        return float((out * g).sum())

    out, tape = synthesize_forward(p1, p2, SeparableKernelField(*fields), True)
    gk = synthesize_backward(tape, g)
    return [
        _summarize(f"synthesis.grad_{name}", analytic,
                   central_difference(loss, arr, h), threshold)
        for name, analytic, arr in zip(HEAD_NAMES, gk, fields)
    ]


def _end_to_end(net, x6, p1, p2, gt, normalized=True):
    """Forward, synthesize, mean-L1 against gt; returns (loss, param grads)."""
    fields, tape = net.forward_batch(x6)
    kf = SeparableKernelField(*(fields[head][0] for head in HEAD_NAMES))
    out, stape = synthesize_forward(p1, p2, kf, normalized)
    diff = out - gt
    loss = float(np.abs(diff, dtype=np.float64).mean())
    gout = (np.sign(diff) / diff.size).astype(out.dtype)
    gk = synthesize_backward(stape, gout)
    gfields = {head: g[None] for head, g in zip(HEAD_NAMES, gk)}
    return loss, net.backward_batch(tape, gfields)


def check_network_gradients(seed, config=None, size=(8, 8), threshold=1e-3,
                            h=3e-5, dtype=np.float32, param_filter=None):
    """Central-difference check of every network parameter through the
    interpolate-then-L1 pipeline. The FD oracle runs in float64; `dtype`
    selects the arithmetic of the analytic path under test (float32 for
    the production path at threshold 1e-3, float64 for the oracle build at
    threshold 1e-6)."""
    cfg = config or KPNetConfig(levels=1, base_channels=2, kernel_size=3,
                                color_channels=3)
    rng = np.random.default_rng(seed)
    hh, ww = size
    c = cfg.color_channels
    pad = (cfg.kernel_size - 1) // 2
    i1 = rng.uniform(0, 1, (c, hh, ww)).astype(np.float32)
    i2 = rng.uniform(0, 1, (c, hh, ww)).astype(np.float32)
    x6_64 = np.concatenate([i1, i2], axis=0)[None].astype(np.float64)
    p1_64 = replicate_pad(i1.astype(np.float64), pad)
    p2_64 = replicate_pad(i2.astype(np.float64), pad)

    net32 = KPNet.init(cfg, seed)
    net64 = net32.astype(np.float64)

    # target offset +-0.25 from the initial prediction keeps every |.| kink
    # far outside the probing window
    fields0, _ = net64.forward_batch(x6_64)
    kf0 = SeparableKernelField(*(fields0[head][0] for head in HEAD_NAMES))
    out0, _ = synthesize_forward(p1_64, p2_64, kf0, True)
    offset = np.where(rng.uniform(size=out0.shape) < 0.5, -0.25, 0.25)
    gt64 = out0 - offset
    gt32 = gt64.astype(np.float32)

    if dtype == np.float64:
        net_a, x6a, p1a, p2a, gta = net64, x6_64, p1_64, p2_64, gt64
    else:
        net_a = net32
        x6a = x6_64.astype(np.float32)
        p1a = p1_64.astype(np.float32)
        p2a = p2_64.astype(np.float32)
        gta = gt32
    _, grads = _end_to_end(net_a, x6a, p1a, p2a, gta)

    results = []
    for name in net64.params:
        if param_filter is not None and not param_filter(name):
            continue

        def loss_fn():
            return _end_to_end(net64, x6_64, p1_64, p2_64, gt64)[0]

        numeric = central_difference(loss_fn, net64.params[name], h)
        results.append(
            _summarize(f"net.{name}", grads[name], numeric, threshold,
                       floor=1e-5)
        )
    return results

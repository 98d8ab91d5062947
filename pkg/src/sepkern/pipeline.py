"""End-to-end interpolation: joint input normalization, delayed padding,
kernel-normalized synthesis, and self-ensembling.

The network only ever sees normalized frames; the predicted kernels are
applied to the original frames, so no denormalization step exists. With
delayed padding (the default) the network input is the H x W frame pair
and padding happens inside the convolution operator; the legacy mode pads
first and is kept only so the benchmark can measure the difference.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation
from .sepconv import SeparableKernelField, interpolate_with_kernels
from .tensorops import (
    EPS_SIGMA,
    TRANSFORM_INVERSE,
    as_image,
    center_crop,
    replicate_pad,
    spatial_transform,
)


@dataclass
class NormalizationStats:
    """Per-channel mean/std computed jointly over both frames (population
    statistics over the 2*H*W pooled samples); std floored at EPS_SIGMA."""

    mean: np.ndarray
    std: np.ndarray


def compute_norm_stats(i1, i2):
    i1 = as_image(i1, "i1")
    i2 = as_image(i2, "i2")
    if i1.shape != i2.shape:
        raise ContractViolation(f"frame shapes differ: {i1.shape} vs {i2.shape}")
    pooled = np.concatenate(
        [i1.reshape(i1.shape[0], -1), i2.reshape(i2.shape[0], -1)], axis=1
    ).astype(np.float64)
    mean = pooled.mean(axis=1)
    var = ((pooled - mean[:, None]) ** 2).mean(axis=1)
    std = np.maximum(np.sqrt(var), EPS_SIGMA)
    return NormalizationStats(mean=mean, std=std)


def normalize_image(img, stats):
    img = as_image(img)
    out = (img.astype(np.float64) - stats.mean[:, None, None]) / stats.std[:, None, None]
    return out.astype(img.dtype)


def predict_kernels(net, i1, i2, legacy_padding=False, instrumentation=None):
    """Run the network on the (normalized) frame pair and return the kernel
    field for the H x W output grid plus the activation tape.

    Delayed padding feeds the unpadded frames; legacy padding replicates
    the original pipeline, feeding pre-padded frames and center-cropping
    the predicted field back to the output grid.
    """
    stats = compute_norm_stats(i1, i2)
    pad = (net.config.kernel_size - 1) // 2
    if legacy_padding:
        n1 = normalize_image(replicate_pad(i1, pad), stats)
        n2 = normalize_image(replicate_pad(i2, pad), stats)
    else:
        n1 = normalize_image(i1, stats)
        n2 = normalize_image(i2, stats)
    if instrumentation is not None:
        instrumentation["net_input_pixels"] = n1.shape[1] * n1.shape[2]
    kf, tape = net.forward(n1, n2)
    if legacy_padding and pad:
        kf = SeparableKernelField(
            *(center_crop(getattr(kf, n), pad) for n in ("k1h", "k1v", "k2h", "k2v"))
        )
    return kf, tape


def interpolate(net, i1, i2, normalized_kernels=True, legacy_padding=False,
                instrumentation=None):
    """Synthesize the temporally centered frame between i1 and i2."""
    i1 = as_image(i1, "i1")
    i2 = as_image(i2, "i2")
    kf, _ = predict_kernels(net, i1, i2, legacy_padding, instrumentation)
    return interpolate_with_kernels(i1, i2, kf, normalized=normalized_kernels)


# ---------------------------------------------------------------------------
# self-ensembling

# Fixed variant ordering: identity, temporal reverse, then each further
# spatial element without/with temporal reverse. Counts 1/2/4/8/16 take a
# prefix of this enumeration.
ENSEMBLE_SPATIAL_ORDER = (
    "identity",
    "flip_h",
    "flip_v",
    "rot180",
    "rot90",
    "rot270",
    "transpose",
    "anti_transpose",
)

VALID_ENSEMBLE_COUNTS = (1, 2, 4, 8, 16)


@dataclass(frozen=True)
class EnsembleTransform:
    spatial: str
    temporal_reverse: bool


@dataclass(frozen=True)
class EnsembleConfig:
    count: int = 1
    reduction: str = "mean"

    def __post_init__(self):
        if self.count not in VALID_ENSEMBLE_COUNTS:
            raise ContractViolation(
                f"ensemble count must be one of {VALID_ENSEMBLE_COUNTS}, "
                f"got {self.count}"
            )
        if self.reduction not in ("mean", "median"):
            raise ContractViolation(
                f"reduction must be 'mean' or 'median', got {self.reduction!r}"
            )


def ensemble_variants(count):
    full = [
        EnsembleTransform(spatial, rev)
        for spatial in ENSEMBLE_SPATIAL_ORDER
        for rev in (False, True)
    ]
    return full[:count]


def reduce_predictions(preds, reduction):
    """Deterministic, permutation-invariant reduction: predictions are
    sorted per element before combining, 64-bit internally."""
    if len(preds) == 1:
        return preds[0].copy()
    stack = np.sort(np.stack(preds).astype(np.float64), axis=0)
    n = stack.shape[0]
    if reduction == "mean":
        out = stack.sum(axis=0) / n
    else:
        mid = n // 2
        if n % 2:
            out = stack[mid]
        else:
            out = (stack[mid - 1] + stack[mid]) / 2.0
    return out.astype(preds[0].dtype)


def interpolate_ensemble(net, i1, i2, config, normalized_kernels=True):
    """Combine predictions over the first `count` transforms: apply the
    transform to the inputs (temporal reverse swaps them), interpolate, map
    the output back through the spatial inverse, then reduce."""
    i1 = as_image(i1, "i1")
    i2 = as_image(i2, "i2")
    preds = []
    for variant in ensemble_variants(config.count):
        a, b = (i2, i1) if variant.temporal_reverse else (i1, i2)
        ta = spatial_transform(a, variant.spatial)
        tb = spatial_transform(b, variant.spatial)
        pred = interpolate(net, ta, tb, normalized_kernels=normalized_kernels)
        preds.append(spatial_transform(pred, TRANSFORM_INVERSE[variant.spatial]))
    return reduce_predictions(preds, config.reduction)


# ---------------------------------------------------------------------------
# invariance probe

@dataclass
class AffineInvarianceReport:
    scale: float
    offset: float
    max_deviation: float
    tolerance: float
    passed: bool


def affine_invariance_probe(net, i1, i2, a, b, tolerance=1e-4):
    """Check that interpolate(a*I1+b, a*I2+b) == a*interpolate(I1,I2)+b.

    Holds because joint normalization cancels the affine change at the
    network input and normalized kernels have unit effective mass.
    """
    if a <= 0:
        raise ContractViolation(f"scale a must be > 0, got {a}")
    base = interpolate(net, i1, i2, normalized_kernels=True)
    moved = interpolate(
        net,
        (a * i1 + b).astype(i1.dtype),
        (a * i2 + b).astype(i2.dtype),
        normalized_kernels=True,
    )
    dev = float(np.max(np.abs(moved - (a * base + b))))
    return AffineInvarianceReport(
        scale=float(a),
        offset=float(b),
        max_deviation=dev,
        tolerance=tolerance,
        passed=bool(dev <= tolerance) and math.isfinite(dev),
    )

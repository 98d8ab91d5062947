"""Desk-scale supervision: mini-batch SGD with momentum through the full
interpolation pipeline, the learning-rate schedule that halves after the
configured epochs, loss-curve instrumentation, and the kernel-centroid
motion report.
"""

import json
import os
from dataclasses import dataclass

import numpy as np
from threadpoolctl import threadpool_limits

from .errors import ContractViolation, TrainingDiverged
from .imageio import write_png
from .losses import make_feature_extractor
from .net import HEAD_NAMES, conv3x3_forward
from .pipeline import compute_norm_stats, normalize_image, predict_kernels
from .sepconv import kernel_grads_batch, sepconv_forward_batch
from .tensorops import replicate_pad

LOSS_MODES = ("l1", "contextual")


@dataclass(frozen=True)
class LossConfig:
    mode: str = "l1"
    alpha: float = 0.1

    def __post_init__(self):
        if self.mode not in LOSS_MODES:
            raise ContractViolation(f"loss mode must be one of {LOSS_MODES}")
        if self.alpha < 0:
            raise ContractViolation(f"alpha must be >= 0, got {self.alpha}")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 16
    learning_rate: float = 0.02
    momentum: float = 0.9
    lr_halve_epochs: tuple = (60, 80)
    seed: int = 0
    kernel_normalization: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ContractViolation(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ContractViolation(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise ContractViolation("learning_rate must be > 0")


def lr_at_epoch(tc, epoch):
    """Learning rate for a 1-based epoch index: halved after each epoch in
    lr_halve_epochs."""
    lr = tc.learning_rate
    for milestone in tc.lr_halve_epochs:
        if epoch > milestone:
            lr *= 0.5
    return lr


def _batched_features(extractor, imgs):
    """Frozen extractor applied to a [N, C, H, W] stack."""
    x = np.ascontiguousarray(imgs.transpose(0, 2, 3, 1))
    t, _ = conv3x3_forward(x, extractor.w1, extractor.b1)
    t = np.maximum(t, 0)
    t, _ = conv3x3_forward(t, extractor.w2, extractor.b2)
    t = np.maximum(t, 0)
    return np.ascontiguousarray(t.transpose(0, 3, 1, 2))


def _batch_tap_sums(field):
    """Kahan sum over the tap axis of a [B, K, H, W] stack."""
    s = field[:, 0].copy()
    comp = np.zeros_like(s)
    for t in range(1, field.shape[1]):
        y = field[:, t] - comp
        tt = s + y
        comp = (tt - s) - y
        s = tt
    return s


def train(net, samples, tc, lc, feature_extractor=None, stop_when_loss_below=None):
    """Mini-batch SGD with momentum through pipeline prediction, kernel
    synthesis (normalized per tc.kernel_normalization) and the configured
    loss. Returns (net, curve) where curve rows are dicts with epoch,
    mean_loss and lr. Deterministic for a fixed seed; an early stop via
    stop_when_loss_below yields an exact prefix of the full run.

    BLAS pools are pinned to one thread for the duration: the many small
    GEMMs gain nothing from threading and the oversubscription fights the
    compiled convolution core.
    """
    with threadpool_limits(limits=1, user_api="blas"):
        return _train_impl(net, samples, tc, lc, feature_extractor,
                           stop_when_loss_below)


def _train_impl(net, samples, tc, lc, feature_extractor, stop_when_loss_below):
    if not samples:
        raise ContractViolation("training dataset is empty")
    cfg = net.config
    h, w = samples[0].gt.shape[1:]
    net.check_spatial(h, w)
    if samples[0].gt.shape[0] != cfg.color_channels:
        raise ContractViolation(
            f"dataset has {samples[0].gt.shape[0]} channels, "
            f"net expects {cfg.color_channels}"
        )
    pad = (cfg.kernel_size - 1) // 2
    n = len(samples)

    xin = np.empty((n, 2 * cfg.color_channels, h, w), dtype=np.float32)
    p1 = np.empty((n, cfg.color_channels, h + 2 * pad, w + 2 * pad), dtype=np.float32)
    p2 = np.empty_like(p1)
    gts = np.empty((n, cfg.color_channels, h, w), dtype=np.float32)
    for idx, s in enumerate(samples):
        stats = compute_norm_stats(s.i1, s.i2)
        xin[idx, :cfg.color_channels] = normalize_image(s.i1, stats)
        xin[idx, cfg.color_channels:] = normalize_image(s.i2, stats)
        p1[idx] = replicate_pad(s.i1, pad)
        p2[idx] = replicate_pad(s.i2, pad)
        gts[idx] = s.gt

    contextual = lc.mode == "contextual"
    extractor = feature_extractor
    if contextual and extractor is None:
        extractor = make_feature_extractor(
            "fixed-random-conv", tc.seed, in_channels=cfg.color_channels
        )

    velocity = {name: np.zeros_like(arr) for name, arr in net.params.items()}
    rng = np.random.default_rng(tc.seed)
    curve = []

    c = cfg.color_channels
    for epoch in range(1, tc.epochs + 1):
        lr = lr_at_epoch(tc, epoch)
        order = rng.permutation(n)
        loss_sum = 0.0
        for start in range(0, n, tc.batch_size):
            batch = order[start:start + tc.batch_size]
            bs = len(batch)
            fields, tape = net.forward_batch(xin[batch])

            # synthesis, vectorized over the batch
            num = sepconv_forward_batch(p1[batch], fields["k1h"], fields["k1v"])
            num += sepconv_forward_batch(p2[batch], fields["k2h"], fields["k2v"])
            sums = {head: _batch_tap_sums(fields[head]) for head in HEAD_NAMES}
            if tc.kernel_normalization:
                den = sums["k1h"] * sums["k1v"] + sums["k2h"] * sums["k2v"]
                guarded = np.abs(den) < 1e-6
                divisor = np.where(guarded, np.float32(1), den)
                out = num / divisor[:, None]
            else:
                out = num

            cdiff = out - gts[batch]
            if contextual:
                i1b = np.stack([samples[i].i1 for i in batch])
                i2b = np.stack([samples[i].i2 for i in batch])
                f1 = _batched_features(extractor, i1b)
                f2 = _batched_features(extractor, i2b)
                fgt = _batched_features(extractor, gts[batch])
                fp1 = np.pad(f1, ((0, 0), (0, 0), (pad, pad), (pad, pad)), mode="edge")
                fp2 = np.pad(f2, ((0, 0), (0, 0), (pad, pad), (pad, pad)), mode="edge")
                fnum = sepconv_forward_batch(fp1, fields["k1h"], fields["k1v"])
                fnum += sepconv_forward_batch(fp2, fields["k2h"], fields["k2v"])
                fout = fnum / divisor[:, None] if tc.kernel_normalization else fnum
                fdiff = fout - fgt
                per_elems = cdiff[0].size + fdiff[0].size
                sample_losses = (
                    np.abs(cdiff).reshape(bs, -1).sum(axis=1, dtype=np.float64)
                    + lc.alpha * np.abs(fdiff).reshape(bs, -1).sum(axis=1, dtype=np.float64)
                ) / per_elems
                gout = np.sign(cdiff) / np.float32(per_elems * bs)
                gfeat = (lc.alpha / (per_elems * bs)) * np.sign(fdiff)
                gfeat = gfeat.astype(np.float32)
            else:
                per_elems = cdiff[0].size
                sample_losses = (
                    np.abs(cdiff).reshape(bs, -1).sum(axis=1, dtype=np.float64)
                    / per_elems
                )
                gout = np.sign(cdiff) / np.float32(per_elems * bs)
            loss_sum += float(sample_losses.sum())

            # backward through the quotient to the four kernel tensors
            if tc.kernel_normalization:
                gnum = gout / divisor[:, None]
                gden = np.where(
                    guarded, np.float32(0),
                    -(gout * num).sum(axis=1) / (divisor * divisor),
                )
                if contextual:
                    gfnum = gfeat / divisor[:, None]
                    gden += np.where(
                        guarded, np.float32(0),
                        -(gfeat * fnum).sum(axis=1) / (divisor * divisor),
                    )
            else:
                gnum = gout
                gden = None
                if contextual:
                    gfnum = gfeat
            g1h, g1v = kernel_grads_batch(p1[batch], fields["k1h"],
                                          fields["k1v"], gnum)
            g2h, g2v = kernel_grads_batch(p2[batch], fields["k2h"],
                                          fields["k2v"], gnum)
            if contextual:
                a, b = kernel_grads_batch(fp1, fields["k1h"], fields["k1v"], gfnum)
                g1h += a
                g1v += b
                a, b = kernel_grads_batch(fp2, fields["k2h"], fields["k2v"], gfnum)
                g2h += a
                g2v += b
            gfields = {"k1h": g1h, "k1v": g1v, "k2h": g2h, "k2v": g2v}
            if gden is not None:
                gfields["k1h"] += (gden * sums["k1v"])[:, None]
                gfields["k1v"] += (gden * sums["k1h"])[:, None]
                gfields["k2h"] += (gden * sums["k2v"])[:, None]
                gfields["k2v"] += (gden * sums["k2h"])[:, None]

            grads = net.backward_batch(tape, gfields)
            for name, g in grads.items():
                v = velocity[name]
                v *= tc.momentum
                v += g
                net.params[name] -= (lr * v).astype(net.params[name].dtype)
        mean_loss = loss_sum / n
        row = {"epoch": epoch, "mean_loss": float(mean_loss), "lr": float(lr)}
        curve.append(row)
        if not np.isfinite(mean_loss):
            raise TrainingDiverged(
                f"loss became non-finite at epoch {epoch}", curve=curve
            )
        if stop_when_loss_below is not None and mean_loss < stop_when_loss_below:
            break
    return net, curve


CURVE_SCHEMA = "# sepkern-curve-csv v1"


def write_loss_curve(path, curve):
    with open(path, "w") as fh:
        fh.write(CURVE_SCHEMA + "\n")
        fh.write("epoch,mean_loss,lr\n")
        for row in curve:
            fh.write(f"{row['epoch']},{row['mean_loss']:.8e},{row['lr']:.8e}\n")


# ---------------------------------------------------------------------------
# motion localization

@dataclass
class MotionReport:
    frac_frame1: float
    frac_frame2: float
    fraction: float
    interior_pixels: int


def motion_localization_report(net, sample, radius_px=1.0):
    """Fraction of interior pixels whose kernel mass centroid lies within
    radius_px of the true displacement (-d for frame 1, +d for frame 2).

    The centroid of the rank-1 outer-product kernel separates per axis:
    sum(k * offset) / sum(k) for each 1-D kernel. Pixels whose tap sums are
    near zero have no defined centroid and count as misses.
    """
    kf, _ = predict_kernels(net, sample.i1, sample.i2)
    k = kf.kernel_size
    r = (k - 1) // 2
    offs = np.arange(k, dtype=np.float64) - r
    dy, dx = sample.displacement
    h, w = kf.spatial_shape
    if h <= 2 * r or w <= 2 * r:
        raise ContractViolation(f"sample {h}x{w} too small for interior margin {r}")
    sl = (slice(r, h - r), slice(r, w - r))

    def fractions(kh, kv, ty, tx):
        sv = kv.astype(np.float64).sum(axis=0)
        sh = kh.astype(np.float64).sum(axis=0)
        my = (kv.astype(np.float64) * offs[:, None, None]).sum(axis=0)
        mx = (kh.astype(np.float64) * offs[:, None, None]).sum(axis=0)
        valid = (np.abs(sv) > 1e-8) & (np.abs(sh) > 1e-8)
        cy = np.where(valid, my / np.where(valid, sv, 1.0), np.inf)
        cx = np.where(valid, mx / np.where(valid, sh, 1.0), np.inf)
        dist = np.hypot(cy - ty, cx - tx)
        hits = valid & (dist <= radius_px)
        return float(hits[sl].mean())

    f1 = fractions(kf.k1h, kf.k1v, -dy, -dx)
    f2 = fractions(kf.k2h, kf.k2v, dy, dx)
    interior = (h - 2 * r) * (w - 2 * r)
    return MotionReport(
        frac_frame1=f1, frac_frame2=f2, fraction=0.5 * (f1 + f2),
        interior_pixels=interior,
    )


# ---------------------------------------------------------------------------
# dataset materialization (triplet PNGs + displacement manifest)

def export_dataset(samples, directory):
    os.makedirs(directory, exist_ok=True)
    manifest = {}
    width = max(4, len(str(len(samples) - 1)))
    for idx, s in enumerate(samples):
        sid = f"{idx:0{width}d}"
        write_png(os.path.join(directory, f"{sid}_frame1.png"), s.i1)
        write_png(os.path.join(directory, f"{sid}_gt.png"), s.gt)
        write_png(os.path.join(directory, f"{sid}_frame2.png"), s.i2)
        manifest[sid] = {"displacement": list(s.displacement)}
    with open(os.path.join(directory, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return manifest

"""Supervision losses and the frozen feature extractor for contextual
training.

The contextual loss compares prediction and ground truth over the
concatenation of color residuals and alpha-scaled feature residuals,
where the feature branch is synthesized with the SAME predicted kernels
as the color branch. Reduction is the mean over all concatenated
elements (so the hand-checkable value for color residual 0.02 over 12
elements and feature residual 0.05 over 24 elements at alpha=0.1 is
(12*0.02 + 24*0.1*0.05) / 36 = 0.01).
"""

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation
from .imageio import read_skf1
from .net import conv3x3_forward


def l1_loss(pred, gt):
    """Mean absolute error and its gradient w.r.t. pred."""
    if pred.shape != gt.shape:
        raise ContractViolation(f"shape mismatch {pred.shape} vs {gt.shape}")
    diff = pred - gt
    loss = float(np.abs(diff, dtype=np.float64).mean())
    grad = (np.sign(diff) / diff.size).astype(pred.dtype)
    return loss, grad


def contextual_loss(pred, pred_features, gt, gt_features, alpha):
    """Mean L1 over concatenated color and alpha-scaled feature residuals;
    returns (loss, grad_pred, grad_pred_features)."""
    if pred.shape != gt.shape:
        raise ContractViolation(f"color shapes differ {pred.shape} vs {gt.shape}")
    if pred_features.shape != gt_features.shape:
        raise ContractViolation(
            f"feature shapes differ {pred_features.shape} vs {gt_features.shape}"
        )
    if alpha < 0:
        raise ContractViolation(f"alpha must be >= 0, got {alpha}")
    n_total = pred.size + pred_features.size
    cdiff = pred - gt
    fdiff = pred_features - gt_features
    loss = (
        np.abs(cdiff, dtype=np.float64).sum()
        + np.abs(alpha * fdiff.astype(np.float64)).sum()
    ) / n_total
    grad_pred = (np.sign(cdiff) / n_total).astype(pred.dtype)
    grad_feat = (alpha * np.sign(fdiff) / n_total).astype(pred_features.dtype)
    return float(loss), grad_pred, grad_feat


# ---------------------------------------------------------------------------
# frozen feature extractor (the "context" network)

@dataclass
class FeatureExtractor:
    """Two frozen stride-1 3x3 conv layers with clamp-at-zero activations;
    output spatial size equals input size."""

    kind: str
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    @property
    def in_channels(self):
        return self.w1.shape[1]

    @property
    def out_channels(self):
        return self.w2.shape[0]

    def forward(self, img):
        if img.ndim != 3 or img.shape[0] != self.in_channels:
            raise ContractViolation(
                f"feature extractor expects [{self.in_channels}, H, W], "
                f"got {img.shape}"
            )
        dtype = img.dtype
        x = np.ascontiguousarray(img.transpose(1, 2, 0))[None]
        t, _ = conv3x3_forward(x, self.w1.astype(dtype), self.b1.astype(dtype))
        t = np.maximum(t, 0)
        t, _ = conv3x3_forward(t, self.w2.astype(dtype), self.b2.astype(dtype))
        t = np.maximum(t, 0)
        return np.ascontiguousarray(t[0].transpose(2, 0, 1))


RANDOM_FEATURE_CHANNELS = 16
VGG_COMPAT_CHANNELS = 64


def make_feature_extractor(kind, seed_or_path, in_channels=3):
    """kind='fixed-random-conv': seeded frozen random convs
    (in_channels -> 16 -> 16). kind='file-loaded': weights from an SKF1
    container holding w1 [64, in, 3, 3], b1 [64], w2 [64, 64, 3, 3],
    b2 [64] (relu1_2-compatible shape)."""
    if kind == "fixed-random-conv":
        rng = np.random.default_rng(seed_or_path)
        c = RANDOM_FEATURE_CHANNELS

        def draw(cout, cin):
            scale = 1.0 / np.sqrt(cin * 9)
            return rng.uniform(-scale, scale, size=(cout, cin, 3, 3)).astype(np.float32)

        return FeatureExtractor(
            kind=kind,
            w1=draw(c, in_channels),
            b1=np.zeros(c, dtype=np.float32),
            w2=draw(c, c),
            b2=np.zeros(c, dtype=np.float32),
        )
    if kind == "file-loaded":
        with open(seed_or_path, "rb") as fh:
            w1 = read_skf1(fh)
            b1 = read_skf1(fh)
            w2 = read_skf1(fh)
            b2 = read_skf1(fh)
        c = VGG_COMPAT_CHANNELS
        expect = [
            (c, in_channels, 3, 3), (c,), (c, c, 3, 3), (c,),
        ]
        got = [w1.shape, b1.shape, w2.shape, b2.shape]
        if [tuple(s) for s in got] != expect:
            raise ContractViolation(
                f"file-loaded extractor shapes {got} do not match {expect}"
            )
        return FeatureExtractor(kind=kind, w1=w1, b1=b1, w2=w2, b2=b2)
    raise ContractViolation(f"unknown feature extractor kind {kind!r}")

"""Synthetic known-motion triplets: band-limited textures translated by a
random per-sample displacement, sampled bilinearly from a shared latent
canvas with enough margin that no out-of-canvas pixel is ever touched.

Displacement d is measured in pixels per half-interval: the middle frame
samples the canvas at the pixel grid, frame 1 at grid + d, frame 2 at
grid - d, so content moves by -d into frame 1 and +d into frame 2.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation


@dataclass
class TrainingSample:
    i1: np.ndarray
    gt: np.ndarray
    i2: np.ndarray
    displacement: tuple  # (dy, dx), pixels per half-interval


def _gaussian_taps(sigma):
    radius = max(1, int(np.ceil(3.0 * sigma)))
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    taps = np.exp(-0.5 * (xs / sigma) ** 2)
    return taps / taps.sum()


def _blur_separable(canvas, taps):
    r = (len(taps) - 1) // 2
    pad = np.pad(canvas, ((0, 0), (r, r), (0, 0)), mode="edge")
    rows = sum(t * pad[:, k:k + canvas.shape[1], :] for k, t in enumerate(taps))
    pad = np.pad(rows, ((0, 0), (0, 0), (r, r)), mode="edge")
    return sum(t * pad[:, :, k:k + canvas.shape[2]] for k, t in enumerate(taps))


def _sample_shifted(canvas, margin, dy, dx, h, w):
    """Bilinear sample of the canvas at (margin + dy + y, margin + dx + x)."""
    oy = margin + dy
    ox = margin + dx
    iy = int(np.floor(oy))
    ix = int(np.floor(ox))
    fy = oy - iy
    fx = ox - ix
    rows = (1.0 - fy) * canvas[:, iy:iy + h, :] + fy * canvas[:, iy + 1:iy + 1 + h, :]
    out = (1.0 - fx) * rows[:, :, ix:ix + w] + fx * rows[:, :, ix + 1:ix + 1 + w]
    return out.astype(np.float32)


def synth_dataset(n, size, max_disp, seed, channels=3, kernel_size=5,
                  smoothness=1.5):
    """Generate n triplets of `size` (H, W) with |displacement| components
    uniform in [-max_disp, max_disp]. max_disp may not exceed the kernel
    reach (kernel_size - 1) / 2."""
    h, w = size
    reach = (kernel_size - 1) / 2
    if max_disp > reach:
        raise ContractViolation(
            f"max_disp {max_disp} exceeds kernel reach {reach} for K={kernel_size}"
        )
    if max_disp < 0:
        raise ContractViolation(f"max_disp must be >= 0, got {max_disp}")
    rng = np.random.default_rng(seed)
    margin = int(np.ceil(max_disp)) + 2
    taps = _gaussian_taps(smoothness)
    samples = []
    for _ in range(n):
        noise = rng.standard_normal((channels, h + 2 * margin, w + 2 * margin))
        canvas = _blur_separable(noise, taps)
        lo = canvas.min()
        hi = canvas.max()
        canvas = 0.05 + 0.9 * (canvas - lo) / max(hi - lo, 1e-12)
        dy, dx = rng.uniform(-max_disp, max_disp, size=2)
        i1 = _sample_shifted(canvas, margin, dy, dx, h, w)
        gt = _sample_shifted(canvas, margin, 0.0, 0.0, h, w)
        i2 = _sample_shifted(canvas, margin, -dy, -dx, h, w)
        samples.append(TrainingSample(i1, gt, i2, (float(dy), float(dx))))
    return samples

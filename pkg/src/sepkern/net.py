"""Kernel-prediction network: a miniature U-Net that maps two normalized
frames to the four per-pixel 1-D kernel tensors.

Architecture (levels L, base channels b, kernel size K):
  - encoder: 3x3 conv + PReLU at full resolution, then stride-2 3x3 convs
    + PReLU down to level L-1 (strided convs in place of pooling);
  - decoder: bilinear x2 upsampling + 3x3 conv + PReLU, joined by addition
    with residual-block-processed skip connections, stopping at level 1;
  - four head sub-networks (one per kernel tensor) that first bilinearly
    upsample to full resolution, then apply 3x3 conv + PReLU and a final
    3x3 conv emitting K channels.

All convolutions zero-pad by 1 and run as a single im2col GEMM per layer;
activations are channels-last internally for cache-friendly gathers. The
public tensor layout stays [N, K, H, W]. Forward and backward are
hand-written and deterministic; float64 variants of both exist for
oracle-grade gradient checks. Parameters live in an ordered name -> array
dict.
"""

import io
import struct
from dataclasses import dataclass

import numpy as np

from .errors import CheckpointError, ConfigMismatch, ContractViolation
from .sepconv import SeparableKernelField

CHECKPOINT_MAGIC = b"SKPN"
CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# layer primitives, channels-last [N, H, W, C]

def _im2col(x, stride):
    """[N*Ho*Wo, 9*C] patch matrix of the zero-padded input, tap-major
    column order (dy, dx, c)."""
    n, h, w, cin = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    ho = (h - 1) // stride + 1
    wo = (w - 1) // stride + 1
    cols = np.empty((n, ho, wo, 9, cin), dtype=x.dtype)
    t = 0
    for dy in range(3):
        ys = slice(dy, dy + stride * (ho - 1) + 1, stride)
        for dx in range(3):
            xs = slice(dx, dx + stride * (wo - 1) + 1, stride)
            cols[:, :, :, t, :] = xp[:, ys, xs, :]
            t += 1
    return cols.reshape(n * ho * wo, 9 * cin), ho, wo


def _weight_matrix(w):
    # [Cout, Cin, 3, 3] -> [9*Cin, Cout] matching the im2col column order
    return np.ascontiguousarray(w.transpose(2, 3, 1, 0).reshape(-1, w.shape[0]))


def conv3x3_forward(x, w, b, stride=1):
    n = x.shape[0]
    cols, ho, wo = _im2col(x, stride)
    y = cols @ _weight_matrix(w)
    y += b
    return y.reshape(n, ho, wo, w.shape[0]), (x.shape, cols, w, stride, ho, wo)


def _input_grad_stride1(gy, w):
    # stride-1 same-pad adjoint as a correlation with spatially flipped,
    # channel-transposed weights: one GEMM instead of nine scatter-adds
    wt = np.ascontiguousarray(
        w.transpose(2, 3, 0, 1)[::-1, ::-1].reshape(-1, w.shape[1])
    )
    gcols, ho, wo = _im2col(gy, 1)
    return (gcols @ wt).reshape(gy.shape[0], ho, wo, w.shape[1])


def conv3x3_backward(cache, gy):
    xshape, cols, w, stride, ho, wo = cache
    n, h, wd, cin = xshape
    cout = w.shape[0]
    g2 = gy.reshape(-1, cout)
    gb = g2.sum(axis=0)
    gw2 = cols.T @ g2
    gw = np.ascontiguousarray(gw2.reshape(3, 3, cin, cout).transpose(3, 2, 0, 1))
    if stride == 1:
        gx = _input_grad_stride1(gy, w)
    else:
        gcols = (g2 @ _weight_matrix(w).T).reshape(n, ho, wo, 9, cin)
        gxp = np.zeros((n, h + 2, wd + 2, cin), dtype=gy.dtype)
        t = 0
        for dy in range(3):
            ys = slice(dy, dy + stride * (ho - 1) + 1, stride)
            for dx in range(3):
                xs = slice(dx, dx + stride * (wo - 1) + 1, stride)
                gxp[:, ys, xs, :] += gcols[:, :, :, t, :]
                t += 1
        gx = gxp[:, 1:-1, 1:-1, :]
    return gx, gw, gb


def prelu_forward(x, a):
    neg = x < 0
    y = np.where(neg, x * a, x)
    return y, (x, a, neg)


def prelu_backward(cache, gy):
    x, a, neg = cache
    tmp = gy * x
    tmp *= neg
    ga = tmp.sum(axis=(0, 1, 2))
    gx = np.where(neg, gy * a, gy)
    return gx, ga


def _up2_tables(n, dtype):
    # half-pixel centers (align-corners false): src = (o + 0.5)/2 - 0.5
    o = np.arange(2 * n, dtype=np.float64)
    src = (o + 0.5) / 2.0 - 0.5
    base = np.floor(src)
    frac = (src - base).astype(dtype)
    i0 = np.clip(base.astype(np.int64), 0, n - 1)
    i1 = np.clip(base.astype(np.int64) + 1, 0, n - 1)
    return i0, i1, frac


def up2_forward(x):
    n, h, w, c = x.shape
    iy0, iy1, fy = _up2_tables(h, x.dtype)
    ix0, ix1, fx = _up2_tables(w, x.dtype)
    wy = fy[None, :, None, None]
    xr = x[:, iy0, :, :] * (1 - wy) + x[:, iy1, :, :] * wy
    wx = fx[None, None, :, None]
    y = xr[:, :, ix0, :] * (1 - wx) + xr[:, :, ix1, :] * wx
    return y, (x.shape, (iy0, iy1, fy), (ix0, ix1, fx))


def up2_backward(cache, gy):
    xshape, (iy0, iy1, fy), (ix0, ix1, fx) = cache
    n, h, w, c = xshape
    gxr = np.zeros((n, 2 * h, w, c), dtype=gy.dtype)
    for o in range(2 * w):
        col = gy[:, :, o, :]
        gxr[:, :, ix0[o], :] += col * (1 - fx[o])
        gxr[:, :, ix1[o], :] += col * fx[o]
    gx = np.zeros(xshape, dtype=gy.dtype)
    for o in range(2 * h):
        row = gxr[:, o, :, :]
        gx[:, iy0[o], :, :] += row * (1 - fy[o])
        gx[:, iy1[o], :, :] += row * fy[o]
    return gx


def resblock_forward(x, w1, b1, p1, w2, b2):
    t1, c1 = conv3x3_forward(x, w1, b1)
    t2, c2 = prelu_forward(t1, p1)
    t3, c3 = conv3x3_forward(t2, w2, b2)
    return x + t3, (c1, c2, c3)


def resblock_backward(cache, gy):
    c1, c2, c3 = cache
    gt2, gw2, gb2 = conv3x3_backward(c3, gy)
    gt1, gp1 = prelu_backward(c2, gt2)
    gx, gw1, gb1 = conv3x3_backward(c1, gt1)
    return gx + gy, gw1, gb1, gp1, gw2, gb2


# ---------------------------------------------------------------------------
# configuration and parameter schedule

@dataclass(frozen=True)
class KPNetConfig:
    levels: int = 3
    base_channels: int = 16
    kernel_size: int = 5
    color_channels: int = 3

    def __post_init__(self):
        if self.levels < 1:
            raise ContractViolation(f"levels must be >= 1, got {self.levels}")
        if self.base_channels < 1:
            raise ContractViolation(
                f"base_channels must be >= 1, got {self.base_channels}"
            )
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ContractViolation(
                f"kernel_size must be odd and positive, got {self.kernel_size}"
            )
        if self.color_channels not in (1, 3):
            raise ContractViolation(
                f"color_channels must be 1 or 3, got {self.color_channels}"
            )

    @property
    def divisor(self):
        return 2 ** (self.levels - 1)


HEAD_NAMES = ("k1h", "k1v", "k2h", "k2v")


def _channels(cfg):
    return [cfg.base_channels * (2 ** l) for l in range(cfg.levels)]


def parameter_schedule(cfg):
    """Ordered (name, shape) pairs; this order defines initialization,
    serialization, and the closed-form parameter count."""
    ch = _channels(cfg)
    entries = []

    def conv_prelu(name, cin, cout):
        entries.append((f"{name}.w", (cout, cin, 3, 3)))
        entries.append((f"{name}.b", (cout,)))
        entries.append((f"{name}.p", (cout,)))

    conv_prelu("enc0", 2 * cfg.color_channels, ch[0])
    for l in range(1, cfg.levels):
        conv_prelu(f"enc{l}", ch[l - 1], ch[l])
    for l in range(cfg.levels - 1, 1, -1):
        conv_prelu(f"dec{l}", ch[l], ch[l - 1])
        skip = f"skip{l - 1}"
        entries.append((f"{skip}.w1", (ch[l - 1], ch[l - 1], 3, 3)))
        entries.append((f"{skip}.b1", (ch[l - 1],)))
        entries.append((f"{skip}.p1", (ch[l - 1],)))
        entries.append((f"{skip}.w2", (ch[l - 1], ch[l - 1], 3, 3)))
        entries.append((f"{skip}.b2", (ch[l - 1],)))
    head_in = ch[1] if cfg.levels >= 2 else ch[0]
    for head in HEAD_NAMES:
        conv_prelu(f"head_{head}.c1", head_in, cfg.base_channels)
        entries.append((f"head_{head}.c2.w", (cfg.kernel_size, cfg.base_channels, 3, 3)))
        entries.append((f"head_{head}.c2.b", (cfg.kernel_size,)))
    return entries


def parameter_count(cfg):
    return sum(int(np.prod(shape)) for _, shape in parameter_schedule(cfg))


# ---------------------------------------------------------------------------
# the network

class KPNet:
    """Kernel-prediction network with explicit forward/backward state."""

    def __init__(self, config, params, seed=0):
        self.config = config
        self.params = params
        self.seed = seed

    @classmethod
    def init(cls, config, seed):
        """Deterministic initialization: fan-in-scaled uniform conv weights,
        zero biases (except final head biases, set to 1/(K*sqrt(2)) so each
        frame's kernel has mass 1/2 at init), PReLU slopes 0.25."""
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in parameter_schedule(config):
            if name.endswith(".p") or name.endswith(".p1"):
                params[name] = np.full(shape, 0.25, dtype=np.float32)
            elif len(shape) == 4:
                fan_in = shape[1] * shape[2] * shape[3]
                scale = 1.0 / np.sqrt(fan_in)
                params[name] = rng.uniform(-scale, scale, size=shape).astype(np.float32)
            elif name.startswith("head_") and name.endswith(".c2.b"):
                params[name] = np.full(
                    shape, 1.0 / (config.kernel_size * np.sqrt(2.0)), dtype=np.float32
                )
            else:
                params[name] = np.zeros(shape, dtype=np.float32)
        return cls(config, params, seed)

    def astype(self, dtype):
        return KPNet(
            self.config,
            {k: v.astype(dtype) for k, v in self.params.items()},
            self.seed,
        )

    def parameter_count(self):
        return parameter_count(self.config)

    def check_spatial(self, h, w):
        d = self.config.divisor
        if h % d or w % d:
            raise ContractViolation(
                f"input {h}x{w} not divisible by {d} "
                f"(required multiple for levels={self.config.levels})"
            )

    # -- forward -----------------------------------------------------------

    def forward_batch(self, x):
        """x: [N, 2*color_channels, H, W] normalized frame pairs.
        Returns ({head: [N, K, H, W]}, tape)."""
        cfg = self.config
        p = self.params
        if x.ndim != 4 or x.shape[1] != 2 * cfg.color_channels:
            raise ContractViolation(
                f"expected [N, {2 * cfg.color_channels}, H, W], got {x.shape}"
            )
        self.check_spatial(x.shape[2], x.shape[3])
        tape = {"shape": x.shape}
        xc = np.ascontiguousarray(x.transpose(0, 2, 3, 1))

        def conv_prelu(name, inp, stride=1):
            a, cc = conv3x3_forward(inp, p[f"{name}.w"], p[f"{name}.b"], stride)
            y, pc = prelu_forward(a, p[f"{name}.p"])
            tape[name] = (cc, pc)
            return y

        feats = [conv_prelu("enc0", xc)]
        for l in range(1, cfg.levels):
            feats.append(conv_prelu(f"enc{l}", feats[-1], stride=2))

        d = feats[-1]
        for l in range(cfg.levels - 1, 1, -1):
            u0, uc = up2_forward(d)
            u = conv_prelu(f"dec{l}", u0)
            skip = f"skip{l - 1}"
            s, sc = resblock_forward(
                feats[l - 1],
                p[f"{skip}.w1"], p[f"{skip}.b1"], p[f"{skip}.p1"],
                p[f"{skip}.w2"], p[f"{skip}.b2"],
            )
            tape[f"dec{l}.up"] = uc
            tape[skip] = sc
            d = u + s

        # all four heads upsample the same decoder feature; their first
        # convs run as one conv with channel-stacked weights
        if cfg.levels >= 2:
            h0, hc = up2_forward(d)
            tape["heads.up"] = hc
        else:
            h0 = d
        cb = cfg.base_channels
        w_stack = np.concatenate(
            [p[f"head_{head}.c1.w"] for head in HEAD_NAMES], axis=0
        )
        b_stack = np.concatenate(
            [p[f"head_{head}.c1.b"] for head in HEAD_NAMES]
        )
        a_all, c1c = conv3x3_forward(h0, w_stack, b_stack)
        tape["heads.c1"] = c1c
        fields = {}
        for hi, head in enumerate(HEAD_NAMES):
            a = a_all[:, :, :, hi * cb:(hi + 1) * cb]
            h1, pc = prelu_forward(a, p[f"head_{head}.c1.p"])
            tape[f"head_{head}.c1p"] = pc
            f, cc = conv3x3_forward(h1, p[f"head_{head}.c2.w"], p[f"head_{head}.c2.b"])
            tape[f"head_{head}.c2"] = cc
            fields[head] = np.ascontiguousarray(f.transpose(0, 3, 1, 2))
        return fields, tape

    def backward_batch(self, tape, grad_fields):
        """Analytic parameter gradients given per-head output gradients
        ({head: [N, K, H, W]}). Returns a name -> gradient dict."""
        cfg = self.config
        p = self.params
        grads = {name: None for name in p}

        def set_grad(name, val):
            grads[name] = val if grads[name] is None else grads[name] + val

        def conv_prelu_backward(name, gy):
            cc, pc = tape[name]
            ga, gp_ = prelu_backward(pc, gy)
            gx, gw, gb = conv3x3_backward(cc, ga)
            set_grad(f"{name}.w", gw)
            set_grad(f"{name}.b", gb)
            set_grad(f"{name}.p", gp_)
            return gx

        cb = cfg.base_channels
        ga_parts = []
        for head in HEAD_NAMES:
            gf = np.ascontiguousarray(grad_fields[head].transpose(0, 2, 3, 1))
            gh1, gw2, gb2 = conv3x3_backward(tape[f"head_{head}.c2"], gf)
            set_grad(f"head_{head}.c2.w", gw2)
            set_grad(f"head_{head}.c2.b", gb2)
            ga, gp_ = prelu_backward(tape[f"head_{head}.c1p"], gh1)
            set_grad(f"head_{head}.c1.p", gp_)
            ga_parts.append(ga)
        # stacked adjoint of the fused first convs
        ga_all = np.ascontiguousarray(np.concatenate(ga_parts, axis=3))
        gh0_sum, gw_stack, gb_stack = conv3x3_backward(tape["heads.c1"], ga_all)
        for hi, head in enumerate(HEAD_NAMES):
            sl = slice(hi * cb, (hi + 1) * cb)
            set_grad(f"head_{head}.c1.w", np.ascontiguousarray(gw_stack[sl]))
            set_grad(f"head_{head}.c1.b", gb_stack[sl])
        if cfg.levels >= 2:
            gd = up2_backward(tape["heads.up"], gh0_sum)
        else:
            gd = gh0_sum

        gfeats = [None] * cfg.levels
        for l in range(2, cfg.levels):  # reverse of the decoder loop
            skip = f"skip{l - 1}"
            gskip_in, gw1, gb1, gp1, gw2, gb2 = resblock_backward(tape[skip], gd)
            set_grad(f"{skip}.w1", gw1)
            set_grad(f"{skip}.b1", gb1)
            set_grad(f"{skip}.p1", gp1)
            set_grad(f"{skip}.w2", gw2)
            set_grad(f"{skip}.b2", gb2)
            gfeats[l - 1] = gskip_in
            gu = conv_prelu_backward(f"dec{l}", gd)
            gd = up2_backward(tape[f"dec{l}.up"], gu)
        gfeats[cfg.levels - 1] = gd

        g = gfeats[cfg.levels - 1]
        for l in range(cfg.levels - 1, 0, -1):
            g = conv_prelu_backward(f"enc{l}", g)
            if gfeats[l - 1] is not None:
                g = g + gfeats[l - 1]
        conv_prelu_backward("enc0", g)
        return {name: grads[name] for name in p}

    def forward(self, i1n, i2n):
        """Spec surface: two normalized [C, H, W] frames to a kernel field
        plus the activation tape."""
        cfg = self.config
        if i1n.shape != i2n.shape:
            raise ContractViolation(
                f"frame shapes differ: {i1n.shape} vs {i2n.shape}"
            )
        if i1n.ndim != 3 or i1n.shape[0] != cfg.color_channels:
            raise ContractViolation(
                f"expected [{cfg.color_channels}, H, W], got {i1n.shape}"
            )
        x = np.concatenate([i1n, i2n], axis=0)[None]
        fields, tape = self.forward_batch(x)
        kf = SeparableKernelField(*(fields[h][0] for h in HEAD_NAMES))
        return kf, tape

    def backward(self, tape, grad_field):
        """Parameter gradients for a single-sample forward; grad_field is a
        SeparableKernelField of output gradients."""
        gf = {h: getattr(grad_field, h)[None] for h in HEAD_NAMES}
        return self.backward_batch(tape, gf)

    # -- checkpointing -------------------------------------------------------

    def save(self, path, epoch=0, loss_history=()):
        buf = io.BytesIO()
        buf.write(CHECKPOINT_MAGIC)
        buf.write(struct.pack("<I", CHECKPOINT_VERSION))
        cfg = self.config
        buf.write(struct.pack(
            "<IIII", cfg.levels, cfg.base_channels, cfg.kernel_size,
            cfg.color_channels,
        ))
        buf.write(struct.pack("<q", int(self.seed)))
        buf.write(struct.pack("<I", int(epoch)))
        hist = np.asarray(list(loss_history), dtype="<f4")
        buf.write(struct.pack("<I", hist.size))
        buf.write(hist.tobytes())
        names = list(self.params)
        buf.write(struct.pack("<I", len(names)))
        for name in names:
            raw = name.encode("utf-8")
            arr = self.params[name]
            buf.write(struct.pack("<H", len(raw)))
            buf.write(raw)
            buf.write(struct.pack("<I", arr.ndim))
            buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        for name in names:
            buf.write(np.ascontiguousarray(self.params[name], dtype="<f4").tobytes())
        with open(path, "wb") as fh:
            fh.write(buf.getvalue())

    @classmethod
    def load(cls, path, expected_config=None):
        with open(path, "rb") as fh:
            data = fh.read()
        view = io.BytesIO(data)

        def take(n, what):
            chunk = view.read(n)
            if len(chunk) != n:
                raise CheckpointError(f"truncated checkpoint while reading {what}")
            return chunk

        if take(4, "magic") != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
        (version,) = struct.unpack("<I", take(4, "version"))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"unsupported checkpoint version {version} "
                f"(expected {CHECKPOINT_VERSION})"
            )
        levels, base, ksize, colors = struct.unpack("<IIII", take(16, "config"))
        config = KPNetConfig(levels, base, ksize, colors)
        if expected_config is not None and config != expected_config:
            raise ConfigMismatch(
                f"checkpoint config {config} != expected {expected_config}"
            )
        (seed,) = struct.unpack("<q", take(8, "seed"))
        (epoch,) = struct.unpack("<I", take(4, "epoch"))
        (nhist,) = struct.unpack("<I", take(4, "history length"))
        history = np.frombuffer(take(4 * nhist, "loss history"), dtype="<f4")
        (nparams,) = struct.unpack("<I", take(4, "manifest length"))
        manifest = []
        for _ in range(nparams):
            (nlen,) = struct.unpack("<H", take(2, "name length"))
            name = take(nlen, "name").decode("utf-8")
            (ndim,) = struct.unpack("<I", take(4, "ndim"))
            shape = struct.unpack(f"<{ndim}I", take(4 * ndim, "shape"))
            manifest.append((name, shape))
        expected = parameter_schedule(config)
        if [(n, tuple(s)) for n, s in manifest] != [(n, tuple(s)) for n, s in expected]:
            raise CheckpointError(f"{path}: manifest does not match config schedule")
        params = {}
        for name, shape in manifest:
            count = int(np.prod(shape))
            blob = take(4 * count, f"parameter {name}")
            params[name] = np.frombuffer(blob, dtype="<f4").reshape(shape).copy()
        if view.read(1):
            raise CheckpointError(f"{path}: trailing bytes after parameters")
        net = cls(config, params, seed)
        net.loaded_epoch = epoch
        net.loaded_history = history.copy()
        return net

"""Command-line surface: interpolate, eval, train, gradcheck, bench.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric
check failure. Every command is deterministic given --seed; timing fields
are informational only.
"""

import argparse
import hashlib
import json
import os
import re
import sys
import time

import numpy as np

from . import backend
from .dataset import synth_dataset
from .errors import (
    CheckpointError,
    ContractViolation,
    DataError,
    TrainingDiverged,
)
from .gradcheck import (
    check_network_gradients,
    check_operator_gradients,
    check_synthesis_gradients,
)
from .imageio import read_png, write_png
from .net import KPNet, KPNetConfig
from .pipeline import (
    EnsembleConfig,
    interpolate,
    interpolate_ensemble,
)
from .sepconv import sepconv_forward
from .tensorops import psnr
from .training import LossConfig, TrainConfig, train, write_loss_curve

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

EVAL_SCHEMA = "# sepkern-eval-csv v1"
BENCH_SCHEMA = "# sepkern-bench-csv v1"


def fingerprint(config_dict):
    """Stable 12-hex-digit digest of a JSON-serializable run config."""
    blob = json.dumps(config_dict, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def _load_net(path, out):
    try:
        return KPNet.load(path)
    except (CheckpointError, OSError) as exc:
        print(f"error: cannot load checkpoint {path}: {exc}", file=out)
        return None


# ---------------------------------------------------------------------------
# interpolate

def cmd_interpolate(args, out=sys.stdout):
    net = _load_net(args.checkpoint, out)
    if net is None:
        return EXIT_DATA
    try:
        i1 = read_png(args.frame1)
        i2 = read_png(args.frame2)
    except DataError as exc:
        print(f"error: {exc}", file=out)
        return EXIT_DATA
    run_cfg = {
        "command": "interpolate",
        "kernel_size": net.config.kernel_size,
        "levels": net.config.levels,
        "base_channels": net.config.base_channels,
        "kernel_normalization": not args.no_kernel_norm,
        "legacy_padding": args.legacy_padding,
        "ensemble": args.ensemble,
        "reduce": args.reduce,
    }
    t0 = time.perf_counter()
    try:
        if args.ensemble > 1:
            pred = interpolate_ensemble(
                net, i1, i2,
                EnsembleConfig(count=args.ensemble, reduction=args.reduce),
                normalized_kernels=not args.no_kernel_norm,
            )
        else:
            pred = interpolate(
                net, i1, i2,
                normalized_kernels=not args.no_kernel_norm,
                legacy_padding=args.legacy_padding,
            )
    except ContractViolation as exc:
        print(f"error: {exc}", file=out)
        return EXIT_DATA
    elapsed_ms = (time.perf_counter() - t0) * 1e3
    write_png(args.out, pred)
    print(f"fingerprint={fingerprint(run_cfg)}", file=out)
    print(f"wall_ms={elapsed_ms:.3f}", file=out)
    if np.array_equal(i1, i2):
        print(f"psnr_vs_frame1={psnr(pred, i1):.4f}", file=out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval

_TRIPLET_RE = re.compile(r"^(?P<sid>.+)_frame1\.png$")


def cmd_eval(args, out=sys.stdout):
    net = _load_net(args.checkpoint, out)
    if net is None:
        return EXIT_DATA
    if not os.path.isdir(args.dir):
        print(f"error: {args.dir} is not a directory", file=out)
        return EXIT_DATA
    ids = sorted(
        m.group("sid")
        for m in (_TRIPLET_RE.match(nm) for nm in os.listdir(args.dir))
        if m
    )
    run_cfg = {
        "command": "eval",
        "kernel_size": net.config.kernel_size,
        "levels": net.config.levels,
        "base_channels": net.config.base_channels,
        "kernel_normalization": not args.no_kernel_norm,
        "ensemble": args.ensemble,
        "reduce": args.reduce,
    }
    fp = fingerprint(run_cfg)
    rows = []
    for sid in ids:
        paths = {
            part: os.path.join(args.dir, f"{sid}_{part}.png")
            for part in ("frame1", "gt", "frame2")
        }
        missing = [p for p in paths.values() if not os.path.exists(p)]
        if missing:
            print(f"warning: skipping {sid}: missing {missing[0]}", file=out)
            continue
        i1 = read_png(paths["frame1"])
        gt = read_png(paths["gt"])
        i2 = read_png(paths["frame2"])
        t0 = time.perf_counter()
        try:
            if args.ensemble > 1:
                pred = interpolate_ensemble(
                    net, i1, i2,
                    EnsembleConfig(count=args.ensemble, reduction=args.reduce),
                    normalized_kernels=not args.no_kernel_norm,
                )
            else:
                pred = interpolate(
                    net, i1, i2, normalized_kernels=not args.no_kernel_norm
                )
        except ContractViolation as exc:
            print(f"error: {sid}: {exc}", file=out)
            return EXIT_DATA
        ms = (time.perf_counter() - t0) * 1e3
        rows.append((sid, psnr(pred, gt), ms))
    if not rows:
        print("error: no valid triplets found", file=out)
        return EXIT_DATA
    lines = [EVAL_SCHEMA, "id,psnr_db,ms,fingerprint"]
    for sid, val, ms in rows:
        val_txt = "inf" if val == float("inf") else f"{val:.6f}"
        lines.append(f"{sid},{val_txt},{ms:.3f},{fp}")
    csv_text = "\n".join(lines) + "\n"
    if args.csv:
        with open(args.csv, "w") as fh:
            fh.write(csv_text)
    else:
        out.write(csv_text)
    finite = [v for _, v, _ in rows if v != float("inf")]
    mean_psnr = sum(finite) / len(finite) if finite else float("inf")
    print(f"triplets={len(rows)}", file=out)
    print(f"mean_psnr={'inf' if mean_psnr == float('inf') else f'{mean_psnr:.4f}'}",
          file=out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# train

def _parse_train_config(path):
    with open(path) as fh:
        raw = json.load(fh)
    net_raw = dict(raw.get("net", {}))
    net_raw.pop("seed", None)  # init seed, not an architecture field
    net_cfg = KPNetConfig(**net_raw)
    tc_raw = dict(raw.get("train", {}))
    if "lr_halve_epochs" in tc_raw:
        tc_raw["lr_halve_epochs"] = tuple(tc_raw["lr_halve_epochs"])
    tc = TrainConfig(**tc_raw)
    lc = LossConfig(**raw.get("loss", {}))
    ds = raw.get("dataset", {})
    return raw, net_cfg, tc, lc, ds


def cmd_train(args, out=sys.stdout):
    try:
        raw, net_cfg, tc, lc, ds = _parse_train_config(args.config)
    except (OSError, json.JSONDecodeError, TypeError, ContractViolation) as exc:
        print(f"error: bad config {args.config}: {exc}", file=out)
        return EXIT_USAGE
    try:
        samples = synth_dataset(
            n=ds.get("n", 256),
            size=(ds.get("height", 32), ds.get("width", 32)),
            max_disp=ds.get("max_disp", 2.0),
            seed=ds.get("seed", 0),
            channels=ds.get("channels", net_cfg.color_channels),
            kernel_size=net_cfg.kernel_size,
            smoothness=ds.get("smoothness", 1.5),
        )
    except ContractViolation as exc:
        print(f"error: dataset: {exc}", file=out)
        return EXIT_USAGE
    net = KPNet.init(net_cfg, raw.get("net", {}).get("seed", tc.seed))
    print(f"fingerprint={fingerprint(raw)}", file=out)
    print(f"parameters={net.parameter_count()}", file=out)
    try:
        net, curve = train(net, samples, tc, lc)
    except TrainingDiverged as exc:
        if args.curve:
            write_loss_curve(args.curve, exc.curve)
        print(f"error: {exc}", file=out)
        return EXIT_NUMERIC
    except ContractViolation as exc:
        print(f"error: {exc}", file=out)
        return EXIT_USAGE
    losses = [row["mean_loss"] for row in curve]
    net.save(args.out, epoch=tc.epochs, loss_history=losses)
    if args.curve:
        write_loss_curve(args.curve, curve)
    print(f"final_loss={losses[-1]:.6e}", file=out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck

def cmd_gradcheck(args, out=sys.stdout):
    try:
        h, w = _parse_size(args.size)
    except ValueError as exc:
        print(f"error: {exc}", file=out)
        return EXIT_USAGE
    results = []
    results += check_operator_gradients(
        args.seed, size=(h, w), kernel_size=args.k
    )
    results += check_synthesis_gradients(
        args.seed, size=(h, w), kernel_size=args.k
    )
    results += check_network_gradients(args.seed, dtype=np.float64,
                                       threshold=1e-6)
    results += check_network_gradients(args.seed, dtype=np.float32,
                                       threshold=1e-3)
    worst = max(results, key=lambda r: r.max_rel_error / r.threshold)
    for r in results:
        tag = "ok" if r.passed else "FAIL"
        print(f"{tag:4s} {r.name:28s} max_rel_err={r.max_rel_error:.3e} "
              f"(threshold {r.threshold:.0e})", file=out)
    if all(r.passed for r in results):
        print("gradcheck passed", file=out)
        return EXIT_OK
    print(
        f"gradcheck FAILED: worst {worst.name} at coordinate "
        f"{worst.worst_coordinate} rel_err={worst.max_rel_error:.3e}",
        file=out,
    )
    return EXIT_NUMERIC


# ---------------------------------------------------------------------------
# bench

def _parse_size(text):
    m = re.match(r"^(\d+)x(\d+)$", text)
    if not m:
        raise ValueError(f"size must look like 128x128, got {text!r}")
    return int(m.group(1)), int(m.group(2))


def _median(values):
    vals = sorted(values)
    n = len(vals)
    mid = n // 2
    return vals[mid] if n % 2 else 0.5 * (vals[mid - 1] + vals[mid])


def cmd_bench(args, out=sys.stdout):
    if args.reps < 1:
        print("error: --reps must be >= 1", file=out)
        return EXIT_USAGE
    try:
        h, w = _parse_size(args.size)
    except ValueError as exc:
        print(f"error: {exc}", file=out)
        return EXIT_USAGE
    if args.k % 2 == 0 or args.k < 1:
        print(f"error: --k must be odd and positive, got {args.k}", file=out)
        return EXIT_USAGE
    cfg = KPNetConfig(levels=args.levels, base_channels=args.base_channels,
                      kernel_size=args.k, color_channels=3)
    legacy_h = h + args.k - 1
    legacy_w = w + args.k - 1
    for dim, name in ((h, "height"), (w, "width"), (legacy_h, "legacy height"),
                      (legacy_w, "legacy width")):
        if dim % cfg.divisor:
            print(
                f"error: {name} {dim} not divisible by {cfg.divisor} "
                f"(levels={args.levels}); choose a compatible --levels",
                file=out,
            )
            return EXIT_USAGE
    net = KPNet.init(cfg, args.seed)
    rng = np.random.default_rng(args.seed)
    i1 = rng.uniform(0, 1, (3, h, w)).astype(np.float32)
    i2 = rng.uniform(0, 1, (3, h, w)).astype(np.float32)

    timings = {"delayed": [], "legacy": []}
    pixels = {}
    for mode, legacy in (("delayed", False), ("legacy", True)):
        instr = {}
        for _ in range(args.reps):
            t0 = time.perf_counter()
            interpolate(net, i1, i2, normalized_kernels=True,
                        legacy_padding=legacy, instrumentation=instr)
            timings[mode].append((time.perf_counter() - t0) * 1e3)
        pixels[mode] = instr["net_input_pixels"]

    ratio = (legacy_h * legacy_w) / (h * w)
    med_delayed = _median(timings["delayed"])
    med_legacy = _median(timings["legacy"])
    print(f"size={h}x{w} k={args.k} reps={args.reps} levels={args.levels}",
          file=out)
    print(f"net_input_pixels_delayed={pixels['delayed']}", file=out)
    print(f"net_input_pixels_legacy={pixels['legacy']}", file=out)
    print(f"pixel_ratio_legacy_over_delayed={ratio!r}", file=out)
    print(f"median_ms_delayed={med_delayed:.3f}", file=out)
    print(f"median_ms_legacy={med_legacy:.3f}", file=out)
    print(f"mean_ms_delayed={sum(timings['delayed']) / args.reps:.3f}", file=out)
    print(f"mean_ms_legacy={sum(timings['legacy']) / args.reps:.3f}", file=out)

    backend_rows = []
    if args.compare_backends:
        pad = (args.k - 1) // 2
        padded = rng.uniform(0, 1, (3, h + 2 * pad, w + 2 * pad)).astype(np.float32)
        kh = rng.uniform(-0.5, 0.5, (args.k, h, w)).astype(np.float32)
        kv = rng.uniform(-0.5, 0.5, (args.k, h, w)).astype(np.float32)
        for name in backend.available_backends():
            times = []
            for _ in range(args.reps):
                t0 = time.perf_counter()
                sepconv_forward(padded, kh, kv, backend_name=name)
                times.append((time.perf_counter() - t0) * 1e3)
            backend_rows.append((name, _median(times)))
            print(f"backend_{name}_median_ms={_median(times):.3f}", file=out)

    if args.csv:
        with open(args.csv, "w") as fh:
            fh.write(BENCH_SCHEMA + "\n")
            fh.write("mode,median_ms,mean_ms,net_input_pixels\n")
            for mode in ("delayed", "legacy"):
                fh.write(
                    f"{mode},{_median(timings[mode]):.3f},"
                    f"{sum(timings[mode]) / args.reps:.3f},{pixels[mode]}\n"
                )
            for name, med in backend_rows:
                fh.write(f"backend_{name},{med:.3f},,\n")
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser():
    ap = argparse.ArgumentParser(
        prog="sepkern",
        description="Adaptive separable convolution frame interpolation",
    )
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("interpolate", help="synthesize the middle frame")
    p.add_argument("--frame1", required=True)
    p.add_argument("--frame2", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--ensemble", type=int, default=1,
                   choices=(1, 2, 4, 8, 16))
    p.add_argument("--reduce", choices=("mean", "median"), default="mean")
    p.add_argument("--no-kernel-norm", action="store_true")
    p.add_argument("--legacy-padding", action="store_true")
    p.set_defaults(func=cmd_interpolate)

    p = sub.add_parser("eval", help="evaluate PSNR over a triplet directory")
    p.add_argument("--dir", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--csv")
    p.add_argument("--ensemble", type=int, default=1,
                   choices=(1, 2, 4, 8, 16))
    p.add_argument("--reduce", choices=("mean", "median"), default="mean")
    p.add_argument("--no-kernel-norm", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("train", help="train on the synthetic dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--curve")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", default="6x7")
    p.add_argument("--k", type=int, default=5)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench", help="delayed vs legacy padding benchmark")
    p.add_argument("--size", default="512x512")
    p.add_argument("--k", type=int, default=51)
    p.add_argument("--reps", type=int, default=20)
    p.add_argument("--levels", type=int, default=2)
    p.add_argument("--base-channels", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--compare-backends", action="store_true")
    p.add_argument("--csv")
    p.set_defaults(func=cmd_bench)
    return ap


def main(argv=None):
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())

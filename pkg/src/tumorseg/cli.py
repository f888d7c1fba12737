"""Command-line entry point: ``tumorseg <subcommand> [flags]``.

Every subcommand prints its resolved configuration (defaults filled in) as a
single JSON line before doing any work, so a log records exactly what ran.
"""

from __future__ import annotations

import argparse
import functools
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

DATA_ENV = "TUMORSEG_DATA"


class ConfigError(ValueError):
    """Flag combination that cannot describe a valid run (exit status 2)."""


def _default_data_dir() -> str:
    return os.environ.get(DATA_ENV, "data")


def _print_config(name: str, cfg: dict) -> None:
    print(f"config {name} " + json.dumps(cfg, sort_keys=True), flush=True)


def _positive(kind=int):
    def parse(text):
        v = kind(text)
        if v <= 0:
            raise argparse.ArgumentTypeError(f"must be positive, got {text}")
        return v
    return parse


def _int_list(text: str) -> list[int]:
    try:
        vals = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not vals or min(vals) < 1:
        raise argparse.ArgumentTypeError(f"expected positive integers, got {text!r}")
    return vals


def _volume_files(directory) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"data directory {d} does not exist")
    files = sorted(d.glob("*.vol4"))
    if not files:
        raise FileNotFoundError(f"no .vol4 files in {d}")
    return files


# ---------------------------------------------------------------------------
# gen-data


def cmd_gen_data(args) -> int:
    from .data import save_volume, synth_phantom

    out = Path(args.out or _default_data_dir())
    cfg = {"cases": args.cases, "size": args.size, "seed": args.seed, "noise": args.noise, "out": str(out)}
    _print_config("gen-data", cfg)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(args.cases):
        case = synth_phantom([args.seed, i], (args.size,) * 3, case_id=f"case{i:03d}", noise=args.noise)
        save_volume(case, out / f"{case.case_id}.vol4")
        print(f"wrote {out / case.case_id}.vol4", flush=True)
    return 0


# ---------------------------------------------------------------------------
# train


def _network_kwargs(args, preset) -> dict:
    from .unet import SCALES

    sc = SCALES[args.scale]
    if args.norm is not None and args.norm != preset.norm_kind:
        raise ConfigError(f"preset {preset.name} uses {preset.norm_kind} normalization; "
                          f"--norm {args.norm} contradicts it (pick a preset with that norm instead)")
    levels = args.levels or sc.levels
    patch = tuple(args.patch) if args.patch else sc.patch_size
    if len(patch) == 1:
        patch = patch * 3
    if len(patch) != 3:
        raise ConfigError(f"--patch takes 1 or 3 extents, got {len(patch)}")
    if levels < 2:
        raise ConfigError("--levels must be at least 2")
    if any(p % 2 ** (levels - 1) for p in patch):
        raise ConfigError(f"patch {patch} is not divisible by 2**{levels - 1} for {levels} levels")
    return {
        "preset": preset.name, "patch_size": patch, "levels": levels, "scale": args.scale,
        "channel_start": args.channel_start, "channel_cap": args.channel_cap, "seed": args.seed,
        "dtype": "float64" if args.float64 else "float32",
    }


def cmd_train(args) -> int:
    from .data import AugmentConfig, load_volume, make_folds, preprocess
    from .trainer import TrainConfig, train_folds
    from .unet import atomic_write, build_network, get_preset

    preset = get_preset(args.preset)
    net = _network_kwargs(args, preset)
    base = TrainConfig.full() if args.scale == "full" else TrainConfig.desk()
    data = Path(args.data or _default_data_dir())
    out = Path(args.out or f"runs/{preset.name}")
    files = _volume_files(data)
    k = None if args.no_folds else min(args.folds, len(files))
    if k is not None and k < 2:
        raise ConfigError("cross-validation needs at least 2 cases; use --no-folds to train on all")
    if args.fold is not None and (k is None or not all(0 <= f < k for f in args.fold)):
        raise ConfigError(f"--fold values must lie in [0, {k}) and need folds enabled")
    cfg = TrainConfig(
        epochs=args.epochs or base.epochs,
        minibatches_per_epoch=args.minibatches or base.minibatches_per_epoch,
        batch_size=args.batch_size or preset.batch_size,
        seed=args.seed, initial_lr=args.lr,
        augment=None if args.no_augment else AugmentConfig(),
    )
    probe = build_network(preset.name, net["patch_size"], net["channel_start"], net["channel_cap"],
                          levels=net["levels"], scale=args.scale, materialize=False)
    net["channel_start"], net["channel_cap"] = probe.encoder_channels[0], max(probe.encoder_channels)
    resolved = dict(net, encoder_channels=probe.encoder_channels, decoder_channels=probe.decoder_channels,
                    attention_schedule={str(k): list(v) for k, v in probe.attention_schedule.items()},
                    data=str(data), out=str(out), cases=len(files), folds=k,
                    fold_indices=args.fold, epochs=cfg.epochs, minibatches=cfg.minibatches_per_epoch,
                    batch_size=cfg.batch_size, preset_batch_size=preset.batch_size, lr=cfg.initial_lr,
                    momentum=cfg.momentum, augment=not args.no_augment, grad_clip=cfg.grad_clip,
                    norm=preset.norm_kind, workers=args.workers)
    _print_config("train", resolved)

    cases = [preprocess(load_volume(f)) for f in files]
    folds = None if k is None else make_folds([c.case_id for c in cases], k, args.seed)
    out.mkdir(parents=True, exist_ok=True)
    if folds is not None:
        lines = [f"{i} " + " ".join(f) for i, f in enumerate(folds.folds)]
        atomic_write(out / "folds.txt", ("\n".join(lines) + "\n").encode())
    dtype = np.float64 if args.float64 else np.float32
    build = functools.partial(build_network, preset.name, net["patch_size"], net["channel_start"],
                              net["channel_cap"], levels=net["levels"], scale=args.scale,
                              seed=args.seed, dtype=dtype)
    t0 = time.perf_counter()
    paths = train_folds(build, cases, folds, cfg, out, args.fold, workers=args.workers)
    for p in paths:
        print(f"wrote {p}")
    print(f"trained {len(paths)} model(s) in {time.perf_counter() - t0:.1f} s; log: {out / 'train.log'}")
    return 0


# ---------------------------------------------------------------------------
# infer / ensemble / postprocess


def _infer_case(model_paths, case_file, out_dir, step, patch):
    from .data import load_volume, preprocess
    from .inference import save_prob, sliding_window_predict
    from .unet import load_checkpoint

    case = preprocess(load_volume(case_file))
    written = []
    for mp in model_paths:
        spec = load_checkpoint(mp)
        prob = sliding_window_predict(spec, case, patch, step)
        path = Path(out_dir) / f"{case.case_id}.{Path(mp).stem}.prob3"
        save_prob(path, case.case_id, prob)
        written.append((case.case_id, path))
    return written


def cmd_infer(args) -> int:
    from .inference import write_manifest

    models = [Path(m) for m in args.model]
    for m in models:
        if not m.is_file():
            raise FileNotFoundError(f"checkpoint {m} does not exist")
    data = Path(args.data or _default_data_dir())
    out = Path(args.out)
    files = _volume_files(data)
    patch = tuple(args.patch) * (3 if args.patch and len(args.patch) == 1 else 1) if args.patch else None
    _print_config("infer", {"models": [str(m) for m in models], "data": str(data), "out": str(out),
                            "cases": len(files), "step": args.step, "patch": patch,
                            "workers": args.workers})
    if not 0 < args.step <= 1:
        raise ConfigError("--step must lie in (0, 1]")
    out.mkdir(parents=True, exist_ok=True)
    if args.workers > 1:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            results = list(pool.map(_infer_case, [models] * len(files), files, [out] * len(files),
                                    [args.step] * len(files), [patch] * len(files)))
    else:
        results = [_infer_case(models, f, out, args.step, patch) for f in files]
    entries = [e for r in results for e in r]
    write_manifest(out / "manifest.txt", entries)
    print(f"wrote {len(entries)} probability map(s) and {out / 'manifest.txt'}")
    return 0


def cmd_ensemble(args) -> int:
    from .data import VolumeCase, save_volume
    from .inference import binarize, ensemble, load_prob, read_manifest, regions_to_labels, save_prob

    out = Path(args.out)
    _print_config("ensemble", {"manifest": str(args.manifest), "out": str(out), "threshold": args.threshold})
    manifest = read_manifest(args.manifest)
    if not manifest:
        raise ValueError(f"manifest {args.manifest} lists no outputs")
    out.mkdir(parents=True, exist_ok=True)
    for cid, paths in manifest.items():
        probs = []
        for p in paths:
            pid, prob = load_prob(p)
            if pid != cid:
                raise ValueError(f"{p} holds case {pid}, manifest says {cid}")
            probs.append(prob)
        mean = ensemble(probs)
        save_prob(out / f"{cid}.prob3", cid, mean)
        labels = regions_to_labels(binarize(mean, args.threshold))
        save_volume(VolumeCase(cid, None, labels), out / f"{cid}.vol4", labels_only=True)
        print(f"{cid}: averaged {len(paths)} map(s)")
    return 0


def cmd_postprocess(args) -> int:
    from dataclasses import replace

    from .data import load_volume, save_volume
    from .inference import ET, postprocess_et

    inp, out = Path(args.input), Path(args.out)
    _print_config("postprocess", {"input": str(inp), "out": str(out), "min_et": args.min_et})
    files = _volume_files(inp)
    out.mkdir(parents=True, exist_ok=True)
    for f in files:
        case = load_volume(f)
        labels = postprocess_et(case.labels, args.min_et)
        n_et = int((case.labels == ET).sum())
        changed = n_et and not (labels == ET).any()
        save_volume(replace(case, image=None, labels=labels), out / f.name, labels_only=True)
        print(f"{case.case_id}: {n_et} ET voxels" + (" -> relabelled as NCR" if changed else ""))
    return 0


# ---------------------------------------------------------------------------
# eval


def cmd_eval(args) -> int:
    from .data import load_volume
    from .metrics import aggregate_report, evaluate_case
    from .unet import atomic_write

    pred, gt = Path(args.pred), Path(args.gt)
    _print_config("eval", {"pred": str(pred), "gt": str(gt), "csv": args.csv, "title": args.title,
                           "sentinel": args.sentinel})
    results = {}
    for f in _volume_files(pred):
        p = load_volume(f)
        gfile = gt / f"{p.case_id}.vol4"
        if not gfile.is_file():
            raise FileNotFoundError(f"no ground truth {gfile} for predicted case {p.case_id}")
        g = load_volume(gfile)
        results[p.case_id] = evaluate_case(p.labels, g.labels, g.spacing, args.sentinel)
    report = aggregate_report(results)
    print(report.table(args.title), end="")
    if args.csv:
        atomic_write(args.csv, report.csv().encode())
        print(f"wrote {args.csv}")
    return 0


# ---------------------------------------------------------------------------
# grad-check


def cmd_grad_check(args) -> int:
    from .gradcheck import layer_gradient_checks, network_gradient_check
    from .unet import PRESETS

    presets = list(PRESETS) if args.preset == "all" else [args.preset]
    _print_config("grad-check", {"levels": args.levels, "patch": args.patch, "batch": args.batch,
                                 "presets": presets, "coords": args.coords, "step": args.step,
                                 "seed": args.seed, "tol": args.tol, "layers": not args.no_layers,
                                 "dtype": "float64"})
    if args.patch % 2 ** (args.levels - 1):
        raise ConfigError(f"patch {args.patch} is not divisible by 2**{args.levels - 1}")
    worst = 0.0
    if not args.no_layers:
        rep = layer_gradient_checks(args.seed, step=args.step)
        if args.verbose:
            print("\n".join(rep.lines()))
        print(f"layers: max relative error {rep.max_error:.3e} over {len(rep.errors)} checks")
        worst = max(worst, rep.max_error)
    for name in presets:
        rep = network_gradient_check(name, args.levels, args.patch, args.batch, args.seed,
                                     args.coords, args.step)
        if args.verbose:
            print("\n".join(rep.lines()))
        print(f"{name}: max relative error {rep.max_error:.3e} over {len(rep.errors)} tensors "
              f"({len(rep.skipped)} norm-cancelled biases skipped, {rep.kink_rejections} kink probes redrawn)")
        worst = max(worst, rep.max_error)
    ok = worst < args.tol
    print(f"max relative error: {worst:.3e} ({'PASS' if ok else 'FAIL'} at tolerance {args.tol:g})")
    return 0 if ok else 1


# ---------------------------------------------------------------------------
# bench-attention


def loglog_slope(sides, values) -> float:
    return float(np.polyfit(np.log(np.asarray(sides, float)), np.log(np.asarray(values, float)), 1)[0])


def cmd_bench_attention(args) -> int:
    from .attention import attention_cost, axial_decoder_block, count_macs, full_attention, init_axial_attention
    from .autodiff import Tensor

    _print_config("bench-attention", {"sides": args.sides, "channels": args.channels, "heads": args.heads,
                                      "head_dim": args.head_dim, "instrument_max": args.instrument_max,
                                      "seed": args.seed})
    rng = np.random.default_rng(args.seed)
    params = init_axial_attention(rng, args.channels, args.heads, args.head_dim, np.float64)
    header = (f"{'side':>5} {'tokens':>8} {'axial scores':>14} {'full scores':>14} "
              f"{'axial total':>14} {'full total':>14} {'measured':>9} {'seconds':>8}")
    print(header)
    rows = []
    mismatch = False
    for s in args.sides:
        ax = attention_cost((s, s, s), args.channels, args.heads, args.head_dim, "axial")
        fu = attention_cost((s, s, s), args.channels, args.heads, args.head_dim, "full")
        status, secs = "-", float("nan")
        if s <= args.instrument_max:
            x = Tensor(rng.standard_normal((1, args.channels, s, s, s)))
            t0 = time.perf_counter()
            with count_macs() as c_ax:
                axial_decoder_block(x, params)
            secs = time.perf_counter() - t0
            with count_macs() as c_fu:
                full_attention(x, params)
            ok = c_ax == ax.as_counter() and c_fu == fu.as_counter()
            mismatch |= not ok
            status = "exact" if ok else "MISMATCH"
        rows.append((s, ax, fu))
        print(f"{s:>5} {s ** 3:>8} {ax.scores:>14} {fu.scores:>14} {ax.total:>14} {fu.total:>14} "
              f"{status:>9} {secs:>8.3f}")
    if len(rows) >= 2:
        sides = [r[0] for r in rows]
        print(f"log-log slope, score term: axial {loglog_slope(sides, [r[1].scores for r in rows]):.3f}, "
              f"full {loglog_slope(sides, [r[2].scores for r in rows]):.3f}")
        print(f"log-log slope, total: axial {loglog_slope(sides, [r[1].total for r in rows]):.3f}, "
              f"full {loglog_slope(sides, [r[2].total for r in rows]):.3f}")
    return 1 if mismatch else 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    from .unet import PRESETS

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="seed for every random choice (default 0)")
    common.add_argument("--workers", type=_positive(), default=1, help="worker processes (default 1)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="tumorseg", description="Brain-tumor segmentation U-Nets on CPU.")
    sub = p.add_subparsers(dest="command", required=True, metavar="subcommand")

    g = sub.add_parser("gen-data", parents=[common], help="write synthetic phantom cases")
    g.add_argument("--cases", type=_positive(), default=4)
    g.add_argument("--size", type=_positive(), default=32, help="cube side in voxels (>= 16)")
    g.add_argument("--noise", type=float, default=0.1)
    g.add_argument("--out", help=f"output directory (default ${DATA_ENV} or ./data)")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", parents=[common], help="train one model per fold")
    t.add_argument("--preset", choices=list(PRESETS), default="BL+L+GN")
    t.add_argument("--scale", choices=["desk", "full"], default="desk")
    t.add_argument("--data", help=f"case directory (default ${DATA_ENV} or ./data)")
    t.add_argument("--out", help="run directory (default runs/<preset>)")
    t.add_argument("--patch", type=_int_list, help="patch extents, one or three values")
    t.add_argument("--levels", type=_positive())
    t.add_argument("--channel-start", type=_positive())
    t.add_argument("--channel-cap", type=_positive())
    t.add_argument("--norm", choices=["batch", "group"], help="must agree with the preset")
    t.add_argument("--epochs", type=_positive())
    t.add_argument("--minibatches", type=_positive(), help="minibatches per epoch")
    t.add_argument("--batch-size", type=_positive(), help="default: the preset's batch size")
    t.add_argument("--lr", type=_positive(float), default=0.01)
    t.add_argument("--folds", type=_positive(), default=5)
    t.add_argument("--fold", type=int, action="append", help="train only these folds (repeatable)")
    t.add_argument("--no-folds", action="store_true", help="train a single model on all cases")
    t.add_argument("--no-augment", action="store_true")
    t.add_argument("--float64", action="store_true", help="64-bit parameters and activations")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", parents=[common], help="sliding-window probability maps")
    i.add_argument("--model", nargs="+", required=True, help="checkpoint file(s)")
    i.add_argument("--data", help=f"case directory (default ${DATA_ENV} or ./data)")
    i.add_argument("--out", required=True)
    i.add_argument("--step", type=float, default=0.5, help="window step as a fraction of the patch")
    i.add_argument("--patch", type=_int_list, help="window extents (default: the model's patch)")
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("ensemble", parents=[common], help="average fold outputs listed in a manifest")
    e.add_argument("--manifest", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--threshold", type=float, default=0.5)
    e.set_defaults(func=cmd_ensemble)

    pp = sub.add_parser("postprocess", parents=[common], help="relabel small ET as NCR")
    pp.add_argument("--input", required=True, help="directory of label volumes")
    pp.add_argument("--out", required=True)
    pp.add_argument("--min-et", type=int, default=200)
    pp.set_defaults(func=cmd_postprocess)

    ev = sub.add_parser("eval", parents=[common], help="dice and HD95 per region")
    ev.add_argument("--pred", required=True)
    ev.add_argument("--gt", required=True)
    ev.add_argument("--csv")
    ev.add_argument("--title", default="Model")
    ev.add_argument("--sentinel", type=float, help="HD95 when exactly one mask is empty (default: diagonal)")
    ev.set_defaults(func=cmd_eval)

    gc = sub.add_parser("grad-check", parents=[common], help="finite-difference gradient check (64-bit)")
    gc.add_argument("--levels", type=_positive(), default=3)
    gc.add_argument("--patch", type=_positive(), default=8)
    gc.add_argument("--batch", type=_positive(), default=2)
    gc.add_argument("--preset", choices=list(PRESETS) + ["all"], default="all")
    gc.add_argument("--coords", type=_positive(), default=4, help="sampled coordinates per tensor")
    gc.add_argument("--step", type=_positive(float), default=1e-5)
    gc.add_argument("--tol", type=_positive(float), default=1e-4)
    gc.add_argument("--no-layers", action="store_true", help="skip the per-layer checks")
    gc.set_defaults(func=cmd_grad_check)

    b = sub.add_parser("bench-attention", parents=[common], help="attention MAC counts and scaling")
    b.add_argument("--sides", type=_int_list, default=[4, 8, 16])
    b.add_argument("--channels", type=_positive(), default=8)
    b.add_argument("--heads", type=_positive(), default=2)
    b.add_argument("--head-dim", type=_positive(), default=4)
    b.add_argument("--instrument-max", type=int, default=8,
                   help="run and count the real kernels for sides up to this value")
    b.set_defaults(func=cmd_bench_attention)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"tumorseg {args.command}: invalid configuration: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"tumorseg {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

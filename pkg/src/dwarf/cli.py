"""Command-line entry point: ``dwarf <subcommand> ...``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import codecs, data
from .autograd import precision, set_precision
from .metrics import MetricReport
from .network import DWARF, ModelConfig, parse_variant, read_model_config, write_model_config



class CliError(Exception):
    pass


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _config_path(checkpoint: Path) -> Path:
    return checkpoint.with_suffix(".cfg")


def _model_config(args) -> ModelConfig:
    base = ModelConfig(width=args.width) if getattr(args, "width", None) else ModelConfig()
    return parse_variant(args.variant, base)


def _load_model(args) -> DWARF:
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise CliError(f"checkpoint not found: {ckpt}")
    cfg_file = _config_path(ckpt)
    cfg = read_model_config(cfg_file) if cfg_file.exists() else _model_config(args)
    return DWARF.load(ckpt, cfg)


# ---------------------------------------------------------------- subcommands


def cmd_gen(args) -> int:
    out = _out_dir(args)
    lines = []
    for i in range(args.count):
        seed = args.seed * 100_003 + i
        spec = data.random_spec(seed, args.height, args.width, args.objects)
        sample = data.generate_scene(spec, seed=seed)
        lines.append(data.write_sample(sample, out, f"scene{i:04d}", args.format))
        if args.render:
            from .viz import save_prediction_figure

            g = sample.gt
            save_prediction_figure(out / f"scene{i:04d}_gt.png", sample.images[0], g.flow, g.disp, g.change)
    data.write_manifest(out / "manifest.txt", lines, header=f"generated scenes, seed {args.seed}")
    print(f"wrote {args.count} scene(s) to {out / 'manifest.txt'}")
    return 0


def cmd_distill(args) -> int:
    ds = data.load_manifest(args.manifest)
    out = _out_dir(args)
    noise = data.NoiseSpec(args.sigma, args.sigma, args.sigma, args.outlier_rate, seed=args.seed)
    lines = []
    for i, entry in enumerate(ds.entries):
        sample = data.load_sample(entry, ds.fmt)
        proxy = data.make_proxy(sample.gt, replace(noise, seed=args.seed * 100_003 + i))
        name = f"proxy{i:04d}"
        gt_paths = data.write_gt(proxy, out / name, args.format)
        imgs = [os.path.relpath(p, out) for p in entry.images]
        lines.append("\t".join(imgs + [p.name for p in gt_paths] + [data.PX]))
    data.write_manifest(out / "manifest.txt", lines, header=f"proxy labels from {args.manifest}")
    print(f"wrote {len(lines)} proxy sample(s) to {out / 'manifest.txt'}")
    return 0


def _schedule(args):
    from .training import make_schedule, read_schedule

    if Path(args.schedule).exists():
        sched = read_schedule(args.schedule)
    else:
        sched = make_schedule(args.schedule)
    if args.steps is not None:
        decay = tuple(d for d in sched.decay_steps if d < args.steps)
        factors = sched.decay_factors[: len(decay)] if sched.decay_factors else ()
        split = sched.split if sched.mode != "px_then_gt" else min(sched.split, max(1, args.steps - 1))
        sched = replace(sched, steps=args.steps, decay_steps=decay, decay_factors=factors, split=split)
    if args.batch_size is not None:
        sched = replace(sched, batch_size=args.batch_size)
    return sched


def cmd_train(args) -> int:
    from .training import train
    from .viz import save_curves

    ds = data.load_manifest(args.manifest)
    sched = _schedule(args)
    out = _out_dir(args)
    cfg = _model_config(args)
    model = DWARF(cfg, seed=args.seed)
    if args.init:
        model.load_state_dict(DWARF.load(args.init, cfg).state_dict())
    result = train(model, ds, sched, seed=args.seed, log_path=out / "train_log.csv")
    ckpt = out / "model.ckpt"
    model.save(ckpt)
    write_model_config(cfg, _config_path(ckpt))
    if result.log:
        pts = [(r["step"], r["loss"]) for r in result.log]
        save_curves(out / "train_loss.png", {"loss": pts, "data": [(r["step"], r["data_loss"]) for r in result.log]},
                    "loss", title=f"{sched.name} ({sched.mode})", logy=True)
        print(f"final loss={result.log[-1]['loss']:.6g}")
    print(f"checkpoint={ckpt}")
    return 0


def evaluate(model: DWARF, ds: data.Dataset) -> MetricReport:
    from .training import predict

    report = MetricReport()
    for i in range(len(ds)):
        sample = ds.load(i)
        if sample.gt is None:
            raise CliError(f"manifest line {ds.entries[i].line}: evaluation needs ground truth")
        report.add(predict(model, sample), sample.gt)
    return report


def cmd_eval(args) -> int:
    ds = data.load_manifest(args.manifest)
    model = _load_model(args)
    report = evaluate(model, ds)
    text = report.to_keyvalue()
    sys.stdout.write(text)
    sys.stdout.write(report.to_table())
    if args.out_dir:
        from .training import predict
        from .viz import save_prediction_figure

        out = _out_dir(args)
        (out / "metrics.txt").write_text(text)
        if len(ds):
            sample = ds.load(0)
            save_prediction_figure(out / "eval_sample0.png", sample.images[0], *predict(model, sample), gt=sample.gt)
    return 0


def cmd_infer(args) -> int:
    from .training import predict
    from .viz import colorize_flow, colorize_scalar, save_prediction_figure

    images = tuple(codecs.read_image(p) for p in args.images)
    if len({i.shape for i in images}) != 1:
        raise CliError("the four input images differ in size")
    model = _load_model(args)
    flow, disp, change = predict(model, data.SceneSample(images, None))
    out = _out_dir(args)
    if args.format == "kitti":
        codecs.write_flow_png(out / "flow.png", np.clip(flow, -511.9, 511.9))
        for name, m in (("disp1.png", disp), ("disp2.png", change)):
            clipped = np.clip(m, 0.0, 255.99)
            codecs.write_disp_png(out / name, clipped, clipped >= 1 / 512)
    else:
        codecs.write_pfm(out / "flow.pfm", np.concatenate([flow, np.zeros((1,) + disp.shape)]).transpose(1, 2, 0))
        codecs.write_pfm(out / "disp1.pfm", disp)
        codecs.write_pfm(out / "disp2.pfm", change)
    if args.render:
        vmax = float(max(disp.max(), change.max(), 1e-6))
        codecs.write_image(out / "flow_color.png", colorize_flow(flow).transpose(2, 0, 1) / 255.0)
        codecs.write_image(out / "disp1_color.png", colorize_scalar(disp, 0, vmax).transpose(2, 0, 1) / 255.0)
        codecs.write_image(out / "disp2_color.png", colorize_scalar(change, 0, vmax).transpose(2, 0, 1) / 255.0)
        save_prediction_figure(out / "overview.png", images[0], flow, disp, change)
    print(f"wrote outputs to {out}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    with precision(64):
        errors = run_suite(args.seed)
    worst = 0.0
    for name, err in errors.items():
        status = "ok" if err < args.tol else "FAIL"
        print(f"{name}={err:.3e} {status}")
        worst = max(worst, err)
    print(f"max_rel_error={worst:.3e}")
    return 0 if worst < args.tol else 1


def cmd_bench(args) -> int:
    from .bench import bench, bench_variants
    from .viz import save_bench_figure

    try:
        h, w = (int(x) for x in args.size.lower().split("x"))
    except ValueError:
        raise CliError(f"--size must look like HxW, got {args.size!r}") from None
    base = ModelConfig(width=args.width) if args.width else None
    if args.variant == "all":
        rows = bench_variants((h, w), args.reps, args.warmup, base)
    else:
        rows = [{"variant": args.variant, **bench(DWARF(_model_config(args)), (h, w), args.reps, args.warmup)}]
    print(f"{'variant':<14} {'params (M)':>11} {'mean (ms)':>10} {'min (ms)':>10}")
    for r in rows:
        print(f"{r['variant']:<14} {r['params'] / 1e6:>11.3f} {r['mean_s'] * 1e3:>10.1f} {r['min_s'] * 1e3:>10.1f}")
    for r in rows:
        print(f"{r['variant']}.params={r['params']} {r['variant']}.mean_s={r['mean_s']:.6f} {r['variant']}.min_s={r['min_s']:.6f}")
    if args.out_dir:
        save_bench_figure(_out_dir(args) / "bench.png", rows)
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dwarf", description="Scene flow from two stereo pairs.")
    p.add_argument("--precision", type=int, choices=(32, 64), default=32)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=False):
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out-dir", required=out_required)
        sp.add_argument("--precision", type=int, choices=(32, 64), default=argparse.SUPPRESS)

    def model_opts(sp):
        sp.add_argument("--variant", default="full", help="baseline|dense|dense+3dcorr|full or toggles like dense,3dcorr")
        sp.add_argument("--width", type=float, default=None, help="channel width multiplier")

    sp = sub.add_parser("gen", help="write a synthetic dataset")
    common(sp, True)
    sp.add_argument("--count", type=int, default=10)
    sp.add_argument("--height", type=int, default=64)
    sp.add_argument("--width", type=int, default=128)
    sp.add_argument("--objects", type=int, default=None)
    sp.add_argument("--format", choices=("kitti", "pfm"), default="kitti")
    sp.add_argument("--render", action="store_true", help="also save colour-coded ground truth figures")
    sp.set_defaults(func=cmd_gen)

    sp = sub.add_parser("distill", help="write noisy proxy labels for a manifest")
    common(sp, True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--sigma", type=float, default=0.5)
    sp.add_argument("--outlier-rate", type=float, default=0.05)
    sp.add_argument("--format", choices=("kitti", "pfm"), default="kitti")
    sp.set_defaults(func=cmd_distill)

    sp = sub.add_parser("train", help="train from a manifest")
    common(sp, True)
    model_opts(sp)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--schedule", required=True, help="preset name or schedule file")
    sp.add_argument("--steps", type=int, default=None, help="override the schedule length")
    sp.add_argument("--batch-size", type=int, default=None)
    sp.add_argument("--init", default=None, help="checkpoint to start from")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="metrics of a checkpoint on a manifest")
    common(sp)
    model_opts(sp)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("infer", help="predict from four images")
    common(sp, True)
    model_opts(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("images", nargs=4, metavar="IMAGE", help="L1 R1 L2 R2 (left/right at t1, then at t2)")
    sp.add_argument("--format", choices=("kitti", "pfm"), default="kitti")
    sp.add_argument("--render", action="store_true")
    sp.set_defaults(func=cmd_infer)

    sp = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--tol", type=float, default=1e-5)
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("bench", help="forward timing per variant")
    common(sp)
    model_opts(sp)
    sp.set_defaults(variant="all")
    sp.add_argument("--size", default="64x128", help="HxW, multiples of 64")
    sp.add_argument("--reps", type=int, default=3)
    sp.add_argument("--warmup", type=int, default=1)
    sp.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        set_precision(args.precision)
        if getattr(args, "count", 1) < 0:
            raise CliError("--count must be >= 0")
        if args.command == "gen" and (args.height % 64 or args.width % 64 or min(args.height, args.width) <= 0):
            raise CliError("--height and --width must be positive multiples of 64")
        return args.func(args)
    except (CliError, ValueError, OSError, RuntimeError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"dwarf {args.command}: error: {msg}", file=sys.stderr)
        return 2
    finally:
        set_precision(32)


if __name__ == "__main__":
    sys.exit(main())

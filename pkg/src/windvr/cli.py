"""``windvr`` command line: data generation, training stages, restoration and metrics.

Reports go to stdout as JSON (``plot-data`` writes CSV). Exit codes: 0 on
success, 1 on usage errors, 2 on runtime failures.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

from .window_geometry import GridShape, WindowCounts, WindowPolicy, WindowSize, partition, test_window_size, \
    training_window_size

log = logging.getLogger("windvr")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _ints(text: str, n: int | None = None) -> tuple[int, ...]:
    try:
        vals = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if n is not None and len(vals) != n:
        raise argparse.ArgumentTypeError(f"expected {n} integers, got {text!r}")
    return vals


def _emit(obj) -> None:
    json.dump(obj, sys.stdout, indent=2, default=float)
    sys.stdout.write("\n")


# ---------------------------------------------------------------- commands


def cmd_gen_data(a) -> int:
    from .data_degrade import DegradationParams, make_pair, save_clip

    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    h, w = a.hw
    params = DegradationParams(scale=a.scale)
    files = []
    for k in range(a.count):
        lq, hq = make_pair(a.seed * 100003 + k, a.frames, h, w, params)
        save_clip(out / f"hq_{k:04d}.wvc", hq)
        save_clip(out / f"lq_{k:04d}.wvc", lq)
        files.append({"hq": f"hq_{k:04d}.wvc", "lq": f"lq_{k:04d}.wvc"})
    _emit({"count": a.count, "frames": a.frames, "hq_hw": [h, w], "scale": a.scale, "files": files})
    return 0


def _model_config(a):
    from .rope_attention import BlockConfig, ModelConfig

    if a.window == "fixed":
        policy = WindowPolicy("fixed", fixed_size=WindowSize(*a.fixed_size))
    else:
        policy = WindowPolicy("adaptive", WindowCounts(*a.counts), tuple(a.train_hw))
    return ModelConfig(BlockConfig(a.model_dim, a.heads, num_blocks=a.blocks), window=policy)


def cmd_train_teacher(a) -> int:
    from .data_degrade import StreamConfig
    from .distill import TeacherConfig, train_teacher
    from .rope_attention import save_checkpoint
    from .runlog import MetricsLog

    cfg = _model_config(a)
    out = Path(a.out)
    metrics = MetricsLog(out / "metrics.jsonl", stage="teacher")
    stream = StreamConfig(a.batch, tuple(tuple(g) for g in a.grids))
    params = train_teacher(cfg, stream, TeacherConfig(a.iters, a.lr), a.seed, metrics)
    save_checkpoint(out, params, cfg, a.iters, "teacher", {"seed": a.seed})
    _emit({"checkpoint": str(out), "final_mse": metrics.series("teacher/mse")[-1]})
    return 0


def cmd_distill(a) -> int:
    from .data_degrade import StreamConfig
    from .distill import DistillSchedule, run_progressive
    from .rope_attention import load_checkpoint, save_checkpoint
    from .runlog import MetricsLog

    teacher, cfg, _ = load_checkpoint(a.teacher)
    schedule = DistillSchedule(tuple(a.schedule), a.iters, a.lr)
    out = Path(a.out)
    metrics = MetricsLog(out / "metrics.jsonl", stage="distill")

    def on_stage(res):
        save_checkpoint(out / f"stage_{res.steps_to:02d}", res.student, cfg, stage=f"{res.steps_from}->{res.steps_to}")

    student, results = run_progressive(teacher, cfg, StreamConfig(a.batch), schedule, a.seed, metrics, on_stage)
    save_checkpoint(out / "student", student, cfg, stage="student")
    _emit({"student": str(out / "student"),
           "stages": [{"from": r.steps_from, "to": r.steps_to, "teacher_cfg": r.teacher_cfg,
                       "initial_mse": r.initial_mse, "final_mse": r.final_mse} for r in results]})
    return 0


def cmd_train_apt(a) -> int:
    from .apt_trainer import TrainConfig, init_discriminator, train_apt
    from .rope_attention import load_checkpoint

    G, cfg, _ = load_checkpoint(a.gen)
    D, dcfg, _ = load_checkpoint(a.disc)
    if dcfg.to_json() != cfg.to_json():
        raise ValueError("generator and discriminator checkpoints have different model configs")
    if not any(k.startswith("heads.") for k in D):
        D = init_discriminator(D, cfg, a.seed if a.seed is not None else 0)
    config = TrainConfig.from_json(json.loads(Path(a.config).read_text())) if a.config else TrainConfig()
    res = train_apt(config, G, D, cfg, a.out)
    _emit({"out": a.out, "evals": {str(k): v for k, v in res.evals.items()}})
    return 0


def cmd_restore(a) -> int:
    from .data_degrade import load_clip, save_clip
    from .flow import SamplerConfig
    from .restore import restore_clip
    from .rope_attention import VelocityModel, load_checkpoint

    params, cfg, _ = load_checkpoint(a.model)
    lq = load_clip(a.lq)
    t0 = time.perf_counter()
    pred = restore_clip(VelocityModel(params, cfg), lq, SamplerConfig(a.steps, a.cfg, a.seed), a.scale)
    save_clip(a.out, pred)
    _emit({"out": a.out, "shape": list(pred.shape), "runtime_s": time.perf_counter() - t0})
    return 0


def cmd_eval(a) -> int:
    from .data_degrade import load_clip, token_grid
    from .metrics import MetricReport
    from .rope_attention import load_checkpoint

    t0 = time.perf_counter()
    pred, ref = load_clip(a.pred), load_clip(a.ref)
    layout, patch = None, 1
    if a.model:
        _, cfg, _ = load_checkpoint(a.model)
        patch = cfg.patch
        layout = cfg.window.layout(token_grid(pred.shape, patch), train=False)
    report = MetricReport()
    report.add(pred, ref, layout, patch)
    report.runtime_s = time.perf_counter() - t0
    _emit(report.summary())
    return 0


def cmd_windows(a) -> int:
    grid = GridShape(*a.grid)
    counts = WindowCounts(*a.counts)
    size = test_window_size(grid, counts, tuple(a.train_hw)) if a.test else training_window_size(grid, counts)
    layout = partition(grid, size)
    _emit(layout.to_json())
    return 0


def cmd_plot_data(a) -> int:
    from .data_degrade import eval_set
    from .flow import SamplerConfig
    from .restore import evaluate
    from .rope_attention import VelocityModel, load_checkpoint

    params, cfg, _ = load_checkpoint(a.model)
    model = VelocityModel(params, cfg)
    pairs = eval_set(a.seed, a.count, 1, *a.hw)
    writer = csv.writer(sys.stdout, lineterminator="\n")
    writer.writerow(["steps", "cfg_scale", "psnr", "ssim", "runtime_s"])
    for steps in a.steps:
        s = evaluate(model, pairs, SamplerConfig(steps, a.cfg, a.seed)).summary()
        writer.writerow([steps, a.cfg, f"{s['mean_psnr']:.6f}", f"{s['mean_ssim']:.6f}", f"{s['runtime_s']:.4f}"])
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="windvr", description="One-step windowed video restoration toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write seeded HQ/LQ clip pairs")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--frames", type=int, default=1)
    g.add_argument("--hw", type=lambda s: _ints(s, 2), required=True)
    g.add_argument("--scale", type=int, default=4)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train-teacher", help="flow-matching pretraining of the multi-step teacher")
    t.add_argument("--out", required=True)
    t.add_argument("--iters", type=int, default=1500)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--batch", type=int, default=2)
    t.add_argument("--model-dim", type=int, default=64)
    t.add_argument("--heads", type=int, default=4)
    t.add_argument("--blocks", type=int, default=6)
    t.add_argument("--window", choices=("adaptive", "fixed"), default="adaptive")
    t.add_argument("--counts", type=lambda s: _ints(s, 3), default=(1, 3, 3))
    t.add_argument("--train-hw", type=lambda s: _ints(s, 2), default=(45, 80))
    t.add_argument("--fixed-size", type=lambda s: _ints(s, 3), default=(1, 30, 30))
    t.add_argument("--grids", type=lambda s: [_ints(x, 2) for x in s.split(";")], default=[(16, 16)],
                   help="token grids as 'h,w;h,w'")
    t.set_defaults(func=cmd_train_teacher)

    d = sub.add_parser("distill", help="progressive distillation to a one-step student")
    d.add_argument("--teacher", required=True)
    d.add_argument("--schedule", type=_ints, default=(64, 32, 16, 8, 4, 2, 1))
    d.add_argument("--iters", type=int, default=500)
    d.add_argument("--lr", type=float, default=1e-4)
    d.add_argument("--batch", type=int, default=2)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_distill)

    ap = sub.add_parser("train-apt", help="adversarial post-training")
    ap.add_argument("--gen", required=True)
    ap.add_argument("--disc", required=True)
    ap.add_argument("--config", help="JSON file mirroring TrainConfig")
    ap.add_argument("--seed", type=int, default=None, help="seed for fresh logit heads")
    ap.add_argument("--out", required=True)
    ap.set_defaults(func=cmd_train_apt)

    r = sub.add_parser("restore", help="upscale an LQ clip")
    r.add_argument("--ckpt", "--model", dest="model", required=True)
    r.add_argument("--in", "--lq", dest="lq", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--steps", type=int, default=1)
    r.add_argument("--cfg", type=float, default=1.0)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--scale", type=int, default=4)
    r.set_defaults(func=cmd_restore)

    e = sub.add_parser("eval", help="PSNR/SSIM (and seam score with --model) as JSON")
    e.add_argument("--pred", required=True)
    e.add_argument("--ref", required=True)
    e.add_argument("--model", help="checkpoint whose window policy defines the seams")
    e.set_defaults(func=cmd_eval)

    w = sub.add_parser("windows", help="print the window partition of a token grid")
    w.add_argument("--grid", type=lambda s: _ints(s, 3), required=True)
    w.add_argument("--counts", type=lambda s: _ints(s, 3), default=(1, 3, 3))
    w.add_argument("--test", action="store_true", help="use test-time (proxy resolution) window sizes")
    w.add_argument("--train-hw", type=lambda s: _ints(s, 2), default=(45, 80))
    w.set_defaults(func=cmd_windows)

    pd = sub.add_parser("plot-data", help="CSV of sampling steps vs PSNR")
    pd.add_argument("--model", required=True)
    pd.add_argument("--steps", type=_ints, default=(1, 2, 4, 8))
    pd.add_argument("--cfg", type=float, default=1.0)
    pd.add_argument("--count", type=int, default=4)
    pd.add_argument("--hw", type=lambda s: _ints(s, 2), default=(64, 64))
    pd.add_argument("--seed", type=int, default=0)
    pd.set_defaults(func=cmd_plot_data)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        a = parser.parse_args(argv)
    except UsageError as err:
        print(err, file=sys.stderr)
        return 1
    if a.command is None:
        parser.print_help(sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return a.func(a)
    except (ValueError, OSError, RuntimeError, FloatingPointError) as err:
        print(f"windvr {a.command}: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

"""Command-line surface: synth, warp, train, generate, grad-check, eval, losses.

Every run prints its resolved configuration to stderr. Exit codes: 0 success,
1 runtime failure, 2 usage error. All subcommands are deterministic under a
fixed --seed.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import checks, evaluation, geometry, training
from .data import DatasetError, SyntheticGlyphSpec, TextureProfile, save_dataset, scan_dataset, synth_generate
from .imagecore import FormatError, Image, load_image, resize, save_image
from .losses import LossReport
from .networks import LOG_SCALE_RANGE, OFFSET_RANGE, ROTATION_RANGE, SHIFT_RANGE
from .training import TrainConfig, TrainingError, load_checkpoint


def _print_config(name: str, cfg: dict) -> None:
    print(f"[{name}] config: {json.dumps(cfg, sort_keys=True)}", file=sys.stderr)


def _load_dir_images(root: Path, size: int) -> list[Image]:
    paths = sorted(p for p in root.rglob("*") if p.suffix.lower() in (".png", ".pgm") and p.is_file())
    if not paths:
        raise DatasetError(f"no images under {root}")
    out = []
    for p in paths:
        img = load_image(p)
        if (img.height, img.width) != (size, size):
            img = resize(img, size, size)
        out.append(img)
    return out


# ---------------------------------------------------------------------------
# subcommand implementations
# ---------------------------------------------------------------------------

def _cmd_synth(args) -> int:
    spec = SyntheticGlyphSpec(
        num_classes=args.classes,
        canvas=args.size,
        texture=TextureProfile(
            noise_amplitude=args.noise,
            blotch_density=args.blotches,
            brightness_bias=args.bias,
        ),
    )
    _print_config("synth", {**dataclasses.asdict(spec), "per_class": args.per_class,
                            "seed": args.seed, "out": str(args.out)})
    sc, pc = synth_generate(spec, args.per_class, args.seed)
    save_dataset(sc, Path(args.out) / "sc")
    save_dataset(pc, Path(args.out) / "pc")
    print(f"wrote {len(sc)} clean and {len(pc)} textured glyphs under {args.out}")
    return 0


def _cmd_warp(args) -> int:
    _print_config("warp", {"in": args.infile, "out": args.outfile, "seed": args.seed,
                           "n": args.n, "tps_only": args.tps_only,
                           "affine_only": args.affine_only, "invert": args.invert})
    img = load_image(args.infile)
    if args.invert:
        img = img.inverted()
    rng = np.random.default_rng(args.seed)
    n = args.n
    offsets = rng.uniform(-OFFSET_RANGE, OFFSET_RANGE, (n, n, 2))
    rotation = float(rng.uniform(-ROTATION_RANGE, ROTATION_RANGE))
    scale = float(np.exp(rng.uniform(-LOG_SCALE_RANGE, LOG_SCALE_RANGE)))
    shift_x, shift_y = rng.uniform(-SHIFT_RANGE, SHIFT_RANGE, 2)
    if args.tps_only:
        rotation, scale, shift_x, shift_y = 0.0, 1.0, 0.0, 0.0
    if args.affine_only:
        offsets = np.zeros_like(offsets)
    params = geometry.WarpParams(offsets, rotation, scale, float(shift_x), float(shift_y))
    grid = geometry.build_grid(params, img.height, img.width)
    out = geometry.bilinear_sample(img, grid)
    if args.invert:
        out = out.inverted()
    save_image(out, args.outfile)
    print(f"warped {args.infile} -> {args.outfile}")
    return 0


_TRAIN_FLAG_FIELDS = [
    ("image_size", int), ("batch_size", int), ("constant_iters", int),
    ("decay_iters", int), ("checkpoint_every", int), ("channel_mult", float),
    ("lam", float), ("c_weight", float), ("m_band", float), ("n_ctrl", int),
    ("lr_gtg", float), ("lr_ttg", float),
]


def _resolve_train_config(args) -> TrainConfig:
    merged: dict = {}
    if args.desk_scale:
        merged.update(TrainConfig.DESK_PRESET)
    if args.config:
        file_cfg = json.loads(Path(args.config).read_text())
        known = {f.name for f in dataclasses.fields(TrainConfig)}
        unknown = set(file_cfg) - known
        if unknown:
            raise TrainingError(f"unknown config keys: {sorted(unknown)}")
        merged.update(file_cfg)
    for name, _ in _TRAIN_FLAG_FIELDS:
        val = getattr(args, name)
        if val is not None:
            merged[name] = val
    merged["seed"] = args.seed
    if args.no_diversity:
        merged["enable_diversity"] = False
    if args.no_stroke_weight:
        merged["enable_stroke_weight"] = False
    return TrainConfig(**merged)


def _cmd_train(args) -> int:
    cfg = _resolve_train_config(args)
    _print_config("train", dataclasses.asdict(cfg))
    sc = scan_dataset(args.sc, cfg.image_size).as_dataset()
    pc = scan_dataset(args.pc, cfg.image_size).as_dataset()
    if args.invert:
        sc.images = 1.0 - sc.images
        pc.images = 1.0 - pc.images
    state = None
    if args.resume:
        state = load_checkpoint(args.resume)
    every = max(1, cfg.total_iters // 20)

    def progress(report: LossReport) -> None:
        if report.iteration % every == 0 or report.iteration == cfg.total_iters - 1:
            print(f"iter {report.iteration}: {report.to_json_line()}", file=sys.stderr)

    state, reports = training.train(cfg, sc, pc, out_dir=args.out, state=state, progress=progress)
    print(f"trained {state.iteration} iterations; checkpoints and log in {args.out}")
    return 0


def _cmd_generate(args) -> int:
    _print_config("generate", {"ckpt": args.ckpt, "in": args.infile, "n": args.n,
                               "seed": args.seed, "out": str(args.out), "invert": args.invert})
    state = load_checkpoint(args.ckpt)
    img = load_image(args.infile)
    if args.invert:
        img = img.inverted()
    outputs = training.generate(state, img, args.n, args.seed)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for i, out in enumerate(outputs):
        if args.invert:
            out = out.inverted()
        save_image(out, out_dir / f"gen_{i:03d}.png")
    print(f"wrote {len(outputs)} samples to {args.out}")
    return 0


def _cmd_grad_check(args) -> int:
    _print_config("grad-check", {"module": args.module, "seed": args.seed})
    results, passed = checks.run_suites(args.module, seed=args.seed)
    for r in results:
        print(r.line())
    if not passed:
        print("gradient checks FAILED", file=sys.stderr)
        return 1
    print("all gradient checks passed")
    return 0


def _cmd_eval(args) -> int:
    _print_config("eval", {"real": args.real, "gen": args.gen, "bins": args.bins,
                           "seed": args.seed, "size": args.size})
    real = _load_dir_images(Path(args.real), args.size)
    gen = _load_dir_images(Path(args.gen), args.size)
    model = evaluation.fit_bins(real, args.bins, args.seed)
    ndb, jsd = evaluation.ndb_jsd(model, gen)
    diversity = evaluation.pairwise_diversity(gen) if len(gen) >= 2 else 0.0
    print(json.dumps({
        "ndb": ndb, "K": args.bins, "jsd": jsd, "diversity": diversity,
        "n_real": len(real), "n_gen": len(gen),
    }))
    return 0


def _cmd_losses(args) -> int:
    """Audit mode: replay steps from a checkpoint and confirm the logged reports."""
    _print_config("losses", {"report": args.report, "ckpt": args.ckpt, "sc": args.sc,
                             "pc": args.pc, "steps": args.steps})
    state = load_checkpoint(args.ckpt)
    cfg = state.config
    logged: dict[int, dict] = {}
    with open(args.report, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                d = json.loads(line)
                logged[int(d["iter"])] = d
    targets = sorted(i for i in logged if i >= state.iteration)[: args.steps]
    if not targets:
        raise TrainingError(
            f"log has no entries at or after checkpoint iteration {state.iteration}"
        )
    sc = scan_dataset(args.sc, cfg.image_size).as_dataset()
    pc = scan_dataset(args.pc, cfg.image_size).as_dataset()
    x_all = np.stack([sc.image(i) for i in range(len(sc))])[:, None]
    y_all = np.stack([pc.image(i) for i in range(len(pc))])[:, None]
    mismatches = []
    for target in targets:
        while state.iteration <= target:
            idx_x = state.rng.integers(0, x_all.shape[0], cfg.batch_size)
            idx_y = state.rng.integers(0, y_all.shape[0], cfg.batch_size)
            report = training.train_step(state, x_all[idx_x], y_all[idx_y])
        recomputed = report.to_dict()
        for key, want in logged[target].items():
            got = recomputed.get(key)
            if isinstance(want, float):
                ok = abs(got - want) <= 1e-9 * max(1.0, abs(want))
            else:
                ok = got == want
            if not ok:
                mismatches.append({"iter": target, "key": key, "logged": want, "recomputed": got})
    print(json.dumps({"checked_iters": targets, "mismatches": mismatches}))
    if mismatches:
        print("loss audit FAILED", file=sys.stderr)
        return 1
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="glyphforge",
        description="Unpaired glyph generation: explicit shape warps + texture transfer.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic clean/textured glyph corpus")
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--per-class", type=int, default=16)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--noise", type=float, default=0.08)
    p.add_argument("--blotches", type=float, default=3.0)
    p.add_argument("--bias", type=float, default=0.18)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("warp", help="apply one random shape warp to an image")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", dest="outfile", required=True)
    group = p.add_mutually_exclusive_group()
    group.add_argument("--tps-only", action="store_true",
                       help="local control-point warp only (identity pose)")
    group.add_argument("--affine-only", action="store_true",
                       help="global pose only (zero control offsets)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n", type=int, default=4, help="control grid side")
    p.add_argument("--invert", action="store_true", help="treat input as light-on-dark")
    p.set_defaults(func=_cmd_warp)

    p = sub.add_parser("train", help="run associate adversarial training")
    p.add_argument("--sc", required=True, help="clean glyph corpus root")
    p.add_argument("--pc", required=True, help="photographic corpus root")
    p.add_argument("--out", required=True, help="checkpoint/log directory")
    p.add_argument("--desk-scale", action="store_true")
    p.add_argument("--config", help="JSON config overlay (flags win)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--invert", action="store_true")
    p.add_argument("--no-diversity", action="store_true")
    p.add_argument("--no-stroke-weight", action="store_true")
    for name, typ in _TRAIN_FLAG_FIELDS:
        p.add_argument(f"--{name.replace('_', '-')}", type=typ, default=None, dest=name)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("generate", help="one-to-many generation from a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--invert", action="store_true")
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("grad-check", help="finite-difference verification suites")
    p.add_argument("--module", choices=("all", "losses", "geometry"), default="all")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_grad_check)

    p = sub.add_parser("eval", help="bin-mismatch and divergence metrics")
    p.add_argument("--real", required=True)
    p.add_argument("--gen", required=True)
    p.add_argument("--bins", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=64)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("losses", help="recompute and verify logged loss reports")
    p.add_argument("--report", required=True, help="JSON-lines training log")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--sc", required=True)
    p.add_argument("--pc", required=True)
    p.add_argument("--steps", type=int, default=3)
    p.set_defaults(func=_cmd_losses)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (TrainingError, DatasetError, FormatError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

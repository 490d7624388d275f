"""Command-line entry points.

Thin shell over the library: every command builds an ExperimentConfig
(flags > config file > defaults), validates it before touching data, and
delegates to pipeline operations. Exit codes: 0 success, 1 validation
error, 2 runtime failure.
"""

import argparse
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import reporting
from .backbone import load_backbone, save_backbone, train_backbone
from .config import load_config
from .data import generate_synthetic, load_folder, write_dataset
from .errors import TextdiffError
from .features import CACHE_ENV_VAR, FeatureCache
from .pipeline import (
    evaluate,
    load_segmenter,
    resolve_samples,
    run_ablation,
    run_variant,
    sweep,
)
from .schedule import build_linear_schedule
from .serialize import module_digest
from .text import HashedGaussianEncoder


class CliValidationError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliValidationError(message)


def _add_shared(p: argparse.ArgumentParser):
    p.add_argument("--config", type=str, default=None, help="YAML config file")
    p.add_argument("--out", type=str, default=None, help="output directory")
    p.add_argument("--seed", type=int, default=None, help="seed for every stochastic component")
    p.add_argument("--data", type=str, default="data", help="dataset directory")


def _add_train_flags(p: argparse.ArgumentParser):
    p.add_argument("--backbone", type=str, default="runs/backbone/backbone.pt")
    p.add_argument("--blocks", type=str, default=None, help="decoder blocks, e.g. 6,8,12,16")
    p.add_argument("--steps", type=str, default=None, help="diffusion steps, e.g. 50,150,250")
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="textdiff", description=__doc__)
    sub = p.add_subparsers(dest="cmd")

    g = sub.add_parser("gen-data", help="generate the synthetic two-shape dataset")
    _add_shared(g)
    g.add_argument("--n", type=int, default=60)
    g.add_argument("--resolution", type=int, default=64)
    g.add_argument("--train-n", type=int, default=None)

    tb = sub.add_parser("train-backbone", help="train the diffusion noise predictor")
    _add_shared(tb)
    tb.add_argument("--epochs", type=int, default=20)
    tb.add_argument("--batch-size", type=int, default=16)
    tb.add_argument("--lr", type=float, default=1e-3)

    ts = sub.add_parser("train-seg", help="train attention + classifier on frozen features")
    _add_shared(ts)
    _add_train_flags(ts)
    ts.add_argument("--variant", type=str, default="full", choices=["full", "zeta1", "zeta2"])

    ev = sub.add_parser("eval", help="evaluate a trained run on the test split")
    _add_shared(ev)
    ev.add_argument("--run", type=str, default="runs/seg-full")
    ev.add_argument("--backbone", type=str, default="runs/backbone/backbone.pt")

    ab = sub.add_parser("ablate", help="run full/zeta1/zeta2 and emit a combined table")
    _add_shared(ab)
    _add_train_flags(ab)
    ab.add_argument("--variants", type=str, default="full,zeta1,zeta2")

    sw = sub.add_parser("sweep", help="train/evaluate a grid of block and step selections")
    _add_shared(sw)
    _add_train_flags(sw)
    sw.add_argument("--jobs", type=int, default=1)
    sw.set_defaults(variant="full")

    rp = sub.add_parser("report", help="aggregate runs into a table and figures")
    rp.add_argument("run_dirs", nargs="+")
    rp.add_argument("--out", type=str, default="report")

    return p


def _parse_int_csv(raw: str, flag: str):
    try:
        vals = tuple(int(x) for x in raw.split(",") if x.strip())
    except ValueError as e:
        raise CliValidationError(f"{flag}: expected comma-separated integers, got {raw!r}") from e
    if not vals:
        raise CliValidationError(f"{flag}: empty list")
    return vals


def _parse_set_options(raw: str, flag: str):
    sets = [s for s in raw.split(";") if s.strip()]
    if not sets:
        raise CliValidationError(f"{flag}: empty list")
    return [_parse_int_csv(s, flag) for s in sets]


def _require_dir(path: str, flag: str) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise CliValidationError(f"{flag}: directory not found: {path}")
    return p


def _require_file(path: str, flag: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise CliValidationError(f"{flag}: file not found: {path}")
    return p


def _seed_overrides(seed):
    if seed is None:
        return {}
    return {
        "diffusion": {"seed": seed},
        "train": {"seed": seed},
        "text": {"seed": seed},
        "data": {"split_seed": seed},
    }


def _merge_overrides(*parts):
    out = {}
    for part in parts:
        for section, vals in part.items():
            out.setdefault(section, {}).update(vals)
    return out


def _build_config(args, require_data=True):
    overrides = _seed_overrides(args.seed)
    train_over, sel_over = {}, {}
    if getattr(args, "lr", None) is not None:
        train_over["lr"] = args.lr
    if getattr(args, "epochs", None) is not None:
        train_over["epochs"] = args.epochs
    if getattr(args, "batch_size", None) is not None:
        train_over["batch_size"] = args.batch_size
    if getattr(args, "variant", None) is not None:
        train_over["variant"] = args.variant
    if getattr(args, "blocks", None) is not None:
        sel_over["blocks"] = list(_parse_int_csv(args.blocks, "--blocks"))
    if getattr(args, "steps", None) is not None and ";" not in str(args.steps):
        sel_over["steps"] = list(_parse_int_csv(args.steps, "--steps"))
    data_over = {}
    if require_data:
        _require_dir(args.data, "--data")
        data_over["root"] = str(args.data)
    config_path = None
    if args.config is not None:
        config_path = _require_file(args.config, "--config")
    merged = _merge_overrides(
        overrides,
        {"train": train_over} if train_over else {},
        {"selection": sel_over} if sel_over else {},
        {"data": data_over} if data_over else {},
    )
    try:
        return load_config(config_path, merged)
    except TextdiffError as e:
        raise CliValidationError(str(e)) from e


def _load_backbone_for(args, cfg):
    path = _require_file(args.backbone, "--backbone")
    try:
        backbone, bcfg, sched = load_backbone(path)
    except TextdiffError as e:
        raise CliValidationError(f"--backbone: {e}") from e
    # the checkpoint defines extraction semantics; adopt its diffusion section
    return replace(cfg, diffusion=bcfg), backbone, sched


def _cache_for(out_dir) -> FeatureCache:
    root = os.environ.get(CACHE_ENV_VAR) or (Path(out_dir) / "cache")
    return FeatureCache(root)


def cmd_gen_data(args) -> int:
    if args.n < 2:
        raise CliValidationError(f"--n: need at least 2 samples, got {args.n}")
    if args.train_n is not None and not (0 < args.train_n < args.n):
        raise CliValidationError(f"--train-n: must be in (0, {args.n})")
    out = Path(args.out or args.data)
    seed = 0 if args.seed is None else args.seed
    manifest, samples = generate_synthetic(
        args.n, resolution=args.resolution, seed=seed, train_n=args.train_n
    )
    write_dataset(out, manifest, samples)
    print(
        f"wrote {len(samples)} samples ({len(manifest.train_ids)} train / "
        f"{len(manifest.test_ids)} test) to {out}"
    )
    return 0


def cmd_train_backbone(args) -> int:
    cfg = _build_config(args)
    out = Path(args.out or "runs/backbone")
    manifest, samples = load_folder(cfg.data.root, resolution=cfg.diffusion.image_size)
    ids = manifest.train_ids or manifest.all_ids
    images = [samples[i].image for i in ids]
    sched = build_linear_schedule(cfg.diffusion)
    out.mkdir(parents=True, exist_ok=True)
    model, trace = train_backbone(
        images,
        cfg.diffusion,
        epochs=args.epochs,
        batch_size=args.batch_size,
        lr=args.lr,
        sched=sched,
        log=lambda e, l: print(f"epoch {e}: eps-mse {l:.4f}"),
    )
    save_backbone(out / "backbone.pt", model, sched)
    with open(out / "losses.csv", "w") as f:
        f.write("epoch,mean_loss\n")
        for i, v in enumerate(trace, start=1):
            f.write(f"{i},{v:.6f}\n")
    print(f"backbone saved to {out / 'backbone.pt'} (final eps-mse {trace[-1]:.4f})")
    return 0


def cmd_train_seg(args) -> int:
    cfg = _build_config(args)
    cfg, backbone, sched = _load_backbone_for(args, cfg)
    out = Path(args.out or f"runs/seg-{cfg.train.variant}")
    encoder = HashedGaussianEncoder(d_text=cfg.text.d_text, seed=cfg.text.seed)
    train_samples, test_samples = resolve_samples(cfg)
    cache = _cache_for(out)
    record = run_variant(
        cfg,
        backbone,
        sched,
        encoder,
        train_samples,
        test_samples,
        out,
        cache=cache,
        log=lambda e, l: print(f"epoch {e}: loss {l:.4f}"),
    )
    if record.dice_pct is not None:
        print(f"run {out}: Dice {record.dice_pct:.2f} / IoU {record.iou_pct:.2f}")
    else:
        print(f"run {out}: trained (no test split evaluated)")
    return 0


def cmd_eval(args) -> int:
    run_dir = _require_dir(args.run, "--run")
    cfg = _build_config(args)
    cfg, backbone, sched = _load_backbone_for(args, cfg)
    try:
        segmenter = load_segmenter(run_dir)
    except TextdiffError as e:
        raise CliValidationError(f"--run: {e}") from e
    if module_digest(backbone) != segmenter.backbone_digest:
        raise CliValidationError("--backbone: checkpoint differs from the one used in training")
    encoder = HashedGaussianEncoder(d_text=segmenter.d_text, seed=cfg.text.seed)
    _, test_samples = resolve_samples(cfg)
    out = Path(args.out or run_dir)
    cache = _cache_for(out)
    _, mean_dice, mean_iou = evaluate(
        test_samples,
        segmenter,
        backbone,
        sched,
        encoder,
        cache=cache,
        seed=cfg.train.seed,
        out_csv=out / "metrics.csv",
    )
    print(f"Dice {mean_dice:.2f} / IoU {mean_iou:.2f} -> {out / 'metrics.csv'}")
    return 0


def cmd_ablate(args) -> int:
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    for v in variants:
        if v not in ("full", "zeta1", "zeta2"):
            raise CliValidationError(f"--variants: unknown variant {v!r}")
    cfg = _build_config(args)
    cfg, backbone, sched = _load_backbone_for(args, cfg)
    out = Path(args.out or "ablation")
    encoder = HashedGaussianEncoder(d_text=cfg.text.d_text, seed=cfg.text.seed)
    train_samples, test_samples = resolve_samples(cfg)
    cache = _cache_for(out)
    records = run_ablation(
        cfg,
        backbone,
        sched,
        encoder,
        train_samples,
        test_samples,
        out,
        variants=variants,
        cache=cache,
    )
    for rec in records:
        print(f"{rec.variant}: Dice {rec.dice_pct:.2f} / IoU {rec.iou_pct:.2f}")
    print(f"combined table: {out / 'ablation.csv'}")
    return 0


def cmd_sweep(args) -> int:
    if args.blocks is None:
        raise CliValidationError("--blocks: required (semicolon-separated sets, e.g. '6,8;12,16')")
    if args.steps is None:
        raise CliValidationError("--steps: required (e.g. '50,150,250')")
    block_options = _parse_set_options(args.blocks, "--blocks")
    if ";" in args.steps:
        step_options = _parse_set_options(args.steps, "--steps")
    else:
        step_options = [(s,) for s in _parse_int_csv(args.steps, "--steps")]
    if args.jobs < 1:
        raise CliValidationError(f"--jobs: must be >= 1, got {args.jobs}")
    args.blocks = None  # selection comes from the sweep grid, not the shared flag
    args.steps = None
    cfg = _build_config(args)
    cfg, backbone, sched = _load_backbone_for(args, cfg)
    backbone_path = Path(args.backbone)
    out = Path(args.out or "sweep")
    cache_root = os.environ.get(CACHE_ENV_VAR) or (out / "cache")
    result = sweep(
        cfg,
        backbone_path,
        block_options,
        step_options,
        out,
        jobs=args.jobs,
        cache_dir=cache_root,
    )
    reporting.render_sweep_plot(out, out / "plots")
    print(f"sweep grid of {len(result['grid'])} cells -> {out / 'sweep.csv'}")
    return 0


def cmd_report(args) -> int:
    for d in args.run_dirs:
        _require_dir(d, "run_dirs")
    artifacts = reporting.report(args.run_dirs, args.out)
    print(f"report written to {artifacts['report']}")
    return 0


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-backbone": cmd_train_backbone,
    "train-seg": cmd_train_seg,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "sweep": cmd_sweep,
    "report": cmd_report,
}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.cmd is None:
            parser.print_help()
            return 1
        return _COMMANDS[args.cmd](args)
    except CliValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except TextdiffError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()

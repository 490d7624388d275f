"""End-to-end training and evaluation orchestration.

The backbone and text encoder stay frozen (checksummed before and after
every run); only the cross-modal attention and the pixel classifier train.
Variants: ``full`` fuses text via attention, ``zeta1`` drops text entirely,
``zeta2`` keeps text but replaces attention with mean-pooled broadcast
concatenation.
"""

import copy
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .backbone import UNetNoisePredictor, load_backbone
from .config import ExperimentConfig, config_from_mapping, snapshot_config
from .data import SegmentationSample, load_folder, split
from .errors import (
    ConfigError,
    EmptyDatasetError,
    FrozenViolationError,
    SelectionMismatchError,
    UnknownVariantError,
)
from .features import (
    BlockSelection,
    FeatureCache,
    FeatureNormalizer,
    PixelFeatureSet,
    assemble_pixel_vectors,
    extract,
)
from .fusion import CrossModalAttention, init_params, load_fusion, save_fusion
from .heads import (
    MaskPair,
    PixelClassifier,
    classify,
    dice_metric,
    iou_metric,
    predict_mask,
    seg_loss,
    write_metrics_csv,
)
from .schedule import VarianceSchedule
from .seeding import derive_seed, numpy_rng, torch_generator
from .serialize import module_digest
from .text import TextEncoder
from .heads import read_metrics_csv  # noqa: F401  (re-exported for reporting)

CLASSIFIER_MAGIC = "textdiff.classifier"
CLASSIFIER_VERSION = 1


@dataclass
class ExperimentRecord:
    variant: str
    config: dict
    loss_trace: List[float]
    dice_pct: Optional[float] = None
    iou_pct: Optional[float] = None
    wall_time_s: float = 0.0
    total_params: int = 0
    trainable_params: int = 0
    run_dir: Optional[str] = None

    def to_json(self) -> str:
        d = dict(self.__dict__)
        return json.dumps(d, indent=2, default=str)


@dataclass
class TrainedSegmenter:
    """Everything needed to reproduce predictions: the trainable parts plus bindings."""

    variant: str
    selection: BlockSelection
    attention: Optional[CrossModalAttention]
    classifier: PixelClassifier
    include_visual: bool
    d_text: int
    backbone_digest: str
    text_digest: str
    normalizer: Optional[FeatureNormalizer] = None


def sample_to_tensor(sample: SegmentationSample) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(sample.image)).permute(2, 0, 1).contiguous()


def get_features(
    sample: SegmentationSample,
    backbone: UNetNoisePredictor,
    sched: VarianceSchedule,
    sel: BlockSelection,
    seed: int,
    cache: Optional[FeatureCache] = None,
    backbone_digest: Optional[str] = None,
    epoch: Optional[int] = None,
) -> PixelFeatureSet:
    """Extract (or fetch cached) features for one sample.

    The noise stream is derived from (seed, image id[, epoch]), so caching
    never shifts any other random stream.
    """
    digest = backbone_digest or module_digest(backbone)
    if cache is not None and epoch is None:
        hit = cache.get(sample.image_id, sel, digest)
        if hit is not None:
            return hit
    labels = ["extract", sample.image_id] + ([f"epoch{epoch}"] if epoch is not None else [])
    rng = torch_generator(derive_seed(seed, *labels))
    fs = extract(sample_to_tensor(sample), backbone, sel, sched, rng)
    if cache is not None and epoch is None:
        cache.put(sample.image_id, sel, digest, fs)
    return fs


def visual_dim_of(backbone: UNetNoisePredictor, sel: BlockSelection) -> int:
    registry = backbone.block_registry
    return len(sel.steps) * sum(registry[z][0] for z in sel.blocks)


def classifier_input_dim(cfg: ExperimentConfig, backbone: UNetNoisePredictor) -> int:
    sel = cfg.selection
    vis = visual_dim_of(backbone, sel)
    n_maps = len(sel.blocks) * len(sel.steps)
    variant = cfg.train.variant
    if variant == "zeta1":
        return vis
    if variant == "zeta2":
        return vis + cfg.text.d_text
    if variant == "full":
        att = n_maps * cfg.fusion.d_v
        return att + vis if cfg.fusion.include_visual else att
    raise UnknownVariantError(f"unknown variant {variant!r}")


def build_classifier_input(
    variant: str,
    fs: PixelFeatureSet,
    text_emb,
    attention: Optional[CrossModalAttention],
    include_visual: bool,
    assembled: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    if assembled is None:
        assembled = assemble_pixel_vectors(fs)
    if variant == "zeta1":
        return assembled
    if variant == "zeta2":
        pooled = torch.from_numpy(np.array(text_emb.matrix)).to(assembled.dtype).mean(dim=0)
        # rescale to roughly unit-variance entries so the text channels are
        # not dwarfed by the standardized visual features
        pooled = pooled / pooled.norm().clamp_min(1e-12) * math.sqrt(pooled.numel())
        h, w, _ = assembled.shape
        return torch.cat([assembled, pooled.expand(h, w, -1)], dim=-1)
    if variant == "full":
        fused = attention.fuse(fs, text_emb).concatenated
        return torch.cat([fused, assembled], dim=-1) if include_visual else fused
    raise UnknownVariantError(f"unknown variant {variant!r}")


def count_params(
    backbone: UNetNoisePredictor,
    attention: Optional[CrossModalAttention],
    classifier: Optional[PixelClassifier],
) -> Tuple[int, int]:
    """(total, trainable) exact parameter counts across all components."""
    total, trainable = 0, 0
    for module in (backbone, attention, classifier):
        if module is None:
            continue
        for p in module.parameters():
            total += p.numel()
            if p.requires_grad:
                trainable += p.numel()
    return total, trainable


def train_segmenter(
    train_samples: Sequence[SegmentationSample],
    cfg: ExperimentConfig,
    backbone: UNetNoisePredictor,
    sched: VarianceSchedule,
    text_encoder: TextEncoder,
    cache: Optional[FeatureCache] = None,
    log=None,
) -> Tuple[TrainedSegmenter, ExperimentRecord]:
    """Optimize Dice+CE over the attention and classifier only.

    The backbone and text encoder are frozen; their parameter checksums are
    asserted identical before and after. Keeps the best epoch by mean train
    loss. Deterministic given cfg.train.seed.
    """
    train_samples = list(train_samples)
    if not train_samples:
        raise EmptyDatasetError("segmentation training requires a nonempty dataset")
    variant = cfg.train.variant
    if variant not in ("full", "zeta1", "zeta2"):
        raise UnknownVariantError(f"unknown variant {variant!r}")
    sel = cfg.selection
    sel.validate_against(backbone, sched)
    t0 = time.perf_counter()

    backbone.eval()
    backbone.requires_grad_(False)
    pre_backbone = module_digest(backbone)
    pre_text = text_encoder.state_digest()

    seed = cfg.train.seed
    resample = cfg.train.resample_features

    text_embs = {s.image_id: text_encoder.encode(s.text) for s in train_samples}

    def fetch_raw(sample, epoch=None):
        return get_features(
            sample, backbone, sched, sel, seed, cache, pre_backbone,
            epoch=epoch if resample else None,
        )

    raw_sets = {s.image_id: fetch_raw(s, epoch=0) for s in train_samples}
    normalizer = None
    if cfg.train.normalize_features:
        normalizer = FeatureNormalizer.fit(
            sel, [assemble_pixel_vectors(fs) for fs in raw_sets.values()]
        )

    def prepare(raw: PixelFeatureSet):
        if normalizer is None:
            return raw, assemble_pixel_vectors(raw)
        fs_n = normalizer.apply_native(raw)
        return fs_n, assemble_pixel_vectors(fs_n)

    feature_sets: Dict[str, PixelFeatureSet] = {}
    assembled: Dict[str, torch.Tensor] = {}
    for image_id, raw in raw_sets.items():
        feature_sets[image_id], assembled[image_id] = prepare(raw)

    attention = None
    if variant == "full":
        registry = backbone.block_registry
        scale_channels = {z: registry[z][0] for z in sel.blocks}
        attention = init_params(
            scale_channels,
            d=cfg.fusion.d,
            d_v=cfg.fusion.d_v,
            d_text=cfg.text.d_text,
            seed=derive_seed(seed, "fusion"),
            steps=sel.steps if cfg.fusion.per_step_params else None,
        )
    classifier = PixelClassifier(classifier_input_dim(cfg, backbone))
    classifier.reset_parameters(derive_seed(seed, "head"))

    trainable = list(classifier.parameters())
    if attention is not None:
        trainable += list(attention.parameters())
    opt = torch.optim.Adam(trainable, lr=cfg.train.lr, weight_decay=cfg.train.weight_decay)
    order_rng = numpy_rng(derive_seed(seed, "seg-order"))

    # constant inputs can be precomputed once for the attention-free variants
    static_inputs: Dict[str, torch.Tensor] = {}
    if variant in ("zeta1", "zeta2") and not resample:
        for s in train_samples:
            static_inputs[s.image_id] = build_classifier_input(
                variant, feature_sets[s.image_id], text_embs[s.image_id], None, False,
                assembled=assembled[s.image_id],
            )

    masks = {s.image_id: torch.from_numpy(s.mask.astype(np.int64)) for s in train_samples}
    n = len(train_samples)
    trace: List[float] = []
    best_loss = float("inf")
    best_state = None

    for epoch in range(cfg.train.epochs):
        if resample and epoch > 0:
            for s in train_samples:
                feature_sets[s.image_id], assembled[s.image_id] = prepare(fetch_raw(s, epoch))
        perm = order_rng.permutation(n)
        losses = []
        for start in range(0, n, cfg.train.batch_size):
            batch = [train_samples[i] for i in perm[start : start + cfg.train.batch_size]]
            batch_losses = []
            for s in batch:
                feats = static_inputs.get(s.image_id)
                if feats is None:
                    feats = build_classifier_input(
                        variant,
                        feature_sets[s.image_id],
                        text_embs[s.image_id],
                        attention,
                        cfg.fusion.include_visual,
                        assembled=assembled[s.image_id],
                    )
                logits = classify(feats, classifier)
                batch_losses.append(seg_loss(logits, masks[s.image_id]))
            loss = torch.stack(batch_losses).mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
        trace.append(float(np.mean(losses)))
        if log is not None:
            log(epoch + 1, trace[-1])
        if trace[-1] < best_loss:
            best_loss = trace[-1]
            best_state = (
                copy.deepcopy(classifier.state_dict()),
                copy.deepcopy(attention.state_dict()) if attention is not None else None,
            )

    if best_state is not None:
        classifier.load_state_dict(best_state[0])
        if attention is not None:
            attention.load_state_dict(best_state[1])

    if module_digest(backbone) != pre_backbone:
        raise FrozenViolationError("backbone parameters changed during segmentation training")
    if text_encoder.state_digest() != pre_text:
        raise FrozenViolationError("text encoder state changed during segmentation training")

    total, trainable_n = count_params(backbone, attention, classifier)
    segmenter = TrainedSegmenter(
        variant=variant,
        selection=sel,
        attention=attention,
        classifier=classifier,
        include_visual=cfg.fusion.include_visual,
        d_text=cfg.text.d_text,
        backbone_digest=pre_backbone,
        text_digest=pre_text,
        normalizer=normalizer,
    )
    record = ExperimentRecord(
        variant=variant,
        config=cfg.to_mapping(),
        loss_trace=trace,
        wall_time_s=time.perf_counter() - t0,
        total_params=total,
        trainable_params=trainable_n,
    )
    return segmenter, record


@torch.no_grad()
def evaluate(
    test_samples: Sequence[SegmentationSample],
    segmenter: TrainedSegmenter,
    backbone: UNetNoisePredictor,
    sched: VarianceSchedule,
    text_encoder: TextEncoder,
    cache: Optional[FeatureCache] = None,
    seed: int = 0,
    out_csv=None,
    selection: Optional[BlockSelection] = None,
):
    """Per-image and mean Dice/IoU on a test set; optionally writes metrics.csv."""
    test_samples = list(test_samples)
    if not test_samples:
        raise EmptyDatasetError("evaluation requires a nonempty dataset")
    if selection is not None and selection != segmenter.selection:
        raise SelectionMismatchError(
            f"evaluation selection {selection} != training selection {segmenter.selection}"
        )
    if module_digest(backbone) != segmenter.backbone_digest:
        raise SelectionMismatchError("backbone differs from the one used in training")
    sel = segmenter.selection
    digest = segmenter.backbone_digest

    rows = []
    for s in test_samples:
        fs = get_features(s, backbone, sched, sel, seed, cache, digest)
        assembled = None
        if segmenter.normalizer is not None:
            fs = segmenter.normalizer.apply_native(fs)
            assembled = assemble_pixel_vectors(fs)
        emb = text_encoder.encode(s.text)
        feats = build_classifier_input(
            segmenter.variant, fs, emb, segmenter.attention, segmenter.include_visual,
            assembled=assembled,
        )
        logits = classify(feats, segmenter.classifier)
        pred = predict_mask(logits)
        mp = MaskPair(pred=pred, gt=s.mask)
        rows.append((s.image_id, dice_metric(mp), iou_metric(mp)))

    mean_dice = float(np.mean([r[1] for r in rows]))
    mean_iou = float(np.mean([r[2] for r in rows]))
    if out_csv is not None:
        write_metrics_csv(out_csv, rows)
    return rows, mean_dice, mean_iou


def save_segmenter(run_dir, segmenter: TrainedSegmenter):
    ckpt_dir = Path(run_dir) / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    clf = segmenter.classifier
    hidden = clf.net[0].out_features
    payload = {
        "magic": CLASSIFIER_MAGIC,
        "version": CLASSIFIER_VERSION,
        "variant": segmenter.variant,
        "in_dim": clf.in_dim,
        "hidden": hidden,
        "include_visual": segmenter.include_visual,
        "d_text": segmenter.d_text,
        "blocks": list(segmenter.selection.blocks),
        "steps": list(segmenter.selection.steps),
        "backbone_digest": segmenter.backbone_digest,
        "text_digest": segmenter.text_digest,
        "state_dict": clf.state_dict(),
    }
    if segmenter.normalizer is not None:
        payload["feat_mean"] = segmenter.normalizer.mean
        payload["feat_std"] = segmenter.normalizer.std
    torch.save(payload, ckpt_dir / "classifier.pt")
    if segmenter.attention is not None:
        save_fusion(ckpt_dir / "fusion.pt", segmenter.attention, segmenter.selection)


def load_segmenter(run_dir) -> TrainedSegmenter:
    ckpt_dir = Path(run_dir) / "checkpoints"
    path = ckpt_dir / "classifier.pt"
    if not path.exists():
        raise ConfigError(f"no classifier checkpoint under {ckpt_dir}")
    payload = torch.load(path, weights_only=True)
    if payload.get("magic") != CLASSIFIER_MAGIC or payload.get("version") != CLASSIFIER_VERSION:
        raise ConfigError(f"{path} is not a supported classifier checkpoint")
    clf = PixelClassifier(payload["in_dim"], hidden=payload["hidden"])
    clf.load_state_dict(payload["state_dict"])
    selection = BlockSelection(tuple(payload["blocks"]), tuple(payload["steps"]))
    attention = None
    fusion_path = ckpt_dir / "fusion.pt"
    if fusion_path.exists():
        attention, fsel = load_fusion(fusion_path)
        if fsel != selection:
            raise SelectionMismatchError("fusion checkpoint selection differs from classifier's")
    normalizer = None
    if "feat_mean" in payload:
        normalizer = FeatureNormalizer(selection, payload["feat_mean"], payload["feat_std"])
    return TrainedSegmenter(
        variant=payload["variant"],
        selection=selection,
        attention=attention,
        classifier=clf,
        include_visual=payload["include_visual"],
        d_text=payload["d_text"],
        backbone_digest=payload["backbone_digest"],
        text_digest=payload["text_digest"],
        normalizer=normalizer,
    )


def resolve_samples(cfg: ExperimentConfig):
    """Load the configured dataset and return (train, test) sample lists."""
    if not cfg.data.root:
        raise ConfigError("data.root is not set")
    manifest, samples = load_folder(cfg.data.root, resolution=cfg.diffusion.image_size)
    if cfg.data.train_n:
        train_m, test_m = split(manifest, cfg.data.train_n, cfg.data.split_seed)
        train_ids, test_ids = train_m.train_ids, test_m.test_ids
    else:
        train_ids, test_ids = manifest.train_ids, manifest.test_ids
    return [samples[i] for i in train_ids], [samples[i] for i in test_ids]


def run_variant(
    cfg: ExperimentConfig,
    backbone: UNetNoisePredictor,
    sched: VarianceSchedule,
    text_encoder: TextEncoder,
    train_samples,
    test_samples,
    run_dir,
    cache: Optional[FeatureCache] = None,
    log=None,
) -> ExperimentRecord:
    """Train one variant, evaluate it, and write all run artifacts."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    snapshot_config(cfg, run_dir / "config.snapshot")

    segmenter, record = train_segmenter(
        train_samples, cfg, backbone, sched, text_encoder, cache=cache, log=log
    )
    with open(run_dir / "losses.csv", "w", newline="") as f:
        f.write("epoch,mean_loss\n")
        for i, v in enumerate(record.loss_trace, start=1):
            f.write(f"{i},{v:.6f}\n")
    save_segmenter(run_dir, segmenter)

    if test_samples:
        _, mean_dice, mean_iou = evaluate(
            test_samples,
            segmenter,
            backbone,
            sched,
            text_encoder,
            cache=cache,
            seed=cfg.train.seed,
            out_csv=run_dir / "metrics.csv",
        )
        record.dice_pct = round(mean_dice, 2)
        record.iou_pct = round(mean_iou, 2)
    record.run_dir = str(run_dir)
    (run_dir / "record.json").write_text(record.to_json() + "\n")
    return record


def run_ablation(
    cfg: ExperimentConfig,
    backbone: UNetNoisePredictor,
    sched: VarianceSchedule,
    text_encoder: TextEncoder,
    train_samples,
    test_samples,
    out_dir,
    variants: Sequence[str] = ("full", "zeta1", "zeta2"),
    cache: Optional[FeatureCache] = None,
    log=None,
) -> List[ExperimentRecord]:
    """Run the requested variants and write a combined ablation table."""
    from dataclasses import replace

    out_dir = Path(out_dir)
    records = []
    for variant in variants:
        if variant not in ("full", "zeta1", "zeta2"):
            raise UnknownVariantError(f"unknown variant {variant!r}")
        vcfg = replace(cfg, train=replace(cfg.train, variant=variant))
        rec = run_variant(
            vcfg,
            backbone,
            sched,
            text_encoder,
            train_samples,
            test_samples,
            out_dir / "runs" / variant,
            cache=cache,
            log=log,
        )
        records.append(rec)

    uses = {
        "full": ("yes", "yes"),
        "zeta2": ("yes", "no"),
        "zeta1": ("no", "no"),
    }
    with open(out_dir / "ablation.csv", "w", newline="") as f:
        f.write("variant,uses_text,uses_cross_attention,dice_pct,iou_pct\n")
        for rec in records:
            text_flag, att_flag = uses[rec.variant]
            f.write(
                f"{rec.variant},{text_flag},{att_flag},"
                f"{rec.dice_pct:.2f},{rec.iou_pct:.2f}\n"
            )
    return records


def _format_int_set(values) -> str:
    return ",".join(str(v) for v in values)


def _sweep_cell(payload: dict) -> dict:
    """Run one sweep cell in an isolated output directory (worker-safe)."""
    if payload.get("limit_threads"):
        torch.set_num_threads(1)
    cfg = config_from_mapping(payload["config"])
    backbone, _, sched = load_backbone(payload["backbone_path"])
    from .text import HashedGaussianEncoder

    encoder = HashedGaussianEncoder(d_text=cfg.text.d_text, seed=cfg.text.seed)
    train_samples, test_samples = resolve_samples(cfg)
    cache = FeatureCache(payload.get("cache_dir"))
    rec = run_variant(
        cfg,
        backbone,
        sched,
        encoder,
        train_samples,
        test_samples,
        payload["run_dir"],
        cache=cache,
    )
    return {
        "blocks": list(cfg.selection.blocks),
        "steps": list(cfg.selection.steps),
        "dice_pct": rec.dice_pct,
        "iou_pct": rec.iou_pct,
        "run_dir": payload["run_dir"],
    }


def sweep(
    cfg: ExperimentConfig,
    backbone_path,
    block_options: Sequence[Sequence[int]],
    step_options: Sequence[Sequence[int]],
    out_dir,
    jobs: int = 1,
    cache_dir=None,
) -> dict:
    """Train and evaluate one run per (block set, step set) cell plus marginals.

    Emits sweep.csv over the grid, and per-single-step / per-single-block
    marginal tables: each step marginal trains with the first block option
    and that single step; each block marginal trains with that single block
    and the first step option. Marginals reuse grid cells when the
    configuration coincides.
    """
    from dataclasses import replace

    if not block_options or not step_options:
        raise ConfigError("sweep needs at least one block option and one step option")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    def cell_key(blocks, steps):
        return (tuple(int(b) for b in blocks), tuple(int(s) for s in steps))

    grid = [cell_key(b, s) for b in block_options for s in step_options]
    step_union = sorted({int(s) for opt in step_options for s in opt})
    block_union = sorted({int(b) for opt in block_options for b in opt})
    ref_blocks = tuple(int(b) for b in block_options[0])
    ref_steps = tuple(int(s) for s in step_options[0])
    step_marginal_cells = {s: cell_key(ref_blocks, (s,)) for s in step_union}
    block_marginal_cells = {b: cell_key((b,), ref_steps) for b in block_union}

    all_cells: List[Tuple[Tuple[int, ...], Tuple[int, ...]]] = []
    for c in grid + list(step_marginal_cells.values()) + list(block_marginal_cells.values()):
        if c not in all_cells:
            all_cells.append(c)

    payloads = []
    for blocks, steps in all_cells:
        sel = BlockSelection(blocks, steps)
        ccfg = replace(cfg, selection=sel)
        payloads.append(
            {
                "config": ccfg.to_mapping(),
                "backbone_path": str(backbone_path),
                "run_dir": str(out_dir / "runs" / f"cell-{sel.key()}"),
                "cache_dir": str(cache_dir) if cache_dir else None,
                "limit_threads": jobs > 1,
            }
        )

    if jobs > 1:
        import multiprocessing as mp

        with ProcessPoolExecutor(max_workers=jobs, mp_context=mp.get_context("spawn")) as ex:
            results = list(ex.map(_sweep_cell, payloads))
    else:
        results = [_sweep_cell(p) for p in payloads]

    by_cell = {cell_key(r["blocks"], r["steps"]): r for r in results}

    with open(out_dir / "sweep.csv", "w", newline="") as f:
        import csv as _csv

        w = _csv.writer(f)
        w.writerow(["blocks", "steps", "dice_pct", "iou_pct"])
        for cell in grid:
            r = by_cell[cell]
            w.writerow(
                [
                    _format_int_set(cell[0]),
                    _format_int_set(cell[1]),
                    f"{r['dice_pct']:.2f}",
                    f"{r['iou_pct']:.2f}",
                ]
            )
    with open(out_dir / "step_marginal.csv", "w", newline="") as f:
        f.write("step,dice_pct,iou_pct\n")
        for s in step_union:
            r = by_cell[step_marginal_cells[s]]
            f.write(f"{s},{r['dice_pct']:.2f},{r['iou_pct']:.2f}\n")
    with open(out_dir / "block_marginal.csv", "w", newline="") as f:
        f.write("block,dice_pct,iou_pct\n")
        for b in block_union:
            r = by_cell[block_marginal_cells[b]]
            f.write(f"{b},{r['dice_pct']:.2f},{r['iou_pct']:.2f}\n")

    return {
        "grid": [(c, by_cell[c]["dice_pct"], by_cell[c]["iou_pct"]) for c in grid],
        "step_marginal": {s: by_cell[step_marginal_cells[s]]["dice_pct"] for s in step_union},
        "block_marginal": {b: by_cell[block_marginal_cells[b]]["dice_pct"] for b in block_union},
        "out_dir": str(out_dir),
    }

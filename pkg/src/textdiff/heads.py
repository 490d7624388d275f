"""Per-pixel classifier, segmentation losses, and overlap metrics."""

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, RangeViolationError, ShapeMismatchError
from .seeding import derive_seed

DICE_SMOOTH = 1.0


class PixelClassifier(nn.Module):
    """Two-layer MLP applied independently at every pixel."""

    def __init__(self, in_dim: int, hidden: int = 128):
        super().__init__()
        if in_dim < 1 or hidden < 1:
            raise ConfigError("classifier dims must be positive")
        self.in_dim = in_dim
        self.net = nn.Sequential(nn.Linear(in_dim, hidden), nn.ReLU(), nn.Linear(hidden, 2))

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        return self.net(features)

    def reset_parameters(self, seed: int):
        torch.manual_seed(derive_seed(seed, "classifier-init"))
        for m in self.net:
            if isinstance(m, nn.Linear):
                m.reset_parameters()


def classify(features: torch.Tensor, clf: PixelClassifier) -> torch.Tensor:
    """Per-pixel logits for an (H, W, D) feature tensor."""
    if features.dim() != 3 or features.shape[-1] != clf.in_dim:
        raise ShapeMismatchError(
            f"features {tuple(features.shape)} incompatible with classifier input dim {clf.in_dim}"
        )
    return clf(features)


def predict_mask(logits: torch.Tensor) -> np.ndarray:
    """Argmax over classes; ties go to background."""
    if logits.shape[-1] != 2:
        raise ShapeMismatchError(f"expected trailing class dim 2, got {tuple(logits.shape)}")
    fg = (logits[..., 1] > logits[..., 0]).to(torch.uint8)
    return fg.detach().cpu().numpy()


def _as_target(gt, like: torch.Tensor) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(gt)) if not isinstance(gt, torch.Tensor) else gt
    return t.to(device=like.device)


def dice_loss(probs: torch.Tensor, gt, smooth: float = DICE_SMOOTH) -> torch.Tensor:
    """Soft Dice loss on foreground probabilities: 1 - (2*sum(p*g)+s)/(sum(p)+sum(g)+s)."""
    pmin, pmax = float(probs.detach().min()), float(probs.detach().max())
    if pmin < 0.0 or pmax > 1.0:
        raise RangeViolationError(f"probabilities outside [0,1]: min={pmin}, max={pmax}")
    g = _as_target(gt, probs).to(probs.dtype)
    if g.shape != probs.shape:
        raise ShapeMismatchError(f"gt shape {tuple(g.shape)} != probs shape {tuple(probs.shape)}")
    inter = (probs * g).sum()
    return 1.0 - (2.0 * inter + smooth) / (probs.sum() + g.sum() + smooth)


def ce_loss(logits: torch.Tensor, gt) -> torch.Tensor:
    """Mean per-pixel cross entropy of (H, W, 2) logits against a binary mask."""
    if not torch.isfinite(logits).all():
        raise RangeViolationError("logits must be finite")
    g = _as_target(gt, logits).long()
    if g.shape != logits.shape[:-1]:
        raise ShapeMismatchError(f"gt shape {tuple(g.shape)} != logits spatial shape")
    return F.cross_entropy(logits.reshape(-1, 2), g.reshape(-1))


def seg_loss(logits: torch.Tensor, gt) -> torch.Tensor:
    """Training objective: Dice loss plus cross entropy, weighted 1:1."""
    probs = torch.softmax(logits, dim=-1)[..., 1]
    return dice_loss(probs, gt) + ce_loss(logits, gt)


@dataclass(frozen=True)
class MaskPair:
    """A predicted and a ground-truth binary mask of identical shape."""

    pred: np.ndarray
    gt: np.ndarray

    def __post_init__(self):
        p, g = np.asarray(self.pred), np.asarray(self.gt)
        if p.shape != g.shape:
            raise ShapeMismatchError(f"pred shape {p.shape} != gt shape {g.shape}")
        for name, m in (("pred", p), ("gt", g)):
            if not np.isin(m, (0, 1)).all():
                raise ConfigError(f"{name} mask must be binary (0/1)")
        object.__setattr__(self, "pred", p.astype(np.uint8))
        object.__setattr__(self, "gt", g.astype(np.uint8))


def dice_metric(mp: MaskPair) -> float:
    """Dice overlap in percent; 100.0 when both masks are empty."""
    p, g = mp.pred.astype(np.int64), mp.gt.astype(np.int64)
    denom = p.sum() + g.sum()
    if denom == 0:
        return 100.0
    return 100.0 * 2.0 * int((p & g).sum()) / int(denom)


def iou_metric(mp: MaskPair) -> float:
    """Intersection over union in percent; 100.0 when both masks are empty."""
    p, g = mp.pred.astype(np.int64), mp.gt.astype(np.int64)
    union = int((p | g).sum())
    if union == 0:
        return 100.0
    return 100.0 * int((p & g).sum()) / union


def write_metrics_csv(path, rows: Iterable[Tuple[str, float, float]]):
    """Per-image dice/iou percentages plus a final MEAN row, two decimals."""
    rows = list(rows)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["image_id", "dice_pct", "iou_pct"])
        for image_id, dice, iou in rows:
            w.writerow([image_id, f"{dice:.2f}", f"{iou:.2f}"])
        if rows:
            mean_dice = sum(r[1] for r in rows) / len(rows)
            mean_iou = sum(r[2] for r in rows) / len(rows)
            w.writerow(["MEAN", f"{mean_dice:.2f}", f"{mean_iou:.2f}"])


def read_metrics_csv(path):
    """Returns (per-image rows, mean row or None)."""
    rows, mean = [], None
    with open(path, newline="") as f:
        r = csv.reader(f)
        header = next(r)
        if header[:3] != ["image_id", "dice_pct", "iou_pct"]:
            raise ConfigError(f"{path} is not a metrics csv")
        for rec in r:
            entry = (rec[0], float(rec[1]), float(rec[2]))
            if rec[0] == "MEAN":
                mean = entry
            else:
                rows.append(entry)
    return rows, mean

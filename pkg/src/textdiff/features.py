"""Pixel-level diffusion representations.

An image is noised to each configured step, run through the frozen noise
predictor with decoder taps, and every captured activation is bilinearly
upsampled (corner-aligned) to the input resolution. Maps are kept in a
canonical (block asc, step asc) order so assembled feature vectors are
stable across runs.
"""

import io
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from .errors import (
    ConfigError,
    DownsampleError,
    IncompleteFeatureSetError,
    ShapeMismatchError,
)
from .schedule import VarianceSchedule, q_sample

CACHE_ENV_VAR = "TEXTDIFF_CACHE"


def _strictly_increasing(seq) -> bool:
    return all(a < b for a, b in zip(seq, seq[1:]))


@dataclass(frozen=True)
class BlockSelection:
    """The decoder blocks and diffusion steps whose activations form the features."""

    blocks: Tuple[int, ...]
    steps: Tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(int(b) for b in self.blocks))
        object.__setattr__(self, "steps", tuple(int(s) for s in self.steps))
        if not self.blocks or not self.steps:
            raise ConfigError("block selection needs at least one block and one step")
        if not _strictly_increasing(self.blocks):
            raise ConfigError(f"block indices must be strictly increasing, got {self.blocks}")
        if not _strictly_increasing(self.steps):
            raise ConfigError(f"steps must be strictly increasing, got {self.steps}")
        if self.blocks[0] < 1 or self.steps[0] < 1:
            raise ConfigError("block indices and steps are 1-based")

    def validate_against(self, predictor, sched: VarianceSchedule):
        predictor.validate_blocks(self.blocks)
        for s in self.steps:
            sched._check_step(s)

    def key(self) -> str:
        return "b" + "-".join(map(str, self.blocks)) + "_t" + "-".join(map(str, self.steps))

    @classmethod
    def parse(cls, blocks: str, steps: str) -> "BlockSelection":
        return cls(
            blocks=tuple(int(x) for x in str(blocks).split(",") if x.strip()),
            steps=tuple(int(x) for x in str(steps).split(",") if x.strip()),
        )


def upsample_bilinear(m: torch.Tensor, target: Tuple[int, int]) -> torch.Tensor:
    """Corner-aligned bilinear upsampling of a (C,h,w) map to (C,H,W)."""
    if m.dim() != 3:
        raise ShapeMismatchError(f"expected (C,h,w), got {tuple(m.shape)}")
    th, tw = int(target[0]), int(target[1])
    _, h, w = m.shape
    if th < h or tw < w:
        raise DownsampleError(f"target {(th, tw)} smaller than source {(h, w)}")
    if (th, tw) == (h, w):
        return m.clone()
    out = F.interpolate(m.unsqueeze(0), size=(th, tw), mode="bilinear", align_corners=True)
    return out.squeeze(0)


class PixelFeatureSet:
    """Native per-(block, step) activations plus their full-resolution forms."""

    def __init__(self, selection: BlockSelection, target_hw: Tuple[int, int]):
        self.selection = selection
        self.target_hw = (int(target_hw[0]), int(target_hw[1]))
        self._native: Dict[Tuple[int, int], torch.Tensor] = {}
        self._upsampled: Dict[Tuple[int, int], torch.Tensor] = {}

    def put(self, block: int, step: int, activation: torch.Tensor):
        if (block, step) not in self.expected_keys():
            raise ConfigError(f"(block={block}, step={step}) not in selection {self.selection}")
        self._native[(block, step)] = activation

    def expected_keys(self):
        return [(z, t) for z in self.selection.blocks for t in self.selection.steps]

    def native(self, block: int, step: int) -> torch.Tensor:
        return self._native[(block, step)]

    def upsampled(self, block: int, step: int) -> torch.Tensor:
        key = (block, step)
        if key not in self._upsampled:
            self._upsampled[key] = upsample_bilinear(self._native[key], self.target_hw)
        return self._upsampled[key]

    @property
    def complete(self) -> bool:
        return all(k in self._native for k in self.expected_keys())

    @property
    def assembled_dim(self) -> int:
        per_step = sum(self._channels(z) for z in self.selection.blocks)
        return len(self.selection.steps) * per_step

    def _channels(self, block: int) -> int:
        for t in self.selection.steps:
            if (block, t) in self._native:
                return int(self._native[(block, t)].shape[0])
        raise IncompleteFeatureSetError(f"no activation stored for block {block}")

    def scale_channels(self) -> Dict[int, int]:
        return {z: self._channels(z) for z in self.selection.blocks}


def extract(
    x0: torch.Tensor,
    predictor,
    sel: BlockSelection,
    sched: VarianceSchedule,
    rng: torch.Generator,
) -> PixelFeatureSet:
    """Noise x0 to every selected step and capture the selected decoder taps.

    One fresh noise draw per step; the predictor is used read-only.
    Deterministic given the generator state.
    """
    if x0.dim() != 3:
        raise ShapeMismatchError(f"expected (C,H,W) image, got {tuple(x0.shape)}")
    sel.validate_against(predictor, sched)
    s = predictor.config.image_size
    if x0.shape[-2:] != (s, s):
        raise ShapeMismatchError(
            f"image spatial size {tuple(x0.shape[-2:])} != backbone resolution {(s, s)}"
        )
    fs = PixelFeatureSet(sel, (x0.shape[-2], x0.shape[-1]))
    for t in sel.steps:
        eps = torch.randn(x0.shape, generator=rng, dtype=x0.dtype)
        xt = q_sample(x0, t, eps, sched)
        _, taps = predictor.forward_with_taps(xt, t, sel.blocks)
        for z in sel.blocks:
            fs.put(z, t, taps[z])
    return fs


def assemble_pixel_vectors(fs: PixelFeatureSet) -> torch.Tensor:
    """Concatenate all upsampled maps into an (H, W, assembled_dim) tensor.

    Channel order is canonical: blocks ascending, then steps ascending
    within a block, regardless of insertion order.
    """
    if not fs.complete:
        missing = [k for k in fs.expected_keys() if k not in fs._native]
        raise IncompleteFeatureSetError(f"missing activations for {missing}")
    maps = [fs.upsampled(z, t) for z in fs.selection.blocks for t in fs.selection.steps]
    return torch.cat(maps, dim=0).permute(1, 2, 0).contiguous()


class FeatureNormalizer:
    """Frozen per-channel standardization fitted on training features.

    Channel statistics are taken over the assembled training tensors.
    Because bilinear upsampling and concatenation are per-channel affine,
    standardizing native maps with the matching channel slice is exactly
    equivalent to standardizing the assembled tensor.
    """

    def __init__(self, selection: BlockSelection, mean: torch.Tensor, std: torch.Tensor):
        self.selection = selection
        self.mean = mean.detach().clone()
        self.std = std.detach().clone().clamp_min(1e-6)

    @classmethod
    def fit(cls, selection: BlockSelection, assembled_tensors) -> "FeatureNormalizer":
        stack = torch.cat([a.reshape(-1, a.shape[-1]) for a in assembled_tensors], dim=0)
        return cls(selection, stack.mean(dim=0), stack.std(dim=0))

    def _channel_slices(self, fs: PixelFeatureSet):
        slices = {}
        start = 0
        for z in fs.selection.blocks:
            for t in fs.selection.steps:
                c = fs.native(z, t).shape[0]
                slices[(z, t)] = slice(start, start + c)
                start += c
        if start != self.mean.numel():
            raise ShapeMismatchError(
                f"normalizer fitted for {self.mean.numel()} channels, feature set has {start}"
            )
        return slices

    def apply_assembled(self, assembled: torch.Tensor) -> torch.Tensor:
        if assembled.shape[-1] != self.mean.numel():
            raise ShapeMismatchError(
                f"normalizer fitted for {self.mean.numel()} channels, got {assembled.shape[-1]}"
            )
        return (assembled - self.mean) / self.std

    def apply_native(self, fs: PixelFeatureSet) -> PixelFeatureSet:
        """Standardized copy of a feature set; the input is left untouched."""
        out = PixelFeatureSet(fs.selection, fs.target_hw)
        for (z, t), sl in self._channel_slices(fs).items():
            m = self.mean[sl].view(-1, 1, 1)
            s = self.std[sl].view(-1, 1, 1)
            out.put(z, t, (fs.native(z, t) - m) / s)
        return out


class FeatureCache:
    """Disk cache of extracted features, invalidated by selection or backbone change.

    One compressed record per image id, stored under a directory keyed by
    the backbone digest and the selection, holding every native map plus
    the assembled tensor.
    """

    def __init__(self, root: Optional[os.PathLike] = None):
        env = os.environ.get(CACHE_ENV_VAR)
        if env:
            root = env  # the environment variable overrides any configured location
        self.root = Path(root) if root is not None else None

    def _record_path(self, image_id: str, sel: BlockSelection, backbone_digest: str) -> Path:
        return self.root / backbone_digest[:16] / sel.key() / f"{image_id}.npz"

    def get(
        self, image_id: str, sel: BlockSelection, backbone_digest: str
    ) -> Optional[PixelFeatureSet]:
        if self.root is None:
            return None
        path = self._record_path(image_id, sel, backbone_digest)
        if not path.exists():
            return None
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["meta"]))
            if tuple(meta["blocks"]) != sel.blocks or tuple(meta["steps"]) != sel.steps:
                return None
            fs = PixelFeatureSet(sel, tuple(meta["target_hw"]))
            for b in sel.blocks:
                for t in sel.steps:
                    fs.put(b, t, torch.from_numpy(z[f"z{b}_t{t}"]))
        return fs

    def put(self, image_id: str, sel: BlockSelection, backbone_digest: str, fs: PixelFeatureSet):
        if self.root is None:
            return
        path = self._record_path(image_id, sel, backbone_digest)
        path.parent.mkdir(parents=True, exist_ok=True)
        arrays = {
            f"z{b}_t{t}": fs.native(b, t).cpu().numpy()
            for b in sel.blocks
            for t in sel.steps
        }
        arrays["assembled"] = assemble_pixel_vectors(fs).cpu().numpy()
        meta = {
            "image_id": image_id,
            "blocks": list(sel.blocks),
            "steps": list(sel.steps),
            "target_hw": list(fs.target_hw),
            "backbone": backbone_digest,
        }
        buf = io.BytesIO()
        np.savez_compressed(buf, meta=json.dumps(meta), **arrays)
        path.write_bytes(buf.getvalue())

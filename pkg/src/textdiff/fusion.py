"""Trainable multi-scale cross-modal attention.

Each pixel's visual feature vector queries the frozen text token embeddings
with single-head scaled dot-product attention; per-(block, step) outputs are
upsampled to the image resolution and concatenated in the same canonical
order the feature probe uses. These matrices and the pixel classifier are
the only trainable state in the whole model.
"""

import math
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, MissingScaleParamsError, ShapeMismatchError
from .features import BlockSelection, PixelFeatureSet, upsample_bilinear
from .seeding import derive_seed, torch_generator
from .text import TextEmbedding

FUSION_MAGIC = "textdiff.fusion"
FUSION_VERSION = 1


def attend_scale(
    h: torch.Tensor,
    text_matrix: torch.Tensor,
    w_q: torch.Tensor,
    w_k: torch.Tensor,
    w_v: torch.Tensor,
) -> torch.Tensor:
    """Per-pixel attention over text tokens.

    h: (C, hh, ww) visual map; text_matrix: (L, d_text).
    Each pixel p computes softmax((h_p W_q)(t W_k)^T / sqrt(d)) (t W_v),
    normalizing over the L tokens. Returns (d_v, hh, ww).
    """
    if h.dim() != 3:
        raise ShapeMismatchError(f"expected (C,h,w) activation, got {tuple(h.shape)}")
    if text_matrix.dim() != 2:
        raise ShapeMismatchError(f"expected (L,d_text) text matrix, got {tuple(text_matrix.shape)}")
    c, hh, ww = h.shape
    if w_q.shape[0] != c:
        raise ShapeMismatchError(f"W_q expects {w_q.shape[0]} channels, activation has {c}")
    if text_matrix.shape[1] != w_k.shape[0] or text_matrix.shape[1] != w_v.shape[0]:
        raise ShapeMismatchError(
            f"text width {text_matrix.shape[1]} does not match W_k/W_v input dims "
            f"{w_k.shape[0]}/{w_v.shape[0]}"
        )
    d = w_q.shape[1]
    q = h.permute(1, 2, 0).reshape(-1, c) @ w_q
    k = text_matrix @ w_k
    v = text_matrix @ w_v
    weights = torch.softmax(q @ k.T / math.sqrt(d), dim=-1)
    out = weights @ v
    return out.T.reshape(-1, hh, ww)


@dataclass
class FusedRepresentation:
    """Attention outputs per (block, step) plus their upsampled concatenation."""

    native: Dict[Tuple[int, int], torch.Tensor]
    concatenated: torch.Tensor  # (H, W, n_maps * d_v)


class CrossModalAttention(nn.Module):
    """One (W_q, W_k, W_v) triple per scale, shared across steps by default.

    Passing ``steps`` switches to an independent triple per (scale, step).
    """

    def __init__(
        self,
        scale_channels: Dict[int, int],
        d: int = 64,
        d_v: int = 16,
        d_text: int = 64,
        steps: Optional[Tuple[int, ...]] = None,
    ):
        super().__init__()
        if d < 1 or d_v < 1 or d_text < 1:
            raise ConfigError("attention dims must be positive")
        if not scale_channels or any(c < 1 for c in scale_channels.values()):
            raise ConfigError("scale_channels must map each scale to a positive channel count")
        self.scale_channels = {int(z): int(c) for z, c in scale_channels.items()}
        self.d = d
        self.d_v = d_v
        self.d_text = d_text
        self.per_step_steps = tuple(int(t) for t in steps) if steps else None

        self.w_q = nn.ParameterDict()
        self.w_k = nn.ParameterDict()
        self.w_v = nn.ParameterDict()
        for z, c in sorted(self.scale_channels.items()):
            for key in self._keys_for_scale(z):
                self.w_q[key] = nn.Parameter(torch.empty(c, d))
                self.w_k[key] = nn.Parameter(torch.empty(d_text, d))
                self.w_v[key] = nn.Parameter(torch.empty(d_text, d_v))

    def _keys_for_scale(self, z: int):
        if self.per_step_steps is None:
            return [str(z)]
        return [f"{z}@{t}" for t in self.per_step_steps]

    def _key(self, z: int, step: Optional[int]) -> str:
        key = str(z) if self.per_step_steps is None else f"{z}@{step}"
        if key not in self.w_q:
            raise MissingScaleParamsError(f"no attention parameters for scale {z} (key {key})")
        return key

    def reset_parameters(self, seed: int):
        """Scaled-Gaussian init (std = 1/sqrt(fan_in)), deterministic given seed."""
        g = torch_generator(derive_seed(seed, "attention-init"))
        for bank in (self.w_q, self.w_k, self.w_v):
            for key in sorted(bank.keys()):
                p = bank[key]
                fan_in = p.shape[0]
                with torch.no_grad():
                    p.copy_(torch.randn(p.shape, generator=g) / math.sqrt(fan_in))

    def attend(
        self, h: torch.Tensor, text: "TextEmbedding | torch.Tensor", z: int, step: Optional[int] = None
    ) -> torch.Tensor:
        key = self._key(z, step)
        dtype = self.w_q[key].dtype
        tm = _text_matrix(text, dtype)
        return attend_scale(h.to(dtype), tm, self.w_q[key], self.w_k[key], self.w_v[key])

    def fuse(self, fs: PixelFeatureSet, text: "TextEmbedding | torch.Tensor") -> FusedRepresentation:
        """Attend at native resolution per (block, step), upsample, concatenate."""
        for z in fs.selection.blocks:
            self._key(z, fs.selection.steps[0] if self.per_step_steps else None)
        native: Dict[Tuple[int, int], torch.Tensor] = {}
        maps = []
        for z in fs.selection.blocks:
            for t in fs.selection.steps:
                out = self.attend(fs.native(z, t), text, z, step=t)
                native[(z, t)] = out
                maps.append(upsample_bilinear(out, fs.target_hw))
        concatenated = torch.cat(maps, dim=0).permute(1, 2, 0)
        return FusedRepresentation(native=native, concatenated=concatenated)

    @property
    def output_dim_per_map(self) -> int:
        return self.d_v


def _text_matrix(text, dtype) -> torch.Tensor:
    if isinstance(text, TextEmbedding):
        return torch.from_numpy(np.array(text.matrix)).to(dtype)
    if isinstance(text, torch.Tensor):
        return text.to(dtype)
    raise ShapeMismatchError(f"expected TextEmbedding or tensor, got {type(text)!r}")


def init_params(
    scale_channels: Dict[int, int],
    d: int,
    d_v: int,
    d_text: int,
    seed: int,
    steps: Optional[Tuple[int, ...]] = None,
) -> CrossModalAttention:
    """Build attention parameters with deterministic scaled-Gaussian init."""
    module = CrossModalAttention(scale_channels, d=d, d_v=d_v, d_text=d_text, steps=steps)
    module.reset_parameters(seed)
    return module


def save_fusion(path, module: CrossModalAttention, selection: BlockSelection):
    payload = {
        "magic": FUSION_MAGIC,
        "version": FUSION_VERSION,
        "scale_channels": {str(z): c for z, c in module.scale_channels.items()},
        "d": module.d,
        "d_v": module.d_v,
        "d_text": module.d_text,
        "per_step_steps": list(module.per_step_steps) if module.per_step_steps else [],
        "blocks": list(selection.blocks),
        "steps": list(selection.steps),
        "state_dict": module.state_dict(),
    }
    torch.save(payload, path)


def load_fusion(path):
    payload = torch.load(path, weights_only=True)
    if not isinstance(payload, dict) or payload.get("magic") != FUSION_MAGIC:
        raise ConfigError(f"{path} is not a fusion checkpoint")
    if payload.get("version") != FUSION_VERSION:
        raise ConfigError(f"unsupported fusion checkpoint version {payload.get('version')}")
    per_step = tuple(payload["per_step_steps"]) or None
    module = CrossModalAttention(
        {int(z): int(c) for z, c in payload["scale_channels"].items()},
        d=payload["d"],
        d_v=payload["d_v"],
        d_text=payload["d_text"],
        steps=per_step,
    )
    module.load_state_dict(payload["state_dict"])
    selection = BlockSelection(tuple(payload["blocks"]), tuple(payload["steps"]))
    return module, selection

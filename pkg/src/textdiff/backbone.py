"""Trainable UNet-shaped noise predictor with a tapped decoder registry.

The decoder is a flat sequence of 16 residual blocks numbered 1..16,
coarsest resolution first (blocks 1-6 at S/4, 7-11 at S/2, 12-16 at S for
an S x S input). Activations can be captured at any decoder block without
perturbing the prediction. Encoder blocks are not addressable: skip
connections already carry their content into the decoder.
"""

import math
from typing import Dict, Iterable, List, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, EmptyDatasetError, ShapeMismatchError, UnknownBlockError
from .schedule import DiffusionConfig, VarianceSchedule, build_linear_schedule
from .seeding import derive_seed, numpy_rng, torch_generator

BACKBONE_MAGIC = "textdiff.backbone"
BACKBONE_VERSION = 1

DECODER_LEVEL_COUNTS = (6, 5, 5)


class SinusoidalTimeEmbedding(nn.Module):
    """Classic sin/cos embedding of the (1-based) diffusion step."""

    def __init__(self, dim: int):
        super().__init__()
        if dim % 2 != 0:
            raise ConfigError("time embedding dim must be even")
        self.dim = dim

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        half = self.dim // 2
        freqs = torch.exp(
            torch.arange(half, dtype=torch.float32, device=t.device)
            * (-math.log(10000.0) / (half - 1))
        )
        ang = t.float()[:, None] * freqs[None, :]
        return torch.cat([ang.sin(), ang.cos()], dim=-1)


class ResidualBlock(nn.Module):
    def __init__(self, channels: int, time_dim: int):
        super().__init__()
        self.norm = nn.GroupNorm(8, channels)
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, channels)

    def forward(self, x, temb):
        h = self.conv(F.silu(self.norm(x)))
        h = h + self.time_proj(temb)[:, :, None, None]
        return x + h


class UNetNoisePredictor(nn.Module):
    """Predicts the noise added to x_t; exposes decoder activations by block index."""

    def __init__(self, config: DiffusionConfig, base_width: int = 32, time_dim: int = 128):
        super().__init__()
        self.config = config
        self.base_width = base_width
        s = config.image_size
        w1, w2, w3 = base_width, base_width * 2, base_width * 4  # fine -> coarse

        self.time_embed = nn.Sequential(
            SinusoidalTimeEmbedding(64),
            nn.Linear(64, time_dim),
            nn.SiLU(),
            nn.Linear(time_dim, time_dim),
        )

        self.in_conv = nn.Conv2d(config.channels, w1, 3, padding=1)
        self.enc1 = ResidualBlock(w1, time_dim)
        self.down1 = nn.Conv2d(w1, w2, 3, stride=2, padding=1)
        self.enc2 = ResidualBlock(w2, time_dim)
        self.down2 = nn.Conv2d(w2, w3, 3, stride=2, padding=1)
        self.mid = ResidualBlock(w3, time_dim)

        counts = DECODER_LEVEL_COUNTS
        widths = (w3, w2, w1)
        blocks: List[nn.Module] = []
        for width, count in zip(widths, counts):
            blocks.extend(ResidualBlock(width, time_dim) for _ in range(count))
        self.decoder = nn.ModuleList(blocks)
        self.merge1 = nn.Conv2d(w3 + w2, w2, 1)
        self.merge2 = nn.Conv2d(w2 + w1, w1, 1)
        self.out_norm = nn.GroupNorm(8, w1)
        self.out_conv = nn.Conv2d(w1, config.channels, 3, padding=1)

        # decoder registry: block index -> (channels, height, width)
        sizes = (s // 4, s // 2, s)
        self._registry: Dict[int, Tuple[int, int, int]] = {}
        idx = 1
        for width, count, size in zip(widths, counts, sizes):
            for _ in range(count):
                self._registry[idx] = (width, size, size)
                idx += 1

    @property
    def n_decoder_blocks(self) -> int:
        return len(self._registry)

    @property
    def block_registry(self) -> Dict[int, Tuple[int, int, int]]:
        return dict(self._registry)

    def validate_blocks(self, blocks: Iterable[int]):
        for z in blocks:
            if z not in self._registry:
                raise UnknownBlockError(
                    f"block {z} not in decoder registry 1..{self.n_decoder_blocks}"
                )

    def _run(self, x, t, wanted):
        taps: Dict[int, torch.Tensor] = {}
        temb = self.time_embed(t)
        h = self.in_conv(x)
        h = self.enc1(h, temb)
        skip1 = h
        h = self.down1(h)
        h = self.enc2(h, temb)
        skip2 = h
        h = self.down2(h)
        h = self.mid(h, temb)

        c1, c2, _ = DECODER_LEVEL_COUNTS
        for i, block in enumerate(self.decoder):
            idx = i + 1
            h = block(h, temb)
            if idx in wanted:
                taps[idx] = h.detach()
            if idx == c1:
                h = F.interpolate(h, scale_factor=2, mode="nearest")
                h = self.merge1(torch.cat([h, skip2], dim=1))
            elif idx == c1 + c2:
                h = F.interpolate(h, scale_factor=2, mode="nearest")
                h = self.merge2(torch.cat([h, skip1], dim=1))

        eps = self.out_conv(F.silu(self.out_norm(h)))
        return eps, taps

    def forward(self, x: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        """Training path: x (B,C,H,W), t (B,) of 1-based step indices."""
        eps, _ = self._run(x, t, wanted=())
        return eps

    def _as_batch(self, x: torch.Tensor, t: int):
        if x.dim() == 3:
            xb = x.unsqueeze(0)
        elif x.dim() == 4:
            xb = x
        else:
            raise ShapeMismatchError(f"expected (C,H,W) or (B,C,H,W), got {tuple(x.shape)}")
        tb = torch.full((xb.shape[0],), int(t), dtype=torch.long, device=xb.device)
        return xb, tb

    @torch.no_grad()
    def predict(self, x: torch.Tensor, t: int) -> torch.Tensor:
        """Inference: same shape out as in, single image or batch."""
        xb, tb = self._as_batch(x, t)
        eps, _ = self._run(xb, tb, wanted=())
        return eps.squeeze(0) if x.dim() == 3 else eps

    @torch.no_grad()
    def forward_with_taps(self, x: torch.Tensor, t: int, blocks: Iterable[int]):
        """Predict noise and capture each selected decoder block's output.

        Activations are taken at the block output, before any upsampling
        transition, and do not perturb the prediction.
        """
        blocks = tuple(blocks)
        self.validate_blocks(blocks)
        xb, tb = self._as_batch(x, t)
        eps, taps = self._run(xb, tb, wanted=set(blocks))
        if x.dim() == 3:
            eps = eps.squeeze(0)
            taps = {z: a.squeeze(0) for z, a in taps.items()}
        return eps, taps


def _as_image_batch(dataset, config: DiffusionConfig) -> torch.Tensor:
    """Stack (H,W,C) float images into a (N,C,H,W) tensor, checking resolution."""
    if isinstance(dataset, np.ndarray):
        arrs = list(dataset)
    else:
        arrs = [np.asarray(im) for im in dataset]
    if len(arrs) == 0:
        raise EmptyDatasetError("backbone training requires a nonempty image set")
    s = config.image_size
    for i, a in enumerate(arrs):
        if a.shape != (s, s, config.channels):
            raise ShapeMismatchError(
                f"image {i} has shape {a.shape}, expected {(s, s, config.channels)}"
            )
    stack = np.stack(arrs).astype(np.float32)
    return torch.from_numpy(stack).permute(0, 3, 1, 2).contiguous()


def train_backbone(
    dataset,
    config: DiffusionConfig,
    epochs: int = 20,
    batch_size: int = 16,
    lr: float = 1e-3,
    sched: VarianceSchedule | None = None,
    log=None,
):
    """Train the noise predictor on unlabeled images; returns (model, loss trace).

    Minimizes the mean squared error between drawn and predicted noise at a
    uniformly random step per image per epoch. Deterministic given
    config.seed.
    """
    images = _as_image_batch(dataset, config)
    n = images.shape[0]
    sched = sched or build_linear_schedule(config)

    torch.manual_seed(derive_seed(config.seed, "backbone-init"))
    model = UNetNoisePredictor(config)
    model.train()

    g = torch_generator(derive_seed(config.seed, "backbone-noise"))
    order_rng = numpy_rng(derive_seed(config.seed, "backbone-order"))
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    sqrt_ab = torch.from_numpy(np.sqrt(sched.alpha_bars)).float()
    sqrt_1m_ab = torch.from_numpy(np.sqrt(1.0 - sched.alpha_bars)).float()

    trace: List[float] = []
    for epoch in range(epochs):
        perm = order_rng.permutation(n)
        losses = []
        for start in range(0, n, batch_size):
            idx = perm[start : start + batch_size]
            x0 = images[idx]
            b = x0.shape[0]
            t = torch.randint(1, sched.T + 1, (b,), generator=g)
            eps = torch.randn(x0.shape, generator=g)
            c1 = sqrt_ab[t - 1].view(b, 1, 1, 1)
            c2 = sqrt_1m_ab[t - 1].view(b, 1, 1, 1)
            xt = c1 * x0 + c2 * eps
            eps_hat = model(xt, t)
            loss = F.mse_loss(eps_hat, eps)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
        trace.append(float(np.mean(losses)))
        if log is not None:
            log(epoch + 1, trace[-1])

    model.eval()
    return model, trace


def save_backbone(path, model: UNetNoisePredictor, sched: VarianceSchedule):
    from dataclasses import asdict

    payload = {
        "magic": BACKBONE_MAGIC,
        "version": BACKBONE_VERSION,
        "config": asdict(model.config),
        "base_width": model.base_width,
        "betas": torch.from_numpy(sched.betas.copy()),
        "state_dict": model.state_dict(),
    }
    torch.save(payload, path)


def load_backbone(path):
    payload = torch.load(path, weights_only=True)
    if not isinstance(payload, dict) or payload.get("magic") != BACKBONE_MAGIC:
        raise ConfigError(f"{path} is not a backbone checkpoint")
    if payload.get("version") != BACKBONE_VERSION:
        raise ConfigError(f"unsupported backbone checkpoint version {payload.get('version')}")
    config = DiffusionConfig(**payload["config"])
    model = UNetNoisePredictor(config, base_width=payload["base_width"])
    model.load_state_dict(payload["state_dict"])
    model.eval()
    sched = VarianceSchedule(payload["betas"].numpy())
    return model, config, sched

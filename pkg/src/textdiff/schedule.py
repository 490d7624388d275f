"""Forward-noising schedule and the closed-form noising / denoising steps.

Steps are 1-based: t runs from 1 (least noisy) to T (pure noise). The
internal arrays are 0-based, so ``betas[t - 1]`` is the variance added at
step t.
"""

import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigError, ShapeMismatchError, StepRangeError


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class DiffusionConfig:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    image_size: int = 64
    channels: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.T < 2:
            raise ConfigError(f"T must be >= 2, got {self.T}")
        if not (0.0 < self.beta_start < 1.0 and 0.0 < self.beta_end < 1.0):
            raise ConfigError("beta_start and beta_end must lie in (0, 1)")
        if self.beta_start >= self.beta_end:
            raise ConfigError(
                f"beta_start must be < beta_end, got {self.beta_start} >= {self.beta_end}"
            )
        if not (_is_pow2(self.image_size) and self.image_size >= 16):
            raise ConfigError(f"image_size must be a power of two >= 16, got {self.image_size}")
        if self.channels < 1:
            raise ConfigError(f"channels must be >= 1, got {self.channels}")


class VarianceSchedule:
    """Per-step variances beta_t with derived alpha_t and cumulative alpha_bar_t."""

    def __init__(self, betas: np.ndarray):
        betas = np.asarray(betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size < 2:
            raise ConfigError("betas must be a 1-D sequence of length >= 2")
        if not np.all((betas > 0.0) & (betas < 1.0)):
            raise ConfigError("every beta_t must lie in (0, 1)")
        self.betas = betas
        self.alphas = 1.0 - betas
        self.alpha_bars = np.cumprod(self.alphas)
        if not np.all(np.diff(self.alpha_bars) < 0.0):
            raise ConfigError("alpha_bar must be strictly decreasing")

    @property
    def T(self) -> int:
        return int(self.betas.size)

    def _check_step(self, t: int):
        if not (1 <= t <= self.T):
            raise StepRangeError(f"step {t} outside [1, {self.T}]")

    def beta(self, t: int) -> float:
        self._check_step(t)
        return float(self.betas[t - 1])

    def alpha(self, t: int) -> float:
        self._check_step(t)
        return float(self.alphas[t - 1])

    def alpha_bar(self, t: int) -> float:
        self._check_step(t)
        return float(self.alpha_bars[t - 1])


def build_linear_schedule(config: DiffusionConfig) -> VarianceSchedule:
    """Schedule with betas linearly spaced from beta_start to beta_end over T steps."""
    betas = np.linspace(config.beta_start, config.beta_end, config.T, dtype=np.float64)
    return VarianceSchedule(betas)


def q_sample(x0: torch.Tensor, t: int, eps: torch.Tensor, sched: VarianceSchedule) -> torch.Tensor:
    """Noise a clean image directly to step t: sqrt(ab_t) x0 + sqrt(1 - ab_t) eps."""
    if eps.shape != x0.shape:
        raise ShapeMismatchError(f"eps shape {tuple(eps.shape)} != x0 shape {tuple(x0.shape)}")
    ab = sched.alpha_bar(t)
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps


def reverse_step(
    xt: torch.Tensor,
    t: int,
    predictor,
    sched: VarianceSchedule,
    rng: torch.Generator | None = None,
) -> torch.Tensor:
    """One denoising step: draw from N(mu(x_t, t), beta_t I); at t=1 return the mean.

    mu is computed from the predicted noise:
    mu = (x_t - beta_t / sqrt(1 - ab_t) * eps_hat) / sqrt(alpha_t).
    """
    sched._check_step(t)
    eps_hat = predictor.predict(xt, t)
    beta, alpha, ab = sched.beta(t), sched.alpha(t), sched.alpha_bar(t)
    mean = (xt - beta / math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(alpha)
    if t == 1:
        return mean
    noise = torch.randn(xt.shape, generator=rng, dtype=xt.dtype, device=xt.device)
    return mean + math.sqrt(beta) * noise

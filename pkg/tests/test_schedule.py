import math

import numpy as np
import pytest
import torch

from textdiff.errors import ConfigError, ShapeMismatchError, StepRangeError
from textdiff.schedule import DiffusionConfig, VarianceSchedule, build_linear_schedule, q_sample, reverse_step
from textdiff.seeding import torch_generator


@pytest.fixture(scope="module")
def sched():
    return build_linear_schedule(DiffusionConfig(T=1000, beta_start=1e-4, beta_end=0.02))


def test_linear_schedule_endpoints(sched):
    assert sched.beta(1) == pytest.approx(1e-4)
    assert sched.beta(1000) == pytest.approx(0.02)


def test_alpha_bar_first_step(sched):
    assert sched.alpha_bar(1) == pytest.approx(1.0 - sched.beta(1), abs=0)


def test_alpha_bar_against_running_product_oracle(sched):
    # independent high-precision recomputation of the cumulative product
    from decimal import Decimal, getcontext

    getcontext().prec = 50
    betas = np.linspace(1e-4, 0.02, 1000)
    prod = Decimal(1)
    for b in betas:
        prod *= Decimal(1) - Decimal(float(b))
    assert sched.alpha_bar(1000) == pytest.approx(float(prod), rel=1e-10)


def test_alpha_bar_strictly_decreasing_at_paper_steps(sched):
    assert sched.alpha_bar(50) > sched.alpha_bar(150) > sched.alpha_bar(250)
    diffs = np.diff(sched.alpha_bars)
    assert np.all(diffs < 0)


def test_schedule_bounds(sched):
    assert 0 < sched.alpha_bar(1000) < sched.alpha_bar(1) < 1


def test_invalid_config_rejected():
    with pytest.raises(ConfigError):
        DiffusionConfig(T=1)
    with pytest.raises(ConfigError):
        DiffusionConfig(beta_start=0.02, beta_end=1e-4)
    with pytest.raises(ConfigError):
        DiffusionConfig(image_size=48)
    with pytest.raises(ConfigError):
        DiffusionConfig(image_size=8)


def test_schedule_rejects_bad_betas():
    with pytest.raises(ConfigError):
        VarianceSchedule(np.array([0.1, 1.5]))
    with pytest.raises(ConfigError):
        VarianceSchedule(np.array([0.1]))


def test_q_sample_zero_noise(sched):
    x0 = torch.randn(1, 8, 8, generator=torch_generator(0))
    out = q_sample(x0, 250, torch.zeros_like(x0), sched)
    assert torch.equal(out, math.sqrt(sched.alpha_bar(250)) * x0)


def test_q_sample_zero_signal(sched):
    eps = torch.randn(1, 8, 8, generator=torch_generator(1))
    out = q_sample(torch.zeros_like(eps), 250, eps, sched)
    assert torch.equal(out, math.sqrt(1 - sched.alpha_bar(250)) * eps)


def test_q_sample_linearity(sched):
    g = torch_generator(2)
    x0 = torch.randn(1, 8, 8, generator=g, dtype=torch.float64)
    eps = torch.randn(1, 8, 8, generator=g, dtype=torch.float64)
    for a in (0.5, -2.0, 3.7):
        lhs = q_sample(a * x0, 150, a * eps, sched)
        rhs = a * q_sample(x0, 150, eps, sched)
        assert torch.allclose(lhs, rhs, atol=1e-12)


def test_q_sample_shape_and_range_errors(sched):
    x0 = torch.zeros(1, 8, 8)
    with pytest.raises(ShapeMismatchError):
        q_sample(x0, 50, torch.zeros(1, 4, 4), sched)
    with pytest.raises(StepRangeError):
        q_sample(x0, 0, x0, sched)
    with pytest.raises(StepRangeError):
        q_sample(x0, 1001, x0, sched)


def test_q_sample_monte_carlo_variance(sched):
    # per-pixel sample variance over many draws must match 1 - alpha_bar
    g = torch_generator(3)
    x0 = torch.randn(1, 8, 8, generator=g)
    t = 250
    draws = 10_000
    eps = torch.randn(draws, 1, 8, 8, generator=g)
    xt = math.sqrt(sched.alpha_bar(t)) * x0.unsqueeze(0) + math.sqrt(1 - sched.alpha_bar(t)) * eps
    per_pixel_var = xt.var(dim=0, unbiased=True)
    expected = 1 - sched.alpha_bar(t)
    rel = abs(float(per_pixel_var.mean()) - expected) / expected
    assert rel < 0.02


class _ZeroPredictor:
    def predict(self, x, t):
        return torch.zeros_like(x)


class _FixedPredictor:
    def __init__(self, eps_hat):
        self.eps_hat = eps_hat

    def predict(self, x, t):
        return self.eps_hat


def test_reverse_step_t1_is_deterministic_mean(sched):
    x1 = torch.randn(1, 8, 8, generator=torch_generator(4))
    out1 = reverse_step(x1, 1, _ZeroPredictor(), sched, torch_generator(0))
    out2 = reverse_step(x1, 1, _ZeroPredictor(), sched, torch_generator(999))
    assert torch.equal(out1, out2)
    assert torch.allclose(out1, x1 / math.sqrt(sched.alpha(1)))


def test_reverse_step_zero_eps_mean(sched):
    # with eps_hat = 0 the mean is x_t / sqrt(alpha_t); average many draws
    xt = torch.randn(1, 8, 8, generator=torch_generator(5))
    t = 400
    draws = torch.stack(
        [reverse_step(xt, t, _ZeroPredictor(), sched, torch_generator(i)) for i in range(4000)]
    )
    expected_mean = xt / math.sqrt(sched.alpha(t))
    assert torch.allclose(draws.mean(dim=0), expected_mean, atol=4 * math.sqrt(sched.beta(t) / 4000) + 1e-3)


def test_reverse_step_matches_straight_line_oracle(sched):
    # independent reimplementation of the posterior-mean expression
    g = torch_generator(6)
    xt = torch.randn(1, 8, 8, generator=g, dtype=torch.float64)
    eps_hat = torch.randn(1, 8, 8, generator=g, dtype=torch.float64)
    t = 123
    out = reverse_step(xt, t, _FixedPredictor(eps_hat), sched, torch_generator(42))

    beta = sched.beta(t)
    alpha = 1.0 - beta
    ab = float(np.prod(1.0 - np.linspace(1e-4, 0.02, 1000)[:t]))
    mu = (xt - beta / math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(alpha)
    noise = torch.randn(xt.shape, generator=torch_generator(42), dtype=xt.dtype)
    expected = mu + math.sqrt(beta) * noise
    assert torch.allclose(out, expected, atol=1e-9)


def test_reverse_step_range_error(sched):
    with pytest.raises(StepRangeError):
        reverse_step(torch.zeros(1, 8, 8), 0, _ZeroPredictor(), sched, torch_generator(0))

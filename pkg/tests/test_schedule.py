import numpy as np
import pytest
import torch

from ildm.errors import ConfigError, ContractError
from ildm.schedule import (FINAL_STEP, Parameterization, build_linear_schedule, ddim_step, forward_diffuse, from_v,
                           predict_x0_eps, sampling_timesteps, timestep_pairs, to_v_target, to_weight_timestep,
                           training_target)


@pytest.fixture()
def schedule():
    yield build_linear_schedule(1000)


def test_linear_schedule_values(schedule):
    assert schedule.T == 1000
    assert np.isclose(schedule.alpha_bar[0], 0.9999, atol=1e-12)
    # Independent cumulative product
    expected = 1.0
    for b in np.linspace(1e-4, 0.02, 1000):
        expected *= 1.0 - b
    assert np.isclose(schedule.alpha_bar[-1], expected, rtol=1e-10)
    assert np.all(np.diff(schedule.alpha_bar) < 0)


def test_linear_schedule_rejects_bad_parameters():
    with pytest.raises(ConfigError):
        build_linear_schedule(0)
    with pytest.raises(ConfigError):
        build_linear_schedule(10, beta_start=0.1, beta_end=0.01)
    with pytest.raises(ConfigError):
        build_linear_schedule(10, beta_end=1.0)


def test_schedule_to_from_dict(schedule):
    assert type(schedule).fromdict(schedule.asdict()) == schedule


def test_forward_diffuse_endpoints(schedule):
    g = torch.Generator().manual_seed(0)
    x0 = torch.randn(2, 4, 8, 8, generator=g, dtype=torch.float64)
    eps = torch.randn(2, 4, 8, 8, generator=g, dtype=torch.float64)
    x_t = forward_diffuse(x0, 0, eps, schedule)
    assert torch.allclose(x_t, np.sqrt(0.9999) * x0 + np.sqrt(1e-4) * eps, atol=1e-12)
    # Batched timesteps broadcast per example
    x_t = forward_diffuse(x0, torch.tensor([0, 999]), eps, schedule)
    a = np.sqrt(schedule.alpha_bar[999])
    assert torch.allclose(x_t[1], a * x0[1] + np.sqrt(1 - schedule.alpha_bar[999]) * eps[1])

    with pytest.raises(ContractError):
        forward_diffuse(x0, 1000, eps, schedule)
    with pytest.raises(ContractError):
        forward_diffuse(x0, 0, eps[:1], schedule)


@pytest.mark.parametrize("t", [100, 500, 900])
def test_forward_marginal_moments(schedule, t):
    n = 10000
    g = torch.Generator().manual_seed(t)
    x0 = torch.full((n,), 0.7, dtype=torch.float64)
    x_t = forward_diffuse(x0, t, torch.randn(n, generator=g, dtype=torch.float64), schedule).numpy()
    mean, var = np.sqrt(schedule.alpha_bar[t]) * 0.7, 1.0 - schedule.alpha_bar[t]
    # Within four standard errors of the sample mean and the sample variance
    assert abs(x_t.mean() - mean) < 4.0 * np.sqrt(var / n)
    assert abs(x_t.var() - var) < 4.0 * var * np.sqrt(2.0 / n)


def test_v_eps_x0_triangle_closes(schedule):
    g = torch.Generator().manual_seed(3)
    for _ in range(50):
        t = int(torch.randint(0, schedule.T, (1,), generator=g))
        x0 = torch.randn(1, 4, 4, 4, generator=g, dtype=torch.float64)
        eps = torch.randn(1, 4, 4, 4, generator=g, dtype=torch.float64)
        x_t = forward_diffuse(x0, t, eps, schedule)
        v = to_v_target(x0, eps, t, schedule)
        x0_back, eps_back = from_v(x_t, v, t, schedule)
        assert torch.allclose(x0_back, x0, atol=1e-6)
        assert torch.allclose(eps_back, eps, atol=1e-6)
        assert torch.allclose(to_v_target(x0_back, eps_back, t, schedule), v, atol=1e-6)
        # The epsilon parameterization recovers the same x0
        x0_eps, _ = predict_x0_eps(x_t, eps, t, Parameterization.Epsilon, schedule)
        assert torch.allclose(x0_eps, x0, atol=1e-6)


def test_training_target(schedule):
    x0 = torch.randn(2, 3)
    eps = torch.randn(2, 3)
    assert torch.equal(training_target(x0, eps, 10, "epsilon", schedule), eps)
    assert torch.allclose(training_target(x0, eps, 10, "v", schedule), to_v_target(x0, eps, 10, schedule))


@pytest.mark.parametrize("param", [Parameterization.Epsilon, Parameterization.V])
def test_ddim_with_oracle_denoiser_recovers_x0(schedule, param):
    g = torch.Generator().manual_seed(0)
    x0 = torch.rand(1, 4, 8, 8, generator=g, dtype=torch.float64) * 2 - 1
    x = torch.randn(1, 4, 8, 8, generator=g, dtype=torch.float64)
    for t, t_prev in timestep_pairs(schedule.T, 25):
        # The prediction whose implied x0 is exactly x0
        eps = (x - np.sqrt(schedule.alpha_bar[t]) * x0) / np.sqrt(1 - schedule.alpha_bar[t])
        pred = eps if param is Parameterization.Epsilon else to_v_target(x0, eps, t, schedule)
        x = ddim_step(x, pred, t, t_prev, param, schedule, clip=None)
    assert torch.allclose(x, x0, atol=1e-5)


def test_ddim_step_without_noise_is_identity(schedule):
    x0 = torch.randn(1, 2, 4, 4, dtype=torch.float64)
    eps = torch.zeros_like(x0)
    x_t = forward_diffuse(x0, 1, eps, schedule)
    x_prev = ddim_step(x_t, eps, 1, 0, Parameterization.Epsilon, schedule, clip=None)
    assert torch.allclose(x_prev, forward_diffuse(x0, 0, eps, schedule), atol=1e-6)


def test_ddim_step_clips_and_checks_order(schedule):
    x_t = torch.full((1, 1, 2, 2), 100.0, dtype=torch.float64)
    pred = torch.zeros_like(x_t)
    out = ddim_step(x_t, pred, 10, FINAL_STEP, Parameterization.Epsilon, schedule, clip=3.0)
    assert torch.all(out == 3.0)
    with pytest.raises(ContractError):
        ddim_step(x_t, pred, 10, 10, Parameterization.Epsilon, schedule)


def test_sampling_timesteps():
    ts = sampling_timesteps(1000, 25)
    assert len(ts) == 25
    assert ts[0] == 999 and ts[-1] == 0
    assert all(a > b for a, b in zip(ts, ts[1:]))
    assert sampling_timesteps(10, 50) == list(range(9, -1, -1))
    pairs = timestep_pairs(1000, 25)
    assert pairs[-1] == (0, FINAL_STEP)
    with pytest.raises(ConfigError):
        sampling_timesteps(1000, 0)


def test_weight_timestep_rescaling():
    assert to_weight_timestep(999, 1000) == 999.0
    assert to_weight_timestep(50, 100) == 500.0


def test_parameterization_parse():
    assert Parameterization.parse("v") is Parameterization.V
    assert Parameterization.parse("epsilon") is Parameterization.Epsilon
    assert str(Parameterization.V) == "v"
    with pytest.raises(ConfigError):
        Parameterization.parse("x0")

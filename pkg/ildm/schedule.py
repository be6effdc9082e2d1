"""
Discrete-time diffusion process shared by the image and intrinsic domains: the noise schedule, forward corruption,
conversions between the epsilon / v / x0 parameterizations and the deterministic (DDIM) reverse step.

Schedule coefficients are kept as float64 numpy arrays; the functions here take torch tensors and broadcast the
coefficients for either a single integer timestep or a batch of per-example timesteps.
"""
import enum

import numpy as np
import torch

from ildm.errors import ConfigError, ContractError, check_same_shape

# Timesteps handed to the attention weight schedules are expressed on the usual DDPM range [0, 1000]
TIMESTEP_RANGE = 1000

# Pass as ``t_prev`` to ddim_step to take the final step down to x0
FINAL_STEP = -1


class Parameterization(enum.Enum):
    Epsilon = 1
    V = 2

    def __str__(self):
        return str(self.name.lower())

    @classmethod
    def parse(cls, value):
        """Accepts a Parameterization or one of the strings 'epsilon' / 'v' (any case)."""
        if isinstance(value, cls):
            return value
        for p in cls:
            if str(p) == str(value).lower():
                return p
        raise ConfigError(f"Unknown parameterization '{value}', expected one of {[str(p) for p in cls]}",
                          key="parameterization")


class NoiseSchedule:
    """
    The per-step variances (beta) of a diffusion process and the derived alpha = 1 - beta and
    alpha_bar = cumprod(alpha). Treated as an immutable value once built.
    """

    def __init__(self, beta, beta_start=None, beta_end=None):
        beta = np.asarray(beta, dtype=np.float64)
        if beta.ndim != 1 or beta.size < 1:
            raise ConfigError("beta must be a non-empty 1D sequence", key="beta")
        if np.any(beta <= 0.0) or np.any(beta >= 1.0):
            raise ConfigError("every beta must lie in (0, 1)", key="beta")
        self.T = int(beta.size)
        self.beta = beta
        self.alpha = 1.0 - beta
        self.alpha_bar = np.cumprod(self.alpha)
        self.beta_start = float(beta[0]) if beta_start is None else float(beta_start)
        self.beta_end = float(beta[-1]) if beta_end is None else float(beta_end)

    def asdict(self):
        return {"num_timesteps": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end}

    @classmethod
    def fromdict(cls, d):
        return build_linear_schedule(d["num_timesteps"], d["beta_start"], d["beta_end"])

    def __eq__(self, other):
        return isinstance(other, NoiseSchedule) and np.array_equal(self.beta, other.beta)

    def __repr__(self):
        return f"NoiseSchedule(T={self.T}, beta_start={self.beta_start}, beta_end={self.beta_end})"


def build_linear_schedule(T, beta_start=1e-4, beta_end=0.02):
    """Linearly spaced betas from beta_start to beta_end (both inclusive)."""
    if int(T) != T or T < 1:
        raise ConfigError(f"Number of timesteps must be a positive integer, not {T}", key="num_timesteps")
    if not 0.0 < beta_start < 1.0:
        raise ConfigError(f"beta_start must lie in (0, 1), not {beta_start}", key="beta_start")
    if not 0.0 < beta_end < 1.0:
        raise ConfigError(f"beta_end must lie in (0, 1), not {beta_end}", key="beta_end")
    if beta_start > beta_end:
        raise ConfigError(f"beta_start ({beta_start}) must not exceed beta_end ({beta_end})", key="beta_start")
    return NoiseSchedule(np.linspace(beta_start, beta_end, int(T), dtype=np.float64), beta_start, beta_end)


def _check_timestep(t, s):
    values = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
    if np.any(values < 0) or np.any(values >= s.T):
        raise ContractError(f"Timestep {t} outside [0, {s.T})", key="t")


def _gather(values, t, x):
    """Coefficient values[t] broadcastable against x: a python float for a scalar t, else a [B, 1, ...] tensor."""
    if isinstance(t, torch.Tensor) and t.ndim > 0:
        idx = t.detach().cpu().numpy().astype(np.int64)
        c = torch.as_tensor(values[idx], dtype=x.dtype, device=x.device)
        return c.reshape((-1,) + (1,) * (x.ndim - 1))
    return float(values[int(t)])


def _sqrt_coefficients(t, s, x):
    return _gather(np.sqrt(s.alpha_bar), t, x), _gather(np.sqrt(1.0 - s.alpha_bar), t, x)


def forward_diffuse(x0, t, eps, s):
    """Sample x_t ~ q(x_t | x0) with the given noise: sqrt(alpha_bar) * x0 + sqrt(1 - alpha_bar) * eps."""
    check_same_shape(x0, eps, "eps")
    _check_timestep(t, s)
    a, b = _sqrt_coefficients(t, s, x0)
    return a * x0 + b * eps


def to_v_target(x0, eps, t, s):
    """The v-prediction target sqrt(alpha_bar) * eps - sqrt(1 - alpha_bar) * x0."""
    check_same_shape(x0, eps, "eps")
    _check_timestep(t, s)
    a, b = _sqrt_coefficients(t, s, x0)
    return a * eps - b * x0


def from_v(x_t, v, t, s):
    """Invert the (x_t, v) pair back into (x0, eps)."""
    check_same_shape(x_t, v, "v")
    _check_timestep(t, s)
    a, b = _sqrt_coefficients(t, s, x_t)
    return a * x_t - b * v, b * x_t + a * v


def training_target(x0, eps, t, param, s):
    """What the network is trained to predict under the given parameterization."""
    if Parameterization.parse(param) is Parameterization.V:
        return to_v_target(x0, eps, t, s)
    return eps


def predict_x0_eps(x_t, pred, t, param, s):
    """Convert a model output into the implied (x0, eps) estimates."""
    check_same_shape(x_t, pred, "pred")
    _check_timestep(t, s)
    if Parameterization.parse(param) is Parameterization.V:
        return from_v(x_t, pred, t, s)
    a, b = _sqrt_coefficients(t, s, x_t)
    return (x_t - b * pred) / a, pred


def ddim_step(x_t, pred, t, t_prev, param, s, clip=3.0):
    """
    One deterministic (eta = 0) DDIM update from timestep t to t_prev.

    The x0 estimate is clamped to [-clip, clip] (no clamping when clip is None) and the noise is re-derived from
    x_t and the clamped estimate. With ``t_prev == FINAL_STEP`` the clamped x0 estimate itself is returned.
    """
    if t_prev >= t:
        raise ContractError(f"t_prev ({t_prev}) must be smaller than t ({t})", key="t_prev")
    x0, _ = predict_x0_eps(x_t, pred, t, param, s)
    if clip is not None:
        x0 = x0.clamp(-clip, clip)
    if t_prev == FINAL_STEP:
        return x0
    _check_timestep(t_prev, s)
    a, b = _sqrt_coefficients(t, s, x_t)
    eps = (x_t - a * x0) / b
    a_prev, b_prev = _sqrt_coefficients(t_prev, s, x_t)
    return a_prev * x0 + b_prev * eps


def sampling_timesteps(T, steps):
    """Uniformly spaced, strictly decreasing internal timesteps from T-1 down to 0 (at most T of them)."""
    if steps < 1:
        raise ConfigError(f"Number of sampling steps must be >= 1, not {steps}", key="steps")
    steps = min(int(steps), int(T))
    return [int(t) for t in np.round(np.linspace(T - 1, 0, steps)).astype(np.int64)]


def timestep_pairs(T, steps):
    """(t, t_prev) pairs for a sampling run, the last one ending at FINAL_STEP."""
    ts = sampling_timesteps(T, steps)
    return list(zip(ts, ts[1:] + [FINAL_STEP]))


def to_weight_timestep(t, T):
    """Rescale an internal timestep in [0, T) onto the [0, 1000] range (identity when T == 1000)."""
    if T == TIMESTEP_RANGE:
        return float(t)
    return float(t) * TIMESTEP_RANGE / T

"""
Cross-domain self-attention.

Queries of each domain attend over the keys and values of both domains concatenated (own tokens first). The image
branch adds the scheduled log-weight log(w) to the logits of the intrinsic (cross-domain) keys; the intrinsic branch
is never biased. A weight of exactly zero is realised by leaving the cross-domain keys out of the softmax altogether,
so that w = 0 is identical to plain single-domain attention.
"""
import enum
import math
import time
from collections import namedtuple

import numpy as np
import torch

from ildm.errors import ConfigError, ContractError, NumericError

# Default hyperparameters of the two sampling-time schedules
DROP_TAU = 900.0
DROP_LAYERS = frozenset({3, 4, 5, 6, 7})  # for a network with 9 attention blocks
GAUSSIAN_ALPHA = 1.0
GAUSSIAN_TAU = 800.0
GAUSSIAN_SIGMA = 100.0

ATTN_PATHS = ("fused", "explicit")

# Projection matrices [d_out, d_in] applied as z @ W.T (no bias)
AttnProjections = namedtuple("AttnProjections", ["q_x", "k_x", "v_x", "q_i", "k_i", "v_i"])

BenchReport = namedtuple("BenchReport", ["path", "tokens", "width", "weight", "reps", "median_ns", "p95_ns",
                                         "tokens_per_sec", "max_abs_diff"])


class ScheduleKind(enum.Enum):
    Drop = 1
    Gaussian = 2
    Full = 3
    Off = 4

    def __str__(self):
        return str(self.name.lower())

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        aliases = {"drop": cls.Drop, "gauss": cls.Gaussian, "gaussian": cls.Gaussian, "full": cls.Full,
                   "off": cls.Off}
        try:
            return aliases[str(value).lower()]
        except KeyError:
            raise ConfigError(f"Unknown schedule '{value}', expected one of drop|gauss|off|full", key="schedule")


def default_drop_layers(num_levels):
    """
    Block indices that keep cross-domain attention under the Drop schedule: everything except the outer half of the
    down blocks and their mirrored up blocks. Gives {3, ..., 7} for 4 levels and {2, 3, 4} for 2.
    """
    outer = num_levels // 2
    return frozenset(range(outer + 1, 2 * num_levels + 2 - outer))


class AttnWeightSchedule:
    """
    The scalar weight w(l, t) given to the intrinsic domain's keys in image-branch attention block l at timestep t
    (t on the [0, 1000] range). Use the constructors drop(), gaussian(), full() and off().
    """

    def __init__(self, kind, layers=None, tau=None, alpha=None, sigma=None):
        self.kind = ScheduleKind.parse(kind)
        self.layers = frozenset(int(l) for l in layers) if layers is not None else None
        self.tau = None if tau is None else float(tau)
        self.alpha = None if alpha is None else float(alpha)
        self.sigma = None if sigma is None else float(sigma)
        self.validate()

    @classmethod
    def drop(cls, layers=DROP_LAYERS, tau=DROP_TAU):
        return cls(ScheduleKind.Drop, layers=layers, tau=tau)

    @classmethod
    def gaussian(cls, alpha=GAUSSIAN_ALPHA, tau=GAUSSIAN_TAU, sigma=GAUSSIAN_SIGMA):
        return cls(ScheduleKind.Gaussian, alpha=alpha, tau=tau, sigma=sigma)

    @classmethod
    def full(cls):
        return cls(ScheduleKind.Full)

    @classmethod
    def off(cls):
        return cls(ScheduleKind.Off)

    def validate(self):
        if self.kind is ScheduleKind.Drop:
            if self.layers is None or self.tau is None:
                raise ConfigError("Drop schedule needs both layers and tau", key="layers")
            if any(l < 1 for l in self.layers):
                raise ConfigError(f"Block indices start at 1, got {sorted(self.layers)}", key="layers")
        elif self.kind is ScheduleKind.Gaussian:
            if self.alpha is None or not 0.0 < self.alpha <= 1.0:
                raise ConfigError(f"Gaussian alpha must lie in (0, 1], not {self.alpha}", key="alpha")
            if self.sigma is None or not self.sigma > 0.0:
                raise ConfigError(f"Gaussian sigma must be > 0, not {self.sigma}", key="sigma")
            if self.tau is None:
                raise ConfigError("Gaussian schedule needs tau", key="tau")

    def is_constant(self):
        """True when the weight does not depend on the timestep."""
        return self.kind in (ScheduleKind.Full, ScheduleKind.Off)

    def weight(self, l, t):
        if l < 1:
            raise ContractError(f"Block index must be >= 1, not {l}", key="l")
        if self.kind is ScheduleKind.Full:
            return 1.0
        if self.kind is ScheduleKind.Off:
            return 0.0
        if self.kind is ScheduleKind.Drop:
            return 1.0 if (l in self.layers and t <= self.tau) else 0.0
        return self.alpha * math.exp(-((t - self.tau) ** 2) / self.sigma ** 2)

    def asdict(self):
        return {"kind": str(self.kind),
                "layers": sorted(self.layers) if self.layers is not None else None,
                "tau": self.tau, "alpha": self.alpha, "sigma": self.sigma}

    @classmethod
    def fromdict(cls, d):
        return cls(d["kind"], layers=d.get("layers"), tau=d.get("tau"), alpha=d.get("alpha"), sigma=d.get("sigma"))

    def __repr__(self):
        return f"AttnWeightSchedule({self.asdict()})"


def eval_weight(sched, l, t):
    """w(l, t) for block index l >= 1 and a [0, 1000]-range timestep t."""
    return sched.weight(l, t)


def build_schedule(kind, num_levels, tau=None, sigma=None, alpha=None, layers=None):
    """A weight schedule with the usual defaults filled in (Drop layers follow the network's depth)."""
    kind = ScheduleKind.parse(kind)
    if kind is ScheduleKind.Drop:
        return AttnWeightSchedule.drop(layers=default_drop_layers(num_levels) if layers is None else layers,
                                       tau=DROP_TAU if tau is None else tau)
    if kind is ScheduleKind.Gaussian:
        return AttnWeightSchedule.gaussian(alpha=GAUSSIAN_ALPHA if alpha is None else alpha,
                                           tau=GAUSSIAN_TAU if tau is None else tau,
                                           sigma=GAUSSIAN_SIGMA if sigma is None else sigma)
    return AttnWeightSchedule(kind)


def _split_heads(x, num_heads):
    # [..., N, C] -> [..., h, N, C/h]
    *lead, n, c = x.shape
    if c % num_heads != 0:
        raise ContractError(f"Width {c} is not divisible by {num_heads} heads", key="num_heads")
    return x.reshape(*lead, n, num_heads, c // num_heads).transpose(-3, -2)


def _merge_heads(x):
    # [..., h, N, d] -> [..., N, h*d]
    *lead, h, n, d = x.shape
    return x.transpose(-3, -2).reshape(*lead, n, h * d)


def attention_scores(q, k):
    return torch.matmul(q, k.transpose(-1, -2)) / math.sqrt(q.shape[-1])


def softmax_attention(q, k, v):
    """Plain scaled dot-product attention. Returns (output, probabilities)."""
    probs = torch.softmax(attention_scores(q, k), dim=-1)
    return torch.matmul(probs, v), probs


def _is_scalar_weight(w):
    return not isinstance(w, torch.Tensor) or w.ndim == 0


def _weight_tensor(w, q):
    """Per-example weights as a tensor broadcastable over [B, (h,) N, 2N] scores."""
    w = torch.as_tensor(w, dtype=q.dtype, device=q.device)
    return w.reshape((-1,) + (1,) * (q.ndim - 1))


def bias_matrix(n, w, dtype=torch.float64):
    """
    The N x 2N additive logit bias log(W): zeros for the own-domain columns, log(w) for the cross-domain columns and
    -inf (masked out) where w == 0.
    """
    weights = torch.cat([torch.ones(n, n, dtype=dtype), torch.full((n, n), float(w), dtype=dtype)], dim=-1)
    return torch.where(weights > 0, torch.log(weights), torch.full_like(weights, -math.inf))


def biased_attention(q, k_own, v_own, k_cross, v_cross, w, path="fused"):
    """
    Attention of q over own + cross keys where the cross-domain logits are shifted by log(w).

    ``w`` is either a python float (shared by the whole batch) or a tensor of per-example weights. The fused path
    adds the scalar log(w) to the cross-domain block and skips the cross-domain keys entirely when w == 0; the
    explicit path materialises the N x 2N bias matrix and masks with -inf.
    Returns (output, probabilities over the 2N keys).
    """
    if path not in ATTN_PATHS:
        raise ConfigError(f"Unknown attention path '{path}', expected one of {ATTN_PATHS}", key="attn_path")
    n_own = k_own.shape[-2]
    if path == "fused" and _is_scalar_weight(w):
        w = float(w)
        if w == 0.0:
            out, probs = softmax_attention(q, k_own, v_own)
            return out, torch.cat([probs, torch.zeros_like(probs)], dim=-1)
        scores = attention_scores(q, torch.cat([k_own, k_cross], dim=-2))
        scores = torch.cat([scores[..., :n_own], scores[..., n_own:] + math.log(w)], dim=-1)
    else:
        scores = attention_scores(q, torch.cat([k_own, k_cross], dim=-2))
        if _is_scalar_weight(w):
            bias = bias_matrix(n_own, float(w), dtype=q.dtype).to(q.device)
            bias = bias[..., :scores.shape[-2], :]
        else:
            weights = _weight_tensor(w, q).expand(*scores.shape[:-1], k_cross.shape[-2])
            cross = torch.where(weights > 0, torch.log(weights.clamp_min(1e-300)),
                                torch.full_like(weights, -math.inf))
            bias = torch.cat([torch.zeros_like(scores[..., :n_own]), cross], dim=-1)
        scores = scores + bias
    probs = torch.softmax(scores, dim=-1)
    return torch.matmul(probs, torch.cat([v_own, v_cross], dim=-2)), probs


def project(z, weight):
    return torch.nn.functional.linear(z, weight)


def single_domain_attention(z, q_w, k_w, v_w, num_heads=1):
    """Self-attention of one domain over its own tokens. Returns (output, probabilities)."""
    q = _split_heads(project(z, q_w), num_heads)
    k = _split_heads(project(z, k_w), num_heads)
    v = _split_heads(project(z, v_w), num_heads)
    out, probs = softmax_attention(q, k, v)
    return _merge_heads(out), probs


def cross_domain_attention_with_probs(z_x, z_i, proj, w, num_heads=1, path="fused"):
    """As cross_domain_attention, additionally returning the image-branch attention probabilities [.., h, N, 2N]."""
    if z_x.shape[-2] != z_i.shape[-2]:
        raise ContractError(f"Token counts differ across domains: {z_x.shape[-2]} vs {z_i.shape[-2]}", key="z_i")
    if z_x.shape[-1] != z_i.shape[-1]:
        raise ContractError(f"Model widths differ across domains: {z_x.shape[-1]} vs {z_i.shape[-1]}", key="z_i")
    if _is_scalar_weight(w):
        if not 0.0 <= float(w) <= 1.0:
            raise ContractError(f"Cross-domain weight must lie in [0, 1], not {float(w)}", key="w")
    elif torch.any(w < 0) or torch.any(w > 1):
        raise ContractError("Cross-domain weights must lie in [0, 1]", key="w")

    q_x = _split_heads(project(z_x, proj.q_x), num_heads)
    k_x = _split_heads(project(z_x, proj.k_x), num_heads)
    v_x = _split_heads(project(z_x, proj.v_x), num_heads)
    q_i = _split_heads(project(z_i, proj.q_i), num_heads)
    k_i = _split_heads(project(z_i, proj.k_i), num_heads)
    v_i = _split_heads(project(z_i, proj.v_i), num_heads)

    attn_x, probs_x = biased_attention(q_x, k_x, v_x, k_i, v_i, w, path=path)
    # keys and values are shared: k = (K_x z_x) + (K_i z_i), the intrinsic branch is unbiased
    attn_i, _ = softmax_attention(q_i, torch.cat([k_x, k_i], dim=-2), torch.cat([v_x, v_i], dim=-2))
    return _merge_heads(attn_x), _merge_heads(attn_i), probs_x


def cross_domain_attention(z_x, z_i, proj, w, num_heads=1, path="fused"):
    """
    Joint self-attention of image tokens z_x and intrinsic tokens z_i ([N, d] or [B, N, d]).

    Returns (attn_x, attn_i). Heads all share the same weight w.
    """
    attn_x, attn_i, _ = cross_domain_attention_with_probs(z_x, z_i, proj, w, num_heads=num_heads, path=path)
    return attn_x, attn_i


# ********
# Numerical checks and benchmarks
# ********

AttnCheckInputs = namedtuple("AttnCheckInputs", ["z_x", "z_i", "proj", "w", "num_heads"])


def random_check_inputs(n, d, w, num_heads=1, seed=0, dtype=torch.float64):
    """A random attention instance for gradient checks and benchmarks."""
    g = torch.Generator().manual_seed(seed)
    z_x = torch.randn(n, d, generator=g, dtype=dtype)
    z_i = torch.randn(n, d, generator=g, dtype=dtype)
    proj = AttnProjections(*[torch.randn(d, d, generator=g, dtype=dtype) / math.sqrt(d) for _ in range(6)])
    return AttnCheckInputs(z_x, z_i, proj, w, num_heads)


def _named_tensors(inputs):
    named = {"z_x": inputs.z_x, "z_i": inputs.z_i}
    named.update(inputs.proj._asdict())
    return named


def _rebuild(inputs, named):
    proj = AttnProjections(**{k: named[k] for k in AttnProjections._fields})
    return AttnCheckInputs(named["z_x"], named["z_i"], proj, inputs.w, inputs.num_heads)


def _cotangents(inputs, seed):
    g = torch.Generator().manual_seed(seed + 1)
    attn_x, attn_i = cross_domain_attention(inputs.z_x, inputs.z_i, inputs.proj, inputs.w, inputs.num_heads)
    return (torch.randn(attn_x.shape, generator=g, dtype=attn_x.dtype),
            torch.randn(attn_i.shape, generator=g, dtype=attn_i.dtype))


def _projected_loss(inputs, gx, gi, branches=("x", "i")):
    attn_x, attn_i = cross_domain_attention(inputs.z_x, inputs.z_i, inputs.proj, inputs.w, inputs.num_heads)
    loss = 0.0
    if "x" in branches:
        loss = loss + (attn_x * gx).sum()
    if "i" in branches:
        loss = loss + (attn_i * gi).sum()
    return loss


def analytic_gradients(inputs, seed=0, branches=("x", "i")):
    """
    Reverse-mode gradients of a fixed random linear projection of the outputs, keyed by input name. Inputs that the
    selected branches do not depend on get an all-zero gradient.
    """
    named = {k: v.detach().clone().requires_grad_(True) for k, v in _named_tensors(inputs).items()}
    gx, gi = _cotangents(inputs, seed)
    loss = _projected_loss(_rebuild(inputs, named), gx, gi, branches)
    grads = torch.autograd.grad(loss, list(named.values()), allow_unused=True)
    return {k: (torch.zeros_like(v) if g is None else g) for (k, v), g in zip(named.items(), grads)}


def numerical_gradients(inputs, epsilon=1e-6, seed=0, branches=("x", "i")):
    """Central finite differences of the same projected loss as analytic_gradients."""
    named = {k: v.detach().clone() for k, v in _named_tensors(inputs).items()}
    gx, gi = _cotangents(inputs, seed)
    grads = {}
    with torch.no_grad():
        for name, tensor in named.items():
            grad = torch.zeros_like(tensor)
            flat, gflat = tensor.view(-1), grad.view(-1)
            for j in range(flat.numel()):
                orig = flat[j].item()
                flat[j] = orig + epsilon
                up = _projected_loss(_rebuild(inputs, named), gx, gi, branches).item()
                flat[j] = orig - epsilon
                down = _projected_loss(_rebuild(inputs, named), gx, gi, branches).item()
                flat[j] = orig
                gflat[j] = (up - down) / (2.0 * epsilon)
            grads[name] = grad
    return grads


def attention_backward_check(inputs, epsilon=1e-6, seed=0):
    """
    Compare reverse-mode gradients of cross_domain_attention against central differences, in double precision.

    Returns the maximum over all inputs and elements of |analytic - numeric| / max(|analytic|, 1e-8).
    """
    if not 1e-6 <= epsilon <= 1e-3:
        raise ConfigError(f"epsilon must lie in [1e-6, 1e-3], not {epsilon}", key="epsilon")
    inputs = _rebuild(inputs, {k: v.detach().to(torch.float64) for k, v in _named_tensors(inputs).items()})
    for name, tensor in _named_tensors(inputs).items():
        if not torch.isfinite(tensor).all():
            raise NumericError(f"Input '{name}' is not finite", key=name)

    analytic = analytic_gradients(inputs, seed)
    numeric = numerical_gradients(inputs, epsilon, seed)
    worst = 0.0
    for name, grad in analytic.items():
        if not torch.isfinite(grad).all():
            raise NumericError(f"Non-finite analytic gradient for '{name}'", key=name)
        rel = (grad - numeric[name]).abs() / grad.abs().clamp_min(1e-8)
        worst = max(worst, rel.max().item())
    return worst


def bench_attention(n, d, w, reps, num_heads=1, paths=ATTN_PATHS, dtype=torch.float64, seed=0):
    """
    Time the image-branch biased attention along each path. Returns one BenchReport per path; ``max_abs_diff`` is
    the largest output difference from the first path.
    """
    if n < 1 or d < 1 or reps < 1:
        raise ConfigError("tokens, width and reps must all be positive", key="reps")
    inputs = random_check_inputs(n, d, w, num_heads=num_heads, seed=seed, dtype=dtype)
    q = _split_heads(project(inputs.z_x, inputs.proj.q_x), num_heads)
    k_x = _split_heads(project(inputs.z_x, inputs.proj.k_x), num_heads)
    v_x = _split_heads(project(inputs.z_x, inputs.proj.v_x), num_heads)
    k_i = _split_heads(project(inputs.z_i, inputs.proj.k_i), num_heads)
    v_i = _split_heads(project(inputs.z_i, inputs.proj.v_i), num_heads)

    reports = []
    reference = None
    with torch.no_grad():
        for path in paths:
            out, _ = biased_attention(q, k_x, v_x, k_i, v_i, w, path=path)
            if reference is None:
                reference = out
            times = np.zeros(reps, dtype=np.int64)
            for r in range(reps):
                start = time.perf_counter_ns()
                biased_attention(q, k_x, v_x, k_i, v_i, w, path=path)
                times[r] = time.perf_counter_ns() - start
            median = float(np.median(times))
            reports.append(BenchReport(path=path, tokens=n, width=d, weight=float(w), reps=reps,
                                       median_ns=median, p95_ns=float(np.percentile(times, 95)),
                                       tokens_per_sec=n / (median * 1e-9) if median > 0 else float("inf"),
                                       max_abs_diff=(out - reference).abs().max().item()))
    return reports

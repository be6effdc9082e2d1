"""
Executable checks of the model's probabilistic argument and of generated-sample consistency.

Discrete graphical models u -> (x, i_1, ..., i_k, c) are enumerated exactly to confirm that

    E_{p(u|c)}[log p(x|u)] = log p(x|c) - KL(p(u|c) || p(u|x,c))

and that conditioning on more intrinsics can only shrink the KL term (in expectation over p(i|c)). A small
convolutional estimator measures how well co-generated depth and normals agree with the generated image.
"""
import itertools
from collections import namedtuple

import numpy as np
import pandas as pd
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy.special import rel_entr
from tqdm import tqdm

from ildm.codec import INTRINSIC_NAMES, decode_normals, invert_colormap, to_nchw
from ildm.container import load_checkpoint, save_checkpoint
from ildm.errors import AbsoluteContinuityError, ConfigError, ContractError
from ildm.sample import sample_joint

ROW_TOLERANCE = 1e-12
SLACK_TOLERANCE = 1e-10

EquivalenceReport = namedtuple("EquivalenceReport", ["max_discrepancy", "events", "skipped"])
InequalityReport = namedtuple("InequalityReport", ["lhs", "rhs", "slack", "averaged_slack", "events", "skipped"])
ChainReport = namedtuple("ChainReport", ["slacks", "events", "skipped"])


def kl_divergence(p, q):
    """KL(p || q) for discrete distributions, with 0 log(0/q) = 0. q = 0 where p > 0 is an error."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if np.any((q <= 0) & (p > 0)):
        raise AbsoluteContinuityError("KL(p || q) is infinite: q has zeros where p does not", key="q")
    return float(np.sum(rel_entr(p, q)))


class DiscretePGM:
    """
    Tables of a discrete model where x, the intrinsics and c are conditionally independent given u:
    p(u), p(x|u), p(i_k|u) for every intrinsic k and p(c|u). Conditional tables are [|U|, |value|].
    """

    def __init__(self, p_u, p_x_u, p_i_u, p_c_u):
        self.p_u = np.asarray(p_u, dtype=np.float64)
        self.p_x_u = np.asarray(p_x_u, dtype=np.float64)
        if isinstance(p_i_u, np.ndarray) and p_i_u.ndim == 2:
            p_i_u = [p_i_u]
        self.p_i_u = [np.asarray(t, dtype=np.float64) for t in p_i_u]
        self.p_c_u = np.asarray(p_c_u, dtype=np.float64)
        self.validate()

    def validate(self):
        if self.p_u.ndim != 1 or np.any(self.p_u < 0) or abs(self.p_u.sum() - 1.0) > ROW_TOLERANCE:
            raise ContractError("p(u) must be a distribution", key="p_u")
        for name, table in [("p_x_u", self.p_x_u), ("p_c_u", self.p_c_u)] + \
                           [(f"p_i_u[{k}]", t) for k, t in enumerate(self.p_i_u)]:
            if table.ndim != 2 or table.shape[0] != len(self.p_u):
                raise ContractError(f"{name} must have one row per value of u", key=name)
            if np.any(table < 0) or np.any(np.abs(table.sum(axis=1) - 1.0) > ROW_TOLERANCE):
                raise ContractError(f"Every row of {name} must be a distribution", key=name)

    @property
    def cardinalities(self):
        return (len(self.p_u), self.p_x_u.shape[1], tuple(t.shape[1] for t in self.p_i_u), self.p_c_u.shape[1])

    @classmethod
    def random(cls, rng, card_u, card_x, card_i, card_c, num_intrinsics=1):
        """Every distribution drawn from a flat Dirichlet. ``card_i`` is an int or one size per intrinsic."""
        if np.isscalar(card_i):
            card_i = [card_i] * num_intrinsics

        def rows(n):
            return rng.dirichlet(np.ones(n), size=card_u)

        return cls(rng.dirichlet(np.ones(card_u)), rows(card_x), [rows(k) for k in card_i], rows(card_c))

    def with_intrinsics(self, p_i_u):
        return DiscretePGM(self.p_u, self.p_x_u, p_i_u, self.p_c_u)

    def posterior_u_given_c(self, c):
        """p(u|c), or None when p(c) = 0."""
        joint = self.p_u * self.p_c_u[:, c]
        total = joint.sum()
        return joint / total if total > 0 else None

    def joint_u_intrinsics_given_c(self, c, which):
        """p(u, i_which | c) as [|U|, M] over the M joint values of the chosen intrinsics."""
        joint = self.posterior_u_given_c(c)
        table = joint[:, None]
        for k in which:
            table = (table[:, :, None] * self.p_i_u[k][:, None, :]).reshape(len(joint), -1)
        return table


def _events(pgm):
    card_x, card_c = pgm.p_x_u.shape[1], pgm.p_c_u.shape[1]
    return itertools.product(range(card_x), range(card_c))


def _kl_term(p_u, likelihood):
    """KL(p(u) || p(u|x)) with p(u|x) proportional to p(u) * likelihood(u). None when p(x) = 0."""
    evidence = float(np.dot(p_u, likelihood))
    if evidence <= 0:
        return None
    return kl_divergence(p_u, p_u * likelihood / evidence)


def _expected_kl(pgm, x, c, which):
    """E_{p(i_which|c)} KL(p(u|i,c) || p(u|x,i,c)), skipping intrinsic values with p(i, x | c) = 0."""
    table = pgm.joint_u_intrinsics_given_c(c, which)
    likelihood = pgm.p_x_u[:, x]
    total = 0.0
    for m in range(table.shape[1]):
        weight = table[:, m].sum()
        if weight <= 0:
            continue
        kl = _kl_term(table[:, m] / weight, likelihood)
        if kl is not None:
            total += weight * kl
    return total


def verify_equivalence(pgm):
    """
    For every (x, c) with p(x, c) > 0 compare E_{p(u|c)}[log p(x|u)] with log p(x|c) - KL(p(u|c) || p(u|x,c)).
    Events with p(c) = 0 or p(x|c) = 0 and events whose sides are infinite are skipped and counted.
    """
    worst = 0.0
    events = skipped = 0
    for x, c in _events(pgm):
        p_u_c = pgm.posterior_u_given_c(c)
        if p_u_c is None:
            skipped += 1
            continue
        likelihood = pgm.p_x_u[:, x]
        p_x_c = float(np.dot(p_u_c, likelihood))
        if p_x_c <= 0:
            skipped += 1
            continue
        support = p_u_c > 0
        try:
            if np.any(likelihood[support] <= 0):
                raise AbsoluteContinuityError("log p(x|u) = -inf on the support of p(u|c)", key="p_x_u")
            lhs = float(np.sum(p_u_c[support] * np.log(likelihood[support])))
            rhs = np.log(p_x_c) - kl_divergence(p_u_c, p_u_c * likelihood / p_x_c)
        except AbsoluteContinuityError:
            skipped += 1
            continue
        worst = max(worst, abs(lhs - rhs))
        events += 1
    return EquivalenceReport(max_discrepancy=worst, events=events, skipped=skipped)


def verify_inequality(pgm, intrinsic=0):
    """
    KL(p(u|c) || p(u|x,c)) >= E_{p(i|c)} KL(p(u|i,c) || p(u|x,i,c)) for every (x, c) event. Returns the sides of
    the tightest event, its slack, and the smallest slack of the statement averaged over p(x|c) for each c.
    """
    best = None
    averaged = {}
    events = skipped = 0
    for x, c in _events(pgm):
        p_u_c = pgm.posterior_u_given_c(c)
        if p_u_c is None:
            skipped += 1
            continue
        try:
            lhs = _kl_term(p_u_c, pgm.p_x_u[:, x])
            if lhs is None:
                skipped += 1
                continue
            rhs = _expected_kl(pgm, x, c, [intrinsic])
        except AbsoluteContinuityError:
            skipped += 1
            continue
        events += 1
        slack = lhs - rhs
        if best is None or slack < best[2]:
            best = (lhs, rhs, slack)
        p_x_c = float(np.dot(p_u_c, pgm.p_x_u[:, x]))
        averaged[c] = averaged.get(c, 0.0) + p_x_c * slack
    if best is None:
        return InequalityReport(np.nan, np.nan, np.nan, np.nan, 0, skipped)
    return InequalityReport(lhs=best[0], rhs=best[1], slack=best[2], averaged_slack=min(averaged.values()),
                            events=events, skipped=skipped)


def verify_monotone_chain(pgm):
    """
    KL(u|c || u|x,c) >= E KL(. | i_1) >= E KL(. | i_1, i_2) >= ...: the smallest slack of each link over all
    events. Needs at least two intrinsics.
    """
    k = len(pgm.p_i_u)
    if k < 2:
        raise ContractError("The monotone chain needs at least two intrinsics", key="p_i_u")
    slacks = [np.inf] * k
    events = skipped = 0
    for x, c in _events(pgm):
        p_u_c = pgm.posterior_u_given_c(c)
        if p_u_c is None:
            skipped += 1
            continue
        try:
            previous = _kl_term(p_u_c, pgm.p_x_u[:, x])
            if previous is None:
                skipped += 1
                continue
            for j in range(k):
                current = _expected_kl(pgm, x, c, list(range(j + 1)))
                slacks[j] = min(slacks[j], previous - current)
                previous = current
        except AbsoluteContinuityError:
            skipped += 1
            continue
        events += 1
    return ChainReport(slacks=slacks, events=events, skipped=skipped)


def sweep(instances=1000, max_card=4, seed=7, num_intrinsics=2, quiet=True):
    """
    Check all three statements on ``instances`` random models with every cardinality uniform in [2, max_card].
    Returns a DataFrame with one row per instance.
    """
    if max_card < 2:
        raise ConfigError(f"max_card must be >= 2, not {max_card}", key="max_card")
    if instances < 1:
        raise ConfigError(f"instances must be >= 1, not {instances}", key="instances")
    rng = np.random.default_rng(seed)
    rows = []
    for n in tqdm(range(instances), desc="pgm instances", disable=quiet):
        card_u, card_x, card_c = (int(v) for v in rng.integers(2, max_card + 1, size=3))
        card_i = [int(v) for v in rng.integers(2, max_card + 1, size=num_intrinsics)]
        pgm = DiscretePGM.random(rng, card_u, card_x, card_i, card_c)
        eq = verify_equivalence(pgm)
        ineq = verify_inequality(pgm)
        chain = verify_monotone_chain(pgm)
        rows.append({"instance": n, "card_u": card_u, "card_x": card_x, "card_i": "x".join(map(str, card_i)),
                     "card_c": card_c, "equivalence_discrepancy": eq.max_discrepancy,
                     "inequality_slack": ineq.slack, "inequality_averaged_slack": ineq.averaged_slack,
                     "chain_min_slack": min(chain.slacks), "skipped": eq.skipped + ineq.skipped + chain.skipped})
    return pd.DataFrame(rows)


def sweep_passed(results, tolerance=SLACK_TOLERANCE):
    return bool((results["equivalence_discrepancy"] < tolerance).all()
                and (results["inequality_slack"] >= -tolerance).all()
                and (results["inequality_averaged_slack"] >= -tolerance).all()
                and (results["chain_min_slack"] >= -tolerance).all())


# ********
# Consistency of generated samples
# ********


class EstimatorConfig:

    def __init__(self, width=32, steps=3000, lr=1e-3, batch_size=16, val_fraction=0.1, seed=0):
        if not 0.0 < val_fraction < 1.0:
            raise ConfigError(f"val_fraction must lie in (0, 1), not {val_fraction}", key="val_fraction")
        self.width = int(width)
        self.steps = int(steps)
        self.lr = float(lr)
        self.batch_size = int(batch_size)
        self.val_fraction = float(val_fraction)
        self.seed = int(seed)

    def asdict(self):
        return dict(vars(self))

    @classmethod
    def fromdict(cls, d):
        return cls(**d)


class ConsistencyEstimator(nn.Module):
    """Image -> (normalised depth, unit normals). A fully convolutional regressor with dilated layers."""

    def __init__(self, config=None):
        super().__init__()
        self.config = config if config is not None else EstimatorConfig()
        w = self.config.width
        layers = [nn.Conv2d(3, w, 3, padding=1), nn.SiLU()]
        for dilation in (1, 2, 4, 8, 1):
            layers += [nn.Conv2d(w, w, 3, padding=dilation, dilation=dilation), nn.GroupNorm(8, w), nn.SiLU()]
        layers.append(nn.Conv2d(w, 4, 1))
        self.net = nn.Sequential(*layers)
        self.register_buffer("trained", torch.zeros(()))
        self.val_depth_rmse = None
        self.val_angular_error = None

    def forward(self, x):
        out = self.net(x)
        return torch.tanh(out[:, 0]), F.normalize(out[:, 1:], dim=1)

    def predict(self, images):
        """[N, H, W, 3] images -> (depth [N, H, W], normals [N, H, W, 3]) as numpy arrays."""
        with torch.no_grad():
            depth, normals = self(to_nchw(images))
        return depth.numpy(), np.moveaxis(normals.numpy(), 1, -1)


def depth_rmse(a, b):
    return float(np.sqrt(np.mean((np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) ** 2)))


def mean_angular_error(n1, n2):
    """Mean angle in degrees between two normal fields (both renormalised per pixel)."""
    u = decode_normals(np.asarray(n1, dtype=np.float64))
    v = decode_normals(np.asarray(n2, dtype=np.float64))
    cos = np.clip(np.sum(u * v, axis=-1), -1.0, 1.0)
    return float(np.degrees(np.mean(np.arccos(cos))))


def _normal_targets(dataset):
    k = INTRINSIC_NAMES.index("normal")
    return dataset.intrinsics[..., 3 * k:3 * k + 3]


def train_estimator(dataset, config, quiet=True):
    """
    Fit the estimator on ground-truth scenes, holding out ``val_fraction`` of them. The validation depth RMSE and
    mean angular error are stored on the returned estimator (and in its checkpoint).
    """
    if dataset.intrinsics is None or dataset.depth_scalar is None:
        raise ConfigError("The estimator needs the intrinsic half of the dataset", key="data")
    n = len(dataset)
    n_val = max(1, int(round(n * config.val_fraction)))
    if n - n_val < 1:
        raise ConfigError(f"Dataset of {n} samples is too small to hold out a validation split", key="data")
    rng = np.random.default_rng(config.seed)
    order = rng.permutation(n)
    train, val = dataset.subset(order[n_val:]), dataset.subset(order[:n_val])

    torch.manual_seed(config.seed)
    generator = torch.Generator().manual_seed(config.seed)
    estimator = ConsistencyEstimator(config)
    optimiser = torch.optim.AdamW(estimator.parameters(), lr=config.lr)
    images = to_nchw(train.images)
    depth = torch.from_numpy(train.depth_scalar.astype(np.float32))
    normals = to_nchw(_normal_targets(train))

    for _ in tqdm(range(config.steps), desc="estimator", disable=quiet):
        idx = torch.randperm(len(images), generator=generator)[:config.batch_size]
        pred_depth, pred_normals = estimator(images[idx])
        loss = F.mse_loss(pred_depth, depth[idx]) + (1.0 - (pred_normals * normals[idx]).sum(dim=1)).mean()
        optimiser.zero_grad()
        loss.backward()
        optimiser.step()

    estimator.eval()
    estimator.trained.fill_(1.0)
    val_depth, val_normals = estimator.predict(val.images)
    estimator.val_depth_rmse = depth_rmse(val_depth, val.depth_scalar)
    estimator.val_angular_error = mean_angular_error(val_normals, _normal_targets(val))
    if not quiet:
        print(f"Estimator validation:\n"
              f"\tDepth RMSE: {estimator.val_depth_rmse:.4f}\n"
              f"\tMean angular error: {estimator.val_angular_error:.2f} deg\n")
    return estimator


def save_estimator(path, estimator):
    return save_checkpoint(path, "estimator", estimator,
                           header={"estimator": estimator.config.asdict(),
                                   "val_depth_rmse": estimator.val_depth_rmse,
                                   "val_angular_error": estimator.val_angular_error})


def load_estimator(path):
    header, state = load_checkpoint(path, kind="estimator")
    estimator = ConsistencyEstimator(EstimatorConfig.fromdict(header["estimator"]))
    estimator.load_state_dict(state)
    estimator.val_depth_rmse = header.get("val_depth_rmse")
    estimator.val_angular_error = header.get("val_angular_error")
    estimator.eval()
    return estimator


def consistency_metrics(image, stack, estimator):
    """
    (depth RMSE, mean angular error in degrees) between what the estimator sees in ``image`` and the co-generated
    intrinsics. Depth is compared on the normalised [-1, 1] scale.
    """
    if estimator is None or not bool(estimator.trained.item()):
        raise ConfigError("The consistency estimator is untrained; run `train-estimator` first", key="estimator")
    if image.shape[:2] != stack.depth.shape[:2]:
        raise ContractError(f"Image {image.shape[:2]} and intrinsics {stack.depth.shape[:2]} differ in size",
                            key="stack")
    depth, normals = estimator.predict(image[None])
    return depth_rmse(depth[0], invert_colormap(stack.depth)), mean_angular_error(normals[0], stack.normal)


def evaluate_consistency(model, noise_schedule, image_vae, intrinsic_vae, estimator, captions, config, seeds,
                         quiet=True):
    """
    Sample every caption under every seed and score each sample. Returns a DataFrame with columns
    sample, seed, depth_rmse, angular_error_deg.
    """
    rows = []
    base_seed = config.seed
    try:
        for seed in seeds:
            for k, caption in enumerate(tqdm(captions, desc=f"seed {seed}", disable=quiet)):
                config.seed = seed * 100003 + k
                result = sample_joint(model, noise_schedule, image_vae, intrinsic_vae, config, caption)
                rmse, angle = consistency_metrics(result.images[0], result.stacks[0], estimator)
                rows.append({"sample": k, "seed": seed, "depth_rmse": rmse, "angular_error_deg": angle})
    finally:
        config.seed = base_seed
    return pd.DataFrame(rows, columns=["sample", "seed", "depth_rmse", "angular_error_deg"])

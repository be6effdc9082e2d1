"""
Training loops: pretraining the base (image-only) denoiser and joint training of the intrinsic adapters.

Joint training minimises  L_x + lambda * L_i  where both terms are mean squared errors against the parameterization's
target, with noise drawn independently for the two domains and every base parameter frozen.
"""
import os
import time
import warnings
from collections import namedtuple

import numpy as np
import pandas as pd
import torch
from tqdm import tqdm

from ildm.codec import INTRINSIC_NAMES, check_latent_shapes, to_nchw
from ildm.denoiser import (DenoiserConfig, build_denoiser, load_denoiser, parameter_digest, save_denoiser)
from ildm.errors import ConfigError, ContractError, NumericError, check_same_shape
from ildm.schedule import Parameterization, build_linear_schedule, forward_diffuse, training_target
from ildm.xattn import AttnWeightSchedule, build_schedule

JointLoss = namedtuple("JointLoss", ["total", "loss_x", "loss_i"])
LatentBatch = namedtuple("LatentBatch", ["x0", "i0", "c"])

FLAT_NORMAL_THRESHOLD = 0.03
LOSS_LOG_COLUMNS = ["step", "L_x", "L_i", "total", "wall_clock"]


class TrainConfig:
    """Parameters of a (base or joint) training run, with their defaults."""

    def __init__(self,
                 lam=4.0,
                 lr=2e-4,
                 batch_size=16,
                 steps=20000,
                 seed=0,
                 cond_drop_prob=0.1,
                 parameterization=Parameterization.Epsilon,
                 lora_rank=4,
                 lora_alpha=4.0,
                 lora_cross_attention=False,
                 adapt_embeddings=False,
                 train_schedule="full",
                 betas=(0.9, 0.999),
                 weight_decay=0.01,
                 checkpoint_every=1000,
                 filter_flat_normals=False,
                 num_timesteps=1000,
                 beta_start=1e-4,
                 beta_end=0.02):
        if not lam > 0:
            raise ConfigError(f"lambda must be > 0, not {lam}", key="lam")
        if steps < 1:
            raise ConfigError(f"steps must be >= 1, not {steps}", key="steps")
        if batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, not {batch_size}", key="batch_size")
        if not 0.0 <= cond_drop_prob <= 1.0:
            raise ConfigError(f"cond_drop_prob must lie in [0, 1], not {cond_drop_prob}", key="cond_drop_prob")
        self.lam = float(lam)
        self.lr = float(lr)
        self.batch_size = int(batch_size)
        self.steps = int(steps)
        self.seed = int(seed)
        self.cond_drop_prob = float(cond_drop_prob)
        self.parameterization = Parameterization.parse(parameterization)
        self.lora_rank = int(lora_rank)
        self.lora_alpha = float(lora_alpha)
        self.lora_cross_attention = bool(lora_cross_attention)
        self.adapt_embeddings = bool(adapt_embeddings)
        if isinstance(train_schedule, AttnWeightSchedule):
            self.train_schedule = train_schedule
        elif isinstance(train_schedule, dict):
            self.train_schedule = AttnWeightSchedule.fromdict(train_schedule)
        else:
            self.train_schedule = build_schedule(train_schedule, len(DenoiserConfig().channels))
        self.betas = tuple(float(b) for b in betas)
        self.weight_decay = float(weight_decay)
        self.checkpoint_every = int(checkpoint_every)
        self.filter_flat_normals = bool(filter_flat_normals)
        self.num_timesteps = int(num_timesteps)
        self.beta_start = float(beta_start)
        self.beta_end = float(beta_end)

    def asdict(self):
        d = dict(vars(self))
        d["parameterization"] = str(self.parameterization)
        d["train_schedule"] = self.train_schedule.asdict()
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def fromdict(cls, d):
        return cls(**d)


def joint_loss(pred_x, pred_i, target_x, target_i, lam):
    """Per-domain MSE and total = L_x + lam * L_i."""
    check_same_shape(pred_x, target_x, "target_x")
    check_same_shape(pred_i, target_i, "target_i")
    loss_x = torch.mean((pred_x - target_x) ** 2)
    loss_i = torch.mean((pred_i - target_i) ** 2)
    return JointLoss(total=loss_x + lam * loss_i, loss_x=loss_x, loss_i=loss_i)


def build_optimizer(params, config):
    return torch.optim.AdamW(params, lr=config.lr, betas=config.betas, weight_decay=config.weight_decay)


def sample_training_noise(shape, generator):
    """Independent standard normal noise for the image and the intrinsic latents."""
    return torch.randn(shape, generator=generator), torch.randn(shape, generator=generator)


def drop_conditions(c, prob, generator):
    """Replace each caption by the all-null caption with probability ``prob`` (classifier-free guidance)."""
    if prob <= 0:
        return c
    drop = torch.rand(c.shape[0], generator=generator) < prob
    return torch.where(drop[:, None], torch.zeros_like(c), c)


def filter_flat_normals(dataset, threshold=FLAT_NORMAL_THRESHOLD):
    """Drop samples whose normal field has a standard deviation of ``threshold`` or less."""
    k = INTRINSIC_NAMES.index("normal")
    normals = dataset.intrinsics[..., 3 * k:3 * k + 3]
    keep = normals.reshape(len(dataset), -1).std(axis=1) > threshold
    dropped = int((~keep).sum())
    if dropped:
        warnings.warn(f"Dropped {dropped} of {len(dataset)} samples with near-constant normals")
    return dataset.subset(np.flatnonzero(keep)), dropped


def encode_dataset(dataset, image_vae, intrinsic_vae=None):
    """Scaled latents of every sample (the encoders are frozen, so this is done once)."""
    with torch.no_grad():
        x0 = image_vae.to_latent(to_nchw(dataset.images))
        i0 = intrinsic_vae.to_latent(to_nchw(dataset.intrinsics)) if intrinsic_vae is not None else None
    return LatentBatch(x0=x0, i0=i0, c=torch.as_tensor(dataset.captions, dtype=torch.long))


def _batch(latents, generator, batch_size):
    n = latents.x0.shape[0]
    idx = torch.randperm(n, generator=generator)[:min(batch_size, n)]
    return LatentBatch(latents.x0[idx], latents.i0[idx] if latents.i0 is not None else None, latents.c[idx])


def train_step(batch, model, noise_schedule, config, generator, optimiser):
    """
    One joint step: per-example uniform timesteps, independent noise per domain, condition dropping, a dual forward
    pass under the training weight schedule and one optimiser step (which only holds adapters).
    Returns the JointLoss as python floats.
    """
    x0, i0, c = batch
    batch_size = x0.shape[0]
    t = torch.randint(0, noise_schedule.T, (batch_size,), generator=generator)
    eps_x, eps_i = sample_training_noise(x0.shape, generator)
    c = drop_conditions(c, config.cond_drop_prob, generator)
    param = model.config.parameterization

    x_t = forward_diffuse(x0, t, eps_x, noise_schedule)
    i_t = forward_diffuse(i0, t, eps_i, noise_schedule)
    pred_x, pred_i = model.forward_dual(x_t, i_t, t, c, config.train_schedule)
    loss = joint_loss(pred_x, pred_i, training_target(x0, eps_x, t, param, noise_schedule),
                      training_target(i0, eps_i, t, param, noise_schedule), config.lam)
    if not torch.isfinite(loss.total):
        raise NumericError(f"Non-finite joint loss (L_x={loss.loss_x.item()}, L_i={loss.loss_i.item()})",
                           key="loss")
    optimiser.zero_grad()
    loss.total.backward()
    optimiser.step()
    return JointLoss(loss.total.item(), loss.loss_x.item(), loss.loss_i.item())


def base_step(batch, model, noise_schedule, config, generator, optimiser):
    """One image-only step of base pretraining. Returns the loss as a python float."""
    x0, _, c = batch
    t = torch.randint(0, noise_schedule.T, (x0.shape[0],), generator=generator)
    eps = torch.randn(x0.shape, generator=generator)
    c = drop_conditions(c, config.cond_drop_prob, generator)
    x_t = forward_diffuse(x0, t, eps, noise_schedule)
    pred = model.forward_image_only(x_t, t, c)
    loss = torch.mean((pred - training_target(x0, eps, t, model.config.parameterization, noise_schedule)) ** 2)
    if not torch.isfinite(loss):
        raise NumericError("Non-finite base loss", key="loss")
    optimiser.zero_grad()
    loss.backward()
    optimiser.step()
    return loss.item()


def loss_log_path(out):
    return os.path.splitext(str(out))[0] + "_loss.csv"


def _failed_at(error, step, last_good):
    where = f"last good checkpoint: {last_good}" if last_good is not None else "no checkpoint has been written yet"
    return NumericError(f"{error.message} at step {step}; {where}", key="loss")


def pretrain_base(dataset, image_vae, config, denoiser_config=None, out=None, quiet=True):
    """
    Train the base denoiser on images only (intrinsics are never looked at). Returns (model, noise_schedule,
    loss DataFrame with columns step, loss, wall_clock). Writes a ``base`` checkpoint and the loss log to ``out``.
    """
    noise_schedule = build_linear_schedule(config.num_timesteps, config.beta_start, config.beta_end)
    if denoiser_config is None:
        denoiser_config = DenoiserConfig(parameterization=config.parameterization,
                                         num_timesteps=config.num_timesteps)
    latent_shape = image_vae.latent_shape(dataset.resolution)
    if latent_shape != (denoiser_config.latent_channels, denoiser_config.latent_size, denoiser_config.latent_size):
        raise ContractError(f"Image latents {latent_shape} do not fit the denoiser", key="latent_size")

    torch.manual_seed(config.seed)
    generator = torch.Generator().manual_seed(config.seed)
    model = build_denoiser(denoiser_config, seed=config.seed)
    for name, p in model.named_parameters():
        p.requires_grad_("lora_" not in name)
    optimiser = build_optimizer(model.base_parameters(), config)
    latents = encode_dataset(dataset, image_vae)

    if not quiet:
        print(f"Pretraining base denoiser with the following parameters:\n"
              f"\tSamples: {len(dataset)}\n"
              f"\tLatent shape: {latent_shape}\n"
              f"\tSteps: {config.steps}\n"
              f"\tBatch size: {config.batch_size}\n"
              f"\tParameterization: {denoiser_config.parameterization}\n")

    last_good = None
    rows = []
    start = time.time()
    for step in tqdm(range(config.steps), desc="base", disable=quiet):
        try:
            loss = base_step(_batch(latents, generator, config.batch_size), model, noise_schedule, config,
                             generator, optimiser)
        except NumericError as e:
            raise _failed_at(e, step, last_good) from e
        rows.append((step, loss, time.time() - start))
        if out is not None and config.checkpoint_every and (step + 1) % config.checkpoint_every == 0:
            save_denoiser(out, model, "base", noise_schedule, extra={"step": step + 1})
            last_good = out

    log = pd.DataFrame(rows, columns=["step", "loss", "wall_clock"])
    if out is not None:
        save_denoiser(out, model, "base", noise_schedule, extra={"step": config.steps})
        log.to_csv(loss_log_path(out), index=False)
    model.eval()
    return model, noise_schedule, log


def attach_adapters(base_path, config):
    """Load a base checkpoint and attach fresh adapters configured by ``config``; the base is frozen."""
    model, noise_schedule, _ = load_denoiser(base_path, kind="base",
                                             lora_rank=config.lora_rank, lora_alpha=config.lora_alpha,
                                             lora_cross_attention=config.lora_cross_attention,
                                             adapt_embeddings=config.adapt_embeddings)
    model.freeze_base()
    model.train()
    return model, noise_schedule


def train_joint(dataset, base_path, image_vae, intrinsic_vae, config, out=None, quiet=True):
    """
    Joint training of the intrinsic adapters on top of a frozen base. Returns (model, noise_schedule, loss log).

    The loss log has columns step, L_x, L_i, total, wall_clock. A non-finite loss aborts with the path of the last
    checkpoint written.
    """
    if base_path is None:
        raise ConfigError("Joint training needs a base checkpoint", key="base")
    if dataset.intrinsics is None:
        raise ConfigError("Joint training needs the intrinsic half of the dataset", key="data")
    if config.filter_flat_normals:
        dataset, _ = filter_flat_normals(dataset)
    check_latent_shapes(image_vae, intrinsic_vae, dataset.resolution)

    torch.manual_seed(config.seed)
    generator = torch.Generator().manual_seed(config.seed)
    model, noise_schedule = attach_adapters(base_path, config)
    latent_shape = image_vae.latent_shape(dataset.resolution)
    if latent_shape != (model.config.latent_channels, model.config.latent_size, model.config.latent_size):
        raise ContractError(f"Latents {latent_shape} do not fit the base denoiser", key="latent_size")
    base_digest = parameter_digest(model.base_parameters())
    optimiser = build_optimizer(model.adapter_parameters(), config)
    latents = encode_dataset(dataset, image_vae, intrinsic_vae)

    if not quiet:
        print(f"Joint training with the following parameters:\n"
              f"\tSamples: {len(dataset)}\n"
              f"\tBase checkpoint: {base_path}\n"
              f"\tLambda: {config.lam}\n"
              f"\tSteps: {config.steps}\n"
              f"\tLoRA rank / alpha: {config.lora_rank} / {config.lora_alpha}\n"
              f"\tTraining schedule: {config.train_schedule}\n")

    extra = {"train": config.asdict(), "base_digest": base_digest}
    last_good = None
    rows = []
    start = time.time()
    for step in tqdm(range(config.steps), desc="joint", disable=quiet):
        try:
            loss = train_step(_batch(latents, generator, config.batch_size), model, noise_schedule, config,
                              generator, optimiser)
        except NumericError as e:
            raise _failed_at(e, step, last_good) from e
        rows.append((step, loss.loss_x, loss.loss_i, loss.total, time.time() - start))
        if out is not None and config.checkpoint_every and (step + 1) % config.checkpoint_every == 0:
            save_denoiser(out, model, "ildm", noise_schedule, extra=dict(extra, step=step + 1))
            last_good = out

    if parameter_digest(model.base_parameters()) != base_digest:
        raise NumericError("Base parameters changed during joint training", key="base")
    log = pd.DataFrame(rows, columns=LOSS_LOG_COLUMNS)
    if out is not None:
        save_denoiser(out, model, "ildm", noise_schedule, extra=dict(extra, step=config.steps))
        log.to_csv(loss_log_path(out), index=False)
    model.eval()
    return model, noise_schedule, log

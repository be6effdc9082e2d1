"""
Joint sampling: image and intrinsic latents are denoised in lockstep with deterministic DDIM steps, starting from
the same initial noise, with classifier-free guidance and a per-block, per-timestep cross-domain weight schedule.
"""
import hashlib
import json
import os
from collections import namedtuple

import imageio
import numpy as np
import torch
from tqdm import tqdm

from ildm.codec import check_latent_shapes, decode_images, decode_intrinsics, stack_to_array
from ildm.container import TensorContainer
from ildm.errors import ConfigError, ContractError
from ildm.schedule import FINAL_STEP, ddim_step, timestep_pairs, to_weight_timestep
from ildm.xattn import ATTN_PATHS, AttnWeightSchedule, ScheduleKind

# Intrinsic denoising stops at this [0, 1000] timestep under the Gaussian schedule
GAUSSIAN_EARLY_STOP = 500.0

JointSample = namedtuple("JointSample", ["images", "stacks", "latent_x", "latent_i", "trajectory"])
BaseSample = namedtuple("BaseSample", ["images", "latent_x"])


class SamplerConfig:
    """
    Sampling parameters. ``intrinsic_early_stop`` is a [0, 1000] timestep; "auto" means 500 for the Gaussian
    schedule and no early stop otherwise.
    """

    def __init__(self, steps=25, cfg_scale=7.5, schedule=None, seed=0, intrinsic_early_stop="auto",
                 cfg_intrinsic=True, clip=3.0, attn_path="fused"):
        if steps < 1:
            raise ConfigError(f"steps must be >= 1, not {steps}", key="steps")
        if cfg_scale < 0:
            raise ConfigError(f"cfg scale must be >= 0, not {cfg_scale}", key="cfg")
        if attn_path not in ATTN_PATHS:
            raise ConfigError(f"Unknown attention path '{attn_path}'", key="attn_path")
        self.steps = int(steps)
        self.cfg_scale = float(cfg_scale)
        self.schedule = schedule if schedule is not None else AttnWeightSchedule.off()
        self.seed = int(seed)
        if intrinsic_early_stop == "auto":
            intrinsic_early_stop = GAUSSIAN_EARLY_STOP if self.schedule.kind is ScheduleKind.Gaussian else None
        self.intrinsic_early_stop = None if intrinsic_early_stop is None else float(intrinsic_early_stop)
        self.cfg_intrinsic = bool(cfg_intrinsic)
        self.clip = clip
        self.attn_path = attn_path

    def asdict(self):
        d = dict(vars(self))
        d["schedule"] = self.schedule.asdict()
        return d


def guide(uncond, cond, scale):
    """Classifier-free guidance: uncond + scale * (cond - uncond)."""
    return uncond + scale * (cond - uncond)


def _as_condition(condition):
    c = torch.as_tensor(np.asarray(condition), dtype=torch.long)
    return c[None] if c.ndim == 1 else c


def _checksum(tensor):
    return hashlib.sha256(tensor.detach().cpu().numpy().tobytes()).hexdigest()


def _initial_noise(model, batch_size, seed):
    cfg = model.config
    generator = torch.Generator().manual_seed(seed)
    return torch.randn((batch_size, cfg.latent_channels, cfg.latent_size, cfg.latent_size), generator=generator)


def check_compatible(model, image_vae, intrinsic_vae=None):
    """The VAEs' latents must have exactly the shape the denoiser works on."""
    cfg = model.config
    expected = (cfg.latent_channels, cfg.latent_size, cfg.latent_size)
    resolution = cfg.latent_size * image_vae.config.downsample
    if intrinsic_vae is not None:
        check_latent_shapes(image_vae, intrinsic_vae, resolution)
    if image_vae.latent_shape(resolution) != expected:
        raise ContractError(f"Denoiser latents {expected} do not match the image VAE's "
                            f"{image_vae.latent_shape(resolution)}", key="image_vae")
    return resolution


def sample_joint(model, noise_schedule, image_vae, intrinsic_vae, config, condition, quiet=True):
    """
    Generate images and their intrinsics for ``condition`` (token ids, [L] or [B, L]).

    Both latents start from the same noise. At every step the conditional and unconditional dual passes are
    combined by guidance (on the intrinsic branch only when ``cfg_intrinsic``) and each latent takes a DDIM step.
    With an early stop t*, the intrinsic latent jumps to its clean estimate at the last step above t* and stays
    fixed afterwards; from then on steps where no block attends to it run the image-only passes.
    """
    check_compatible(model, image_vae, intrinsic_vae)
    model.set_attn_path(config.attn_path)
    c = _as_condition(condition)
    uncond = torch.zeros_like(c)
    T = noise_schedule.T
    param = model.config.parameterization

    eps = _initial_noise(model, c.shape[0], config.seed)
    z_x, z_i = eps.clone(), eps.clone()
    trajectory = {"timesteps": [], "weight_timesteps": [], "weights": [], "intrinsic_updated": [],
                  "dual_pass": [], "intrinsic_checksums": [], "shared_initial_noise": bool(torch.equal(z_x, z_i)),
                  "sampler": config.asdict()}
    stop = config.intrinsic_early_stop

    pairs = timestep_pairs(T, config.steps)
    with torch.no_grad():
        for t, t_prev in tqdm(pairs, desc="sampling", disable=quiet):
            weights = model.block_weights(config.schedule, t)
            weight_t = to_weight_timestep(t, T)
            update_i = stop is None or weight_t > stop
            # A frozen intrinsic latent is still needed while any block attends to it
            dual = update_i or any(w != 0 for w in weights.values())
            if dual:
                cond_x, cond_i = model.forward_dual(z_x, z_i, t, c, config.schedule)
                uncond_x, uncond_i = model.forward_dual(z_x, z_i, t, uncond, config.schedule)
            else:
                cond_x = model.forward_image_only(z_x, t, c)
                uncond_x = model.forward_image_only(z_x, t, uncond)

            z_x = ddim_step(z_x, guide(uncond_x, cond_x, config.cfg_scale), t, t_prev, param, noise_schedule,
                            clip=config.clip)
            if update_i:
                pred_i = guide(uncond_i, cond_i, config.cfg_scale) if config.cfg_intrinsic else cond_i
                finishing = stop is not None and (t_prev == FINAL_STEP or to_weight_timestep(t_prev, T) <= stop)
                z_i = ddim_step(z_i, pred_i, t, FINAL_STEP if finishing else t_prev, param, noise_schedule,
                                clip=config.clip)

            trajectory["timesteps"].append(int(t))
            trajectory["weight_timesteps"].append(weight_t)
            trajectory["weights"].append({str(k): float(w) for k, w in sorted(weights.items())})
            trajectory["intrinsic_updated"].append(bool(update_i))
            trajectory["dual_pass"].append(bool(dual))
            trajectory["intrinsic_checksums"].append(_checksum(z_i))

    images = decode_images(image_vae, z_x)
    stacks = decode_intrinsics(intrinsic_vae, z_i)
    return JointSample(images=images, stacks=stacks, latent_x=z_x, latent_i=z_i, trajectory=trajectory)


def sample_base(model, noise_schedule, image_vae, config, condition, quiet=True):
    """The base model alone: same initial noise, guidance and DDIM steps, single-domain passes."""
    check_compatible(model, image_vae)
    c = _as_condition(condition)
    uncond = torch.zeros_like(c)
    param = model.config.parameterization
    z_x = _initial_noise(model, c.shape[0], config.seed)
    with torch.no_grad():
        for t, t_prev in tqdm(timestep_pairs(noise_schedule.T, config.steps), desc="sampling", disable=quiet):
            pred = guide(model.forward_image_only(z_x, t, uncond), model.forward_image_only(z_x, t, c),
                         config.cfg_scale)
            z_x = ddim_step(z_x, pred, t, t_prev, param, noise_schedule, clip=config.clip)
    return BaseSample(images=decode_images(image_vae, z_x), latent_x=z_x)


# ********
# Contact sheets
# ********


def to_uint8(field):
    return np.round((np.clip(field, -1.0, 1.0) + 1.0) / 2.0 * 255.0).astype(np.uint8)


def layout_panels(image, stack):
    """
    Contact sheet for one sample: the image (upscaled 2x) on the left and a 2x2 tile of intrinsics on the right,
    clockwise from top left: depth, normal, line drawing, segmentation (so segmentation sits bottom left).
    """
    h, w, _ = image.shape
    big = np.repeat(np.repeat(to_uint8(image), 2, axis=0), 2, axis=1)
    tile = np.zeros((2 * h, 2 * w, 3), dtype=np.uint8)
    tile[:h, :w] = to_uint8(stack.depth)
    tile[:h, w:] = to_uint8(stack.normal)
    tile[h:, :w] = to_uint8(stack.segmentation)
    tile[h:, w:] = to_uint8(stack.line)
    return np.concatenate([big, tile], axis=1)


def sample_grid(model, noise_schedule, image_vae, intrinsic_vae, config, conditions, out_dir, quiet=True):
    """
    Sample every condition (condition k uses seed config.seed + k) and write, into ``out_dir``: one PNG contact
    sheet per condition, the raw arrays as ``samples.ildm`` and the trajectory sidecar ``trajectory.json``.
    Returns the list of PNG paths.
    """
    if len(conditions) < 1:
        raise ConfigError("At least one condition is needed", key="prompt")
    os.makedirs(out_dir, exist_ok=True)
    paths, images, intrinsics, trajectories = [], [], [], []
    seed = config.seed
    for k, condition in enumerate(conditions):
        config.seed = seed + k
        try:
            result = sample_joint(model, noise_schedule, image_vae, intrinsic_vae, config, condition, quiet=quiet)
        finally:
            config.seed = seed
        path = os.path.join(out_dir, f"sample_{k:03d}.png")
        imageio.imwrite(path, layout_panels(result.images[0], result.stacks[0]))
        paths.append(path)
        images.append(result.images[0])
        intrinsics.append(stack_to_array(result.stacks[0]))
        trajectories.append(dict(result.trajectory, condition=[int(x) for x in np.asarray(condition).ravel()]))

    TensorContainer({"images": np.stack(images).astype(np.float32),
                     "intrinsics": np.stack(intrinsics).astype(np.float32)}).save(os.path.join(out_dir,
                                                                                                "samples.ildm"))
    with open(os.path.join(out_dir, "trajectory.json"), "w") as f:
        json.dump(trajectories, f, sort_keys=True, indent=2)
    return paths

"""
Intrinsic encodings and the autoencoders.

The four intrinsics (depth, surface normal, segmentation, line drawing) are each stored as a 3-channel field in
[-1, 1] and concatenated in that fixed order into 12 channels. The intrinsic VAE squeezes all twelve channels into
one latent with exactly the shape of the image VAE's latent, so that both domains can be denoised by one network.
"""
import math
from collections import namedtuple

import numpy as np
import pandas as pd
import torch
import torch.nn as nn
import torch.nn.functional as F
from matplotlib.colors import hsv_to_rgb
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist, pdist
from tqdm import tqdm

from ildm.container import load_checkpoint, save_checkpoint
from ildm.errors import ConfigError, ContractError, DegenerateInputError, NumericError

INTRINSIC_NAMES = ("depth", "normal", "segmentation", "line")
NUM_INTRINSIC_CHANNELS = 3 * len(INTRINSIC_NAMES)

IntrinsicStack = namedtuple("IntrinsicStack", INTRINSIC_NAMES)
IntrinsicStack.__doc__ = "The four H x W x 3 intrinsic fields, every value in [-1, 1]."

DEPTH_LOW_PERCENTILE = 2.0
DEPTH_HIGH_PERCENTILE = 98.0

# Depth colormap: piecewise-linear ramp through three RGB anchors (in [0, 1]) at positions 0, 0.5 and 1
COLORMAP_ANCHORS = np.array([[0.05, 0.05, 0.40],   # dark blue (near)
                             [0.10, 0.65, 0.35],   # green
                             [0.98, 0.90, 0.10]])  # yellow (far)
COLORMAP_POSITIONS = np.array([0.0, 0.5, 1.0])
COLORMAP_SIZE = 1024

GOLDEN_RATIO_CONJUGATE = (math.sqrt(5.0) - 1.0) / 2.0


def colormap_lut(size=COLORMAP_SIZE):
    """The depth colormap as a [size, 3] lookup table over scalar positions linspace(0, 1, size)."""
    s = np.linspace(0.0, 1.0, size)
    return np.stack([np.interp(s, COLORMAP_POSITIONS, COLORMAP_ANCHORS[:, k]) for k in range(3)], axis=-1)


_LUT = colormap_lut()
_LUT_TREE = cKDTree(_LUT)


def apply_colormap(scalar):
    """Map a scalar field in [-1, 1] to an H x W x 3 field in [-1, 1]."""
    s = (np.clip(scalar, -1.0, 1.0) + 1.0) / 2.0
    rgb = np.stack([np.interp(s, COLORMAP_POSITIONS, COLORMAP_ANCHORS[:, k]) for k in range(3)], axis=-1)
    return (rgb * 2.0 - 1.0).astype(np.float32)


def invert_colormap(field):
    """Recover the scalar depth in [-1, 1] from a (possibly generated, hence off-ramp) colormapped field."""
    rgb = (np.clip(field, -1.0, 1.0) + 1.0) / 2.0
    _, idx = _LUT_TREE.query(rgb.reshape(-1, 3))
    return (idx / (len(_LUT) - 1) * 2.0 - 1.0).reshape(field.shape[:-1]).astype(np.float32)


def normalize_depth_scalar(raw_depth):
    """
    Affine map of a raw depth field sending its 2nd percentile to -1 and its 98th to 1, clipped to [-1, 1].

    If the two percentiles coincide (e.g. a tiny object on a constant background) the min and max are used instead.
    """
    raw_depth = np.asarray(raw_depth, dtype=np.float64)
    if not np.all(np.isfinite(raw_depth)):
        raise DegenerateInputError("Depth field contains non-finite values", key="depth")
    lo, hi = np.percentile(raw_depth, [DEPTH_LOW_PERCENTILE, DEPTH_HIGH_PERCENTILE])
    if hi <= lo:
        lo, hi = raw_depth.min(), raw_depth.max()
    if hi <= lo:
        raise DegenerateInputError("Depth field is constant, its percentile span is zero", key="depth")
    return np.clip(2.0 * (raw_depth - lo) / (hi - lo) - 1.0, -1.0, 1.0)


def normalize_depth(raw_depth):
    """Raw H x W depth -> colormapped H x W x 3 field in [-1, 1]."""
    return apply_colormap(normalize_depth_scalar(raw_depth))


def encode_normals(normals):
    """Unit normals already have components in [-1, 1]; they are stored as they are."""
    return np.clip(normals, -1.0, 1.0).astype(np.float32)


def decode_normals(field, eps=1e-8):
    """Renormalise a (generated) normal field to unit vectors."""
    norm = np.linalg.norm(field, axis=-1, keepdims=True)
    return field / np.maximum(norm, eps)


def segmentation_palette(ids):
    """
    Colour instance ids: id 0 (background) is black, id k gets hue frac(k * 0.618...) at full saturation and value.
    Returns an [..., 3] field in [-1, 1].
    """
    ids = np.asarray(ids)
    hue = np.mod(ids * GOLDEN_RATIO_CONJUGATE, 1.0)
    hsv = np.stack([hue, np.ones_like(hue), np.ones_like(hue)], axis=-1)
    rgb = hsv_to_rgb(hsv)
    rgb[ids == 0] = 0.0
    return (rgb * 2.0 - 1.0).astype(np.float32)


def line_field(edges):
    """Boolean edge map -> replicated grayscale field: 1 on edges, -1 elsewhere."""
    gray = np.where(edges, 1.0, -1.0).astype(np.float32)
    return np.repeat(gray[..., None], 3, axis=-1)


def stack_to_array(stack):
    """IntrinsicStack -> H x W x 12 array in the fixed field order."""
    return np.concatenate([np.asarray(f, dtype=np.float32) for f in stack], axis=-1)


def array_to_stack(array):
    """H x W x 12 (or [..., 12]) array -> IntrinsicStack."""
    if array.shape[-1] != NUM_INTRINSIC_CHANNELS:
        raise ContractError(f"Intrinsic arrays need {NUM_INTRINSIC_CHANNELS} channels, got {array.shape[-1]}",
                            key="intrinsics")
    return IntrinsicStack(*[array[..., 3 * k:3 * k + 3] for k in range(len(INTRINSIC_NAMES))])


def to_nchw(array):
    """[N, H, W, C] numpy -> [N, C, H, W] float32 tensor."""
    return torch.from_numpy(np.ascontiguousarray(np.moveaxis(np.asarray(array, dtype=np.float32), -1, 1)))


def to_nhwc(tensor):
    return np.moveaxis(tensor.detach().cpu().numpy(), 1, -1)


# ********
# Autoencoders
# ********


class VaeConfig:
    """Architecture and training parameters of an autoencoder (image or intrinsic)."""

    KINDS = ("image", "intrinsic")

    def __init__(self, kind="intrinsic", latent_channels=4, downsample=4, width=32, steps=3000, lr=1e-3,
                 batch_size=16, zero_mask_prob=0.1, kl_weight=1e-6, val_fraction=0.1, seed=0):
        if kind not in self.KINDS:
            raise ConfigError(f"VAE kind must be one of {self.KINDS}, not '{kind}'", key="kind")
        if downsample < 1 or downsample & (downsample - 1):
            raise ConfigError(f"Downsample factor must be a power of two, not {downsample}", key="downsample")
        if not 0.0 <= zero_mask_prob <= 1.0:
            raise ConfigError(f"zero_mask_prob must lie in [0, 1], not {zero_mask_prob}", key="zero_mask_prob")
        if steps < 1:
            raise ConfigError(f"steps must be >= 1, not {steps}", key="steps")
        if not 0.0 < val_fraction < 1.0:
            raise ConfigError(f"val_fraction must lie in (0, 1), not {val_fraction}", key="val_fraction")
        self.kind = kind
        self.latent_channels = int(latent_channels)
        self.downsample = int(downsample)
        self.width = int(width)
        self.steps = int(steps)
        self.lr = float(lr)
        self.batch_size = int(batch_size)
        self.zero_mask_prob = float(zero_mask_prob)
        self.kl_weight = float(kl_weight)
        self.val_fraction = float(val_fraction)
        self.seed = int(seed)

    @property
    def in_channels(self):
        return 3 if self.kind == "image" else NUM_INTRINSIC_CHANNELS

    def asdict(self):
        return dict(vars(self))

    @classmethod
    def fromdict(cls, d):
        return cls(**d)


class ConvVae(nn.Module):
    """
    Convolutional VAE with a downsample factor f (stride-2 stages) and C_z latent channels.
    ``scale_factor`` (1 / std of the training latents) is applied when latents are handed to the diffusion model.
    """

    def __init__(self, config):
        super().__init__()
        self.config = config
        w = config.width
        stages = int(math.log2(config.downsample))
        groups = 8 if w % 8 == 0 else 1

        enc = [nn.Conv2d(config.in_channels, w, 3, padding=1)]
        for _ in range(stages):
            enc += [nn.GroupNorm(groups, w), nn.SiLU(), nn.Conv2d(w, w, 3, stride=2, padding=1)]
        enc += [nn.GroupNorm(groups, w), nn.SiLU(), nn.Conv2d(w, w, 3, padding=1)]
        self.encoder = nn.Sequential(*enc)
        self.to_moments = nn.Conv2d(w, 2 * config.latent_channels, 1)

        dec = [nn.Conv2d(config.latent_channels, w, 3, padding=1)]
        for _ in range(stages):
            dec += [nn.GroupNorm(groups, w), nn.SiLU(), nn.Upsample(scale_factor=2, mode="nearest"),
                    nn.Conv2d(w, w, 3, padding=1)]
        dec += [nn.GroupNorm(groups, w), nn.SiLU(), nn.Conv2d(w, config.in_channels, 3, padding=1)]
        self.decoder = nn.Sequential(*dec)
        self.register_buffer("scale_factor", torch.ones(()))
        self.val_mse = None

    def encode(self, x):
        mu, logvar = self.to_moments(self.encoder(x)).chunk(2, dim=1)
        return mu, logvar.clamp(-30.0, 20.0)

    def decode(self, z):
        return self.decoder(z)

    def forward(self, x, generator=None):
        mu, logvar = self.encode(x)
        eps = torch.randn(mu.shape, generator=generator)
        z = mu + torch.exp(0.5 * logvar) * eps
        return self.decode(z), mu, logvar

    def latent_shape(self, resolution):
        size = resolution // self.config.downsample
        return (self.config.latent_channels, size, size)

    def to_latent(self, x):
        """Deterministic, scaled latent of a [B, C, H, W] batch (the posterior mean)."""
        mu, _ = self.encode(x)
        return mu * self.scale_factor

    def from_latent(self, z):
        return self.decode(z / self.scale_factor)


def ImageVae(config=None):
    config = config if config is not None else VaeConfig(kind="image")
    if config.kind != "image":
        raise ConfigError("ImageVae needs kind 'image'", key="kind")
    return ConvVae(config)


def IntrinsicVae(config=None):
    config = config if config is not None else VaeConfig(kind="intrinsic")
    if config.kind != "intrinsic":
        raise ConfigError("IntrinsicVae needs kind 'intrinsic'", key="kind")
    return ConvVae(config)


def check_latent_shapes(image_vae, intrinsic_vae, resolution):
    """Both domains must land in latents of identical shape."""
    a, b = image_vae.latent_shape(resolution), intrinsic_vae.latent_shape(resolution)
    if a != b:
        raise ContractError(f"Image latent shape {a} differs from intrinsic latent shape {b}", key="latent_shape")
    return a


def field_mask_channels(mask):
    """Per-intrinsic booleans [..., 4] -> per-channel booleans [..., 12]."""
    return np.repeat(np.asarray(mask, dtype=bool), 3, axis=-1)


def apply_zero_mask(x, mask):
    """
    Zero the masked intrinsics of a [B, 12, H, W] tensor. ``mask`` holds 4 booleans (shared by the batch) or
    a [B, 4] array; True means the intrinsic is zeroed.
    """
    mask = torch.as_tensor(field_mask_channels(mask))
    if mask.ndim == 1:
        mask = mask.expand(x.shape[0], -1)
    if mask.shape != (x.shape[0], x.shape[1]):
        raise ContractError(f"Zero mask of shape {tuple(mask.shape)} does not fit a batch of {tuple(x.shape)}",
                            key="mask")
    return x.masked_fill(mask[:, :, None, None], 0.0)


def encode_intrinsics(vae, stack, mask=(False, False, False, False)):
    """
    Encode intrinsics into the shared latent. ``stack`` is an IntrinsicStack, an H x W x 12 array or a
    [B, H, W, 12] array; masked intrinsics are replaced by zeros first. Returns a [B, C_z, h, w] tensor.
    """
    if isinstance(stack, IntrinsicStack):
        stack = stack_to_array(stack)
    stack = np.asarray(stack, dtype=np.float32)
    if stack.ndim == 3:
        stack = stack[None]
    if stack.shape[-1] != NUM_INTRINSIC_CHANNELS:
        raise ContractError(f"Expected {NUM_INTRINSIC_CHANNELS} intrinsic channels, got {stack.shape[-1]}",
                            key="stack")
    x = apply_zero_mask(to_nchw(stack), mask)
    with torch.no_grad():
        return vae.to_latent(x)


def decode_intrinsics(vae, latent, resolution=None):
    """Decode shared latents [B, C_z, h, w] into a list of IntrinsicStacks clamped to [-1, 1]."""
    expected = tuple(vae.latent_shape(resolution)) if resolution is not None else None
    if latent.ndim != 4 or latent.shape[1] != vae.config.latent_channels or (
            expected is not None and tuple(latent.shape[1:]) != expected):
        raise ContractError(f"Latent of shape {tuple(latent.shape)} does not fit the intrinsic decoder", key="latent")
    with torch.no_grad():
        out = vae.from_latent(latent).clamp(-1.0, 1.0)
    return [array_to_stack(a) for a in to_nhwc(out)]


def decode_images(vae, latent):
    with torch.no_grad():
        return to_nhwc(vae.from_latent(latent).clamp(-1.0, 1.0))


def kl_to_standard_normal(mu, logvar):
    return 0.5 * torch.mean(mu ** 2 + logvar.exp() - 1.0 - logvar)


def vae_loss(recon, target, mu, logvar, channel_mask, kl_weight):
    """
    Mean squared error over the channels that were not zero-masked at encode time, plus the weighted KL term.
    ``channel_mask`` is a [B, C] boolean tensor of masked channels.
    """
    keep = (~channel_mask).to(recon.dtype)[:, :, None, None].expand_as(recon)
    mse = ((recon - target) ** 2 * keep).sum() / keep.sum().clamp_min(1.0)
    return mse + kl_weight * kl_to_standard_normal(mu, logvar), mse


def train_vae(data, config, quiet=True):
    """
    Train an autoencoder on ``data``: [N, H, W, 3] images or [N, H, W, 12] intrinsics in [-1, 1].

    ``val_fraction`` of the samples are held out. Each intrinsic is zeroed at encode time with probability
    ``zero_mask_prob`` (intrinsic VAEs only) and the zeroed fields are left out of the reconstruction loss. Returns
    (vae, history) where history is a DataFrame of (step, loss, mse). The latent scale factor is set from the
    trained encoder's latents and the per-channel MSE on the held-out samples is stored as ``vae.val_mse``.
    """
    data = np.asarray(data, dtype=np.float32)
    if len(data) == 0:
        raise ConfigError("Cannot train an autoencoder on an empty dataset", key="dataset")
    if data.shape[-1] != config.in_channels:
        raise ContractError(f"A '{config.kind}' VAE needs {config.in_channels} channels, got {data.shape[-1]}",
                            key="dataset")
    n_val = max(1, int(round(len(data) * config.val_fraction)))
    if len(data) - n_val < 1:
        raise ConfigError(f"Dataset of {len(data)} samples is too small to hold out a validation split",
                          key="dataset")
    torch.manual_seed(config.seed)
    generator = torch.Generator().manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    order = rng.permutation(len(data))
    train, val = data[np.sort(order[n_val:])], data[np.sort(order[:n_val])]

    vae = ConvVae(config)
    optimiser = torch.optim.AdamW(vae.parameters(), lr=config.lr)
    x_all = to_nchw(train)
    n = len(x_all)
    history = []

    if not quiet:
        print(f"Training {config.kind} VAE on {n} samples ({n_val} held out) for {config.steps} steps")
    for step in tqdm(range(config.steps), desc=f"{config.kind} vae", disable=quiet):
        idx = rng.choice(n, size=min(config.batch_size, n), replace=False)
        x = x_all[idx]
        if config.kind == "intrinsic" and config.zero_mask_prob > 0:
            field_mask = rng.random((len(idx), len(INTRINSIC_NAMES))) < config.zero_mask_prob
        else:
            field_mask = np.zeros((len(idx), x.shape[1] // 3), dtype=bool)
        channel_mask = torch.as_tensor(field_mask_channels(field_mask))
        x_in = x.masked_fill(channel_mask[:, :, None, None], 0.0)

        recon, mu, logvar = vae(x_in, generator=generator)
        loss, mse = vae_loss(recon, x, mu, logvar, channel_mask, config.kl_weight)
        if not torch.isfinite(loss):
            raise NumericError(f"Non-finite VAE loss at step {step}", key="loss")
        optimiser.zero_grad()
        loss.backward()
        optimiser.step()
        history.append((step, loss.item(), mse.item()))

    set_scale_factor(vae, train)
    vae.eval()
    vae.val_mse = reconstruction_mse(vae, val)
    if not quiet:
        print(f"{config.kind.capitalize()} VAE validation on {n_val} held-out samples:\n"
              f"\tPer-channel MSE: {np.round(vae.val_mse, 5).tolist()}\n")
    return vae, pd.DataFrame(history, columns=["step", "loss", "mse"])


def set_scale_factor(vae, data, max_samples=256):
    with torch.no_grad():
        mu, _ = vae.encode(to_nchw(data[:max_samples]))
    std = mu.std().item()
    vae.scale_factor.fill_(1.0 / std if std > 0 else 1.0)


def reconstruction_mse(vae, data, mask=None):
    """Per-channel reconstruction MSE of a dataset (optionally with a fixed per-intrinsic zero mask)."""
    x = to_nchw(data)
    x_in = apply_zero_mask(x, mask) if mask is not None else x
    with torch.no_grad():
        mu, _ = vae.encode(x_in)
        recon = vae.decode(mu).clamp(-1.0, 1.0)
    return ((recon - x) ** 2).mean(dim=(0, 2, 3)).numpy()


def save_vae(path, vae):
    val_mse = None if vae.val_mse is None else [float(v) for v in vae.val_mse]
    return save_checkpoint(path, "vae", vae, header={"vae": vae.config.asdict(), "val_mse": val_mse})


def load_vae(path, kind=None):
    header, state = load_checkpoint(path, kind="vae")
    config = VaeConfig.fromdict(header["vae"])
    if kind is not None and config.kind != kind:
        raise ConfigError(f"Expected a '{kind}' VAE checkpoint, '{path}' holds a '{config.kind}' one", key=str(path))
    vae = ConvVae(config)
    vae.load_state_dict(state)
    vae.eval()
    if header.get("val_mse") is not None:
        vae.val_mse = np.asarray(header["val_mse"])
    return vae


# ********
# Latent statistics
# ********


def gaussian_kernel(a, b, bandwidth):
    return np.exp(-cdist(a, b, "sqeuclidean") / (2.0 * bandwidth ** 2))


def latent_mmd(latents_a, latents_b, bandwidth):
    """
    Biased estimate of the squared maximum mean discrepancy between two latent sets under a Gaussian kernel:
    mean k(a, a') + mean k(b, b') - 2 mean k(a, b). Latents are flattened to vectors.
    """
    if not bandwidth > 0:
        raise ConfigError(f"MMD bandwidth must be > 0, not {bandwidth}", key="bandwidth")
    a = np.asarray(latents_a, dtype=np.float64).reshape(len(latents_a), -1)
    b = np.asarray(latents_b, dtype=np.float64).reshape(len(latents_b), -1)
    if len(a) == 0 or len(b) == 0:
        raise ContractError("Both latent sets must be non-empty", key="latents")
    return float(gaussian_kernel(a, a, bandwidth).mean() + gaussian_kernel(b, b, bandwidth).mean()
                 - 2.0 * gaussian_kernel(a, b, bandwidth).mean())


def median_bandwidth(*latent_sets):
    """Median pairwise distance of the pooled latents (the usual kernel-width heuristic)."""
    pooled = np.concatenate([np.asarray(s, dtype=np.float64).reshape(len(s), -1) for s in latent_sets])
    d = pdist(pooled)
    d = d[d > 0]
    return float(np.median(d)) if len(d) else 1.0


def mmd_report(images, intrinsics, image_vae, intrinsic_vae, bandwidth=None):
    """
    MMD^2 between image latents and intrinsic latents, for each single intrinsic (the others zeroed) and for the
    full stack. Returns a DataFrame with one row per comparison.
    """
    resolution = images.shape[1]
    check_latent_shapes(image_vae, intrinsic_vae, resolution)
    with torch.no_grad():
        image_latents = image_vae.to_latent(to_nchw(images)).numpy()

    rows = []
    variants = [(name, tuple(j != k for j in range(len(INTRINSIC_NAMES)))) for k, name in enumerate(INTRINSIC_NAMES)]
    variants.append(("all", (False,) * len(INTRINSIC_NAMES)))
    for name, mask in variants:
        intrinsic_latents = encode_intrinsics(intrinsic_vae, intrinsics, mask).numpy()
        bw = bandwidth if bandwidth is not None else median_bandwidth(image_latents, intrinsic_latents)
        rows.append({"intrinsic": name, "mmd2": latent_mmd(image_latents, intrinsic_latents, bw),
                     "bandwidth": bw, "n": len(images)})
    return pd.DataFrame(rows, columns=["intrinsic", "mmd2", "bandwidth", "n"])

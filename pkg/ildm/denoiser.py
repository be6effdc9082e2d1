"""
The dual-branch denoising network.

A small attention UNet predicts noise (or v) for image latents using the base weights. The intrinsic branch runs the
same network with the same base weights plus low-rank adapters on its self-attention projections, and the two
branches exchange keys and values at every self-attention block through cross-domain attention.

Attention blocks are numbered 1..D for the down levels, D+1 for the mid block and D+2..2D+1 for the up levels.
"""
import hashlib
import math
from collections import namedtuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ildm.container import load_checkpoint, save_checkpoint
from ildm.errors import ConfigError, ContainerIOError, ContractError
from ildm.schedule import NoiseSchedule, Parameterization, TIMESTEP_RANGE, to_weight_timestep
from ildm.xattn import (AttnProjections, cross_domain_attention_with_probs, single_domain_attention, softmax_attention,
                        _merge_heads, _split_heads)

BlockIndex = namedtuple("BlockIndex", ["index", "name"])


class DenoiserConfig:
    """Architecture hyperparameters. These are stored in every checkpoint header."""

    def __init__(self,
                 latent_channels=4,
                 latent_size=16,
                 channels=(32, 64),
                 num_heads=2,
                 groups=8,
                 time_dim=128,
                 cond_dim=64,
                 vocab_size=32,
                 caption_len=24,
                 lora_rank=4,
                 lora_alpha=4.0,
                 lora_cross_attention=False,
                 adapt_embeddings=False,
                 parameterization=Parameterization.Epsilon,
                 num_timesteps=TIMESTEP_RANGE):
        self.latent_channels = int(latent_channels)
        self.latent_size = int(latent_size)
        self.channels = tuple(int(c) for c in channels)
        self.num_heads = int(num_heads)
        self.groups = int(groups)
        self.time_dim = int(time_dim)
        self.cond_dim = int(cond_dim)
        self.vocab_size = int(vocab_size)
        self.caption_len = int(caption_len)
        self.lora_rank = int(lora_rank)
        self.lora_alpha = float(lora_alpha)
        self.lora_cross_attention = bool(lora_cross_attention)
        self.adapt_embeddings = bool(adapt_embeddings)
        self.parameterization = Parameterization.parse(parameterization)
        self.num_timesteps = int(num_timesteps)
        self.validate()

    def validate(self):
        if len(self.channels) < 1:
            raise ConfigError("At least one resolution level is needed", key="channels")
        for c in self.channels:
            if c % self.groups != 0:
                raise ConfigError(f"Channel width {c} is not divisible by {self.groups} groups", key="channels")
            if c % self.num_heads != 0:
                raise ConfigError(f"Channel width {c} is not divisible by {self.num_heads} heads", key="num_heads")
        if self.latent_size % (2 ** (len(self.channels) - 1)) != 0:
            raise ConfigError(f"Latent size {self.latent_size} cannot be halved {len(self.channels) - 1} times",
                              key="latent_size")
        if self.lora_rank < 1 or self.lora_rank > min(self.channels):
            raise ConfigError(f"LoRA rank must lie in [1, {min(self.channels)}], not {self.lora_rank}",
                              key="lora_rank")

    @property
    def num_levels(self):
        return len(self.channels)

    def asdict(self):
        d = dict(vars(self))
        d["channels"] = list(self.channels)
        d["parameterization"] = str(self.parameterization)
        return d

    @classmethod
    def fromdict(cls, d):
        return cls(**d)


def block_index_map(num_levels):
    """Attention block indices in network order: down levels, mid, then up levels."""
    down = [BlockIndex(k + 1, f"down.{k}") for k in range(num_levels)]
    mid = [BlockIndex(num_levels + 1, "mid")]
    up = [BlockIndex(num_levels + 2 + j, f"up.{k}") for j, k in enumerate(reversed(range(num_levels)))]
    return down + mid + up


class LoraLinear(nn.Module):
    """
    A linear layer with an optional low-rank delta: W_eff = W + scale * B @ A, scale = alpha / rank.
    B starts at zero so a fresh adapter leaves the layer unchanged. The adapter is only used when asked for.
    """

    def __init__(self, in_features, out_features, rank, alpha, bias=True):
        super().__init__()
        self.base = nn.Linear(in_features, out_features, bias=bias)
        self.rank = rank
        self.scale = alpha / rank
        self.lora_A = nn.Parameter(torch.randn(rank, in_features) / math.sqrt(in_features))
        self.lora_B = nn.Parameter(torch.zeros(out_features, rank))

    def weight_for(self, adapter):
        if not adapter:
            return self.base.weight
        return self.base.weight + self.scale * (self.lora_B @ self.lora_A)

    def forward(self, x, adapter=False):
        return F.linear(x, self.weight_for(adapter), self.base.bias)


def timestep_features(t, dim):
    """Sinusoidal features of (possibly fractional) timesteps, [B] -> [B, dim]."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None, :]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class TimeEmbedding(nn.Module):
    def __init__(self, config):
        super().__init__()
        self.feature_dim = config.channels[0]
        self.lin1 = LoraLinear(self.feature_dim, config.time_dim, config.lora_rank, config.lora_alpha)
        self.lin2 = LoraLinear(config.time_dim, config.time_dim, config.lora_rank, config.lora_alpha)

    def forward(self, t, adapter=False):
        h = self.lin1(timestep_features(t, self.feature_dim), adapter)
        return self.lin2(F.silu(h), adapter)


class ConditionEmbedding(nn.Module):
    """
    Learned embedding of caption token sequences. Token 0 is the null token used for classifier-free guidance;
    an all-null caption is the unconditional input.
    """

    NULL_TOKEN = 0

    def __init__(self, config):
        super().__init__()
        self.caption_len = config.caption_len
        self.tokens = nn.Embedding(config.vocab_size, config.cond_dim)
        self.positions = nn.Parameter(torch.randn(config.caption_len, config.cond_dim) * 0.02)
        self.proj = LoraLinear(config.cond_dim, config.cond_dim, config.lora_rank, config.lora_alpha)

    def null_condition(self, batch_size):
        return torch.full((batch_size, self.caption_len), self.NULL_TOKEN, dtype=torch.long)

    def forward(self, c, adapter=False):
        if c.shape[-1] != self.caption_len:
            raise ContractError(f"Captions must have {self.caption_len} tokens, got {c.shape[-1]}", key="c")
        return self.proj(self.tokens(c) + self.positions, adapter)


class ResBlock(nn.Module):
    def __init__(self, in_channels, out_channels, time_dim, groups):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, in_channels)
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, out_channels)
        self.norm2 = nn.GroupNorm(groups, out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        self.skip = nn.Conv2d(in_channels, out_channels, 1) if in_channels != out_channels else nn.Identity()

    def forward(self, h, temb):
        out = self.conv1(F.silu(self.norm1(h)))
        out = out + self.time_proj(F.silu(temb))[:, :, None, None]
        out = self.conv2(F.silu(self.norm2(out)))
        return self.skip(h) + out


def _to_tokens(h):
    # [B, C, H, W] -> [B, HW, C]
    return h.flatten(2).transpose(1, 2)


def _from_tokens(z, like):
    return z.transpose(1, 2).reshape(like.shape)


class SelfAttentionBlock(nn.Module):
    """
    Self-attention site with index ``index``. Used alone it is ordinary self-attention; given an intrinsic hidden
    state as well it runs cross-domain attention, the intrinsic branch using the adapted projections.
    """

    def __init__(self, channels, config, index):
        super().__init__()
        self.index = index
        self.num_heads = config.num_heads
        self.norm = nn.GroupNorm(config.groups, channels)
        r, a = config.lora_rank, config.lora_alpha
        self.to_q = LoraLinear(channels, channels, r, a, bias=False)
        self.to_k = LoraLinear(channels, channels, r, a, bias=False)
        self.to_v = LoraLinear(channels, channels, r, a, bias=False)
        self.to_out = LoraLinear(channels, channels, r, a)
        self.attn_path = "fused"
        self.capture = False
        self.captured = None

    def projections(self, adapter=True):
        return AttnProjections(
            q_x=self.to_q.weight_for(False), k_x=self.to_k.weight_for(False), v_x=self.to_v.weight_for(False),
            q_i=self.to_q.weight_for(adapter), k_i=self.to_k.weight_for(adapter), v_i=self.to_v.weight_for(adapter))

    def forward(self, h_x, h_i=None, w=0.0, adapter=True):
        z_x = _to_tokens(self.norm(h_x))
        if h_i is None:
            out, _ = single_domain_attention(z_x, self.to_q.weight_for(False), self.to_k.weight_for(False),
                                             self.to_v.weight_for(False), self.num_heads)
            return h_x + _from_tokens(self.to_out(out), h_x), None

        if self.capture:
            self.captured = (h_x.detach(), h_i.detach(), w)
        z_i = _to_tokens(self.norm(h_i))
        attn_x, attn_i, _ = cross_domain_attention_with_probs(z_x, z_i, self.projections(adapter), w,
                                                              num_heads=self.num_heads, path=self.attn_path)
        out_x = h_x + _from_tokens(self.to_out(attn_x), h_x)
        out_i = h_i + _from_tokens(self.to_out(attn_i, adapter), h_i)
        return out_x, out_i

    def attention_row(self, h_x, h_i, w, query_position, adapter=True):
        """Image-branch attention probabilities of one query token over the 2N keys, averaged over heads."""
        n = h_x.shape[-2] * h_x.shape[-1]
        if not 0 <= query_position < n:
            raise ContractError(f"Query position {query_position} outside the {n}-token grid", key="query_position")
        z_x = _to_tokens(self.norm(h_x))
        z_i = _to_tokens(self.norm(h_i))
        _, _, probs = cross_domain_attention_with_probs(z_x, z_i, self.projections(adapter), w,
                                                        num_heads=self.num_heads, path=self.attn_path)
        return probs[0, :, query_position, :].mean(dim=0)


class ConditionAttentionBlock(nn.Module):
    """Cross-attention from image tokens to caption embeddings. Adapters only when lora_cross_attention is set."""

    def __init__(self, channels, config):
        super().__init__()
        self.num_heads = config.num_heads
        self.use_adapter = config.lora_cross_attention
        self.norm = nn.GroupNorm(config.groups, channels)
        r, a = config.lora_rank, config.lora_alpha
        self.to_q = LoraLinear(channels, channels, r, a, bias=False)
        self.to_k = LoraLinear(config.cond_dim, channels, r, a, bias=False)
        self.to_v = LoraLinear(config.cond_dim, channels, r, a, bias=False)
        self.to_out = LoraLinear(channels, channels, r, a)

    def forward(self, h, cond, adapter=False):
        adapter = adapter and self.use_adapter
        q = _split_heads(self.to_q(_to_tokens(self.norm(h)), adapter), self.num_heads)
        k = _split_heads(self.to_k(cond, adapter), self.num_heads)
        v = _split_heads(self.to_v(cond, adapter), self.num_heads)
        out, _ = softmax_attention(q, k, v)
        return h + _from_tokens(self.to_out(_merge_heads(out), adapter), h)


class Level(nn.Module):
    """One resolution level of the UNet: residual block, self-attention site, condition attention."""

    def __init__(self, in_channels, out_channels, config, index):
        super().__init__()
        self.res = ResBlock(in_channels, out_channels, config.time_dim, config.groups)
        self.attn = SelfAttentionBlock(out_channels, config, index)
        self.cond = ConditionAttentionBlock(out_channels, config)

    def forward(self, h_x, h_i, temb_x, temb_i, cond_x, cond_i, w, adapter):
        h_x = self.res(h_x, temb_x)
        if h_i is not None:
            h_i = self.res(h_i, temb_i)
        h_x, h_i = self.attn(h_x, h_i, w, adapter)
        h_x = self.cond(h_x, cond_x)
        if h_i is not None:
            h_i = self.cond(h_i, cond_i, adapter)
        return h_x, h_i


class DualUNet(nn.Module):
    """
    The denoiser epsilon_{theta, theta'}. Base parameters theta are everything except the ``lora_`` parameters;
    the adapters theta' are only ever used by the intrinsic branch.
    """

    def __init__(self, config=None):
        super().__init__()
        self.config = config if config is not None else DenoiserConfig()
        cfg = self.config
        ch = cfg.channels
        D = cfg.num_levels
        self.blocks = block_index_map(D)

        self.time_embed = TimeEmbedding(cfg)
        self.cond_embed = ConditionEmbedding(cfg)
        self.conv_in = nn.Conv2d(cfg.latent_channels, ch[0], 3, padding=1)

        self.down = nn.ModuleList()
        self.downsample = nn.ModuleList()
        prev = ch[0]
        for k in range(D):
            self.down.append(Level(prev, ch[k], cfg, index=k + 1))
            self.downsample.append(nn.Conv2d(ch[k], ch[k], 3, stride=2, padding=1) if k < D - 1 else nn.Identity())
            prev = ch[k]

        self.mid = Level(ch[-1], ch[-1], cfg, index=D + 1)
        self.mid_res = ResBlock(ch[-1], ch[-1], cfg.time_dim, cfg.groups)

        self.up = nn.ModuleList()
        self.upsample = nn.ModuleList()
        for j, k in enumerate(reversed(range(D))):
            self.up.append(Level(prev + ch[k], ch[k], cfg, index=D + 2 + j))
            self.upsample.append(nn.Conv2d(ch[k], ch[k], 3, padding=1) if k > 0 else nn.Identity())
            prev = ch[k]

        self.norm_out = nn.GroupNorm(cfg.groups, ch[0])
        self.conv_out = nn.Conv2d(ch[0], cfg.latent_channels, 3, padding=1)

    # ********
    # Parameter groups
    # ********

    def adapter_parameters(self):
        return [p for name, p in self.named_parameters() if "lora_" in name]

    def base_parameters(self):
        return [p for name, p in self.named_parameters() if "lora_" not in name]

    def base_state_dict(self):
        return {k: v for k, v in self.state_dict().items() if "lora_" not in k}

    def freeze_base(self):
        """Only the adapters receive gradients from now on."""
        for name, p in self.named_parameters():
            p.requires_grad_("lora_" in name)

    def attention_blocks(self):
        return [level.attn for level in list(self.down) + [self.mid] + list(self.up)]

    def set_attn_path(self, path):
        for block in self.attention_blocks():
            block.attn_path = path

    # ********
    # Forward passes
    # ********

    def _check_inputs(self, x_t, i_t=None):
        cfg = self.config
        expected = (cfg.latent_channels, cfg.latent_size, cfg.latent_size)
        if tuple(x_t.shape[1:]) != expected:
            raise ContractError(f"Latent shape {tuple(x_t.shape[1:])} does not match the network's {expected}",
                                key="x_t")
        if i_t is not None and tuple(i_t.shape) != tuple(x_t.shape):
            raise ContractError(f"Image and intrinsic latents differ in shape: {tuple(x_t.shape)} vs "
                                f"{tuple(i_t.shape)}", key="i_t")

    def _as_batch_timesteps(self, t, batch_size):
        if not isinstance(t, torch.Tensor):
            t = torch.tensor([t] * batch_size)
        elif t.ndim == 0:
            t = t.expand(batch_size)
        return t

    def _run(self, x_t, i_t, t, c, weights, adapter):
        adapt_embed = adapter and self.config.adapt_embeddings
        temb_x = self.time_embed(t)
        cond_x = self.cond_embed(c)
        temb_i = self.time_embed(t, adapt_embed) if i_t is not None else None
        cond_i = self.cond_embed(c, adapt_embed) if i_t is not None else None

        h_x = self.conv_in(x_t)
        h_i = self.conv_in(i_t) if i_t is not None else None
        skips = []
        for level, downsample in zip(self.down, self.downsample):
            h_x, h_i = level(h_x, h_i, temb_x, temb_i, cond_x, cond_i, weights.get(level.attn.index, 0.0), adapter)
            skips.append((h_x, h_i))
            h_x = downsample(h_x)
            h_i = downsample(h_i) if h_i is not None else None

        h_x, h_i = self.mid(h_x, h_i, temb_x, temb_i, cond_x, cond_i, weights.get(self.mid.attn.index, 0.0), adapter)
        h_x = self.mid_res(h_x, temb_x)
        h_i = self.mid_res(h_i, temb_i) if h_i is not None else None

        for level, upsample in zip(self.up, self.upsample):
            skip_x, skip_i = skips.pop()
            h_x = torch.cat([h_x, skip_x], dim=1)
            h_i = torch.cat([h_i, skip_i], dim=1) if h_i is not None else None
            h_x, h_i = level(h_x, h_i, temb_x, temb_i, cond_x, cond_i, weights.get(level.attn.index, 0.0), adapter)
            if not isinstance(upsample, nn.Identity):
                h_x = upsample(F.interpolate(h_x, scale_factor=2, mode="nearest"))
                h_i = upsample(F.interpolate(h_i, scale_factor=2, mode="nearest")) if h_i is not None else None

        pred_x = self.conv_out(F.silu(self.norm_out(h_x)))
        pred_i = self.conv_out(F.silu(self.norm_out(h_i))) if h_i is not None else None
        return pred_x, pred_i

    def block_weights(self, sched, t):
        """
        The cross-domain weight for every attention block at (internal) timestep t: python floats when t is a
        scalar or the schedule is constant, otherwise per-example tensors.
        """
        T = self.config.num_timesteps
        if isinstance(t, torch.Tensor) and t.ndim > 0:
            values = torch.unique(t)
            if len(values) == 1 or sched.is_constant():
                t = values[0].item()
            else:
                return {b.index: torch.tensor([sched.weight(b.index, to_weight_timestep(v, T)) for v in t.tolist()])
                        for b in self.blocks}
        elif isinstance(t, torch.Tensor):
            t = t.item()
        return {b.index: float(sched.weight(b.index, to_weight_timestep(t, T))) for b in self.blocks}

    def forward_image_only(self, x_t, t, c):
        """The base model: single-domain denoising of image latents."""
        self._check_inputs(x_t)
        pred_x, _ = self._run(x_t, None, self._as_batch_timesteps(t, x_t.shape[0]), c, {}, adapter=False)
        return pred_x

    def forward_dual(self, x_t, i_t, t, c, sched, applied=None, use_adapters=True):
        """
        Joint denoising of image and intrinsic latents. Returns (pred_x, pred_i).

        When ``applied`` is a dict it receives the weight used at each block index.
        """
        self._check_inputs(x_t, i_t)
        weights = self.block_weights(sched, t)
        if applied is not None:
            applied.update(weights)
        return self._run(x_t, i_t, self._as_batch_timesteps(t, x_t.shape[0]), c, weights, adapter=use_adapters)

    forward = forward_dual

    def attention_heatmap(self, x_t, i_t, t, c, sched, query_position, block_index=None):
        """
        Image-branch attention of one query token over the 2N keys (own tokens first) at the given block
        (the mid block by default), for the first example of the batch.
        """
        if block_index is None:
            block_index = self.mid.attn.index
        blocks = {b.index: b for b in self.attention_blocks()}
        if block_index not in blocks:
            raise ContractError(f"No attention block with index {block_index}", key="block_index")
        block = blocks[block_index]
        block.capture = True
        try:
            with torch.no_grad():
                self.forward_dual(x_t, i_t, t, c, sched)
                h_x, h_i, w = block.captured
                return block.attention_row(h_x, h_i, w, query_position)
        finally:
            block.capture = False
            block.captured = None


def parameter_digest(tensors):
    """A stable hash of a list of tensors (used to check that frozen weights never move)."""
    h = hashlib.sha256()
    for t in tensors:
        h.update(np.ascontiguousarray(t.detach().cpu().numpy()).tobytes())
    return h.hexdigest()


# ********
# Checkpoints
# ********

def build_denoiser(config, seed=0):
    """A fresh network; the adapters' random A matrices come from ``seed`` without touching the global RNG."""
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        return DualUNet(config)


def save_denoiser(path, model, kind, noise_schedule, extra=None):
    """
    Write a ``base`` checkpoint (base parameters only) or an ``ildm`` checkpoint (base plus adapters). The header
    records the architecture and the noise schedule, so loading never needs the training configuration.
    """
    header = {"denoiser": model.config.asdict(), "noise_schedule": noise_schedule.asdict()}
    header.update(extra or {})
    state = model.base_state_dict() if kind == "base" else model.state_dict()
    return save_checkpoint(path, kind, model, header=header, state=state)


def load_denoiser(path, kind=None, **config_overrides):
    """
    Load a base or joint checkpoint. Returns (model, noise_schedule, header). ``config_overrides`` replace
    architecture entries of the header (used to attach adapters of a chosen rank to a base model).
    """
    header, state = load_checkpoint(path, kind=kind)
    if header.get("kind") not in ("base", "ildm"):
        raise ContainerIOError(f"'{path}' is not a denoiser checkpoint (kind '{header.get('kind')}')", key=str(path))
    d = dict(header["denoiser"])
    d.update(config_overrides)
    model = build_denoiser(DenoiserConfig.fromdict(d))
    missing, unexpected = model.load_state_dict(state, strict=False)
    if unexpected or any("lora_" not in k for k in missing) or (header["kind"] == "ildm" and missing):
        raise ContainerIOError(f"Checkpoint '{path}' does not fit the network it describes "
                               f"(missing {missing[:3]}, unexpected {unexpected[:3]})", key=str(path))
    model.eval()
    return model, NoiseSchedule.fromdict(header["noise_schedule"]), header

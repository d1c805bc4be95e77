# backbone.py
"""Miniature conditional denoising U-Net used as the feature extractor.

Data flow for one image::

    image --codec--> z0 --(heatmaps)--> c_j --control branch--> residuals
    keypoints --prompt MLP--> c_t (cross-attention context)
    z0, t*, c_t, residuals --U-Net--> decoder features F_i + attention maps T_i

Features are read from the output blocks coarse to fine; each pyramid level is
concat(F_i, T_i) followed by a learned 1x1 merge.
"""

import copy
import math
from dataclasses import dataclass
from typing import List, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from conditioning import (
    HeatmapAddEncoder,
    KeypointPromptMLP,
    KeypointSet,
    build_condition,
    embed_keypoints,
    make_heatmaps,
)
from config import BackboneConfig, CONDITION_MODES
from exceptions import ConfigurationError, DimensionError, TimestepOutOfRangeError
from logger import StructuredLogger
from validation import validate_schedule

logger = StructuredLogger(__name__)


# --- noise schedule -------------------------------------------------------------


class NoiseSchedule:
    def __init__(self, alpha_bar: torch.Tensor):
        if not validate_schedule(alpha_bar):
            raise ConfigurationError("backbone.schedule", "alpha_bar must start at 1 and strictly decrease")
        self.alpha_bar = alpha_bar

    @classmethod
    def linear(cls, timesteps, beta_start, beta_end):
        betas = torch.linspace(beta_start, beta_end, timesteps, dtype=torch.float64)
        alpha_bar = torch.cat([torch.ones(1, dtype=torch.float64), torch.cumprod(1.0 - betas, dim=0)])
        return cls(alpha_bar)

    @property
    def T(self):
        return self.alpha_bar.shape[0] - 1

    def check_timesteps(self, t):
        t = torch.as_tensor(t)
        if t.numel() and (t.min().item() < 0 or t.max().item() > self.T):
            bad = t.min().item() if t.min().item() < 0 else t.max().item()
            raise TimestepOutOfRangeError(bad, self.T)
        return t.long()

    def add_noise(self, z0, t, eps):
        """z_t = sqrt(alpha_bar_t) z0 + sqrt(1 - alpha_bar_t) eps, t per batch item or scalar."""
        if eps.shape != z0.shape:
            raise DimensionError(tuple(z0.shape), tuple(eps.shape), "noise must match the latent shape")
        t = self.check_timesteps(t)
        ab = self.alpha_bar.to(z0.device)[t].to(z0.dtype)
        ab = ab.reshape(ab.shape + (1,) * (z0.dim() - ab.dim()))
        return torch.sqrt(ab) * z0 + torch.sqrt(1.0 - ab) * eps


def add_noise(schedule: NoiseSchedule, z0, t, eps):
    return schedule.add_noise(z0, t, eps)


def timestep_embedding(t, dim, max_period=10000.0):
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / max(half, 1))
    args = t.to(torch.float64).unsqueeze(-1) * freqs.to(t.device)
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


# --- latent codec -------------------------------------------------------------------


class LatentCodec(nn.Module):
    """Strided patch projection standing in for a frozen image autoencoder."""

    def __init__(self, in_channels, latent_channels, factor):
        super().__init__()
        self.factor = factor
        self.encoder = nn.Conv2d(in_channels, latent_channels, kernel_size=factor, stride=factor)
        self.decoder = nn.ConvTranspose2d(latent_channels, in_channels, kernel_size=factor, stride=factor)

    def encode(self, image):
        h, w = image.shape[-2:]
        if h % self.factor or w % self.factor:
            raise DimensionError(
                (h // self.factor * self.factor, w // self.factor * self.factor),
                (h, w),
                f"image size must be divisible by {self.factor}",
            )
        return self.encoder(image)

    def decode(self, z):
        return self.decoder(z)

    def freeze(self):
        for p in self.parameters():
            p.requires_grad_(False)
        return self


# --- building blocks ----------------------------------------------------------------


def _groups(channels, limit=8):
    return max(g for g in range(1, min(limit, channels) + 1) if channels % g == 0)


def _norm(channels, enabled):
    return nn.GroupNorm(_groups(channels), channels) if enabled else nn.Identity()


def _act(name):
    return nn.SiLU() if name == "silu" else nn.Identity()


def zero_conv(channels):
    conv = nn.Conv2d(channels, channels, 1)
    nn.init.zeros_(conv.weight)
    nn.init.zeros_(conv.bias)
    return conv


class LoRALinear(nn.Module):
    """nn.Linear plus a low-rank update scaling * x A^T B^T; B starts at zero."""

    def __init__(self, base: nn.Linear, rank=0, alpha=None):
        super().__init__()
        self.base = base
        self.rank = rank
        self.scaling = (alpha if alpha is not None else rank) / rank if rank > 0 else 0.0
        self.enabled = True
        if rank > 0:
            self.lora_A = nn.Parameter(torch.zeros(rank, base.in_features))
            self.lora_B = nn.Parameter(torch.zeros(base.out_features, rank))
            nn.init.kaiming_uniform_(self.lora_A, a=math.sqrt(5))
        else:
            self.register_parameter("lora_A", None)
            self.register_parameter("lora_B", None)

    def forward(self, x):
        out = self.base(x)
        if self.rank > 0 and self.enabled:
            out = out + self.scaling * (x @ self.lora_A.t() @ self.lora_B.t())
        return out


def set_lora_enabled(module: nn.Module, enabled: bool):
    for m in module.modules():
        if isinstance(m, LoRALinear):
            m.enabled = enabled


def lora_parameters(module: nn.Module):
    return [p for n, p in module.named_parameters() if "lora_" in n]


class CrossAttention(nn.Module):
    def __init__(self, query_dim, context_dim, num_heads, lora_rank=0, lora_alpha=None):
        super().__init__()
        if query_dim % num_heads:
            raise ConfigurationError("backbone.num_heads", f"{query_dim} channels not divisible by {num_heads} heads")
        self.num_heads = num_heads
        self.head_dim = query_dim // num_heads
        self.to_q = LoRALinear(nn.Linear(query_dim, query_dim, bias=False), lora_rank, lora_alpha)
        self.to_k = LoRALinear(nn.Linear(context_dim, query_dim, bias=False), lora_rank, lora_alpha)
        self.to_v = LoRALinear(nn.Linear(context_dim, query_dim, bias=False), lora_rank, lora_alpha)
        self.to_out = LoRALinear(nn.Linear(query_dim, query_dim), lora_rank, lora_alpha)

    def _heads(self, x):
        b, n, _ = x.shape
        return x.view(b, n, self.num_heads, self.head_dim).transpose(1, 2)

    def forward(self, x, context):
        """x [B, L, C], context [B, N, D] -> (out [B, L, C], probs [B, L, N] averaged over heads)."""
        q, k, v = self._heads(self.to_q(x)), self._heads(self.to_k(context)), self._heads(self.to_v(context))
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        probs = scores.softmax(dim=-1)
        out = (probs @ v).transpose(1, 2).reshape(x.shape)
        return self.to_out(out), probs.mean(dim=1)


class SpatialCrossAttention(nn.Module):
    def __init__(self, channels, context_dim, cfg: BackboneConfig):
        super().__init__()
        self.norm = _norm(channels, cfg.use_norm)
        self.attn = CrossAttention(channels, context_dim, cfg.num_heads, cfg.lora_rank, cfg.lora_alpha)

    def forward(self, x, context):
        b, c, h, w = x.shape
        tokens = self.norm(x).flatten(2).transpose(1, 2)
        out, probs = self.attn(tokens, context)
        out = out.transpose(1, 2).reshape(b, c, h, w)
        return x + out, probs.transpose(1, 2).reshape(b, context.shape[1], h, w)


class ResBlock(nn.Module):
    def __init__(self, in_channels, out_channels, time_dim, cfg: BackboneConfig):
        super().__init__()
        self.use_norm = cfg.use_norm
        self.norm1 = _norm(in_channels, cfg.use_norm)
        self.act = _act(cfg.activation)
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, out_channels) if cfg.use_time else None
        self.norm2 = _norm(out_channels, cfg.use_norm)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        self.skip = nn.Identity() if in_channels == out_channels else nn.Conv2d(in_channels, out_channels, 1)

    def forward(self, x, temb):
        h = self.conv1(self.act(self.norm1(x)))
        if self.time_proj is not None and temb is not None:
            h = h + self.time_proj(self.act(temb))[..., None, None]
        h = self.conv2(self.act(self.norm2(h)))
        return h + self.skip(x)

    @torch.no_grad()
    def widen_input(self, in_channels):
        """Accept extra input channels; the new ones start with zero weights."""
        old = self.conv1
        out_channels = old.out_channels
        conv1 = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        conv1.weight.zero_()
        conv1.weight[:, : old.in_channels] = old.weight
        conv1.bias.copy_(old.bias)
        self.conv1 = conv1
        self.norm1 = _norm(in_channels, self.use_norm)

        skip = nn.Conv2d(in_channels, out_channels, 1)
        skip.weight.zero_()
        skip.bias.zero_()
        if isinstance(self.skip, nn.Conv2d):
            skip.weight[:, : old.in_channels] = self.skip.weight
            skip.bias.copy_(self.skip.bias)
        else:
            skip.weight[:, : old.in_channels, 0, 0] = torch.eye(out_channels, old.in_channels)
        self.skip = skip


class Downsample(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, stride=2, padding=1)

    def forward(self, x):
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2.0, mode="nearest"))


class InputBlock(nn.Module):
    def __init__(self, in_channels, out_channels, downsample, time_dim, context_dim, cfg):
        super().__init__()
        self.down = Downsample(in_channels) if downsample else None
        self.res = ResBlock(in_channels, out_channels, time_dim, cfg)
        self.attn = SpatialCrossAttention(out_channels, context_dim, cfg) if cfg.use_attention else None

    def forward(self, x, temb, context):
        if self.down is not None:
            x = self.down(x)
        h = self.res(x, temb)
        probs = None
        if self.attn is not None:
            h, probs = self.attn(h, context)
        return h, probs


class MiddleBlock(nn.Module):
    def __init__(self, channels, time_dim, context_dim, cfg):
        super().__init__()
        self.res1 = ResBlock(channels, channels, time_dim, cfg)
        self.attn = SpatialCrossAttention(channels, context_dim, cfg) if cfg.use_attention else None
        self.res2 = ResBlock(channels, channels, time_dim, cfg)

    def forward(self, x, temb, context):
        h = self.res1(x, temb)
        if self.attn is not None:
            h, _ = self.attn(h, context)
        return self.res2(h, temb)


class OutputBlock(nn.Module):
    def __init__(self, in_channels, skip_channels, out_channels, upsample, time_dim, context_dim, cfg):
        super().__init__()
        self.res = ResBlock(in_channels + skip_channels, out_channels, time_dim, cfg)
        self.attn = SpatialCrossAttention(out_channels, context_dim, cfg) if cfg.use_attention else None
        self.up = Upsample(out_channels) if upsample else None

    def forward(self, x, skip, temb, context):
        """Returns (feature before upsampling, attention maps or None, input for the next block)."""
        h = self.res(torch.cat([x, skip], dim=1), temb)
        probs = None
        if self.attn is not None:
            h, probs = self.attn(h, context)
        nxt = self.up(h) if self.up is not None else h
        return h, probs, nxt


@dataclass
class UNetOutput:
    eps_pred: torch.Tensor  # [B, Cz, H0, W0]
    features: List[torch.Tensor]  # coarse -> fine
    attention: List[Optional[torch.Tensor]]  # [B, N, H_i, W_i] per level


class UNet(nn.Module):
    """Three input blocks, one middle block, three output blocks."""

    def __init__(self, cfg: BackboneConfig, latent_channels, context_dim):
        super().__init__()
        c0, c1, c2 = cfg.channels
        self.base_channels = c0
        time_dim = 4 * c0
        self.time_embed = (
            nn.Sequential(nn.Linear(c0, time_dim), _act(cfg.activation), nn.Linear(time_dim, time_dim))
            if cfg.use_time
            else None
        )
        self.input_blocks = nn.ModuleList(
            [
                InputBlock(latent_channels, c0, False, time_dim, context_dim, cfg),
                InputBlock(c0, c1, True, time_dim, context_dim, cfg),
                InputBlock(c1, c2, True, time_dim, context_dim, cfg),
            ]
        )
        self.middle = MiddleBlock(c2, time_dim, context_dim, cfg)
        self.output_blocks = nn.ModuleList(
            [
                OutputBlock(c2, c2, c2, True, time_dim, context_dim, cfg),
                OutputBlock(c2, c1, c1, True, time_dim, context_dim, cfg),
                OutputBlock(c1, c0, c0, False, time_dim, context_dim, cfg),
            ]
        )
        self.out = nn.Sequential(
            _norm(c0, cfg.use_norm), _act(cfg.activation), nn.Conv2d(c0, latent_channels, 3, padding=1)
        )

    @property
    def skip_channels(self):
        """Channel count of the skip tensor each output block consumes, in output-block order."""
        return [blk.res.conv1.out_channels for blk in self.input_blocks][::-1]

    def forward(self, z, t, context, residuals=None) -> UNetOutput:
        if residuals is not None and len(residuals) != len(self.output_blocks):
            raise DimensionError(len(self.output_blocks), len(residuals), "one residual per output block")
        temb = embed_time(self.time_embed, t, self.base_channels, z.dtype)

        skips = []
        h = z
        for blk in self.input_blocks:
            h, _ = blk(h, temb, context)
            skips.append(h)
        h = self.middle(h, temb, context)

        features, attention = [], []
        for i, blk in enumerate(self.output_blocks):
            skip = skips[-(i + 1)]
            if residuals is not None:
                if residuals[i].shape != skip.shape:
                    raise DimensionError(tuple(skip.shape), tuple(residuals[i].shape), f"residual {i}")
                skip = skip + residuals[i]
            feat, probs, h = blk(h, skip, temb, context)
            features.append(feat)
            attention.append(probs)
        return UNetOutput(eps_pred=self.out(h), features=features, attention=attention)


def embed_time(time_embed, t, dim, dtype):
    if time_embed is None:
        return None
    return time_embed(timestep_embedding(t, dim).to(dtype))


class ControlBranch(nn.Module):
    """Trainable copy of the U-Net encoder emitting zero-initialised residuals."""

    def __init__(self, input_blocks: nn.ModuleList, time_embed, base_channels, cond_channels):
        super().__init__()
        self.base_channels = base_channels
        self.time_embed = copy.deepcopy(time_embed)
        self.input_blocks = copy.deepcopy(input_blocks)
        first = self.input_blocks[0].res
        if first.conv1.in_channels != cond_channels:
            first.widen_input(cond_channels)
        self.zero_convs = nn.ModuleList([zero_conv(blk.res.conv1.out_channels) for blk in self.input_blocks])

    @classmethod
    def from_unet(cls, unet: UNet, cond_channels):
        return cls(unet.input_blocks, unet.time_embed, unet.base_channels, cond_channels)

    def forward(self, c_j, t, context):
        """Residuals ordered by the output block that consumes them (coarsest first)."""
        expected = self.input_blocks[0].res.conv1.in_channels
        if c_j.shape[1] != expected:
            raise DimensionError(expected, c_j.shape[1], "condition channel count")
        temb = embed_time(self.time_embed, t, self.base_channels, c_j.dtype)
        residuals = []
        h = c_j
        for blk, zc in zip(self.input_blocks, self.zero_convs):
            h, _ = blk(h, temb, context)
            residuals.append(zc(h))
        return residuals[::-1]


# --- full backbone ----------------------------------------------------------------


@dataclass
class FeaturePyramid:
    levels: List[torch.Tensor]  # concat(F_i, T_i), coarse -> fine
    merged: List[torch.Tensor]  # 1x1-merged to merge_channels
    attention: List[Optional[torch.Tensor]]

    @property
    def shapes(self):
        return [tuple(m.shape[-2:]) for m in self.merged]


def count_parameters(module: nn.Module):
    total = sum(p.numel() for p in module.parameters())
    trainable = sum(p.numel() for p in module.parameters() if p.requires_grad)
    return {"total": total, "trainable": trainable}


class DiffusionBackbone(nn.Module):
    def __init__(self, cfg: BackboneConfig, num_keypoints, image_size, condition_mode="z0+cj+ct"):
        super().__init__()
        if condition_mode not in CONDITION_MODES:
            raise ConfigurationError("ablation.condition_mode", f"unknown condition mode {condition_mode}")
        self.cfg = cfg
        self.num_keypoints = num_keypoints
        self.image_size = image_size
        self.condition_mode = condition_mode
        cz = cfg.latent_channels

        self.codec = LatentCodec(3, cz, cfg.downsample)
        self.schedule = NoiseSchedule.linear(cfg.timesteps, cfg.beta_start, cfg.beta_end)
        self.unet = UNet(cfg, cz, cfg.prompt_dim)
        self.prompt_mlp = KeypointPromptMLP(num_keypoints, cfg.prompt_hidden, cfg.prompt_dim)
        self.null_prompt = nn.Parameter(torch.randn(num_keypoints, cfg.prompt_dim) * 0.02)
        self.heatmap_adder = HeatmapAddEncoder(num_keypoints, cz) if condition_mode == "z0+cj_add" else None
        cond_channels = cz + num_keypoints if condition_mode in ("z0+cj", "z0+cj+ct") else cz
        self.control = ControlBranch.from_unet(self.unet, cond_channels)

        attn_width = num_keypoints if cfg.use_attention else 0
        self.merge = nn.ModuleList(
            [nn.Conv2d(c + attn_width, cfg.merge_channels, 1) for c in self.unet.skip_channels]
        )
        self.configure_pretrain()

    @property
    def latent_size(self):
        return self.image_size // self.cfg.downsample

    @property
    def level_sizes(self):
        return [self.latent_size // 4, self.latent_size // 2, self.latent_size]

    def encode_latent(self, image):
        return self.codec.encode(image)

    def heatmaps(self, kps: KeypointSet):
        return make_heatmaps(kps, self.cfg.heatmap_sigma, self.latent_size, self.latent_size, self.image_size)

    def build_conditions(self, z, kps: KeypointSet):
        """(c_j, c_t) for the configured condition mode."""
        if self.condition_mode == "z0":
            c_j = z
        elif self.condition_mode == "z0+cj_add":
            c_j = self.heatmap_adder(z, self.heatmaps(kps))
        else:
            c_j = build_condition(z, self.heatmaps(kps))
        if self.condition_mode == "z0+cj+ct":
            c_t = embed_keypoints(kps.to(z.dtype), self.prompt_mlp, self.image_size).tokens
        else:
            c_t = self.null_prompt.to(z.dtype).expand(z.shape[0], -1, -1)
        return c_j, c_t

    def control_forward(self, c_j, t, c_t):
        return self.control(c_j, t, c_t)

    def unet_forward(self, z, t, c_t, residuals=None) -> UNetOutput:
        return self.unet(z, t, c_t, residuals)

    def extract_features(self, image, kps: KeypointSet) -> FeaturePyramid:
        """Single noise-free U-Net pass at the configured timestep."""
        z0 = self.encode_latent(image)
        t = self.schedule.check_timesteps(
            torch.full((z0.shape[0],), self.cfg.feature_timestep, dtype=torch.long, device=z0.device)
        )
        c_j, c_t = self.build_conditions(z0, kps)
        out = self.unet_forward(z0, t, c_t, self.control_forward(c_j, t, c_t))
        levels = [
            torch.cat([feat, attn.to(feat.dtype)], dim=1) if attn is not None else feat
            for feat, attn in zip(out.features, out.attention)
        ]
        merged = [proj(level) for proj, level in zip(self.merge, levels)]
        return FeaturePyramid(levels=levels, merged=merged, attention=out.attention)

    def pretrain_loss(self, images, kps: KeypointSet, generator=None, return_terms=False):
        """Denoising objective E||eps - eps_theta(z_t, t, c_t, c_j)||^2 with t ~ U[1, T]."""
        z0 = self.encode_latent(images)
        batch = z0.shape[0]
        t = torch.randint(1, self.schedule.T + 1, (batch,), generator=generator)
        eps = torch.randn(z0.shape, generator=generator, dtype=z0.dtype)
        z_t = self.schedule.add_noise(z0, t, eps)
        c_j, c_t = self.build_conditions(z_t, kps)
        eps_pred = self.unet_forward(z_t, t, c_t, self.control_forward(c_j, t, c_t)).eps_pred
        loss = F.mse_loss(eps_pred, eps)
        if return_terms:
            return loss, eps, eps_pred
        return loss

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]

    def configure_pretrain(self):
        """Everything trains except the codec and the (identity) LoRA adapters."""
        for p in self.parameters():
            p.requires_grad_(True)
        self.codec.freeze()
        for p in lora_parameters(self):
            p.requires_grad_(False)
        return self

    def configure_finetune(self):
        """Base U-Net frozen apart from LoRA (and ResBlocks when unfreeze_resblocks is set)."""
        self.configure_pretrain()
        for name, p in self.unet.named_parameters():
            trainable = "lora_" in name or (self.cfg.unfreeze_resblocks and ".res" in name)
            p.requires_grad_(trainable)
        for p in lora_parameters(self.control):
            p.requires_grad_(True)
        counts = count_parameters(self)
        logger.debug("Configured backbone for fine-tuning", **counts)
        return self

    def attention_mass(self, pyramid: FeaturePyramid, joint_mask):
        """Mean share of cross-attention per pixel landing on the masked prompt tokens, per sample."""
        maps = [a for a in pyramid.attention if a is not None]
        if not maps:
            raise ConfigurationError("backbone.use_attention", "attention maps are disabled")
        mask = joint_mask.to(maps[0].dtype)[..., None, None]
        masses = [(a * mask).sum(dim=1).mean(dim=(-2, -1)) for a in maps]
        return torch.stack(masses).mean(dim=0)


def pretrain_step(backbone: DiffusionBackbone, images, kps, rng, optimizer=None):
    """One denoising update; returns the scalar loss as a float."""
    loss = backbone.pretrain_loss(images, kps, generator=rng)
    if optimizer is not None:
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
    return loss.item()

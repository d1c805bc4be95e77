# conditioning.py

from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from body_model import image_hw
from config import NoiseConfig
from exceptions import ConfigurationError, DimensionError
from logger import StructuredLogger

logger = StructuredLogger(__name__)


@dataclass
class KeypointSet:
    coords: torch.Tensor  # [..., N, 2] pixels
    confidence: torch.Tensor  # [..., N] in [0, 1]
    visible: torch.Tensor  # [..., N] bool

    @property
    def num_joints(self):
        return self.coords.shape[-2]

    def to(self, dtype):
        return KeypointSet(self.coords.to(dtype), self.confidence.to(dtype), self.visible)

    def clone(self):
        return KeypointSet(self.coords.clone(), self.confidence.clone(), self.visible.clone())

    @staticmethod
    def stack(items):
        return KeypointSet(
            torch.stack([k.coords for k in items]),
            torch.stack([k.confidence for k in items]),
            torch.stack([k.visible for k in items]),
        )

    @staticmethod
    def from_visibility(coords, visible):
        return KeypointSet(coords, visible.to(coords.dtype), visible)


@dataclass
class HeatmapStack:
    maps: torch.Tensor  # [..., N, H0, W0]
    sigma: float


@dataclass
class PromptEmbedding:
    tokens: torch.Tensor  # [..., N, D_t]


def make_heatmaps(kps: KeypointSet, sigma, height, width, image_size=None) -> HeatmapStack:
    """Confidence-scaled Gaussian per joint, evaluated at heatmap pixel centres.

    Coordinates are given in image pixels and rescaled to the heatmap grid;
    with image_size=None they are taken to be heatmap pixels already.
    """
    if sigma <= 0:
        raise ConfigurationError("heatmap_sigma", "sigma must be positive")
    img_h, img_w = image_hw(image_size) if image_size is not None else (height, width)
    coords = kps.coords
    u = coords[..., 0] * (width / img_w)
    v = coords[..., 1] * (height / img_h)
    inside = (u >= -width) & (u <= 2 * width) & (v >= -height) & (v <= 2 * height)
    active = kps.visible & inside

    xs = torch.arange(width, dtype=coords.dtype, device=coords.device) + 0.5
    ys = torch.arange(height, dtype=coords.dtype, device=coords.device) + 0.5
    dx2 = (xs - u.unsqueeze(-1)) ** 2  # [..., N, W]
    dy2 = (ys - v.unsqueeze(-1)) ** 2  # [..., N, H]
    kernel = torch.exp(-(dy2.unsqueeze(-1) + dx2.unsqueeze(-2)) / (2.0 * sigma**2))
    maps = kps.confidence[..., None, None] * kernel
    maps = torch.where(active[..., None, None], maps, torch.zeros_like(maps))
    return HeatmapStack(maps=maps, sigma=sigma)


def build_condition(z0, heatmaps) -> torch.Tensor:
    """c_j = concat(z0, H_2D) along channels, latent channels first."""
    maps = heatmaps.maps if isinstance(heatmaps, HeatmapStack) else heatmaps
    if z0.shape[-2:] != maps.shape[-2:] or z0.shape[:-3] != maps.shape[:-3]:
        raise DimensionError(tuple(z0.shape[-2:]), tuple(maps.shape[-2:]), "heatmap and latent sizes differ")
    return torch.cat([z0, maps.to(z0.dtype)], dim=-3)


class HeatmapAddEncoder(nn.Module):
    """Projects heatmaps to latent channels so they can be added onto z0 element-wise."""

    def __init__(self, num_keypoints, latent_channels, hidden=16):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(num_keypoints, hidden, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(hidden, latent_channels, 3, padding=1),
        )

    def forward(self, z0, heatmaps):
        maps = heatmaps.maps if isinstance(heatmaps, HeatmapStack) else heatmaps
        return z0 + self.net(maps.to(z0.dtype))


class KeypointPromptMLP(nn.Module):
    """Two-layer MLP lifting each joint to a prompt token.

    Input per joint is its normalized coordinate (or the learned sentinel when
    invisible) concatenated with a one-hot joint identity.
    """

    def __init__(self, num_keypoints, hidden, token_dim):
        super().__init__()
        self.num_keypoints = num_keypoints
        self.fc1 = nn.Linear(2 + num_keypoints, hidden)
        self.fc2 = nn.Linear(hidden, token_dim)
        self.sentinel = nn.Parameter(torch.full((2,), -2.0))

    def forward(self, normalized, visible):
        sentinel = self.sentinel.to(normalized.dtype).expand_as(normalized)
        inputs = torch.where(visible.unsqueeze(-1), normalized, sentinel)
        identity = torch.eye(self.num_keypoints, dtype=normalized.dtype, device=normalized.device)
        identity = identity.expand(normalized.shape[:-1] + (self.num_keypoints,))
        hidden = F.silu(self.fc1(torch.cat([inputs, identity], dim=-1)))
        return self.fc2(hidden)


def normalize_coords(coords, image_size):
    h, w = image_hw(image_size)
    scale = torch.tensor([w, h], dtype=coords.dtype, device=coords.device)
    return coords / scale * 2.0 - 1.0


def embed_keypoints(kps: KeypointSet, params: KeypointPromptMLP, image_size) -> PromptEmbedding:
    if kps.num_joints != params.num_keypoints:
        raise DimensionError(params.num_keypoints, kps.num_joints, "prompt MLP joint count mismatch")
    return PromptEmbedding(tokens=params(normalize_coords(kps.coords, image_size), kps.visible))


def corrupt_keypoints(gt: KeypointSet, cfg: NoiseConfig, rng: Optional[torch.Generator] = None) -> KeypointSet:
    """Synthesizes detector errors: jitter, symmetric swaps, then misses.

    Random draws happen in a fixed order regardless of the probabilities so a
    seeded generator always yields the same stream.
    """
    coords = gt.coords.clone()
    conf = gt.confidence.clone()
    visible = gt.visible.clone()
    dtype = coords.dtype

    delta = torch.randn(coords.shape, generator=rng, dtype=dtype) * cfg.jitter_sigma
    if cfg.jitter_sigma > 0:
        coords = coords + delta
        decay = torch.exp(-(delta**2).sum(-1) / (2.0 * (3.0 * cfg.jitter_sigma) ** 2))
        conf = conf * decay

    batch_shape = coords.shape[:-2]
    for a, b in cfg.swap_pairs:
        swap = torch.rand(batch_shape, generator=rng, dtype=dtype) < cfg.swap_prob
        if not swap.any():
            continue
        ca, cb = coords[..., a, :].clone(), coords[..., b, :].clone()
        coords[..., a, :] = torch.where(swap.unsqueeze(-1), cb, ca)
        coords[..., b, :] = torch.where(swap.unsqueeze(-1), ca, cb)
        for tensor in (conf, visible):
            ta, tb = tensor[..., a].clone(), tensor[..., b].clone()
            tensor[..., a] = torch.where(swap, tb, ta)
            tensor[..., b] = torch.where(swap, ta, tb)

    missed = torch.rand(conf.shape, generator=rng, dtype=dtype) < cfg.miss_prob
    visible = visible & ~missed
    conf = torch.where(visible, conf, torch.zeros_like(conf))
    return KeypointSet(coords=coords, confidence=conf, visible=visible)

# codebook_regressor.py
"""Discrete pose codebook (VQ-VAE with EMA codebook) and the cascade transformer
regressor that predicts codebook indices, shape and camera from a feature pyramid."""

import math
from dataclasses import dataclass
from typing import List

import torch
import torch.nn as nn
import torch.nn.functional as F

from body_model import BodyParams, rodrigues
from config import CodebookConfig, RegressorConfig
from exceptions import ConfigurationError, DimensionError
from logger import StructuredLogger

logger = StructuredLogger(__name__)

CAM_SCALE_FLOOR = 1e-3


# --- rotation helpers -------------------------------------------------------------


def pose_to_rotmats(theta):
    """Axis-angle [..., J, 3] -> row-major flattened rotations [..., J*9]."""
    rot = rodrigues(theta)
    return rot.reshape(theta.shape[:-2] + (theta.shape[-2] * 9,))


def unflatten_rotmats(flat):
    if flat.shape[-1] % 9:
        raise DimensionError("multiple of 9", flat.shape[-1], "flattened rotation size")
    return flat.reshape(flat.shape[:-1] + (flat.shape[-1] // 9, 3, 3))


def matrix_to_quaternion(rot):
    """Rotation matrices [..., 3, 3] -> unit quaternions (w, x, y, z), numerically stable branch choice."""
    m00, m01, m02 = rot[..., 0, 0], rot[..., 0, 1], rot[..., 0, 2]
    m10, m11, m12 = rot[..., 1, 0], rot[..., 1, 1], rot[..., 1, 2]
    m20, m21, m22 = rot[..., 2, 0], rot[..., 2, 1], rot[..., 2, 2]
    q_abs = torch.sqrt(
        torch.stack(
            [
                1.0 + m00 + m11 + m22,
                1.0 + m00 - m11 - m22,
                1.0 - m00 + m11 - m22,
                1.0 - m00 - m11 + m22,
            ],
            dim=-1,
        ).clamp_min(0.0)
    )
    candidates = torch.stack(
        [
            torch.stack([q_abs[..., 0] ** 2, m21 - m12, m02 - m20, m10 - m01], dim=-1),
            torch.stack([m21 - m12, q_abs[..., 1] ** 2, m10 + m01, m02 + m20], dim=-1),
            torch.stack([m02 - m20, m10 + m01, q_abs[..., 2] ** 2, m12 + m21], dim=-1),
            torch.stack([m10 - m01, m20 + m02, m21 + m12, q_abs[..., 3] ** 2], dim=-1),
        ],
        dim=-2,
    )
    candidates = candidates / (2.0 * q_abs[..., None].clamp_min(0.1))
    best = q_abs.argmax(dim=-1)
    quat = torch.gather(candidates, -2, best[..., None, None].expand(best.shape + (1, 4))).squeeze(-2)
    return quat / quat.norm(dim=-1, keepdim=True)


def quaternion_to_axis_angle(quat):
    quat = torch.where(quat[..., :1] < 0, -quat, quat)
    w, xyz = quat[..., 0], quat[..., 1:]
    norm = xyz.norm(dim=-1)
    angle = 2.0 * torch.atan2(norm, w)
    small = norm < 1e-8
    safe_norm = torch.where(small, torch.ones_like(norm), norm)
    ratio = torch.where(small, 2.0 / w.clamp_min(1e-12), angle / safe_norm)
    return xyz * ratio.unsqueeze(-1)


def rotmats_to_pose(rotmats):
    """Rotations [..., J, 3, 3] or flattened [..., J*9] -> axis-angle [..., J, 3]."""
    if rotmats.dim() < 2 or rotmats.shape[-2:] != (3, 3):
        rotmats = unflatten_rotmats(rotmats)
    return quaternion_to_axis_angle(matrix_to_quaternion(rotmats))


def geodesic_distance(rot_a, rot_b):
    """Angle in radians of rot_a^T rot_b, per matrix."""
    rel = rot_a.transpose(-1, -2) @ rot_b
    cos = (rel.diagonal(dim1=-2, dim2=-1).sum(-1) - 1.0) / 2.0
    return torch.acos(cos.clamp(-1.0 + 1e-7, 1.0 - 1e-7))


def orthogonalize(blocks, method="svd"):
    """Projects [..., 3, 3] blocks onto SO(3).

    "svd" returns the nearest rotation in Frobenius norm (det forced to +1);
    "gram_schmidt" orthonormalizes the first two rows and completes with their
    cross product, which keeps gradients smooth for training.
    """
    if method == "svd":
        u, _, vh = torch.linalg.svd(blocks)
        det = torch.linalg.det(u @ vh)
        fix = torch.ones(blocks.shape[:-1], dtype=blocks.dtype, device=blocks.device)
        fix[..., 2] = det.sign()
        return u @ torch.diag_embed(fix) @ vh
    if method == "gram_schmidt":
        a1, a2 = blocks[..., 0, :], blocks[..., 1, :]
        b1 = F.normalize(a1, dim=-1)
        b2 = F.normalize(a2 - (b1 * a2).sum(-1, keepdim=True) * b1, dim=-1)
        b3 = torch.cross(b1, b2, dim=-1)
        return torch.stack([b1, b2, b3], dim=-2)
    raise ConfigurationError("method", f"unknown orthogonalization method {method}")


# --- codebook -------------------------------------------------------------------


@dataclass
class PoseTokens:
    indices: torch.Tensor  # [..., M] int64


class PoseCodebook(nn.Module):
    """Codebook whose entries are EMA cluster means: entries = sums / max(counts, eps)."""

    def __init__(self, num_codes, code_dim, decay=0.99, laplace_eps=1e-5, restart_after=200):
        super().__init__()
        self.num_codes = num_codes
        self.code_dim = code_dim
        self.decay = decay
        self.laplace_eps = laplace_eps
        self.restart_after = restart_after
        entries = torch.randn(num_codes, code_dim)
        self.register_buffer("entries", entries)
        self.register_buffer("ema_counts", torch.ones(num_codes))
        self.register_buffer("ema_sums", entries.clone())
        self.register_buffer("ages", torch.zeros(num_codes, dtype=torch.int64))

    def distances(self, latents):
        diff = latents.unsqueeze(-2) - self.entries.to(latents.dtype)
        return (diff * diff).sum(-1)

    def quantize(self, latents):
        """Index of the nearest entry per latent; torch.argmin keeps the lowest index on ties."""
        if latents.shape[-1] != self.code_dim:
            raise DimensionError(self.code_dim, latents.shape[-1], "latent width")
        return self.distances(latents).argmin(dim=-1)

    def lookup(self, indices):
        return self.entries[indices]

    def refresh_entries(self):
        self.entries.copy_(self.ema_sums / self.ema_counts.clamp_min(self.laplace_eps).unsqueeze(1))

    @torch.no_grad()
    def initialize_from(self, latents, generator=None):
        """Seeds entries from random latents so training starts inside the data range."""
        flat = latents.reshape(-1, self.code_dim)
        pick = torch.randint(0, flat.shape[0], (self.num_codes,), generator=generator)
        self.ema_sums.copy_(flat[pick].to(self.ema_sums.dtype))
        self.ema_counts.fill_(1.0)
        self.ages.zero_()
        self.refresh_entries()

    @torch.no_grad()
    def ema_update(self, latents, assignments, generator=None):
        flat = latents.reshape(-1, self.code_dim).to(self.ema_sums.dtype)
        assignments = assignments.reshape(-1)
        onehot = F.one_hot(assignments, self.num_codes).to(flat.dtype)
        counts = onehot.sum(dim=0)
        sums = onehot.t() @ flat

        self.ema_counts.mul_(self.decay).add_((1.0 - self.decay) * counts)
        self.ema_sums.mul_(self.decay).add_((1.0 - self.decay) * sums)

        used = counts > 0
        self.ages.add_(1)
        self.ages[used] = 0
        dead = self.ages >= self.restart_after
        if dead.any() and flat.shape[0] > 0:
            num_dead = int(dead.sum().item())
            pick = torch.randint(0, flat.shape[0], (num_dead,), generator=generator)
            self.ema_sums[dead] = flat[pick]
            self.ema_counts[dead] = 1.0
            self.ages[dead] = 0
            logger.warning("Restarted dead codebook entries", count=num_dead)
        self.refresh_entries()


def ema_update(codebook: PoseCodebook, latents, assignments, generator=None):
    codebook.ema_update(latents, assignments, generator=generator)
    return codebook


# --- VQ-VAE -------------------------------------------------------------------


@dataclass
class VQOutput:
    recon: torch.Tensor  # raw decoder blocks [B, J, 3, 3]
    rotmats: torch.Tensor  # Gram-Schmidt projected [B, J, 3, 3]
    latents: torch.Tensor  # [B, M, d] before quantization
    indices: torch.Tensor  # [B, M]
    commitment: torch.Tensor
    perplexity: torch.Tensor


def _mlp(sizes):
    layers = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        layers.append(nn.Linear(a, b))
        if i < len(sizes) - 2:
            layers.append(nn.SiLU())
    return nn.Sequential(*layers)


class PoseVQVAE(nn.Module):
    def __init__(self, num_joints, cfg: CodebookConfig):
        super().__init__()
        self.num_joints = num_joints
        self.num_tokens = cfg.num_tokens
        self.code_dim = cfg.code_dim
        self.commitment_weight = cfg.commitment
        in_dim = num_joints * 9
        self.encoder = _mlp([in_dim, cfg.hidden, cfg.hidden, cfg.num_tokens * cfg.code_dim])
        self.decoder = _mlp([cfg.num_tokens * cfg.code_dim, cfg.hidden, cfg.hidden, in_dim])
        self.codebook = PoseCodebook(
            cfg.num_codes, cfg.code_dim, cfg.decay, cfg.laplace_eps, cfg.restart_after
        )
        self.register_buffer("identity", torch.eye(3).reshape(9).repeat(num_joints))

    @property
    def num_codes(self):
        return self.codebook.num_codes

    def encode(self, rotmats):
        flat = rotmats.reshape(rotmats.shape[:-3] + (-1,)) if rotmats.shape[-2:] == (3, 3) else rotmats
        return self.encoder(flat).reshape(flat.shape[:-1] + (self.num_tokens, self.code_dim))

    def vq_encode(self, rotmats):
        latents = self.encode(rotmats)
        return latents, PoseTokens(self.codebook.quantize(latents))

    def decode_latents(self, quantized):
        flat = quantized.reshape(quantized.shape[:-2] + (-1,))
        out = self.decoder(flat) + self.identity.to(flat.dtype)
        return unflatten_rotmats(out)

    def vq_decode_rotmats(self, tokens: PoseTokens):
        return orthogonalize(self.decode_latents(self.codebook.lookup(tokens.indices)), "svd")

    def vq_decode(self, tokens: PoseTokens):
        return rotmats_to_pose(self.vq_decode_rotmats(tokens))

    def decode_soft(self, logits):
        """Differentiable decode from per-token logits [..., M, K] via softmax-weighted entries."""
        weights = logits.softmax(dim=-1)
        quantized = weights @ self.codebook.entries.to(logits.dtype)
        return orthogonalize(self.decode_latents(quantized), "gram_schmidt")

    def forward(self, rotmats, update_codebook=False, generator=None) -> VQOutput:
        latents = self.encode(rotmats)
        indices = self.codebook.quantize(latents.detach())
        quantized = self.codebook.lookup(indices).to(latents.dtype)
        commitment = F.mse_loss(latents, quantized.detach())
        straight_through = latents + (quantized - latents).detach()
        recon = self.decode_latents(straight_through)
        if update_codebook:
            self.codebook.ema_update(latents.detach(), indices, generator=generator)

        probs = F.one_hot(indices.reshape(-1), self.num_codes).to(latents.dtype).mean(dim=0)
        perplexity = torch.exp(-(probs * torch.log(probs + 1e-10)).sum())
        return VQOutput(
            recon=recon,
            rotmats=orthogonalize(recon, "gram_schmidt"),
            latents=latents,
            indices=indices,
            commitment=commitment,
            perplexity=perplexity,
        )

    def loss(self, out: VQOutput, rotmats_gt):
        """Mean geodesic error + L2 on rotation entries + weighted commitment."""
        rot_gt = unflatten_rotmats(rotmats_gt) if rotmats_gt.shape[-2:] != (3, 3) else rotmats_gt
        geodesic = geodesic_distance(out.rotmats, rot_gt).mean()
        l2 = F.mse_loss(out.recon, rot_gt)
        total = geodesic + l2 + self.commitment_weight * out.commitment
        return total, {"geodesic": geodesic.item(), "l2": l2.item(), "commitment": out.commitment.item()}


# --- regressor ------------------------------------------------------------------


@dataclass
class RegressorOutput:
    token_logits: torch.Tensor  # [..., M, K]
    beta: torch.Tensor  # [..., B]
    cam: torch.Tensor  # [..., 3]


def _inverse_softplus(y):
    return y + math.log(-math.expm1(-y))


class CascadeRegressor(nn.Module):
    """Learned queries refined by one transformer decoder stage per pyramid level, coarse to fine."""

    def __init__(self, cfg: RegressorConfig, feature_dim, num_levels, num_tokens, num_codes, num_betas):
        super().__init__()
        self.num_levels = num_levels
        self.feature_dim = feature_dim
        self.queries = nn.Parameter(torch.randn(num_tokens, feature_dim) * 0.02)
        self.level_embed = nn.Parameter(torch.zeros(num_levels, feature_dim))
        self.stages = nn.ModuleList(
            [
                nn.TransformerDecoderLayer(
                    feature_dim, cfg.num_heads, cfg.ff_dim, dropout=0.0, batch_first=True
                )
                for _ in range(num_levels)
            ]
        )
        self.token_head = nn.Linear(feature_dim, num_codes)
        self.beta_head = nn.Linear(feature_dim, num_betas)
        self.cam_head = nn.Linear(feature_dim, 3)
        with torch.no_grad():
            self.cam_head.weight.mul_(0.01)
            self.cam_head.bias.zero_()
            self.cam_head.bias[0] = _inverse_softplus(cfg.cam_scale_init - CAM_SCALE_FLOOR)

    def forward(self, levels: List[torch.Tensor]) -> RegressorOutput:
        if len(levels) != self.num_levels:
            raise DimensionError(self.num_levels, len(levels), "pyramid level count")
        batch = levels[0].shape[0]
        q = self.queries.to(levels[0].dtype).expand(batch, -1, -1)
        for i, (stage, feat) in enumerate(zip(self.stages, levels)):
            if feat.shape[1] != self.feature_dim:
                raise DimensionError(self.feature_dim, feat.shape[1], f"pyramid level {i} channels")
            memory = feat.flatten(2).transpose(1, 2) + self.level_embed[i].to(feat.dtype)
            q = stage(q, memory)
        pooled = q.mean(dim=1)
        raw_cam = self.cam_head(pooled)
        scale = F.softplus(raw_cam[..., 0]) + CAM_SCALE_FLOOR
        cam = torch.cat([scale.unsqueeze(-1), raw_cam[..., 1:]], dim=-1)
        return RegressorOutput(token_logits=self.token_head(q), beta=self.beta_head(pooled), cam=cam)


def regress(regressor: CascadeRegressor, pyramid) -> RegressorOutput:
    return regressor(pyramid.merged)


def predict_params(output: RegressorOutput, vqvae: PoseVQVAE) -> BodyParams:
    indices = output.token_logits.argmax(dim=-1)
    theta = vqvae.vq_decode(PoseTokens(indices))
    return BodyParams(theta=theta, beta=output.beta, cam=output.cam)

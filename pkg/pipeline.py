# pipeline.py

from dataclasses import dataclass

import torch
import torch.nn as nn

from backbone import DiffusionBackbone, FeaturePyramid, count_parameters
from body_model import BodyParams, BodyTemplate, project, regress_joints, skin, skin_rotmats, template_from_config
from checkpoint import Checkpoint, load_prefixed_state, state_dict_tensors
from codebook_regressor import CascadeRegressor, PoseVQVAE, RegressorOutput, predict_params
from conditioning import KeypointSet
from config import ExperimentConfig, config_hash
from exceptions import CheckpointFormatError
from logger import StructuredLogger

logger = StructuredLogger(__name__)

TEMPLATE_SEED = 0


@dataclass
class ModelOutput:
    pyramid: FeaturePyramid
    regression: RegressorOutput
    rotmats: torch.Tensor  # [B, J, 3, 3]
    beta: torch.Tensor
    cam: torch.Tensor
    vertices: torch.Tensor
    joints3d: torch.Tensor
    joints2d: torch.Tensor
    valid: torch.Tensor


@dataclass
class Prediction:
    params: BodyParams
    vertices: torch.Tensor
    joints3d: torch.Tensor
    joints2d: torch.Tensor


class MeshRecoveryModel(nn.Module):
    """Backbone -> cascade regressor -> codebook decode -> skinned body."""

    def __init__(self, config: ExperimentConfig, vqvae: PoseVQVAE, template: BodyTemplate = None, condition_mode=None):
        super().__init__()
        self.config = config
        self.template = template if template is not None else template_from_config(config.body, seed=TEMPLATE_SEED)
        self.image_size = config.scene.image_size
        self.condition_mode = condition_mode or config.ablation.condition_mode
        num_keypoints = self.template.num_regressed
        self.backbone = DiffusionBackbone(config.backbone, num_keypoints, self.image_size, self.condition_mode)
        self.regressor = CascadeRegressor(
            config.regressor,
            feature_dim=config.backbone.merge_channels,
            num_levels=len(self.backbone.unet.output_blocks),
            num_tokens=config.codebook.num_tokens,
            num_codes=config.codebook.num_codes,
            num_betas=self.template.num_betas,
        )
        self.vqvae = vqvae
        self.freeze_vqvae()

    def freeze_vqvae(self):
        self.vqvae.eval()
        for p in self.vqvae.parameters():
            p.requires_grad_(False)

    def train(self, mode=True):
        super().train(mode)
        self.vqvae.eval()
        return self

    def _template(self, dtype):
        return self.template.to(dtype)

    def forward(self, images, kps: KeypointSet) -> ModelOutput:
        pyramid = self.backbone.extract_features(images, kps)
        regression = self.regressor(pyramid.merged)
        rotmats = self.vqvae.decode_soft(regression.token_logits)
        template = self._template(images.dtype)
        vertices = skin_rotmats(template, rotmats, regression.beta)
        joints3d = regress_joints(template, vertices)
        joints2d, valid = project(joints3d, regression.cam, self.image_size)
        return ModelOutput(
            pyramid=pyramid,
            regression=regression,
            rotmats=rotmats,
            beta=regression.beta,
            cam=regression.cam,
            vertices=vertices,
            joints3d=joints3d,
            joints2d=joints2d,
            valid=valid,
        )

    @torch.no_grad()
    def predict(self, images, kps: KeypointSet) -> Prediction:
        pyramid = self.backbone.extract_features(images, kps)
        params = predict_params(self.regressor(pyramid.merged), self.vqvae)
        template = self._template(images.dtype)
        vertices = skin(template, params.theta, params.beta)
        joints3d = regress_joints(template, vertices)
        joints2d, _ = project(joints3d, params.cam, self.image_size)
        return Prediction(params=params, vertices=vertices, joints3d=joints3d, joints2d=joints2d)

    def parameter_counts(self):
        return count_parameters(self)


def model_checkpoint(model: MeshRecoveryModel, seed, metadata=None) -> Checkpoint:
    tensors = state_dict_tensors("model", model)
    meta = {"kind": "mesh_recovery_model", "condition_mode": model.condition_mode}
    meta.update(metadata or {})
    return Checkpoint(tensors=tensors, metadata=meta, config_hash=config_hash(model.config), seed=seed)


def model_from_checkpoint(ckpt: Checkpoint, config: ExperimentConfig, source="<checkpoint>") -> MeshRecoveryModel:
    if ckpt.metadata.get("kind") != "mesh_recovery_model":
        raise CheckpointFormatError(source, f"{source} does not hold a mesh recovery model")
    if ckpt.config_hash != config_hash(config):
        logger.warning("Checkpoint was written under a different config", path=source)
    vqvae = PoseVQVAE(config.body.num_joints, config.codebook)
    model = MeshRecoveryModel(config, vqvae, condition_mode=ckpt.metadata.get("condition_mode"))
    load_prefixed_state(model, ckpt.tensors, "model")
    model.freeze_vqvae()
    model.eval()
    return model


def vqvae_checkpoint(vqvae: PoseVQVAE, config: ExperimentConfig, seed) -> Checkpoint:
    return Checkpoint(
        tensors=state_dict_tensors("vqvae", vqvae),
        metadata={"kind": "pose_vqvae"},
        config_hash=config_hash(config),
        seed=seed,
    )


def vqvae_from_checkpoint(ckpt: Checkpoint, config: ExperimentConfig, source="<checkpoint>") -> PoseVQVAE:
    if ckpt.metadata.get("kind") != "pose_vqvae":
        raise CheckpointFormatError(source, f"{source} does not hold a pose VQ-VAE")
    vqvae = PoseVQVAE(config.body.num_joints, config.codebook)
    load_prefixed_state(vqvae, ckpt.tensors, "vqvae")
    vqvae.eval()
    return vqvae


def backbone_checkpoint(backbone: DiffusionBackbone, config: ExperimentConfig, seed) -> Checkpoint:
    return Checkpoint(
        tensors=state_dict_tensors("backbone", backbone),
        metadata={"kind": "diffusion_backbone", "condition_mode": backbone.condition_mode},
        config_hash=config_hash(config),
        seed=seed,
    )


def backbone_from_checkpoint(ckpt: Checkpoint, config: ExperimentConfig, num_keypoints, source="<checkpoint>"):
    if ckpt.metadata.get("kind") != "diffusion_backbone":
        raise CheckpointFormatError(source, f"{source} does not hold a diffusion backbone")
    backbone = DiffusionBackbone(
        config.backbone, num_keypoints, config.scene.image_size, ckpt.metadata.get("condition_mode", "z0+cj+ct")
    )
    load_prefixed_state(backbone, ckpt.tensors, "backbone")
    backbone.eval()
    return backbone

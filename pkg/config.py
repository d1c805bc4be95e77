# config.py
import os
import json
import hashlib
from typing import List, Literal, Optional, Tuple

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

load_dotenv()

BASE_DIR = os.path.dirname(os.path.abspath(__file__))
OUTPUT_DIR = os.getenv("OCCMESH_OUTPUT_DIR", os.path.join(BASE_DIR, "runs"))
LOG_LEVEL = os.getenv("OCCMESH_LOG_LEVEL", "INFO").upper()
MAX_RETRIES = 3
RETRY_DELAY = 1
MAX_PARALLEL_SHARDS = int(os.getenv("OCCMESH_MAX_PARALLEL_SHARDS", "4"))

CHECKPOINT_MAGIC = b"DPMK1"
CHECKPOINT_VERSION = 1
REPORT_SCHEMA_VERSION = 1
PROJECTION_SENTINEL = -1.0e4
SMALL_ANGLE_THRESHOLD = 1e-8
LOSS_CONVENTION = "joints=mean-euclidean;smpl=squared-l2-sum-dims-mean-batch"

# SMPL-style kinematic tree, pelvis first
SMPL_PARENTS = [-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21]
SMPL_SWAP_PAIRS = [
    (1, 2), (4, 5), (7, 8), (10, 11), (13, 14), (16, 17), (18, 19), (20, 21), (22, 23)
]

CONDITION_MODES = ("z0", "z0+cj", "z0+cj_add", "z0+cj+ct")
BACKBONE_INITS = ("diffusion_pretrained", "random_init")
SPLITS = ("all", "occluded", "crowded", "clean")


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=False)


class BodyModelConfig(StrictModel):
    num_joints: int = 24
    num_vertices: int = 432
    num_betas: int = 10
    num_regressed: Optional[int] = None
    parents: Optional[List[int]] = None
    limb_radius: float = Field(0.05, gt=0)
    skin_temperature: float = Field(0.02, gt=0)
    ring_segments: int = Field(8, ge=3)
    template_path: Optional[str] = None

    @model_validator(mode="after")
    def _check_counts(self):
        if self.num_joints < 2:
            raise ValueError("num_joints must be at least 2")
        if self.num_vertices < self.num_joints:
            raise ValueError("num_vertices must be at least num_joints")
        if self.parents is not None and len(self.parents) != self.num_joints:
            raise ValueError("parents must list one entry per joint")
        return self

    @property
    def regressed_joints(self) -> int:
        return self.num_regressed or self.num_joints


class BackboneConfig(StrictModel):
    latent_channels: int = 4
    downsample: int = 8
    channels: Tuple[int, int, int] = (32, 64, 128)
    num_heads: int = 4
    prompt_dim: int = 64
    prompt_hidden: int = 128
    lora_rank: int = Field(8, ge=0)
    lora_alpha: Optional[float] = None
    unfreeze_resblocks: bool = False
    timesteps: int = Field(1000, ge=1)
    beta_start: float = 1e-4
    beta_end: float = 0.02
    feature_timestep: int = 0
    heatmap_sigma: float = Field(2.0, gt=0)
    merge_channels: int = 64
    use_norm: bool = True
    activation: Literal["silu", "identity"] = "silu"
    use_attention: bool = True
    use_time: bool = True
    codec_pretrain_epochs: int = 0


class CodebookConfig(StrictModel):
    num_codes: int = 512
    code_dim: int = 64
    num_tokens: int = 48
    hidden: int = 256
    decay: float = Field(0.99, gt=0, lt=1)
    commitment: float = 0.25
    laplace_eps: float = 1e-5
    restart_after: int = 200
    train_poses: int = 4096
    epochs: int = 50
    refine_epochs: int = 0
    batch_size: int = 64
    lr: float = 1e-3


class RegressorConfig(StrictModel):
    num_heads: int = 4
    ff_dim: int = 128
    cam_scale_init: float = Field(0.9, gt=0)


class NoiseConfig(StrictModel):
    jitter_sigma: float = Field(2.0, ge=0)
    miss_prob: float = Field(0.1, ge=0, le=1)
    swap_prob: float = Field(0.05, ge=0, le=1)
    swap_pairs: List[Tuple[int, int]] = Field(default_factory=lambda: list(SMPL_SWAP_PAIRS))


class SceneSpec(StrictModel):
    image_size: int = 64
    num_bodies: int = Field(1, ge=1)
    crowd_prob: float = Field(0.3, ge=0, le=1)
    crowd_overlap: float = Field(0.5, ge=0, le=1)
    occlusion_prob: float = Field(0.4, ge=0, le=1)
    occluder_count: int = Field(1, ge=0)
    occluder_size_range: Tuple[float, float] = (0.15, 0.4)
    scale_range: Tuple[float, float] = (0.75, 0.95)
    translation_range: float = 0.05
    pose_limit_scale: float = Field(1.0, ge=0)
    kappa_near: float = Field(8.0, gt=0)
    kappa_far: float = Field(1.5, gt=0)
    near_weight: float = Field(0.6, ge=0, le=1)
    beta_std: float = Field(1.0, ge=0)
    beta_clip: float = Field(2.0, ge=0)

    @field_validator("image_size")
    @classmethod
    def _divisible(cls, value):
        if value <= 0 or value % 8 != 0:
            raise ValueError("image_size must be a positive multiple of 8")
        return value


class LossWeights(StrictModel):
    lambda_2d: float = Field(5.0, ge=0)
    lambda_3d: float = Field(2.0, ge=0)
    lambda_smpl: float = Field(1.0, ge=0)
    lambda_nkr: float = Field(0.1, ge=0)
    token_ce: float = Field(1.0, ge=0)
    temperature: float = Field(0.1, gt=0)


class TrainConfig(StrictModel):
    batch_size: int = 16
    lr: float = 1e-4
    final_lr: float = 1e-5
    weight_decay: float = 1e-6
    final_fraction: float = Field(1.0 / 6.0, ge=0, le=1)
    pretrain_epochs: int = 5
    teacher_epochs: int = 10
    student_epochs: int = 10
    progress: bool = False


class DataConfig(StrictModel):
    num_train: int = 256
    num_eval: int = 64
    train_dir: Optional[str] = None
    eval_dir: Optional[str] = None


class EvaluationConfig(StrictModel):
    keypoint_source: Literal["gt", "noisy"] = "noisy"
    joint_subset: Optional[List[int]] = None
    unit: str = "scene_units"
    batch_size: int = 16


class AblationConfig(StrictModel):
    condition_mode: Literal["z0", "z0+cj", "z0+cj_add", "z0+cj+ct"] = "z0+cj+ct"
    nkr: bool = True
    backbone: Literal["diffusion_pretrained", "random_init"] = "diffusion_pretrained"
    condition_modes: List[str] = Field(default_factory=lambda: list(CONDITION_MODES))
    nkr_options: List[bool] = Field(default_factory=lambda: [True, False])
    backbones: List[str] = Field(default_factory=lambda: list(BACKBONE_INITS))
    lora_ranks: Optional[List[int]] = None
    seeds: List[int] = Field(default_factory=lambda: [0, 1, 2])

    @model_validator(mode="after")
    def _check_grid(self):
        for mode in self.condition_modes:
            if mode not in CONDITION_MODES:
                raise ValueError(f"unknown condition mode {mode}")
        for init in self.backbones:
            if init not in BACKBONE_INITS:
                raise ValueError(f"unknown backbone init {init}")
        return self


class ExperimentConfig(StrictModel):
    body: BodyModelConfig = Field(default_factory=BodyModelConfig)
    backbone: BackboneConfig = Field(default_factory=BackboneConfig)
    codebook: CodebookConfig = Field(default_factory=CodebookConfig)
    regressor: RegressorConfig = Field(default_factory=RegressorConfig)
    noise: NoiseConfig = Field(default_factory=NoiseConfig)
    scene: SceneSpec = Field(default_factory=SceneSpec)
    losses: LossWeights = Field(default_factory=LossWeights)
    train: TrainConfig = Field(default_factory=TrainConfig)
    data: DataConfig = Field(default_factory=DataConfig)
    evaluation: EvaluationConfig = Field(default_factory=EvaluationConfig)
    ablation: AblationConfig = Field(default_factory=AblationConfig)

    @model_validator(mode="after")
    def _check_cross_fields(self):
        if self.scene.image_size % self.backbone.downsample != 0:
            raise ValueError("scene.image_size must be divisible by backbone.downsample")
        latent = self.scene.image_size // self.backbone.downsample
        if latent % 4 != 0:
            raise ValueError("latent resolution must be divisible by 4 for the U-Net")
        n = self.body.regressed_joints
        for a, b in self.noise.swap_pairs:
            if not (0 <= a < n and 0 <= b < n):
                raise ValueError(f"swap pair ({a}, {b}) outside the keypoint range")
        return self


def load_config(path):
    with open(path, "r", encoding="utf-8") as f:
        data = json.load(f)
    return ExperimentConfig.model_validate(data)


def config_to_json(cfg: ExperimentConfig) -> str:
    return json.dumps(cfg.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(config_to_json(cfg).encode("utf-8")).hexdigest()


def tiny_config(**overrides) -> ExperimentConfig:
    """Smallest configuration the whole pipeline runs with; used by smoke runs and tests."""
    cfg = ExperimentConfig(
        body=BodyModelConfig(num_vertices=192),
        backbone=BackboneConfig(
            channels=(8, 16, 32),
            num_heads=2,
            prompt_dim=16,
            prompt_hidden=32,
            lora_rank=4,
            timesteps=100,
            merge_channels=16,
        ),
        codebook=CodebookConfig(
            num_codes=64, code_dim=8, num_tokens=8, hidden=64, train_poses=256, epochs=5
        ),
        regressor=RegressorConfig(num_heads=2, ff_dim=32),
        scene=SceneSpec(image_size=32),
        train=TrainConfig(batch_size=4, lr=1e-3, pretrain_epochs=1, teacher_epochs=1, student_epochs=1),
        data=DataConfig(num_train=8, num_eval=4),
        ablation=AblationConfig(seeds=[0]),
    )
    if overrides:
        cfg = cfg.model_copy(update=overrides)
    return cfg


def full_scale_config() -> ExperimentConfig:
    return ExperimentConfig(
        body=BodyModelConfig(num_vertices=6890),
        backbone=BackboneConfig(
            channels=(320, 640, 1280),
            num_heads=8,
            prompt_dim=768,
            prompt_hidden=768,
            lora_rank=64,
            merge_channels=2048,
        ),
        codebook=CodebookConfig(num_codes=2048, code_dim=256, num_tokens=48, hidden=1024),
        regressor=RegressorConfig(num_heads=8, ff_dim=4096),
        scene=SceneSpec(image_size=256),
        train=TrainConfig(teacher_epochs=10, student_epochs=30),
    )


def overfit_config() -> ExperimentConfig:
    """Budget under which the pose codebook and the student memorise a small training set.

    The codebook keeps its default size and trains for 1000 epochs; the student
    uses the tiny backbone and 64 samples.
    """
    tiny = tiny_config()
    return tiny.model_copy(
        update={
            "codebook": CodebookConfig(train_poses=32, epochs=1000),
            "regressor": RegressorConfig(num_heads=2),
            "losses": LossWeights(token_ce=5.0),
            "train": TrainConfig(
                batch_size=8, lr=1e-3, final_lr=1e-4, pretrain_epochs=1, teacher_epochs=1, student_epochs=400
            ),
            "data": DataConfig(num_train=64, num_eval=4),
        }
    )

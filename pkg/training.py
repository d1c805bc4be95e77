# training.py
"""Losses and the four training stages: pose VQ-VAE, denoising pretraining of the
backbone, the teacher (ground-truth keypoints) and the student (corrupted
keypoints, distilled towards the frozen teacher's features)."""

import os
from typing import Dict, Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch.optim import AdamW
from torch.optim.lr_scheduler import LambdaLR
from torch.utils.data import DataLoader
from tqdm import tqdm

from backbone import DiffusionBackbone, FeaturePyramid, pretrain_step
from body_model import image_hw, rodrigues
from codebook_regressor import PoseVQVAE, pose_to_rotmats
from config import ExperimentConfig, LossWeights, TrainConfig
from logger import StructuredLogger
from pipeline import MeshRecoveryModel
from synth_data import SampleDataset, collate_records, sample_pose
from utils import append_jsonl, derive_seed, make_generator, seed_everything

logger = StructuredLogger(__name__)


# --- losses -------------------------------------------------------------------


def loss_2d(j2d_pred, j2d_gt, visible, image_size):
    """Mean Euclidean distance over visible joints in crop-normalized coordinates.

    Returns (loss, has_visible); with no visible joint the loss is an exact zero
    that still carries the graph.
    """
    h, w = image_hw(image_size)
    scale = torch.tensor([w, h], dtype=j2d_pred.dtype, device=j2d_pred.device)
    mask = visible.to(torch.bool)
    if not mask.any():
        logger.warning("No visible joints in batch; 2D loss skipped")
        return j2d_pred.sum() * 0.0, False
    diff = (j2d_pred[mask] - j2d_gt.to(j2d_pred.dtype)[mask]) / scale
    return torch.linalg.norm(diff, dim=-1).mean(), True


def loss_3d(j3d_pred, j3d_gt):
    pred = j3d_pred - j3d_pred[..., :1, :]
    gt = j3d_gt - j3d_gt[..., :1, :]
    return torch.linalg.norm(pred - gt, dim=-1).mean()


def loss_smpl(rotmats_pred, beta_pred, rotmats_gt, beta_gt):
    """Squared L2 on rotation matrices plus squared L2 on beta, summed over dimensions, mean over batch."""
    rot = ((rotmats_pred - rotmats_gt) ** 2).flatten(start_dim=-3).sum(-1)
    shape = ((beta_pred - beta_gt) ** 2).sum(-1)
    return (rot + shape).mean()


def _levels(features):
    return features.levels if isinstance(features, FeaturePyramid) else list(features)


def loss_nkr(student, teacher, temperature=0.1):
    """Contrastive (InfoNCE over the batch) plus MSE alignment of student to teacher pyramids.

    Returns (loss, contrastive_used); the contrastive term needs a batch of at least two.
    """
    s_levels, t_levels = _levels(student), _levels(teacher)
    batch = s_levels[0].shape[0]
    contrastive = batch >= 2
    if not contrastive:
        logger.warning("Batch of one; NKR contrastive term skipped")
    total = 0.0
    for s, t in zip(s_levels, t_levels):
        t = t.detach()
        level = F.mse_loss(s, t)
        if contrastive:
            s_vec = F.normalize(s.flatten(2).mean(-1), dim=-1)
            t_vec = F.normalize(t.flatten(2).mean(-1), dim=-1)
            logits = s_vec @ t_vec.t() / temperature
            labels = torch.arange(batch, device=logits.device)
            level = level + F.cross_entropy(logits, labels)
        total = total + level
    return total / len(s_levels), contrastive


def total_loss(components: Dict[str, torch.Tensor], weights: LossWeights, include_nkr=False):
    total = (
        weights.lambda_2d * components["2d"]
        + weights.lambda_3d * components["3d"]
        + weights.lambda_smpl * components["smpl"]
    )
    if include_nkr and "nkr" in components:
        total = total + weights.lambda_nkr * components["nkr"]
    return total


def compute_losses(model: MeshRecoveryModel, batch, weights: LossWeights, kps_source="gt", teacher=None):
    """Forward pass plus every loss component; returns (total, float components, model output)."""
    kps = batch.gt_kps if kps_source == "gt" else batch.noisy_kps
    out = model(batch.images, kps)
    rot_gt = rodrigues(batch.theta)

    with torch.no_grad():
        _, tokens = model.vqvae.vq_encode(rot_gt)
    logits = out.regression.token_logits
    token_ce = F.cross_entropy(logits.reshape(-1, logits.shape[-1]), tokens.indices.reshape(-1))

    l2d, _ = loss_2d(out.joints2d, batch.gt_kps.coords, batch.gt_kps.visible & out.valid, model.image_size)
    l3d = loss_3d(out.joints3d, batch.joints3d)
    smpl_params = loss_smpl(out.rotmats, out.beta, rot_gt, batch.beta)
    components = {"2d": l2d, "3d": l3d, "smpl": smpl_params + weights.token_ce * token_ce}

    include_nkr = teacher is not None and weights.lambda_nkr > 0
    if include_nkr:
        with torch.no_grad():
            teacher_pyramid = teacher.backbone.extract_features(batch.images, batch.gt_kps)
        components["nkr"], _ = loss_nkr(out.pyramid, teacher_pyramid, weights.temperature)

    total = total_loss(components, weights, include_nkr)
    logged = {k: v.item() for k, v in components.items()}
    logged["smpl_params"] = smpl_params.item()
    logged["token_ce"] = token_ce.item()
    logged["total"] = total.item()
    return total, logged, out


# --- optimisation helpers ---------------------------------------------------------


def make_optimizer(params, lr, train_cfg: TrainConfig, total_steps):
    """AdamW with a single step drop to final_lr for the last final_fraction of training."""
    optimizer = AdamW(params, lr=lr, weight_decay=train_cfg.weight_decay)
    drop_at = int(round(total_steps * (1.0 - train_cfg.final_fraction)))
    ratio = train_cfg.final_lr / train_cfg.lr

    def schedule(step):
        return ratio if step >= drop_at else 1.0

    return optimizer, LambdaLR(optimizer, schedule)


def make_loader(dataset, batch_size, seed, shuffle=True):
    return DataLoader(
        dataset,
        batch_size=batch_size,
        shuffle=shuffle,
        generator=make_generator(seed),
        collate_fn=collate_records,
    )


def _log_epoch(stage, epoch, sums: Dict[str, float], count, metrics_path):
    record = {"stage": stage, "epoch": epoch}
    record.update({k: v / max(count, 1) for k, v in sums.items()})
    logger.info(f"{stage} epoch {epoch} complete", **record)
    if metrics_path:
        append_jsonl(record, metrics_path)
    return record


def _model_dtype(module):
    return next(module.parameters()).dtype


# --- stage 1: pose codebook ----------------------------------------------------------


def sample_training_poses(config: ExperimentConfig, n, seed):
    thetas = []
    for i in range(n):
        rng = np.random.default_rng(derive_seed(seed, i))
        theta, _ = sample_pose(rng, config.scene, config.body.num_joints, config.body.num_betas)
        thetas.append(theta)
    return torch.tensor(np.stack(thetas), dtype=torch.float32)


def train_vqvae(config: ExperimentConfig, seed, thetas=None, metrics_path=None, dtype=torch.float32):
    """Trains the pose VQ-VAE with EMA codebook updates; returns (vqvae, per-epoch history)."""
    seed_everything(seed)
    cb = config.codebook
    if thetas is None:
        thetas = sample_training_poses(config, cb.train_poses, seed)
    rotmats = pose_to_rotmats(thetas.to(dtype))
    vqvae = PoseVQVAE(config.body.num_joints, cb).to(dtype)
    generator = make_generator(seed)

    with torch.no_grad():
        vqvae.codebook.initialize_from(vqvae.encode(rotmats), generator=generator)

    steps_per_epoch = max(1, -(-rotmats.shape[0] // cb.batch_size))
    optimizer = AdamW(vqvae.parameters(), lr=cb.lr, weight_decay=config.train.weight_decay)
    history = []
    for epoch in range(cb.epochs):
        vqvae.train()
        order = torch.randperm(rotmats.shape[0], generator=generator)
        sums = {"loss": 0.0, "geodesic": 0.0, "l2": 0.0, "commitment": 0.0, "perplexity": 0.0}
        for step in range(steps_per_epoch):
            idx = order[step * cb.batch_size : (step + 1) * cb.batch_size]
            batch = rotmats[idx]
            out = vqvae(batch, update_codebook=True, generator=generator)
            loss, parts = vqvae.loss(out, batch)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            sums["loss"] += loss.item()
            sums["perplexity"] += out.perplexity.item()
            for k, v in parts.items():
                sums[k] += v
        history.append(_log_epoch("vqvae", epoch, sums, steps_per_epoch, metrics_path))

    if cb.refine_epochs:
        # decoder-only refinement on frozen assignments
        optimizer = AdamW(vqvae.decoder.parameters(), lr=cb.lr, weight_decay=config.train.weight_decay)
        for epoch in range(cb.refine_epochs):
            order = torch.randperm(rotmats.shape[0], generator=generator)
            sums = {"loss": 0.0, "geodesic": 0.0, "l2": 0.0, "commitment": 0.0}
            for step in range(steps_per_epoch):
                batch = rotmats[order[step * cb.batch_size : (step + 1) * cb.batch_size]]
                out = vqvae(batch, update_codebook=False)
                loss, parts = vqvae.loss(out, batch)
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                sums["loss"] += loss.item()
                for k, v in parts.items():
                    sums[k] += v
            history.append(_log_epoch("vqvae_refine", epoch, sums, steps_per_epoch, metrics_path))

    vqvae.eval()
    return vqvae, history


# --- stage 2: denoising pretraining ----------------------------------------------------


def pretrain_codec(backbone: DiffusionBackbone, dataset, config: ExperimentConfig, seed, metrics_path=None):
    """Optional tiny-autoencoder pass over the latent codec before it is frozen."""
    codec = backbone.codec
    for p in codec.parameters():
        p.requires_grad_(True)
    optimizer = AdamW(codec.parameters(), lr=config.train.lr * 10.0, weight_decay=config.train.weight_decay)
    dtype = _model_dtype(backbone)
    for epoch in range(config.backbone.codec_pretrain_epochs):
        sums, count = {"recon": 0.0}, 0
        for batch in make_loader(dataset, config.train.batch_size, derive_seed(seed, epoch)):
            images = batch.images.to(dtype)
            loss = F.mse_loss(codec.decode(codec.encode(images)), images)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            sums["recon"] += loss.item()
            count += 1
        _log_epoch("codec", epoch, sums, count, metrics_path)
    codec.freeze()


def pretrain_backbone(
    config: ExperimentConfig,
    dataset: SampleDataset,
    seed,
    num_keypoints,
    condition_mode=None,
    metrics_path=None,
):
    seed_everything(seed)
    mode = condition_mode or config.ablation.condition_mode
    backbone = DiffusionBackbone(config.backbone, num_keypoints, config.scene.image_size, mode)
    if config.backbone.codec_pretrain_epochs:
        pretrain_codec(backbone, dataset, config, seed, metrics_path)
    backbone.configure_pretrain()
    dtype = _model_dtype(backbone)

    epochs = config.train.pretrain_epochs
    steps = epochs * max(1, -(-len(dataset) // config.train.batch_size))
    optimizer, scheduler = make_optimizer(backbone.trainable_parameters(), config.train.lr, config.train, steps)
    rng = make_generator(derive_seed(seed, 1))
    for epoch in range(epochs):
        backbone.train()
        sums, count = {"denoise": 0.0}, 0
        loader = make_loader(dataset, config.train.batch_size, derive_seed(seed, epoch))
        for batch in tqdm(loader, desc=f"pretrain {epoch}", disable=not config.train.progress):
            batch = batch.to(dtype)
            sums["denoise"] += pretrain_step(backbone, batch.images, batch.gt_kps, rng, optimizer)
            scheduler.step()
            count += 1
        _log_epoch("pretrain", epoch, sums, count, metrics_path)
    backbone.eval()
    return backbone


# --- stages 3 and 4: teacher and student ------------------------------------------------


def build_model(config, vqvae, seed, backbone=None, condition_mode=None):
    """Fresh model; the backbone starts from the pretrained weights when given, random otherwise."""
    seed_everything(seed)
    model = MeshRecoveryModel(config, vqvae, condition_mode=condition_mode)
    if backbone is not None:
        model.backbone.load_state_dict(backbone.state_dict())
    model.backbone.configure_finetune()
    return model


def fit(model: MeshRecoveryModel, dataset, config: ExperimentConfig, seed, stage, kps_source, epochs, teacher=None, metrics_path=None):
    params = [p for p in model.parameters() if p.requires_grad]
    steps = epochs * max(1, -(-len(dataset) // config.train.batch_size))
    optimizer, scheduler = make_optimizer(params, config.train.lr, config.train, steps)
    dtype = _model_dtype(model)
    history = []
    for epoch in range(epochs):
        model.train()
        sums, count = {}, 0
        loader = make_loader(dataset, config.train.batch_size, derive_seed(seed, epoch))
        for batch in tqdm(loader, desc=f"{stage} {epoch}", disable=not config.train.progress):
            batch = batch.to(dtype)
            loss, parts, _ = compute_losses(model, batch, config.losses, kps_source, teacher)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            scheduler.step()
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + v
            count += 1
        history.append(_log_epoch(stage, epoch, sums, count, metrics_path))
    model.eval()
    return history


def train_teacher(config, dataset, vqvae, seed, backbone=None, condition_mode=None, metrics_path=None):
    model = build_model(config, vqvae, seed, backbone, condition_mode)
    fit(model, dataset, config, seed, "teacher", "gt", config.train.teacher_epochs, metrics_path=metrics_path)
    return model


def freeze_teacher(teacher: MeshRecoveryModel):
    teacher.eval()
    for p in teacher.parameters():
        p.requires_grad_(False)
    return teacher


def train_student(
    config,
    dataset,
    vqvae,
    seed,
    teacher: Optional[MeshRecoveryModel] = None,
    backbone=None,
    condition_mode=None,
    use_nkr=True,
    metrics_path=None,
):
    """Student sees corrupted keypoints; with NKR on, features are pulled towards the frozen teacher's."""
    model = build_model(config, vqvae, seed, backbone, condition_mode)
    active_teacher = None
    if use_nkr and teacher is not None and config.losses.lambda_nkr > 0:
        active_teacher = freeze_teacher(teacher)
    elif use_nkr and teacher is None:
        logger.warning("NKR requested without a teacher; training the student without it")
    fit(
        model,
        dataset,
        config,
        seed,
        "student",
        "noisy",
        config.train.student_epochs,
        teacher=active_teacher,
        metrics_path=metrics_path,
    )
    return model


def metrics_path_for(out_dir):
    return os.path.join(out_dir, "metrics.jsonl") if out_dir else None

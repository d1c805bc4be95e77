# validation.py

import torch

from exceptions import ConfigurationError
from logger import StructuredLogger

logger = StructuredLogger(__name__)

ROW_SUM_TOLERANCE = 1e-6


def validate_parents(parents):
    """Parents must describe a tree rooted at joint 0 listed in topological order."""
    if not parents or parents[0] != -1:
        raise ConfigurationError("parents", "parents[0] must be -1 (joint 0 is the root)")
    for j, p in enumerate(parents[1:], start=1):
        if not (0 <= p < j):
            raise ConfigurationError(
                "parents", f"joint {j} has parent {p}; parents must satisfy 0 <= parent[j] < j"
            )
    return True


def _rows_sum_to_one(matrix, name):
    sums = matrix.sum(dim=-1)
    worst = (sums - 1.0).abs().max().item() if matrix.numel() else 0.0
    if worst > ROW_SUM_TOLERANCE:
        logger.warning(f"{name} rows do not sum to 1", max_deviation=worst)
        return False
    return True


def validate_template(template):
    try:
        validate_parents(list(template.parent))
    except ConfigurationError as e:
        logger.warning(f"Invalid template topology: {e.message}")
        return False

    num_vertices = template.rest_vertices.shape[0]
    num_joints = template.rest_joints.shape[0]
    if template.blend_weights.shape != (num_vertices, num_joints):
        logger.warning(
            "Blend weight shape mismatch",
            shape=list(template.blend_weights.shape),
            expected=[num_vertices, num_joints],
        )
        return False
    if (template.blend_weights < 0).any():
        logger.warning("Negative blend weights found")
        return False
    if not _rows_sum_to_one(template.blend_weights, "blend_weights"):
        return False
    if (template.joint_regressor < 0).any():
        logger.warning("Negative joint regressor weights found")
        return False
    if not _rows_sum_to_one(template.joint_regressor, "joint_regressor"):
        return False
    for name in ("rest_vertices", "rest_joints", "shape_basis"):
        if not torch.isfinite(getattr(template, name)).all():
            logger.warning(f"Non-finite values in {name}")
            return False
    return True


def validate_keypoints(kps):
    if ((kps.confidence < 0) | (kps.confidence > 1)).any():
        logger.warning("Keypoint confidence outside [0, 1]")
        return False
    if (kps.confidence[~kps.visible] != 0).any():
        logger.warning("Invisible keypoints carry non-zero confidence")
        return False
    return True


def validate_schedule(alpha_bar):
    if alpha_bar[0].item() != 1.0:
        logger.warning("alpha_bar[0] must be exactly 1")
        return False
    if (alpha_bar <= 0).any() or (alpha_bar > 1).any():
        logger.warning("alpha_bar leaves (0, 1]")
        return False
    if not (alpha_bar[1:] < alpha_bar[:-1]).all():
        logger.warning("alpha_bar is not strictly decreasing")
        return False
    return True


def validate_codebook(codebook):
    if not torch.isfinite(codebook.entries).all():
        logger.warning("Codebook entries are not finite")
        return False
    if (codebook.ema_counts < 0).any():
        logger.warning("Negative EMA counts in codebook")
        return False
    expected = codebook.ema_sums / codebook.ema_counts.clamp_min(codebook.laplace_eps).unsqueeze(1)
    if not torch.allclose(codebook.entries, expected, rtol=1e-6, atol=1e-9):
        logger.warning("Codebook entries drifted from the EMA ratio")
        return False
    return True

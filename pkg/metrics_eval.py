# metrics_eval.py
"""Joint and vertex error metrics and the dataset evaluation harness.

All metric arithmetic runs in float64 numpy; torch tensors are accepted and
converted on entry. Errors are root-relative (joint 0) unless Procrustes-aligned.
"""

import os
from dataclasses import dataclass, field
from typing import Dict, List

import numpy as np
import torch
from torch.utils.data import DataLoader

from config import REPORT_SCHEMA_VERSION, SPLITS
from exceptions import ConfigurationError
from logger import StructuredLogger
from synth_data import SampleDataset, collate_records
from utils import ensure_directory_exists, save_to_json, write_jsonl

logger = StructuredLogger(__name__)

METRICS = ("mpjpe", "pa_mpjpe", "mpve", "occ_mpjpe", "occ_pa_mpjpe")


def _np(x):
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


@dataclass
class ProcrustesAlignment:
    scale: float
    rotation: np.ndarray
    translation: np.ndarray
    degenerate: bool = False

    def apply(self, points):
        return self.scale * _np(points) @ self.rotation.T + self.translation


def procrustes_align(source, target) -> ProcrustesAlignment:
    """Similarity transform (s, R, t) minimizing sum ||s R x_i + t - y_i||^2, with det(R) = +1."""
    X, Y = _np(source), _np(target)
    mu_x, mu_y = X.mean(axis=0), Y.mean(axis=0)
    X0, Y0 = X - mu_x, Y - mu_y
    if X.shape[0] < 3 or np.linalg.matrix_rank(X0) < 2:
        logger.warning("Degenerate Procrustes input; returning identity alignment", points=int(X.shape[0]))
        return ProcrustesAlignment(1.0, np.eye(3), np.zeros(3), degenerate=True)

    U, S, Vt = np.linalg.svd(X0.T @ Y0)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    D = np.diag([1.0, 1.0, d if d != 0 else 1.0])
    R = Vt.T @ D @ U.T
    scale = float(np.trace(np.diag(S) @ D) / (X0 * X0).sum())
    t = mu_y - scale * R @ mu_x
    return ProcrustesAlignment(scale, R, t)


def _root_relative(points, root=0):
    return points - points[..., root : root + 1, :]


def mpjpe(pred, gt):
    p, g = _root_relative(_np(pred)), _root_relative(_np(gt))
    return float(np.linalg.norm(p - g, axis=-1).mean())


def pa_mpjpe(pred, gt):
    p, g = _np(pred), _np(gt)
    aligned = procrustes_align(p, g).apply(p)
    return float(np.linalg.norm(aligned - g, axis=-1).mean())


def mpve(verts_pred, verts_gt, root_pred=None, root_gt=None):
    """Mean per-vertex distance with both meshes shifted to their root joint (vertex centroid if no root)."""
    vp, vg = _np(verts_pred), _np(verts_gt)
    rp = _np(root_pred) if root_pred is not None else vp.mean(axis=0)
    rg = _np(root_gt) if root_gt is not None else vg.mean(axis=0)
    return float(np.linalg.norm((vp - rp) - (vg - rg), axis=-1).mean())


def occ_metrics(pred, gt, occluded_mask):
    """(occ_mpjpe, occ_pa_mpjpe, has_occluded): alignment over all joints, error over occluded joints only."""
    mask = _np(occluded_mask).astype(bool)
    if not mask.any():
        return None, None, False
    p, g = _np(pred), _np(gt)
    root_err = np.linalg.norm(_root_relative(p) - _root_relative(g), axis=-1)
    pa_err = np.linalg.norm(procrustes_align(p, g).apply(p) - g, axis=-1)
    return float(root_err[mask].mean()), float(pa_err[mask].mean()), True


def sample_metrics(pred_joints, gt_joints, pred_verts, gt_verts, occluded_mask, joint_subset=None):
    root_pred, root_gt = _np(pred_joints)[0], _np(gt_joints)[0]
    if joint_subset is not None:
        idx = list(joint_subset)
        pred_joints, gt_joints = _np(pred_joints)[idx], _np(gt_joints)[idx]
        occluded_mask = _np(occluded_mask)[idx]
    occ, occ_pa, _ = occ_metrics(pred_joints, gt_joints, occluded_mask)
    return {
        "mpjpe": mpjpe(pred_joints, gt_joints),
        "pa_mpjpe": pa_mpjpe(pred_joints, gt_joints),
        "mpve": mpve(pred_verts, gt_verts, root_pred, root_gt),
        "occ_mpjpe": occ,
        "occ_pa_mpjpe": occ_pa,
    }


@dataclass
class MetricReport:
    records: List[Dict] = field(default_factory=list)
    unit: str = "scene_units"
    split: str = "all"
    keypoint_source: str = "noisy"
    schema_version: int = REPORT_SCHEMA_VERSION

    @property
    def counts(self):
        counts = {"samples": len(self.records)}
        for name in METRICS:
            counts[name] = sum(1 for r in self.records if r.get(name) is not None)
        return counts

    @property
    def summary(self):
        means = {}
        for name in METRICS:
            values = [r[name] for r in self.records if r.get(name) is not None]
            means[name] = float(np.mean(values)) if values else None
        return means

    def to_dict(self):
        return {
            "schema_version": self.schema_version,
            "unit": self.unit,
            "split": self.split,
            "keypoint_source": self.keypoint_source,
            "counts": self.counts,
            "summary": self.summary,
        }

    def write(self, out_dir, prefix="eval"):
        ensure_directory_exists(out_dir)
        header = {"schema_version": self.schema_version, "unit": self.unit}
        write_jsonl([dict(header, **r) for r in self.records], os.path.join(out_dir, f"{prefix}_records.jsonl"))
        save_to_json(self.to_dict(), os.path.join(out_dir, f"{prefix}_summary.json"))
        return self.to_dict()


@torch.no_grad()
def evaluate(model, dataset: SampleDataset, split="all", keypoint_source="noisy", joint_subset=None, batch_size=16, unit="scene_units"):
    """Runs the arg-max prediction path over the split and returns a MetricReport."""
    if split not in SPLITS:
        raise ConfigurationError("split", f"unknown split {split}; expected one of {list(SPLITS)}")
    if keypoint_source not in ("gt", "noisy"):
        raise ConfigurationError("evaluation.keypoint_source", f"unknown keypoint source {keypoint_source}")
    model.eval()
    subset = dataset.filter(split)
    dtype = next(model.parameters()).dtype
    records = []
    loader = DataLoader(subset, batch_size=batch_size, shuffle=False, collate_fn=collate_records)
    for batch in loader:
        batch = batch.to(dtype)
        kps = batch.gt_kps if keypoint_source == "gt" else batch.noisy_kps
        pred = model.predict(batch.images, kps)
        for b, sample_id in enumerate(batch.ids):
            metrics = sample_metrics(
                pred.joints3d[b],
                batch.joints3d[b],
                pred.vertices[b],
                batch.vertices[b],
                batch.occluded_mask[b],
                joint_subset,
            )
            records.append(dict(id=int(sample_id), tags=batch.tags[b], **metrics))
    records.sort(key=lambda r: r["id"])
    report = MetricReport(records=records, unit=unit, split=split, keypoint_source=keypoint_source)
    logger.info("Evaluation complete", split=split, keypoint_source=keypoint_source, **report.summary)
    return report

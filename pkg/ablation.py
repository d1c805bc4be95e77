# ablation.py
"""Runs the condition-mode x NKR x backbone-init (x LoRA rank) grid over seeds and
writes one consolidated comparison table, plus directional checks and the paired
occlusion attention probe."""

import os
import statistics
from typing import Dict, List, Optional

import torch

from body_model import BodyTemplate, template_from_config
from config import ExperimentConfig
from logger import StructuredLogger
from metrics_eval import evaluate
from pipeline import TEMPLATE_SEED, MeshRecoveryModel
from synth_data import SampleDataset, collate_records, generate_records
from training import metrics_path_for, pretrain_backbone, train_student, train_teacher, train_vqvae
from utils import derive_seed, ensure_directory_exists, save_to_json, write_bytes_atomic

logger = StructuredLogger(__name__)

EVAL_DATA_SEED = 7919
PROBE_SAMPLES = 8


def _with_lora_rank(config: ExperimentConfig, rank) -> ExperimentConfig:
    if rank is None or rank == config.backbone.lora_rank:
        return config
    return config.model_copy(update={"backbone": config.backbone.model_copy(update={"lora_rank": rank})})


def load_or_generate(config: ExperimentConfig, template: BodyTemplate, seed):
    """(train, eval) datasets: from disk when configured, generated in memory otherwise."""
    data = config.data
    if data.train_dir:
        train = SampleDataset.from_directory(data.train_dir)
    else:
        train = SampleDataset(generate_records(config, template, data.num_train, derive_seed(seed, "train")))
    if data.eval_dir:
        held_out = SampleDataset.from_directory(data.eval_dir)
    else:
        held_out = SampleDataset(generate_records(config, template, data.num_eval, derive_seed(EVAL_DATA_SEED, "eval")))
    return train, held_out


@torch.no_grad()
def paired_attention_probe(model: MeshRecoveryModel, config: ExperimentConfig, template: BodyTemplate, seed, n=PROBE_SAMPLES):
    """Attention mass on the prompt tokens of joints hidden by an occluder, clean scene minus occluded scene.

    Both scenes hold two people and share every random draw; only the occluder differs.
    """
    base = config.scene.model_copy(update={"num_bodies": 2})
    occluded_cfg = config.model_copy(update={"scene": base.model_copy(update={"occlusion_prob": 1.0})})
    clean_cfg = config.model_copy(update={"scene": base.model_copy(update={"occlusion_prob": 0.0})})
    drops = []
    model.eval()
    dtype = next(model.parameters()).dtype
    for i in range(n):
        occ = generate_records(occluded_cfg, template, 1, derive_seed(seed, f"probe{i}"))[0]
        clean = generate_records(clean_cfg, template, 1, derive_seed(seed, f"probe{i}"))[0]
        mask = occ.occluded_mask.unsqueeze(0)
        if not mask.any():
            continue
        masses = []
        for record in (clean, occ):
            batch = collate_records([record]).to(dtype)
            pyramid = model.backbone.extract_features(batch.images, batch.gt_kps)
            masses.append(model.backbone.attention_mass(pyramid, mask).item())
        drops.append(masses[0] - masses[1])
    mean_drop = sum(drops) / len(drops) if drops else None
    return {"mean_drop": mean_drop, "pairs": len(drops)}


def _median_spread(values):
    values = [v for v in values if v is not None]
    if not values:
        return {"median": None, "min": None, "max": None}
    return {"median": statistics.median(values), "min": min(values), "max": max(values)}


def _cell_key(mode, nkr, init, rank):
    return f"{mode}|nkr={'on' if nkr else 'off'}|{init}|r={rank}"


def _compare(cells, better, worse, metric):
    """Direction check better <= worse on the median, plus per-seed signs."""
    if better not in cells or worse not in cells:
        return {"available": False}
    b, w = cells[better]["per_seed"][metric], cells[worse]["per_seed"][metric]
    signs = [x <= y for x, y in zip(b, w) if x is not None and y is not None]
    med_b, med_w = _median_spread(b)["median"], _median_spread(w)["median"]
    holds = med_b is not None and med_w is not None and med_b <= med_w
    return {
        "available": True,
        "better": better,
        "worse": worse,
        "metric": metric,
        "holds_on_median": holds,
        "per_seed": signs,
        "reversed_in_all_seeds": bool(signs) and not any(signs),
    }


def directional_checks(cells, rank):
    pre = "diffusion_pretrained"
    checks = {
        "condition_ct_vs_cj": _compare(cells, _cell_key("z0+cj+ct", True, pre, rank), _cell_key("z0+cj", True, pre, rank), "mpjpe"),
        "condition_cj_vs_z0": _compare(cells, _cell_key("z0+cj", True, pre, rank), _cell_key("z0", True, pre, rank), "mpjpe"),
        "condition_concat_vs_add": _compare(cells, _cell_key("z0+cj", True, pre, rank), _cell_key("z0+cj_add", True, pre, rank), "mpjpe"),
        "nkr_on_vs_off": _compare(cells, _cell_key("z0+cj+ct", True, pre, rank), _cell_key("z0+cj+ct", False, pre, rank), "occluded_mpjpe"),
        "pretrained_vs_random": _compare(
            cells, _cell_key("z0+cj+ct", True, pre, rank), _cell_key("z0+cj+ct", True, "random_init", rank), "mpjpe"
        ),
    }
    return checks


def format_table(cells: Dict[str, Dict]) -> str:
    header = f"{'condition':<11} {'nkr':<4} {'backbone':<21} {'lora':>4} {'MPJPE med [min, max]':>28} {'OCC-split MPJPE':>18} {'trainable/total':>20}"
    lines = [header, "-" * len(header)]

    def fmt(stats):
        if stats["median"] is None:
            return "n/a"
        return f"{stats['median']:.4f} [{stats['min']:.4f}, {stats['max']:.4f}]"

    for cell in cells.values():
        params = cell["parameters"]
        lines.append(
            f"{cell['condition_mode']:<11} {'on' if cell['nkr'] else 'off':<4} {cell['backbone']:<21} "
            f"{cell['lora_rank']:>4} {fmt(cell['mpjpe']):>28} {fmt(cell['occluded_mpjpe']):>18} "
            f"{params['trainable']:>9}/{params['total']:<10}"
        )
    return "\n".join(lines) + "\n"


def run_ablation(config: ExperimentConfig, out_dir, seeds: Optional[List[int]] = None):
    grid = config.ablation
    seeds = seeds if seeds is not None else grid.seeds
    ranks = grid.lora_ranks or [config.backbone.lora_rank]
    ensure_directory_exists(out_dir)
    template = template_from_config(config.body, seed=TEMPLATE_SEED)
    num_keypoints = template.num_regressed

    cells: Dict[str, Dict] = {}
    probe = {}
    for seed in seeds:
        seed_dir = os.path.join(out_dir, f"seed{seed}")
        ensure_directory_exists(seed_dir)
        metrics_path = metrics_path_for(seed_dir)
        train, held_out = load_or_generate(config, template, seed)
        vqvae, _ = train_vqvae(config, seed, metrics_path=metrics_path)

        for rank in ranks:
            cfg = _with_lora_rank(config, rank)
            for mode in grid.condition_modes:
                pretrained = None
                teachers = {}
                for init in grid.backbones:
                    if init == "diffusion_pretrained" and pretrained is None:
                        pretrained = pretrain_backbone(cfg, train, seed, num_keypoints, mode, metrics_path)
                    init_backbone = pretrained if init == "diffusion_pretrained" else None
                    for nkr in grid.nkr_options:
                        teacher = None
                        if nkr and cfg.losses.lambda_nkr > 0:
                            if init not in teachers:
                                teachers[init] = train_teacher(cfg, train, vqvae, seed, init_backbone, mode, metrics_path)
                            teacher = teachers[init]
                        student = train_student(cfg, train, vqvae, seed, teacher, init_backbone, mode, nkr, metrics_path)
                        report_all = evaluate(student, held_out, "all", "noisy", cfg.evaluation.joint_subset, cfg.evaluation.batch_size, cfg.evaluation.unit)
                        report_occ = evaluate(student, held_out, "occluded", "noisy", cfg.evaluation.joint_subset, cfg.evaluation.batch_size, cfg.evaluation.unit)
                        key = _cell_key(mode, nkr, init, rank)
                        cell = cells.setdefault(
                            key,
                            {
                                "condition_mode": mode,
                                "nkr": nkr,
                                "backbone": init,
                                "lora_rank": rank,
                                "parameters": student.parameter_counts(),
                                "per_seed": {"seed": [], "mpjpe": [], "pa_mpjpe": [], "occluded_mpjpe": [], "occ_mpjpe": []},
                            },
                        )
                        cell["per_seed"]["seed"].append(seed)
                        cell["per_seed"]["mpjpe"].append(report_all.summary["mpjpe"])
                        cell["per_seed"]["pa_mpjpe"].append(report_all.summary["pa_mpjpe"])
                        cell["per_seed"]["occluded_mpjpe"].append(report_occ.summary["mpjpe"])
                        cell["per_seed"]["occ_mpjpe"].append(report_all.summary["occ_mpjpe"])
                        report_all.write(seed_dir, prefix=key.replace("|", "_").replace("+", "p").replace("=", ""))

                        if mode == "z0+cj+ct" and nkr and init == "diffusion_pretrained" and cfg.backbone.use_attention:
                            probe.setdefault(str(rank), []).append(paired_attention_probe(student, cfg, template, seed))

    for cell in cells.values():
        for metric in ("mpjpe", "pa_mpjpe", "occluded_mpjpe", "occ_mpjpe"):
            cell[metric] = _median_spread(cell["per_seed"][metric])

    result = {
        "seeds": list(seeds),
        "cells": cells,
        "checks": {str(rank): directional_checks(cells, rank) for rank in ranks},
        "attention_probe": probe,
    }
    save_to_json(result, os.path.join(out_dir, "ablation.json"))
    write_bytes_atomic(os.path.join(out_dir, "ablation.txt"), format_table(cells).encode("utf-8"))
    logger.info("Ablation complete", cells=len(cells), seeds=len(seeds))
    return result

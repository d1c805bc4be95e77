# main.py
import os
import sys
import json
import argparse
from datetime import datetime

import torch
from dotenv import load_dotenv
from pydantic import ValidationError

from ablation import run_ablation
from body_model import BodyParams, template_from_config, write_obj
from checkpoint import load_checkpoint, save_checkpoint
from conditioning import KeypointSet
from config import LOSS_CONVENTION, OUTPUT_DIR, SPLITS, ExperimentConfig, config_hash, load_config, tiny_config
from exceptions import ConfigurationError, DatasetError, MeshRecoveryError
from logger import StructuredLogger
from metrics_eval import evaluate
from pipeline import (
    TEMPLATE_SEED,
    backbone_checkpoint,
    backbone_from_checkpoint,
    model_checkpoint,
    model_from_checkpoint,
    vqvae_checkpoint,
    vqvae_from_checkpoint,
)
from synth_data import SampleDataset, generate_records, load_png, make_dataset
from training import metrics_path_for, pretrain_backbone, train_student, train_teacher, train_vqvae
from utils import content_hash, derive_seed, ensure_directory_exists, save_to_json

logger = StructuredLogger(__name__)
load_dotenv()

EXIT_USAGE_ERROR = 2


def resolve_config(path) -> ExperimentConfig:
    if path is None:
        logger.info("No --config given; using the tiny preset")
        return tiny_config()
    return load_config(path)


def write_run_manifest(args, config: ExperimentConfig, inputs, outputs):
    manifest = {
        "command": args.command,
        "argv": args.argv,
        "seed": args.seed,
        "config_hash": config_hash(config),
        "loss_convention": LOSS_CONVENTION,
        "inputs": [p for p in inputs if p],
        "inputs_hash": content_hash(inputs),
        "outputs": outputs,
        "finished_at": datetime.now().isoformat(),
    }
    save_to_json(manifest, os.path.join(args.out, "run_manifest.json"))
    return manifest


def training_data(config: ExperimentConfig, template, path, seed):
    path = path or config.data.train_dir
    if path:
        return SampleDataset.from_directory(path)
    logger.info("No dataset directory given; generating training samples in memory", n=config.data.num_train)
    return SampleDataset(generate_records(config, template, config.data.num_train, derive_seed(seed, "train")))


def load_vqvae(config, args, metrics_path):
    if args.vqvae:
        return vqvae_from_checkpoint(load_checkpoint(args.vqvae), config, source=args.vqvae)
    logger.info("No --vqvae given; training the pose codebook first")
    vqvae, _ = train_vqvae(config, args.seed, metrics_path=metrics_path)
    return vqvae


def load_backbone(config, args, num_keypoints):
    if args.backbone_init == "random_init":
        return None
    if not args.backbone:
        raise ConfigurationError("--backbone", "diffusion_pretrained init needs --backbone PATH (or pass --backbone-init random_init)")
    return backbone_from_checkpoint(load_checkpoint(args.backbone), config, num_keypoints, source=args.backbone)


def load_keypoints(path, num_keypoints) -> KeypointSet:
    """Reads {"coords": [[x, y], ...], "confidence": [...], "visible": [...]}; missing fields default to visible."""
    with open(path, "r", encoding="utf-8") as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigurationError("--kps", f"{path} is not valid JSON: {str(e)}")
    if "coords" not in data:
        raise ConfigurationError("--kps", f"{path} lacks a coords list")
    coords = torch.tensor(data["coords"], dtype=torch.float32)
    if coords.shape != (num_keypoints, 2):
        raise ConfigurationError("--kps", f"expected {num_keypoints} keypoints with (x, y), got {list(coords.shape)}")
    visible = torch.tensor(data.get("visible", [True] * num_keypoints), dtype=torch.bool)
    confidence = torch.tensor(data.get("confidence", visible.float().tolist()), dtype=torch.float32)
    confidence = torch.where(visible, confidence.clamp(0.0, 1.0), torch.zeros_like(confidence))
    return KeypointSet(coords, confidence, visible)


def cmd_gen_data(args, config):
    template = template_from_config(config.body, seed=TEMPLATE_SEED)
    n = args.num if args.num is not None else config.data.num_train
    manifest = make_dataset(config, template, n, args.seed, args.out, shards=args.shards)
    return [], {"dataset": args.out, "samples": manifest["num_samples"]}


def cmd_train_vqvae(args, config):
    vqvae, history = train_vqvae(config, args.seed, metrics_path=metrics_path_for(args.out))
    path = os.path.join(args.out, "vqvae.dpmk")
    save_checkpoint(path, vqvae_checkpoint(vqvae, config, args.seed))
    return [], {"checkpoint": path, "final": history[-1] if history else None}


def cmd_pretrain_backbone(args, config):
    template = template_from_config(config.body, seed=TEMPLATE_SEED)
    dataset = training_data(config, template, args.data, args.seed)
    mode = args.condition_mode or config.ablation.condition_mode
    backbone = pretrain_backbone(config, dataset, args.seed, template.num_regressed, mode, metrics_path_for(args.out))
    path = os.path.join(args.out, "backbone.dpmk")
    save_checkpoint(path, backbone_checkpoint(backbone, config, args.seed))
    return [args.data], {"checkpoint": path}


def cmd_train_teacher(args, config):
    template = template_from_config(config.body, seed=TEMPLATE_SEED)
    dataset = training_data(config, template, args.data, args.seed)
    metrics_path = metrics_path_for(args.out)
    backbone = load_backbone(config, args, template.num_regressed)
    vqvae = load_vqvae(config, args, metrics_path)
    mode = backbone.condition_mode if backbone is not None else (args.condition_mode or config.ablation.condition_mode)
    teacher = train_teacher(config, dataset, vqvae, args.seed, backbone, mode, metrics_path)
    path = os.path.join(args.out, "teacher.dpmk")
    save_checkpoint(path, model_checkpoint(teacher, args.seed, {"role": "teacher", "backbone_init": args.backbone_init}))
    return [args.data, args.vqvae, args.backbone], {"checkpoint": path}


def cmd_train_student(args, config):
    template = template_from_config(config.body, seed=TEMPLATE_SEED)
    dataset = training_data(config, template, args.data, args.seed)
    metrics_path = metrics_path_for(args.out)
    backbone = load_backbone(config, args, template.num_regressed)
    vqvae = load_vqvae(config, args, metrics_path)
    mode = backbone.condition_mode if backbone is not None else (args.condition_mode or config.ablation.condition_mode)
    use_nkr = config.ablation.nkr and not args.no_nkr
    teacher = None
    if use_nkr and config.losses.lambda_nkr > 0:
        if args.teacher:
            teacher = model_from_checkpoint(load_checkpoint(args.teacher), config, source=args.teacher)
        else:
            logger.info("No --teacher given; training one first")
            teacher = train_teacher(config, dataset, vqvae, args.seed, backbone, mode, metrics_path)
    student = train_student(config, dataset, vqvae, args.seed, teacher, backbone, mode, use_nkr, metrics_path)
    path = os.path.join(args.out, "student.dpmk")
    meta = {"role": "student", "nkr": use_nkr, "backbone_init": args.backbone_init}
    save_checkpoint(path, model_checkpoint(student, args.seed, meta))
    return [args.data, args.vqvae, args.backbone, args.teacher], {"checkpoint": path}


def cmd_eval(args, config):
    if not args.ckpt:
        raise ConfigurationError("--ckpt", "eval needs --ckpt PATH")
    model = model_from_checkpoint(load_checkpoint(args.ckpt), config, source=args.ckpt)
    data_dir = args.data or config.data.eval_dir
    if not data_dir:
        raise DatasetError("<none>", "eval needs --data DIR or data.eval_dir in the config")
    dataset = SampleDataset.from_directory(data_dir)
    ev = config.evaluation
    report = evaluate(
        model,
        dataset,
        split=args.split,
        keypoint_source=args.keypoint_source or ev.keypoint_source,
        joint_subset=ev.joint_subset,
        batch_size=ev.batch_size,
        unit=ev.unit,
    )
    summary = report.write(args.out, prefix=f"eval_{args.split}")
    return [args.ckpt, data_dir], {"summary": summary}


def cmd_infer(args, config):
    if not (args.ckpt and args.image and args.kps):
        raise ConfigurationError("infer", "infer needs --ckpt, --image and --kps")
    model = model_from_checkpoint(load_checkpoint(args.ckpt), config, source=args.ckpt)
    dtype = next(model.parameters()).dtype
    image = load_png(args.image, config.scene.image_size).unsqueeze(0).to(dtype)
    kps = KeypointSet.stack([load_keypoints(args.kps, model.template.num_regressed)]).to(dtype)
    pred = model.predict(image, kps)
    mesh_path = write_obj(os.path.join(args.out, "mesh.obj"), pred.vertices[0], model.template.faces)
    first = pred.params
    params = BodyParams(theta=first.theta[0], beta=first.beta[0], cam=first.cam[0]).to_dict()
    params["joints3d"] = pred.joints3d[0].tolist()
    params["joints2d"] = pred.joints2d[0].tolist()
    params_path = os.path.join(args.out, "params.json")
    save_to_json(params, params_path)
    return [args.ckpt, args.image, args.kps], {"mesh": mesh_path, "params": params_path}


def cmd_ablate(args, config):
    seeds = [args.seed] if args.single_seed else None
    result = run_ablation(config, args.out, seeds=seeds)
    return [config.data.train_dir, config.data.eval_dir], {
        "table": os.path.join(args.out, "ablation.txt"),
        "cells": len(result["cells"]),
    }


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-vqvae": cmd_train_vqvae,
    "pretrain-backbone": cmd_pretrain_backbone,
    "train-teacher": cmd_train_teacher,
    "train-student": cmd_train_student,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "ablate": cmd_ablate,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="occmesh", description="Occlusion-robust toy human mesh recovery")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="experiment config JSON (defaults to the tiny preset)")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", default=None, help=f"output directory (default under {OUTPUT_DIR})")
        if name == "gen-data":
            p.add_argument("--num", type=int, default=None)
            p.add_argument("--shards", type=int, default=None)
        if name in ("pretrain-backbone", "train-teacher", "train-student", "eval"):
            p.add_argument("--data", default=None, help="dataset directory written by gen-data")
        if name in ("pretrain-backbone", "train-teacher", "train-student"):
            p.add_argument("--condition-mode", default=None, choices=["z0", "z0+cj", "z0+cj_add", "z0+cj+ct"])
        if name in ("train-teacher", "train-student"):
            p.add_argument("--vqvae", default=None)
            p.add_argument("--backbone", default=None)
            p.add_argument("--backbone-init", default="diffusion_pretrained", choices=["diffusion_pretrained", "random_init"])
        if name == "train-student":
            p.add_argument("--teacher", default=None)
            p.add_argument("--no-nkr", action="store_true")
        if name in ("eval", "infer"):
            p.add_argument("--ckpt", default=None)
        if name == "eval":
            p.add_argument("--split", default="all", choices=list(SPLITS))
            p.add_argument("--keypoint-source", default=None, choices=["gt", "noisy"])
        if name == "infer":
            p.add_argument("--image", default=None)
            p.add_argument("--kps", default=None)
        if name == "ablate":
            p.add_argument("--single-seed", action="store_true", help="run only --seed instead of ablation.seeds")
    return parser


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    args.argv = argv
    try:
        config = resolve_config(args.config)
        args.out = args.out or os.path.join(OUTPUT_DIR, f"{args.command}-{datetime.now():%Y%m%d-%H%M%S}")
        ensure_directory_exists(args.out)
        inputs, outputs = COMMANDS[args.command](args, config)
        write_run_manifest(args, config, [args.config] + list(inputs), outputs)
        logger.info(f"Finished {args.command}", out=args.out)
        return 0
    except (MeshRecoveryError, ValidationError, json.JSONDecodeError, OSError) as e:
        logger.error(f"{args.command} failed: {str(e)}", exception=type(e).__name__)
        sys.stderr.write(json.dumps({"error": type(e).__name__, "message": str(e)}) + "\n")
        return EXIT_USAGE_ERROR


if __name__ == "__main__":
    sys.exit(main())

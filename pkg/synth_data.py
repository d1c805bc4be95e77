# synth_data.py
"""Deterministic synthetic scenes: posed capsule bodies, rectangular occluders and
optional crowding, with ground-truth parameters, keypoints and visibility.

Every sample is generated from derive_seed(seed, index) alone, so samples can be
produced in any order or in parallel shards and still be byte-identical.
"""

import asyncio
import io
import math
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch
from PIL import Image
from torch.utils.data import Dataset

from body_model import (
    BodyParams,
    BodyTemplate,
    camera_translation,
    chain_transforms,
    focal_length,
    perspective_project,
    project,
    regress_joints,
    rodrigues,
    skin,
)
from checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from conditioning import KeypointSet, corrupt_keypoints
from config import MAX_PARALLEL_SHARDS, ExperimentConfig, SceneSpec, config_hash
from exceptions import DatasetError
from logger import StructuredLogger
from utils import derive_seed, ensure_directory_exists, load_json, make_generator, save_to_json, write_bytes_atomic

logger = StructuredLogger(__name__)

# per-joint rotation limits (radians) for the SMPL-style skeleton
SMPL_JOINT_LIMITS = [
    0.3, 0.6, 0.6, 0.25, 0.9, 0.9, 0.2, 0.35, 0.35, 0.2, 0.15, 0.15,
    0.3, 0.3, 0.3, 0.4, 0.8, 0.8, 0.9, 0.9, 0.4, 0.4, 0.2, 0.2,
]
DEFAULT_JOINT_LIMIT = 0.5
RENDER_RADIUS_SCALE = 1.5
BACKGROUND = (24, 24, 24)


def joint_limits(num_joints, scale=1.0):
    if num_joints == len(SMPL_JOINT_LIMITS):
        limits = np.asarray(SMPL_JOINT_LIMITS)
    else:
        limits = np.full(num_joints, DEFAULT_JOINT_LIMIT)
    return limits * scale


def sample_pose(rng: np.random.Generator, spec: SceneSpec, num_joints, num_betas):
    """theta [J, 3] from a two-component von Mises mixture mapped onto [-limit, limit]; beta clipped normal."""
    limits = joint_limits(num_joints, spec.pose_limit_scale)
    near = rng.vonmises(0.0, spec.kappa_near, size=(num_joints, 3))
    far = rng.vonmises(0.0, spec.kappa_far, size=(num_joints, 3))
    pick = rng.random(size=(num_joints, 3)) < spec.near_weight
    phi = np.where(pick, near, far)
    theta = limits[:, None] * phi / math.pi
    beta = np.clip(rng.normal(0.0, 1.0, size=num_betas) * spec.beta_std, -spec.beta_clip, spec.beta_clip)
    return theta, beta


def _vonmises_second_moment(kappa, samples=20001):
    phi = np.linspace(-math.pi, math.pi, samples)
    density = np.exp(kappa * (np.cos(phi) - 1.0))
    return float((phi**2 * density).sum() / density.sum())


def pose_angle_std(spec: SceneSpec, limit=1.0):
    """Standard deviation of one sampled angle for a joint with the given limit."""
    second = spec.near_weight * _vonmises_second_moment(spec.kappa_near) + (
        1.0 - spec.near_weight
    ) * _vonmises_second_moment(spec.kappa_far)
    return limit * spec.pose_limit_scale * math.sqrt(second) / math.pi


# --- layout ---------------------------------------------------------------------


@dataclass
class SceneLayout:
    target_cam: np.ndarray  # (s, tx, ty)
    extra_cams: List[np.ndarray]
    occluder_sizes: List[Tuple[float, float]]  # fractions of the image side
    occluder_offsets: List[Tuple[float, float]]  # relative to the target bbox, in [-0.5, 0.5]
    occluder_colors: List[Tuple[int, int, int]]

    @property
    def crowded(self):
        return len(self.extra_cams) > 0

    @property
    def occluded(self):
        return len(self.occluder_sizes) > 0


def sample_layout(rng: np.random.Generator, spec: SceneSpec) -> SceneLayout:
    s = rng.uniform(*spec.scale_range)
    tx, ty = rng.uniform(-spec.translation_range, spec.translation_range, size=2)
    target_cam = np.array([s, tx, ty])

    crowded = spec.num_bodies > 1 or rng.random() < spec.crowd_prob
    num_extra = max(spec.num_bodies - 1, 1) if crowded else 0
    extra_cams = []
    for _ in range(num_extra):
        side = 1.0 if rng.random() < 0.5 else -1.0
        depth = rng.uniform(1.05, 1.25) if rng.random() < 0.5 else rng.uniform(0.75, 0.95)
        offset = side * (1.0 - spec.crowd_overlap) * 0.6 + rng.uniform(-0.05, 0.05)
        extra_cams.append(np.array([s * depth, tx + offset, ty]))

    # occluder draws happen whether or not the scene is occluded, so toggling
    # occlusion_prob leaves every later draw (and so the bodies) unchanged
    occluded = rng.random() < spec.occlusion_prob
    lo, hi = spec.occluder_size_range
    sizes = [tuple(rng.uniform(lo, hi, size=2)) for _ in range(spec.occluder_count)]
    offsets = [tuple(rng.uniform(-0.5, 0.5, size=2)) for _ in range(spec.occluder_count)]
    colors = [tuple(int(c) for c in rng.integers(0, 256, size=3)) for _ in range(spec.occluder_count)]
    if not occluded:
        sizes, offsets, colors = [], [], []
    return SceneLayout(target_cam, extra_cams, sizes, offsets, colors)


# --- rendering ------------------------------------------------------------------


@dataclass
class RenderBody:
    keypoints: np.ndarray  # [N, 2] pixels, where visibility is read
    skeleton: np.ndarray  # [J, 2] pixels, capsule endpoints
    skeleton_valid: np.ndarray  # [J] bool
    parents: List[int]
    depth: float
    radius: float  # pixels
    color: Tuple[int, int, int]


@dataclass
class Occluder:
    box: Tuple[float, float, float, float]  # x0, y0, x1, y1 in pixels
    color: Tuple[int, int, int]
    depth: float = 0.0


@dataclass
class RenderResult:
    image: np.ndarray  # [H, W, 3] uint8
    ids: np.ndarray  # [H, W] int, -1 background, bodies first then occluders
    visible: List[np.ndarray]  # per body [N] bool
    occluded: List[np.ndarray]


def _pixel_centres(height, width):
    ys, xs = np.mgrid[0:height, 0:width]
    return xs + 0.5, ys + 0.5


def body_mask(body: RenderBody, height, width):
    xs, ys = _pixel_centres(height, width)
    mask = np.zeros((height, width), dtype=bool)
    for j in range(1, len(body.parents)):
        p = body.parents[j]
        if not (body.skeleton_valid[j] and body.skeleton_valid[p]):
            continue
        a, b = body.skeleton[p], body.skeleton[j]
        ab = b - a
        denom = max(float(ab @ ab), 1e-12)
        t = np.clip(((xs - a[0]) * ab[0] + (ys - a[1]) * ab[1]) / denom, 0.0, 1.0)
        dx = xs - (a[0] + t * ab[0])
        dy = ys - (a[1] + t * ab[1])
        mask |= dx * dx + dy * dy <= body.radius**2
    return mask


def occluder_mask(occ: Occluder, height, width):
    xs, ys = _pixel_centres(height, width)
    x0, y0, x1, y1 = occ.box
    return (xs >= x0) & (xs <= x1) & (ys >= y0) & (ys <= y1)


def render_scene(bodies: List[RenderBody], occluders: List[Occluder], image_size) -> RenderResult:
    """Painter's algorithm, farthest element first; occluders carry their own depth."""
    height = width = int(image_size)
    image = np.empty((height, width, 3), dtype=np.uint8)
    image[:] = BACKGROUND
    ids = np.full((height, width), -1, dtype=np.int64)

    elements = [(b.depth, i) for i, b in enumerate(bodies)]
    elements += [(o.depth, len(bodies) + k) for k, o in enumerate(occluders)]
    for _, elem in sorted(elements, key=lambda e: (-e[0], e[1])):
        if elem < len(bodies):
            mask, color = body_mask(bodies[elem], height, width), bodies[elem].color
        else:
            occ = occluders[elem - len(bodies)]
            mask, color = occluder_mask(occ, height, width), occ.color
        image[mask] = color
        ids[mask] = elem

    visible, occluded = [], []
    for i, body in enumerate(bodies):
        px = np.floor(body.keypoints).astype(np.int64)
        in_frame = (px[:, 0] >= 0) & (px[:, 0] < width) & (px[:, 1] >= 0) & (px[:, 1] < height)
        top = np.full(len(px), -1, dtype=np.int64)
        top[in_frame] = ids[px[in_frame, 1], px[in_frame, 0]]
        covered = in_frame & (top >= 0) & (top != i)
        visible.append(in_frame & ~covered)
        occluded.append(covered)
    return RenderResult(image=image, ids=ids, visible=visible, occluded=occluded)


# --- samples --------------------------------------------------------------------


@dataclass
class PosedBody:
    params: BodyParams
    vertices: torch.Tensor
    joints3d: torch.Tensor
    joints2d: torch.Tensor
    valid: torch.Tensor
    skeleton2d: torch.Tensor
    skeleton_valid: torch.Tensor
    depth: float


def pose_body(template: BodyTemplate, params: BodyParams, image_size) -> PosedBody:
    """Single geometry path shared with the model: skin -> regress -> project."""
    vertices = skin(template, params.theta, params.beta)
    joints3d = regress_joints(template, vertices)
    joints2d, valid = project(joints3d, params.cam, image_size)
    if joints3d.shape[-2] == template.num_joints:
        skeleton2d, skeleton_valid = joints2d, valid
    else:
        world = chain_transforms(template, rodrigues(params.theta))
        skeleton = world[..., :3, 3] + camera_translation(params.cam, image_size).unsqueeze(-2)
        skeleton2d, skeleton_valid = perspective_project(skeleton, image_size)
    depth = float(camera_translation(params.cam, image_size)[2] + joints3d[0, 2])
    return PosedBody(params, vertices, joints3d, joints2d, valid, skeleton2d, skeleton_valid, depth)


@dataclass
class SampleRecord:
    sample_id: int
    image: torch.Tensor  # [3, H, W] in [0, 1]
    gt_params: BodyParams
    gt_kps: KeypointSet
    noisy_kps: KeypointSet
    occluded_mask: torch.Tensor  # [N] bool
    joints3d: torch.Tensor
    vertices: torch.Tensor
    tags: Dict[str, bool] = field(default_factory=dict)

    def has_tag(self, split):
        return split == "all" or bool(self.tags.get(split, False))


def _render_radius(depth, image_size, limb_radius):
    return RENDER_RADIUS_SCALE * limb_radius * focal_length(image_size) / max(depth, 1e-6)


def generate_sample(config: ExperimentConfig, template: BodyTemplate, seed, index) -> SampleRecord:
    sample_seed = derive_seed(seed, index)
    rng = np.random.default_rng(sample_seed)
    spec = config.scene
    image_size = spec.image_size
    dtype = torch.float64

    layout = sample_layout(rng, spec)
    cams = [layout.target_cam] + layout.extra_cams
    posed = []
    colors = []
    for cam in cams:
        theta, beta = sample_pose(rng, spec, template.num_joints, template.num_betas)
        params = BodyParams(
            theta=torch.tensor(theta, dtype=dtype),
            beta=torch.tensor(beta, dtype=dtype),
            cam=torch.tensor(cam, dtype=dtype),
        )
        posed.append(pose_body(template.to(dtype), params, image_size))
        colors.append(tuple(int(c) for c in rng.integers(60, 236, size=3)))

    bodies = [
        RenderBody(
            keypoints=p.joints2d.numpy(),
            skeleton=p.skeleton2d.numpy(),
            skeleton_valid=p.skeleton_valid.numpy(),
            parents=list(template.parent),
            depth=p.depth,
            radius=_render_radius(p.depth, image_size, config.body.limb_radius),
            color=color,
        )
        for p, color in zip(posed, colors)
    ]

    target = posed[0]
    pts = target.joints2d[target.valid].numpy()
    if len(pts):
        lo, hi = pts.min(axis=0), pts.max(axis=0)
    else:
        lo, hi = np.zeros(2), np.full(2, float(image_size))
    centre, extent = (lo + hi) / 2.0, np.maximum(hi - lo, 1.0)
    occluders = []
    for size, offset, color in zip(layout.occluder_sizes, layout.occluder_offsets, layout.occluder_colors):
        half = np.asarray(size) * image_size / 2.0
        c = centre + np.asarray(offset) * extent
        occluders.append(Occluder(box=(c[0] - half[0], c[1] - half[1], c[0] + half[0], c[1] + half[1]), color=color))

    result = render_scene(bodies, occluders, image_size)
    visible = torch.from_numpy(result.visible[0] & target.valid.numpy())
    gt_kps = KeypointSet.from_visibility(target.joints2d, visible)
    noisy_kps = corrupt_keypoints(gt_kps, config.noise, make_generator(sample_seed))
    image = torch.from_numpy(result.image).permute(2, 0, 1).to(torch.float32) / 255.0

    occluded_mask = torch.from_numpy(result.occluded[0])
    occluded = bool(occluded_mask.any())
    return SampleRecord(
        sample_id=index,
        image=image,
        gt_params=target.params,
        gt_kps=gt_kps,
        noisy_kps=noisy_kps,
        occluded_mask=occluded_mask,
        joints3d=target.joints3d,
        vertices=target.vertices,
        tags={
            "occluded": occluded,
            "crowded": layout.crowded,
            "clean": not (occluded or layout.crowded),
        },
    )


def generate_records(config: ExperimentConfig, template: BodyTemplate, n, seed) -> List[SampleRecord]:
    return [generate_sample(config, template, seed, i) for i in range(n)]


# --- storage --------------------------------------------------------------------


def record_to_checkpoint(record: SampleRecord, seed) -> Checkpoint:
    image_u8 = torch.round(record.image * 255.0).to(torch.uint8)
    tensors = {
        "image": image_u8,
        "theta": record.gt_params.theta,
        "beta": record.gt_params.beta,
        "cam": record.gt_params.cam,
        "gt_kps.coords": record.gt_kps.coords,
        "gt_kps.confidence": record.gt_kps.confidence,
        "gt_kps.visible": record.gt_kps.visible,
        "noisy_kps.coords": record.noisy_kps.coords,
        "noisy_kps.confidence": record.noisy_kps.confidence,
        "noisy_kps.visible": record.noisy_kps.visible,
        "occluded_mask": record.occluded_mask,
        "joints3d": record.joints3d,
        "vertices": record.vertices,
    }
    metadata = {"kind": "sample", "sample_id": record.sample_id, "tags": record.tags}
    return Checkpoint(tensors=tensors, metadata=metadata, seed=seed)


def record_from_checkpoint(ckpt: Checkpoint, source="<sample>") -> SampleRecord:
    if ckpt.metadata.get("kind") != "sample":
        raise DatasetError(source, f"{source} is not a dataset sample")
    t = ckpt.tensors
    try:
        return SampleRecord(
            sample_id=int(ckpt.metadata["sample_id"]),
            image=t["image"].to(torch.float32) / 255.0,
            gt_params=BodyParams(theta=t["theta"], beta=t["beta"], cam=t["cam"]),
            gt_kps=KeypointSet(t["gt_kps.coords"], t["gt_kps.confidence"], t["gt_kps.visible"]),
            noisy_kps=KeypointSet(t["noisy_kps.coords"], t["noisy_kps.confidence"], t["noisy_kps.visible"]),
            occluded_mask=t["occluded_mask"],
            joints3d=t["joints3d"],
            vertices=t["vertices"],
            tags=dict(ckpt.metadata.get("tags", {})),
        )
    except KeyError as e:
        raise DatasetError(source, f"{source} lacks field {str(e)}")


def png_bytes(image):
    array = torch.round(image * 255.0).to(torch.uint8).permute(1, 2, 0).numpy()
    buffer = io.BytesIO()
    Image.fromarray(array).save(buffer, format="PNG")
    return buffer.getvalue()


def load_png(path, image_size=None):
    """PNG file -> [3, H, W] float tensor in [0, 1], resized to image_size when given."""
    with Image.open(path) as img:
        img = img.convert("RGB")
        if image_size is not None and img.size != (image_size, image_size):
            img = img.resize((image_size, image_size), Image.BILINEAR)
        array = np.asarray(img, dtype=np.float32) / 255.0
    return torch.from_numpy(array).permute(2, 0, 1).contiguous()


def _write_sample(config, template, seed, index, out_dir):
    record = generate_sample(config, template, seed, index)
    name = f"{index:06d}"
    save_checkpoint(os.path.join(out_dir, "samples", f"{name}.dpmk"), record_to_checkpoint(record, seed))
    write_bytes_atomic(os.path.join(out_dir, "images", f"{name}.png"), png_bytes(record.image))
    return {
        "id": index,
        "file": f"samples/{name}.dpmk",
        "png": f"images/{name}.png",
        "tags": record.tags,
        "occluded_joints": int(record.occluded_mask.sum().item()),
    }


async def _write_all(config, template, n, seed, out_dir, shards):
    entries = []
    for i in range(0, n, shards):
        batch = range(i, min(i + shards, n))
        tasks = [asyncio.to_thread(_write_sample, config, template, seed, idx, out_dir) for idx in batch]
        entries.extend(await asyncio.gather(*tasks))
        logger.info(f"Generated {i + len(batch)} out of {n} samples")
    return entries


def make_dataset(config: ExperimentConfig, template: BodyTemplate, n, seed, out_dir, shards: Optional[int] = None):
    """Writes n samples plus manifest.json under out_dir and returns the manifest."""
    ensure_directory_exists(os.path.join(out_dir, "samples"))
    ensure_directory_exists(os.path.join(out_dir, "images"))
    shards = shards or MAX_PARALLEL_SHARDS
    entries = asyncio.run(_write_all(config, template, n, seed, out_dir, shards))
    entries.sort(key=lambda e: e["id"])
    manifest = {
        "kind": "dataset",
        "num_samples": n,
        "seed": seed,
        "config_hash": config_hash(config),
        "scene": config.scene.model_dump(mode="json"),
        "image_size": config.scene.image_size,
        "occluded_fraction": sum(e["tags"]["occluded"] for e in entries) / max(n, 1),
        "crowded_fraction": sum(e["tags"]["crowded"] for e in entries) / max(n, 1),
        "samples": entries,
    }
    save_to_json(manifest, os.path.join(out_dir, "manifest.json"))
    logger.info(f"Wrote dataset to {out_dir}", samples=n, seed=seed)
    return manifest


def load_dataset(root) -> List[SampleRecord]:
    manifest_path = os.path.join(root, "manifest.json")
    if not os.path.exists(manifest_path):
        raise DatasetError(root, f"No manifest.json under {root}")
    manifest = load_json(manifest_path)
    records = []
    for entry in manifest.get("samples", []):
        path = os.path.join(root, entry["file"])
        records.append(record_from_checkpoint(load_checkpoint(path), source=path))
    return records


# --- torch plumbing ---------------------------------------------------------------


@dataclass
class Batch:
    ids: List[int]
    images: torch.Tensor
    theta: torch.Tensor
    beta: torch.Tensor
    cam: torch.Tensor
    gt_kps: KeypointSet
    noisy_kps: KeypointSet
    occluded_mask: torch.Tensor
    joints3d: torch.Tensor
    vertices: torch.Tensor
    tags: List[Dict[str, bool]]

    def to(self, dtype):
        return Batch(
            ids=self.ids,
            images=self.images.to(dtype),
            theta=self.theta.to(dtype),
            beta=self.beta.to(dtype),
            cam=self.cam.to(dtype),
            gt_kps=self.gt_kps.to(dtype),
            noisy_kps=self.noisy_kps.to(dtype),
            occluded_mask=self.occluded_mask,
            joints3d=self.joints3d.to(dtype),
            vertices=self.vertices.to(dtype),
            tags=self.tags,
        )


def collate_records(records: List[SampleRecord]) -> Batch:
    return Batch(
        ids=[r.sample_id for r in records],
        images=torch.stack([r.image for r in records]),
        theta=torch.stack([r.gt_params.theta for r in records]),
        beta=torch.stack([r.gt_params.beta for r in records]),
        cam=torch.stack([r.gt_params.cam for r in records]),
        gt_kps=KeypointSet.stack([r.gt_kps for r in records]),
        noisy_kps=KeypointSet.stack([r.noisy_kps for r in records]),
        occluded_mask=torch.stack([r.occluded_mask for r in records]),
        joints3d=torch.stack([r.joints3d for r in records]),
        vertices=torch.stack([r.vertices for r in records]),
        tags=[r.tags for r in records],
    )


class SampleDataset(Dataset):
    def __init__(self, records: List[SampleRecord]):
        self.records = list(records)

    @classmethod
    def from_directory(cls, root):
        return cls(load_dataset(root))

    def filter(self, split):
        return SampleDataset([r for r in self.records if r.has_tag(split)])

    def __len__(self):
        return len(self.records)

    def __getitem__(self, idx):
        return self.records[idx]

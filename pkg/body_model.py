# body_model.py
"""Procedural SMPL-style body model: axis-angle kinematics, linear blend skinning,
joint regression and perspective reprojection.

Axes follow the camera convention used everywhere else in the repo: x right,
y down, z away from the camera.
"""

import math
from dataclasses import dataclass, fields
from typing import List, Optional, Tuple

import numpy as np
import torch

from checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from config import (
    BodyModelConfig,
    PROJECTION_SENTINEL,
    SMALL_ANGLE_THRESHOLD,
    SMPL_PARENTS,
)
from exceptions import ConfigurationError, DimensionError
from logger import StructuredLogger
from utils import write_bytes_atomic
from validation import validate_parents, validate_template

logger = StructuredLogger(__name__)

# SMPL rest joints (metres, y up, z towards the viewer); flipped into camera axes below
_SMPL_REST_JOINTS = np.array(
    [
        [0.00, 0.00, 0.00],
        [0.06, -0.09, 0.00],
        [-0.06, -0.09, 0.00],
        [0.00, 0.11, -0.02],
        [0.10, -0.47, 0.00],
        [-0.10, -0.47, 0.00],
        [0.00, 0.25, 0.00],
        [0.09, -0.87, -0.04],
        [-0.09, -0.87, -0.04],
        [0.00, 0.31, 0.02],
        [0.12, -0.93, 0.08],
        [-0.12, -0.93, 0.08],
        [0.00, 0.52, 0.00],
        [0.08, 0.43, 0.00],
        [-0.08, 0.43, 0.00],
        [0.00, 0.60, 0.05],
        [0.19, 0.46, 0.00],
        [-0.19, 0.46, 0.00],
        [0.44, 0.45, -0.02],
        [-0.44, 0.45, -0.02],
        [0.69, 0.46, 0.00],
        [-0.69, 0.46, 0.00],
        [0.78, 0.45, 0.00],
        [-0.78, 0.45, 0.00],
    ]
)

TEMPLATE_TENSORS = (
    "rest_vertices",
    "rest_joints",
    "parent",
    "blend_weights",
    "shape_basis",
    "joint_regressor",
    "faces",
)


@dataclass
class BodyTemplate:
    rest_vertices: torch.Tensor  # [V, 3]
    rest_joints: torch.Tensor  # [J, 3]
    parent: List[int]  # [J], parent[0] = -1
    blend_weights: torch.Tensor  # [V, J]
    shape_basis: torch.Tensor  # [V, 3, B]
    joint_regressor: torch.Tensor  # [N, V]
    faces: torch.Tensor  # [F, 3]

    @property
    def num_joints(self):
        return self.rest_joints.shape[0]

    @property
    def num_vertices(self):
        return self.rest_vertices.shape[0]

    @property
    def num_betas(self):
        return self.shape_basis.shape[-1]

    @property
    def num_regressed(self):
        return self.joint_regressor.shape[0]

    def to(self, dtype):
        return BodyTemplate(
            rest_vertices=self.rest_vertices.to(dtype),
            rest_joints=self.rest_joints.to(dtype),
            parent=list(self.parent),
            blend_weights=self.blend_weights.to(dtype),
            shape_basis=self.shape_basis.to(dtype),
            joint_regressor=self.joint_regressor.to(dtype),
            faces=self.faces,
        )


@dataclass
class BodyParams:
    theta: torch.Tensor  # [..., J, 3] axis-angle radians
    beta: torch.Tensor  # [..., B]
    cam: torch.Tensor  # [..., 3] (s, tx, ty)

    def __post_init__(self):
        if (self.cam[..., 0] <= 0).any():
            raise ConfigurationError("cam", "camera scale s must be positive")

    def to_dict(self):
        return {f.name: getattr(self, f.name).tolist() for f in fields(self)}


# --- rotations ---------------------------------------------------------------


def skew(v):
    zero = torch.zeros_like(v[..., 0])
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    return torch.stack(
        [
            torch.stack([zero, -z, y], dim=-1),
            torch.stack([z, zero, -x], dim=-1),
            torch.stack([-y, x, zero], dim=-1),
        ],
        dim=-2,
    )


def rodrigues(aa):
    """Axis-angle [..., 3] -> rotation matrices [..., 3, 3].

    Below |aa| = 1e-8 the sin/cos ratios switch to their second-order Taylor
    expansions so values and gradients stay finite at the rest pose.
    """
    theta_sq = (aa * aa).sum(dim=-1)
    small = theta_sq < SMALL_ANGLE_THRESHOLD**2
    safe_sq = torch.where(small, torch.ones_like(theta_sq), theta_sq)
    theta = torch.sqrt(safe_sq)
    a = torch.where(small, 1.0 - theta_sq / 6.0, torch.sin(theta) / theta)
    b = torch.where(small, 0.5 - theta_sq / 24.0, (1.0 - torch.cos(theta)) / safe_sq)
    k = skew(aa)
    eye = torch.eye(3, dtype=aa.dtype, device=aa.device).expand(k.shape)
    return eye + a[..., None, None] * k + b[..., None, None] * (k @ k)


# --- template construction -----------------------------------------------------


def _skeleton_from_parents(parents, rng):
    joints = [np.zeros(3)]
    for j in range(1, len(parents)):
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction) + 1e-12
        joints.append(joints[parents[j]] + direction * rng.uniform(0.08, 0.2))
    return np.stack(joints)


def _procedural_parents(num_joints, rng):
    return [-1] + [int(rng.integers(max(0, j - 3), j)) for j in range(1, num_joints)]


def _segment_distance(points, a, b):
    ab = b - a
    denom = max(float(ab @ ab), 1e-12)
    t = np.clip(((points - a) @ ab) / denom, 0.0, 1.0)
    closest = a + t[:, None] * ab
    return np.linalg.norm(points - closest, axis=1)


def _perpendicular_basis(direction):
    helper = np.eye(3)[np.argmin(np.abs(direction))]
    u = np.cross(direction, helper)
    u /= np.linalg.norm(u)
    v = np.cross(direction, u)
    return u, v


def build_template(config: BodyModelConfig, seed=0, dtype=torch.float32) -> BodyTemplate:
    """Builds the MiniSMPL template deterministically from (config, seed)."""
    rng = np.random.default_rng(seed)
    num_joints = config.num_joints

    if config.parents is not None:
        parents = list(config.parents)
    elif num_joints == len(SMPL_PARENTS):
        parents = list(SMPL_PARENTS)
    else:
        parents = _procedural_parents(num_joints, rng)
    validate_parents(parents)
    if parents == SMPL_PARENTS:
        rest_joints = _SMPL_REST_JOINTS * np.array([1.0, -1.0, -1.0])
    else:
        rest_joints = _skeleton_from_parents(parents, rng)

    bones = list(range(1, num_joints))  # bone j runs parent[j] -> j, driven by parent[j]
    num_vertices = config.num_vertices
    per_bone = np.full(len(bones), num_vertices // len(bones))
    per_bone[: num_vertices % len(bones)] += 1

    segs = config.ring_segments
    vertices = []
    faces = []
    vertex_bone = []
    for bone_idx, (j, count) in enumerate(zip(bones, per_bone)):
        a, b = rest_joints[parents[j]], rest_joints[j]
        axis = b - a
        length = np.linalg.norm(axis)
        direction = axis / max(length, 1e-12)
        u, v = _perpendicular_basis(direction)
        radius = config.limb_radius * (1.0 + 0.1 * rng.uniform(-1.0, 1.0))
        phase = rng.uniform(0.0, 2.0 * math.pi / segs)
        start = len(vertices)
        rings = count // segs
        for r in range(rings):
            t = (r + 0.5) / rings
            for s in range(segs):
                phi = phase + 2.0 * math.pi * s / segs
                vertices.append(a + t * axis + radius * (math.cos(phi) * u + math.sin(phi) * v))
        for r in range(rings - 1):
            for s in range(segs):
                p0 = start + r * segs + s
                p1 = start + r * segs + (s + 1) % segs
                q0 = p0 + segs
                q1 = p1 + segs
                faces.append((p0, q0, p1))
                faces.append((p1, q0, q1))
        for _ in range(count - rings * segs):
            t = rng.uniform(0.0, 1.0)
            phi = rng.uniform(0.0, 2.0 * math.pi)
            vertices.append(a + t * axis + radius * (math.cos(phi) * u + math.sin(phi) * v))
        vertex_bone.extend([bone_idx] * int(count))
    vertices = np.stack(vertices)
    vertex_bone = np.asarray(vertex_bone)

    # blend weights: softmax over negative distance to the two nearest bones
    distances = np.stack(
        [_segment_distance(vertices, rest_joints[parents[j]], rest_joints[j]) for j in bones], axis=1
    )
    nearest = np.argsort(distances, axis=1, kind="stable")[:, :2]
    near_d = np.take_along_axis(distances, nearest, axis=1)
    logits = -near_d / config.skin_temperature
    logits -= logits.max(axis=1, keepdims=True)
    probs = np.exp(logits)
    probs /= probs.sum(axis=1, keepdims=True)
    blend_weights = np.zeros((num_vertices, num_joints))
    for k in range(2):
        drivers = np.array([parents[bones[b]] for b in nearest[:, k]])
        np.add.at(blend_weights, (np.arange(num_vertices), drivers), probs[:, k])

    # shape basis: global scale, vertical stretch, then per-bone thickness
    root = rest_joints[0]
    shape_basis = np.zeros((num_vertices, 3, config.num_betas))
    if config.num_betas > 0:
        shape_basis[:, :, 0] = 0.05 * (vertices - root)
    if config.num_betas > 1:
        shape_basis[:, 1, 1] = 0.05 * (vertices[:, 1] - root[1])
    for k in range(2, config.num_betas):
        bone_gain = rng.normal(0.0, 0.2, size=len(bones))
        for bone_idx, j in enumerate(bones):
            mask = vertex_bone == bone_idx
            a, b = rest_joints[parents[j]], rest_joints[j]
            axis = (b - a) / max(np.linalg.norm(b - a), 1e-12)
            rel = vertices[mask] - a
            radial = rel - (rel @ axis)[:, None] * axis
            shape_basis[mask, :, k] = bone_gain[bone_idx] * radial

    # joint regressor: Gaussian weights over the 8 nearest vertices of each joint
    num_regressed = config.regressed_joints
    if num_regressed > num_joints:
        raise ConfigurationError("num_regressed", "num_regressed cannot exceed num_joints")
    regressor = np.zeros((num_regressed, num_vertices))
    k_near = min(8, num_vertices)
    for n in range(num_regressed):
        d = np.linalg.norm(vertices - rest_joints[n], axis=1)
        idx = np.argsort(d, kind="stable")[:k_near]
        w = np.exp(-(d[idx] ** 2) / (2.0 * config.limb_radius**2))
        regressor[n, idx] = w / w.sum()

    template = BodyTemplate(
        rest_vertices=torch.tensor(vertices, dtype=dtype),
        rest_joints=torch.tensor(rest_joints, dtype=dtype),
        parent=parents,
        blend_weights=torch.tensor(blend_weights, dtype=dtype),
        shape_basis=torch.tensor(shape_basis, dtype=dtype),
        joint_regressor=torch.tensor(regressor, dtype=dtype),
        faces=torch.tensor(np.asarray(faces, dtype=np.int64).reshape(-1, 3)),
    )
    if not validate_template(template):
        raise ConfigurationError("body", "Generated template violates its invariants")
    logger.debug(
        "Built body template",
        joints=num_joints,
        vertices=num_vertices,
        faces=len(faces),
        seed=seed,
    )
    return template


def save_template(path, template: BodyTemplate):
    tensors = {
        "rest_vertices": template.rest_vertices,
        "rest_joints": template.rest_joints,
        "parent": torch.tensor(template.parent, dtype=torch.int64),
        "blend_weights": template.blend_weights,
        "shape_basis": template.shape_basis,
        "joint_regressor": template.joint_regressor,
        "faces": template.faces,
    }
    return save_checkpoint(path, Checkpoint(tensors=tensors, metadata={"kind": "body_template"}))


def load_template(path, dtype=torch.float32) -> BodyTemplate:
    ckpt = load_checkpoint(path)
    missing = [name for name in TEMPLATE_TENSORS if name not in ckpt.tensors and name != "faces"]
    if missing:
        raise ConfigurationError("template_path", f"Template file {path} lacks tensors {missing}")
    t = ckpt.tensors
    template = BodyTemplate(
        rest_vertices=t["rest_vertices"].to(dtype),
        rest_joints=t["rest_joints"].to(dtype),
        parent=[int(p) for p in t["parent"].tolist()],
        blend_weights=t["blend_weights"].to(dtype),
        shape_basis=t["shape_basis"].to(dtype),
        joint_regressor=t["joint_regressor"].to(dtype),
        faces=t.get("faces", torch.zeros(0, 3, dtype=torch.int64)),
    )
    if not validate_template(template):
        raise ConfigurationError("template_path", f"Template file {path} violates invariants")
    return template


def template_from_config(config: BodyModelConfig, seed=0, dtype=torch.float32) -> BodyTemplate:
    if config.template_path:
        return load_template(config.template_path, dtype=dtype)
    return build_template(config, seed=seed, dtype=dtype)


# --- kinematics and skinning --------------------------------------------------


def _make_transform(rot, trans):
    top = torch.cat([rot, trans.unsqueeze(-1)], dim=-1)
    bottom = torch.zeros(top.shape[:-2] + (1, 4), dtype=rot.dtype, device=rot.device)
    bottom[..., 0, 3] = 1.0
    return torch.cat([top, bottom], dim=-2)


def _check_pose(template, rotmats):
    if rotmats.shape[-3] != template.num_joints:
        raise DimensionError(
            (template.num_joints, 3, 3), tuple(rotmats.shape[-3:]), "pose has the wrong joint count"
        )


def chain_transforms(template: BodyTemplate, rotmats):
    """World transforms [..., J, 4, 4] from local rotations [..., J, 3, 3]."""
    _check_pose(template, rotmats)
    joints = template.rest_joints.to(rotmats.dtype)
    parent = template.parent
    batch = rotmats.shape[:-3]
    transforms = []
    for j in range(template.num_joints):
        offset = joints[j] if j == 0 else joints[j] - joints[parent[j]]
        local = _make_transform(rotmats[..., j, :, :], offset.expand(batch + (3,)))
        transforms.append(local if j == 0 else transforms[parent[j]] @ local)
    return torch.stack(transforms, dim=-3)


def forward_kinematics(template: BodyTemplate, theta):
    return chain_transforms(template, rodrigues(theta))


def skin_rotmats(template: BodyTemplate, rotmats, beta):
    world = chain_transforms(template, rotmats)
    rot = world[..., :3, :3]
    joints = template.rest_joints.to(rotmats.dtype)
    trans = world[..., :3, 3] - (rot @ joints.unsqueeze(-1)).squeeze(-1)

    shaped = template.rest_vertices.to(beta.dtype) + torch.einsum(
        "vkb,...b->...vk", template.shape_basis.to(beta.dtype), beta
    )
    weights = template.blend_weights.to(rotmats.dtype)
    vert_rot = torch.einsum("vj,...jab->...vab", weights, rot)
    vert_trans = torch.einsum("vj,...ja->...va", weights, trans)
    return (vert_rot @ shaped.unsqueeze(-1)).squeeze(-1) + vert_trans


def skin(template: BodyTemplate, theta, beta):
    return skin_rotmats(template, rodrigues(theta), beta)


def regress_joints(template: BodyTemplate, vertices):
    if vertices.shape[-2] != template.num_vertices:
        raise DimensionError((template.num_vertices, 3), tuple(vertices.shape[-2:]))
    return torch.einsum("nv,...vk->...nk", template.joint_regressor.to(vertices.dtype), vertices)


# --- camera -------------------------------------------------------------------


def image_hw(image_size) -> Tuple[int, int]:
    if isinstance(image_size, (tuple, list)):
        return int(image_size[0]), int(image_size[1])
    return int(image_size), int(image_size)


def focal_length(image_size):
    """Diagonal focal-length heuristic: f = sqrt(H^2 + W^2)."""
    h, w = image_hw(image_size)
    return math.sqrt(h * h + w * w)


def camera_translation(cam, image_size):
    h, _ = image_hw(image_size)
    f = focal_length(image_size)
    tz = 2.0 * f / (cam[..., 0] * h)
    return torch.stack([cam[..., 1], cam[..., 2], tz], dim=-1)


def perspective_project(points, image_size, focal: Optional[float] = None):
    """Camera-space points [..., N, 3] -> (pixels [..., N, 2], valid [..., N])."""
    h, w = image_hw(image_size)
    f = focal_length(image_size) if focal is None else focal
    z = points[..., 2]
    valid = z > 0
    safe_z = torch.where(valid, z, torch.ones_like(z))
    x = f * points[..., 0] / safe_z + w / 2.0
    y = f * points[..., 1] / safe_z + h / 2.0
    pixels = torch.stack([x, y], dim=-1)
    sentinel = torch.full_like(pixels, PROJECTION_SENTINEL)
    return torch.where(valid.unsqueeze(-1), pixels, sentinel), valid


def project(joints3d, cam, image_size):
    """Crop-space perspective projection of J3D with camera pi = (s, tx, ty)."""
    points = joints3d + camera_translation(cam, image_size).unsqueeze(-2)
    return perspective_project(points, image_size)


def write_obj(path, vertices, faces=None):
    lines = [f"v {x:.6f} {y:.6f} {z:.6f}" for x, y, z in vertices.tolist()]
    if faces is not None:
        lines.extend(f"f {a + 1} {b + 1} {c + 1}" for a, b, c in faces.tolist())
    write_bytes_atomic(path, ("\n".join(lines) + "\n").encode("utf-8"))
    logger.info(f"Wrote mesh to {path}", vertices=len(vertices))
    return path

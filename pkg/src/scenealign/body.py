"""Miniature parametric body model with standard blendshape + LBS math.

The template is procedurally generated (capsule rings around a 15-joint
skeleton, 10 shape directions) so no licensed asset is required; all the
downstream math (losses, alignment, metrics) is template-agnostic and an
external template in the same container format can be loaded instead.

forward_body follows the usual pipeline: shape blendshapes on the rest
vertices, rest joints from a joint regressor, per-joint world transforms
through the kinematic chain (axis-angle via Rodrigues), linear blend
skinning, then a global translation.  Pose-corrective blendshapes are
deliberately omitted; nothing downstream depends on them.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .errors import DegenerateInputError, InvariantError
from .geometry import Intrinsics, rodrigues
from .tensorio import TensorContainer, read_tensor, write_tensor

DEFAULT_VISIBILITY_EPS = 1e-3  # meters; absorbs rasterization quantization


@dataclass
class BodyTemplate:
    template_vertices: np.ndarray  # (V,3)
    faces: np.ndarray  # (F,3) int
    joints_rest: np.ndarray  # (J,3)
    parent: np.ndarray  # (J,) int, parent[0] == -1
    skinning_weights: np.ndarray  # (V,J), rows sum to 1
    shape_dirs: np.ndarray  # (V,3,B)
    joint_regressor: np.ndarray  # (J,V)

    def __post_init__(self):
        V = self.template_vertices.shape[0]
        J = self.joints_rest.shape[0]
        if self.skinning_weights.shape != (V, J):
            raise InvariantError("skinning weight shape mismatch")
        if np.any(self.skinning_weights < -1e-12):
            raise InvariantError("negative skinning weight")
        rows = self.skinning_weights.sum(axis=1)
        if np.max(np.abs(rows - 1.0)) > 1e-9:
            raise InvariantError("skinning rows must sum to 1")
        if self.parent.shape != (J,) or self.parent[0] != -1:
            raise InvariantError("parent array must be a tree rooted at joint 0")
        for j in range(1, J):
            if not (0 <= self.parent[j] < j):
                raise InvariantError(f"parent[{j}]={self.parent[j]} must precede its child")
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= V):
            raise InvariantError("face indices out of range")
        if self.joint_regressor.shape != (J, V):
            raise InvariantError("joint regressor shape mismatch")

    @property
    def num_vertices(self) -> int:
        return self.template_vertices.shape[0]

    @property
    def num_joints(self) -> int:
        return self.joints_rest.shape[0]

    @property
    def num_shape_params(self) -> int:
        return self.shape_dirs.shape[2]

    @property
    def body_scale(self) -> float:
        """Largest rest-pose extent; the natural unit for placement errors."""
        ext = self.template_vertices.max(axis=0) - self.template_vertices.min(axis=0)
        return float(ext.max())


@dataclass
class BodyParams:
    pose: np.ndarray  # (J,3) axis-angle, joint 0 = global orientation
    shape: np.ndarray  # (B,)
    translation: np.ndarray | Tensor  # (3,) camera-frame meters

    def validate(self, tmpl: BodyTemplate) -> None:
        if self.pose.shape != (tmpl.num_joints, 3):
            raise InvariantError(f"pose shape {self.pose.shape} mismatches template")
        if self.shape.shape != (tmpl.num_shape_params,):
            raise InvariantError(f"shape shape {self.shape.shape} mismatches template")
        if not np.all(np.isfinite(self.pose)) or not np.all(np.isfinite(self.shape)):
            raise InvariantError("non-finite body parameters")
        norms = np.linalg.norm(self.pose, axis=1)
        if np.any(norms >= 2 * np.pi):
            raise InvariantError("axis-angle norm must stay below 2*pi")


@dataclass
class BodyOutput:
    vertices: np.ndarray | Tensor  # (V,3)
    joints3d: np.ndarray | Tensor  # (J,3)
    joints2d: np.ndarray | Tensor | None = None  # (J,2), filled on demand


def forward_body(tmpl: BodyTemplate, params: BodyParams) -> BodyOutput:
    """Pose the template: blendshapes, kinematic chain, LBS, translation.

    The translation may be an autodiff Tensor, in which case the returned
    vertices/joints are Tensors and gradients flow through the placement
    (the articulated geometry itself is treated as data).
    """
    shaped = tmpl.template_vertices + tmpl.shape_dirs @ params.shape  # (V,3)
    j_rest = tmpl.joint_regressor @ shaped  # (J,3)
    J = tmpl.num_joints

    # world transform per joint: G_j = G_parent . [R_j | offset_j]
    G = np.empty((J, 4, 4))
    G[0] = np.eye(4)
    G[0, :3, :3] = rodrigues(params.pose[0])
    G[0, :3, 3] = j_rest[0]
    for j in range(1, J):
        local = np.eye(4)
        local[:3, :3] = rodrigues(params.pose[j])
        local[:3, 3] = j_rest[j] - j_rest[tmpl.parent[j]]
        G[j] = G[tmpl.parent[j]] @ local

    posed_joints = G[:, :3, 3].copy()

    # skinning transforms act on rest-frame vertices: A_j = G_j . [I | -j_rest_j]
    A = G.copy()
    A[:, :3, 3] -= np.einsum("jab,jb->ja", G[:, :3, :3], j_rest)

    # blend per-vertex transforms: T_v = sum_j w_vj A_j
    W = tmpl.skinning_weights
    T = np.einsum("vj,jab->vab", W, A)
    verts = np.einsum("vab,vb->va", T[:, :3, :3], shaped) + T[:, :3, 3]

    t = params.translation
    return BodyOutput(vertices=verts + t, joints3d=posed_joints + t)


def average_shape(betas) -> np.ndarray:
    """Arithmetic mean of per-frame shape vectors."""
    betas = [np.asarray(b, dtype=float) for b in betas]
    if not betas:
        raise DegenerateInputError("empty beta list")
    return np.mean(np.stack(betas), axis=0)


def project_joints(output: BodyOutput, K: Intrinsics) -> BodyOutput:
    """Fill joints2d by pinhole projection (Tensor-aware; requires z > 0)."""
    j = output.joints3d
    if isinstance(j, Tensor):
        z = j[:, 2:3]
        u = j[:, 0:1] / z * K.fx + K.cx
        v = j[:, 1:2] / z * K.fy + K.cy
        from .autodiff import concat

        output.joints2d = concat([u, v], axis=1)
    else:
        z = j[:, 2]
        output.joints2d = np.stack([K.fx * j[:, 0] / z + K.cx,
                                    K.fy * j[:, 1] / z + K.cy], axis=1)
    return output


# -- z-buffer visibility ------------------------------------------------------

def rasterize_zbuffer(vertices: np.ndarray, faces: np.ndarray, K: Intrinsics,
                      image_size: tuple[int, int]) -> np.ndarray:
    """Depth buffer of the mesh at image resolution.

    Depth is interpolated perspective-correctly (1/z linear in screen space).
    Faces with any vertex at z <= 0 are skipped; partial clipping is out of
    scope since visibility only ever queries fully-front-facing bodies.
    """
    W, H = int(image_size[0]), int(image_size[1])
    if W <= 0 or H <= 0:
        raise DegenerateInputError("zero image size")
    zbuf = np.full((H, W), np.inf)
    z = vertices[:, 2]
    uv = np.empty((len(vertices), 2))
    ok = z > 1e-12
    uv[ok, 0] = K.fx * vertices[ok, 0] / z[ok] + K.cx
    uv[ok, 1] = K.fy * vertices[ok, 1] / z[ok] + K.cy
    for face in faces:
        if not ok[face].all():
            continue
        tri = uv[face]
        zs = z[face]
        x0 = max(int(np.floor(tri[:, 0].min())), 0)
        x1 = min(int(np.ceil(tri[:, 0].max())), W - 1)
        y0 = max(int(np.floor(tri[:, 1].min())), 0)
        y1 = min(int(np.ceil(tri[:, 1].max())), H - 1)
        if x0 > x1 or y0 > y1:
            continue
        area = ((tri[1, 0] - tri[0, 0]) * (tri[2, 1] - tri[0, 1])
                - (tri[2, 0] - tri[0, 0]) * (tri[1, 1] - tri[0, 1]))
        if abs(area) < 1e-12:
            continue
        xs = np.arange(x0, x1 + 1, dtype=float)
        ys = np.arange(y0, y1 + 1, dtype=float)
        px, py = np.meshgrid(xs, ys)
        w0 = ((tri[1, 0] - px) * (tri[2, 1] - py) - (tri[2, 0] - px) * (tri[1, 1] - py)) / area
        w1 = ((tri[2, 0] - px) * (tri[0, 1] - py) - (tri[0, 0] - px) * (tri[2, 1] - py)) / area
        w2 = 1.0 - w0 - w1
        inside = (w0 >= 0) & (w1 >= 0) & (w2 >= 0)
        if not inside.any():
            continue
        inv_z = w0 * (1.0 / zs[0]) + w1 * (1.0 / zs[1]) + w2 * (1.0 / zs[2])
        depth = np.where(inside & (inv_z > 0), 1.0 / np.maximum(inv_z, 1e-300), np.inf)
        sub = zbuf[y0:y1 + 1, x0:x1 + 1]
        np.minimum(sub, depth, out=sub)
    return zbuf


def visible_vertices(output, faces: np.ndarray, K: Intrinsics,
                     image_size: tuple[int, int],
                     epsilon: float = DEFAULT_VISIBILITY_EPS) -> np.ndarray:
    """Boolean per-vertex visibility from a z-buffer test.

    A vertex is visible iff z > 0, its projection rounds to a pixel inside
    the image, and its depth is within epsilon of the buffer at that pixel.
    This is a stop-gradient mask: it selects vertices, gradients flow through
    the selected vertex positions, never through mask membership.
    """
    if epsilon <= 0:
        raise InvariantError("epsilon must be positive")
    verts = output.vertices if isinstance(output, BodyOutput) else output
    if isinstance(verts, Tensor):
        verts = verts.value
    verts = np.asarray(verts, dtype=float)
    W, H = int(image_size[0]), int(image_size[1])
    zbuf = rasterize_zbuffer(verts, faces, K, image_size)
    vis = np.zeros(len(verts), dtype=bool)
    z = verts[:, 2]
    front = z > 1e-12
    u = np.zeros(len(verts))
    v = np.zeros(len(verts))
    u[front] = K.fx * verts[front, 0] / z[front] + K.cx
    v[front] = K.fy * verts[front, 1] / z[front] + K.cy
    ui = np.rint(u).astype(int)
    vi = np.rint(v).astype(int)
    inside = front & (ui >= 0) & (ui < W) & (vi >= 0) & (vi < H)
    idx = np.nonzero(inside)[0]
    vis[idx] = z[idx] <= zbuf[vi[idx], ui[idx]] + epsilon
    return vis


# -- procedural miniature template ---------------------------------------------

_MINI_JOINTS = [
    # name, parent, rest position (y-up, pelvis at origin), segment radius
    ("pelvis", -1, (0.00, 0.00, 0.00), 0.13),
    ("spine", 0, (0.00, 0.28, 0.00), 0.12),
    ("head", 1, (0.00, 0.55, 0.00), 0.09),
    ("l_hip", 0, (-0.10, -0.06, 0.00), 0.07),
    ("l_knee", 3, (-0.12, -0.46, 0.00), 0.06),
    ("l_ankle", 4, (-0.13, -0.86, 0.00), 0.05),
    ("r_hip", 0, (0.10, -0.06, 0.00), 0.07),
    ("r_knee", 6, (0.12, -0.46, 0.00), 0.06),
    ("r_ankle", 7, (0.13, -0.86, 0.00), 0.05),
    ("l_shoulder", 1, (-0.20, 0.42, 0.00), 0.055),
    ("l_elbow", 9, (-0.46, 0.40, 0.00), 0.045),
    ("l_wrist", 10, (-0.70, 0.38, 0.00), 0.04),
    ("r_shoulder", 1, (0.20, 0.42, 0.00), 0.055),
    ("r_elbow", 12, (0.46, 0.40, 0.00), 0.045),
    ("r_wrist", 13, (0.70, 0.38, 0.00), 0.04),
]
_RINGS_PER_BONE = 3
_RING_SEGMENTS = 6
_NUM_SHAPE_DIRS = 10


def build_mini_template() -> BodyTemplate:
    """Deterministic capsule-person template: 15 joints, ~260 vertices, B=10."""
    names = [j[0] for j in _MINI_JOINTS]
    parent = np.array([j[1] for j in _MINI_JOINTS], dtype=int)
    joints = np.array([j[2] for j in _MINI_JOINTS], dtype=float)
    radii = np.array([j[3] for j in _MINI_JOINTS], dtype=float)
    J = len(names)

    verts = []
    vert_bone = []  # (parent_joint, child_joint, alpha along bone)
    ring_of_joint: dict[int, list[int]] = {j: [] for j in range(J)}
    faces = []

    for child in range(1, J):
        par = parent[child]
        a, b = joints[par], joints[child]
        axis = b - a
        length = np.linalg.norm(axis)
        axis = axis / length
        # orthonormal frame around the bone
        ref = np.array([0.0, 0.0, 1.0]) if abs(axis[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
        n1 = np.cross(axis, ref)
        n1 /= np.linalg.norm(n1)
        n2 = np.cross(axis, n1)
        ring_rows = []
        for r in range(_RINGS_PER_BONE):
            alpha = (r + 0.5) / _RINGS_PER_BONE
            center = a + alpha * (b - a)
            radius = radii[par] * (1 - alpha) + radii[child] * alpha
            row = []
            for k in range(_RING_SEGMENTS):
                ang = 2 * np.pi * k / _RING_SEGMENTS
                p = center + radius * (np.cos(ang) * n1 + np.sin(ang) * n2)
                row.append(len(verts))
                verts.append(p)
                vert_bone.append((par, child, alpha))
            ring_rows.append(row)
            if r == 0:
                ring_of_joint[par].extend(row)
            elif r == _RINGS_PER_BONE - 1:
                ring_of_joint[child].extend(row)
        for r in range(_RINGS_PER_BONE - 1):
            lo, hi = ring_rows[r], ring_rows[r + 1]
            for k in range(_RING_SEGMENTS):
                k2 = (k + 1) % _RING_SEGMENTS
                faces.append((lo[k], lo[k2], hi[k]))
                faces.append((hi[k], lo[k2], hi[k2]))

    # cap the extremities (head top, wrists, ankles) with a tip vertex fan
    for tip, outward in ((2, (0.0, 0.18, 0.0)), (5, (0.0, -0.1, 0.0)), (8, (0.0, -0.1, 0.0)),
                         (11, (-0.08, 0.0, 0.0)), (14, (0.08, 0.0, 0.0))):
        tip_idx = len(verts)
        verts.append(joints[tip] + np.array(outward))
        vert_bone.append((parent[tip], tip, 1.0))
        ring = ring_of_joint[tip][-_RING_SEGMENTS:]
        for k in range(_RING_SEGMENTS):
            faces.append((ring[k], ring[(k + 1) % _RING_SEGMENTS], tip_idx))
        ring_of_joint[tip].append(tip_idx)

    verts = np.asarray(verts)
    faces = np.asarray(faces, dtype=int)
    V = len(verts)

    # smooth skinning: blend from the bone's parent joint to its child joint
    weights = np.zeros((V, J))
    for i, (par, child, alpha) in enumerate(vert_bone):
        blend = np.clip((alpha - 0.35) / 0.5, 0.0, 1.0)
        weights[i, par] = 1.0 - blend
        weights[i, child] = blend
    weights /= weights.sum(axis=1, keepdims=True)

    # joint regressor: uniform over the rings bracketing each joint
    regressor = np.zeros((J, V))
    for j in range(J):
        ring = ring_of_joint[j] if ring_of_joint[j] else [0]
        regressor[j, ring] = 1.0 / len(ring)

    # shape directions: deterministic smooth deformation fields
    rng = np.random.default_rng(20240101)
    shape_dirs = np.zeros((V, 3, _NUM_SHAPE_DIRS))
    y = verts[:, 1]
    center_axis = np.array([0.0, 1.0, 0.0])
    lateral = verts - np.outer(verts @ center_axis, center_axis)
    shape_dirs[:, :, 0] = 0.08 * np.outer(y, [0, 1, 0])  # height
    shape_dirs[:, :, 1] = 0.06 * lateral  # girth
    shape_dirs[:, :, 2] = 0.05 * np.outer(np.abs(y) * y, [0, 1, 0])  # limb length bias
    for k in range(3, _NUM_SHAPE_DIRS):
        freq = rng.uniform(1.0, 4.0, size=3)
        phase = rng.uniform(0, 2 * np.pi, size=3)
        amp = 0.02 * rng.standard_normal(3)
        for c in range(3):
            shape_dirs[:, c, k] = amp[c] * np.sin(freq[c] * y + phase[c])

    # store joints consistent with the regressor so beta=0 round-trips
    joints_rest = regressor @ verts
    return BodyTemplate(verts, faces, joints_rest, parent, weights, shape_dirs, regressor)


# -- template serialization -----------------------------------------------------

def save_template(tmpl: BodyTemplate, directory) -> None:
    directory = Path(directory)
    os.makedirs(directory, exist_ok=True)
    arrays = {
        "template_vertices": tmpl.template_vertices.astype(np.float32),
        "faces": tmpl.faces.astype(np.int64),
        "joints_rest": tmpl.joints_rest.astype(np.float32),
        "skinning_weights": tmpl.skinning_weights.astype(np.float32),
        "shape_dirs": tmpl.shape_dirs.astype(np.float32),
        "joint_regressor": tmpl.joint_regressor.astype(np.float32),
    }
    for name, arr in arrays.items():
        write_tensor(TensorContainer.from_array(name, arr), directory / f"{name}.tc")
    manifest = {
        "V": tmpl.num_vertices,
        "J": tmpl.num_joints,
        "B": tmpl.num_shape_params,
        "parent": tmpl.parent.tolist(),
        "arrays": {name: f"{name}.tc" for name in arrays},
    }
    with open(directory / "manifest.json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def load_template(directory) -> BodyTemplate:
    directory = Path(directory)
    with open(directory / "manifest.json", "r", encoding="utf-8") as f:
        manifest = json.load(f)
    arrays = {
        name: read_tensor(directory / fname).to_array().astype(
            np.int64 if name == "faces" else float)
        for name, fname in manifest["arrays"].items()
    }
    # float32 storage perturbs row sums; renormalize to restore the invariant
    w = arrays["skinning_weights"]
    w = w / w.sum(axis=1, keepdims=True)
    return BodyTemplate(
        template_vertices=arrays["template_vertices"],
        faces=arrays["faces"],
        joints_rest=arrays["joints_rest"],
        parent=np.asarray(manifest["parent"], dtype=int),
        skinning_weights=w,
        shape_dirs=arrays["shape_dirs"],
        joint_regressor=arrays["joint_regressor"],
    )

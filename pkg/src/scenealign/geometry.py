"""Pinhole camera model, pose composition, and intrinsics recovery.

Pixel convention: integer pixel (u, v) sits at the center of its cell, so an
image of width W spans u in [0, W-1] and the image center is ((W-1)/2,
(H-1)/2).  Cameras look down +z; points with z <= 0 are behind the camera.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BehindCameraError, DegenerateInputError, InvariantError

ORTHONORMAL_TOL = 1e-9


@dataclass
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise InvariantError(f"focal lengths must be positive, got ({self.fx}, {self.fy})")
        if not (np.isfinite(self.cx) and np.isfinite(self.cy)):
            raise InvariantError("principal point must be finite")


@dataclass
class CameraPose:
    """World-to-camera map x_cam = R @ x_world + T."""

    rotation: np.ndarray  # (3,3)
    translation: np.ndarray  # (3,)

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=float)
        self.translation = np.asarray(self.translation, dtype=float).reshape(3)
        R = self.rotation
        if R.shape != (3, 3):
            raise InvariantError(f"rotation must be 3x3, got {R.shape}")
        if np.max(np.abs(R.T @ R - np.eye(3))) > 1e-6:
            raise InvariantError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > 1e-6:
            raise InvariantError("rotation determinant is not +1")

    @classmethod
    def identity(cls) -> "CameraPose":
        return cls(np.eye(3), np.zeros(3))


@dataclass
class Pointmap:
    """H x W grid of camera-frame 3D points with optional per-pixel confidence."""

    points: np.ndarray  # (H,W,3)
    confidence: np.ndarray | None = None  # (H,W), non-negative

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float)
        if self.points.ndim != 3 or self.points.shape[2] != 3:
            raise InvariantError(f"pointmap must be (H,W,3), got {self.points.shape}")
        if self.confidence is not None:
            self.confidence = np.asarray(self.confidence, dtype=float)
            if self.confidence.shape != self.points.shape[:2]:
                raise InvariantError(
                    f"confidence {self.confidence.shape} does not match "
                    f"pointmap {self.points.shape[:2]}"
                )

    @property
    def valid(self) -> np.ndarray:
        """Pixels with finite coordinates and positive depth."""
        return np.isfinite(self.points).all(axis=2) & (self.points[..., 2] > 0)


def project(K: Intrinsics, X) -> np.ndarray:
    """Project camera-frame 3D points to pixels: (fx*x/z + cx, fy*y/z + cy).

    Accepts a single 3-vector or an (...,3) array; raises if any z <= 0.
    """
    X = np.asarray(X, dtype=float)
    single = X.ndim == 1
    pts = X.reshape(-1, 3)
    if np.any(pts[:, 2] <= 0):
        raise BehindCameraError("point with z <= 0 cannot be projected")
    uv = np.empty((pts.shape[0], 2))
    uv[:, 0] = K.fx * pts[:, 0] / pts[:, 2] + K.cx
    uv[:, 1] = K.fy * pts[:, 1] / pts[:, 2] + K.cy
    return uv[0] if single else uv.reshape(X.shape[:-1] + (2,))


def unproject(K: Intrinsics, depth: np.ndarray, valid: np.ndarray | None = None) -> Pointmap:
    """Lift a depth map to a camera-frame pointmap.

    Pixel (u, v) with depth d maps to ((u-cx)d/fx, (v-cy)d/fy, d).  Non-finite
    depths are treated as holes; a non-positive depth at a valid pixel is an
    error.  Holes get NaN coordinates.
    """
    depth = np.asarray(depth, dtype=float)
    if depth.ndim != 2:
        raise InvariantError(f"depth must be (H,W), got {depth.shape}")
    if valid is None:
        valid = np.isfinite(depth)
    if np.any(depth[valid] <= 0):
        raise DegenerateInputError("non-positive depth at a valid pixel")
    H, W = depth.shape
    u = np.arange(W, dtype=float)[None, :]
    v = np.arange(H, dtype=float)[:, None]
    pts = np.empty((H, W, 3))
    pts[..., 0] = (u - K.cx) * depth / K.fx
    pts[..., 1] = (v - K.cy) * depth / K.fy
    pts[..., 2] = depth
    pts[~valid] = np.nan
    return Pointmap(pts)


def intrinsics_from_pointmap(P: Pointmap, image_size: tuple[int, int] | None = None) -> Intrinsics:
    """Recover a shared focal length from a camera-frame pointmap.

    Fixes the principal point at the image center and solves the weighted
    least squares  min_f sum C * ||f*(x/z, y/z) - (u-cx, v-cy)||^2,  whose
    closed form is f = sum(C*a*b) / sum(C*a*a) with a the normalized camera
    rays and b the centered pixel coordinates.  Invalid pixels (non-finite,
    z <= 0) are excluded; unit weights are used when confidence is absent.
    """
    H, W = P.points.shape[:2]
    if image_size is not None and (image_size[0] != W or image_size[1] != H):
        raise InvariantError(f"image_size {image_size} does not match pointmap ({W},{H})")
    cx, cy = (W - 1) / 2.0, (H - 1) / 2.0
    valid = P.valid
    if np.count_nonzero(valid) < 2:
        raise DegenerateInputError("need at least 2 valid pixels to fit a focal")
    pts = P.points[valid]
    conf = P.confidence[valid] if P.confidence is not None else np.ones(len(pts))
    u = np.broadcast_to(np.arange(W, dtype=float)[None, :], (H, W))[valid]
    v = np.broadcast_to(np.arange(H, dtype=float)[:, None], (H, W))[valid]
    a = np.concatenate([pts[:, 0] / pts[:, 2], pts[:, 1] / pts[:, 2]])
    b = np.concatenate([u - cx, v - cy])
    w = np.concatenate([conf, conf])
    denom = float(np.sum(w * a * a))
    if denom <= 0.0:
        raise DegenerateInputError("all points on the optical axis; focal is unobservable")
    f = float(np.sum(w * a * b)) / denom
    if f <= 0:
        raise DegenerateInputError(f"fitted focal is non-positive ({f})")
    return Intrinsics(f, f, cx, cy)


def mean_intrinsics(per_frame: list[Intrinsics]) -> Intrinsics:
    """Average per-frame intrinsics into one sequence-shared camera.

    Whether the upstream predictor shares one focal across a sequence is not
    pinned down; this helper gives callers the sequence-shared variant.
    """
    if not per_frame:
        raise DegenerateInputError("empty intrinsics list")
    return Intrinsics(
        float(np.mean([k.fx for k in per_frame])),
        float(np.mean([k.fy for k in per_frame])),
        float(np.mean([k.cx for k in per_frame])),
        float(np.mean([k.cy for k in per_frame])),
    )


def pose_transform(E: CameraPose, X, direction: str = "world_to_camera") -> np.ndarray:
    """Apply E=[R|T]: world->camera is RX+T, camera->world is R^T (X-T)."""
    X = np.asarray(X, dtype=float)
    if direction == "world_to_camera":
        return X @ E.rotation.T + E.translation
    if direction == "camera_to_world":
        return (X - E.translation) @ E.rotation
    raise ValueError(f"unknown direction {direction!r}")


def rodrigues(axis_angle) -> np.ndarray:
    """Axis-angle 3-vector to rotation matrix, stable near zero angle."""
    aa = np.asarray(axis_angle, dtype=float).reshape(3)
    theta = float(np.linalg.norm(aa))
    K = np.array([
        [0.0, -aa[2], aa[1]],
        [aa[2], 0.0, -aa[0]],
        [-aa[1], aa[0], 0.0],
    ])
    if theta < 1e-8:
        # sin(t)/t ~ 1 - t^2/6, (1-cos t)/t^2 ~ 1/2 - t^2/24
        a = 1.0 - theta * theta / 6.0
        b = 0.5 - theta * theta / 24.0
    else:
        a = np.sin(theta) / theta
        b = (1.0 - np.cos(theta)) / (theta * theta)
    return np.eye(3) + a * K + b * (K @ K)

"""Independent brute-force oracles used by the test suite.

These deliberately avoid the library's own code paths: visibility is decided
by exhaustive ray-triangle intersection, chamfer by dense pairwise distances,
similarity fits by random-transform sampling.
"""

import numpy as np


def ray_cast_visibility(vertices: np.ndarray, faces: np.ndarray,
                        eps: float = 1e-9) -> tuple[np.ndarray, np.ndarray]:
    """Per-vertex occlusion by Moller-Trumbore ray casting from the origin.

    Returns (visible, frontmost_hit_depth).  A vertex is visible iff no face
    that does not contain it intersects the open segment origin->vertex.
    frontmost_hit_depth is the z-depth of the nearest such intersection
    (inf when the ray is clear), which callers use to exclude borderline
    vertices from comparisons.
    """
    V = len(vertices)
    visible = np.zeros(V, dtype=bool)
    hit_depth = np.full(V, np.inf)
    v0 = vertices[faces[:, 0]]
    e1 = vertices[faces[:, 1]] - v0
    e2 = vertices[faces[:, 2]] - v0
    for i in range(V):
        target = vertices[i]
        z = target[2]
        if z <= 0:
            visible[i] = False
            hit_depth[i] = 0.0
            continue
        d = target  # ray: t * target, t in (0, 1) is "in front of" the vertex
        pvec = np.cross(np.broadcast_to(d, e2.shape), e2)
        det = np.einsum("ij,ij->i", e1, pvec)
        candidate = np.abs(det) > 1e-14
        candidate &= ~np.any(faces == i, axis=1)
        inv_det = np.where(candidate, 1.0 / np.where(candidate, det, 1.0), 0.0)
        tvec = -v0
        u = np.einsum("ij,ij->i", tvec, pvec) * inv_det
        qvec = np.cross(tvec, e1)
        v = np.einsum("j,ij->i", d, qvec) * inv_det
        t = np.einsum("ij,ij->i", e2, qvec) * inv_det
        hits = candidate & (u >= -1e-12) & (v >= -1e-12) & (u + v <= 1 + 1e-12) & (t > 1e-9)
        blocking = hits & (t < 1.0 - eps)
        visible[i] = not blocking.any()
        if hits.any():
            hit_depth[i] = float(np.min(t[hits])) * z
    return visible, hit_depth


def visibility_boundary_mask(vertices: np.ndarray, zbuf: np.ndarray, hit_depth: np.ndarray,
                             K, image_size, epsilon: float) -> np.ndarray:
    """Vertices whose visibility is epsilon-ambiguous under pixel quantization.

    A vertex is boundary (excluded from oracle comparisons) when the frontmost
    ray hit lies within 3*epsilon of its own depth, or when the depth-test
    outcome flips across the 3x3 pixel neighborhood of its projection (the
    single-pixel rule is then undefined up to half-pixel sampling).
    """
    W, H = int(image_size[0]), int(image_size[1])
    z = vertices[:, 2]
    boundary = np.abs(hit_depth - z) <= 3 * epsilon
    front = z > 0
    u = np.where(front, K.fx * vertices[:, 0] / np.where(front, z, 1.0) + K.cx, -1)
    v = np.where(front, K.fy * vertices[:, 1] / np.where(front, z, 1.0) + K.cy, -1)
    ui = np.rint(u).astype(int)
    vi = np.rint(v).astype(int)
    for i in np.nonzero(front)[0]:
        if not (0 <= ui[i] < W and 0 <= vi[i] < H):
            continue
        patch = zbuf[max(vi[i] - 1, 0):vi[i] + 2, max(ui[i] - 1, 0):ui[i] + 2]
        finite = patch[np.isfinite(patch)]
        if finite.size == 0:
            # no surface anywhere nearby: unambiguous only if the ray is clear
            boundary[i] = boundary[i] or np.isfinite(hit_depth[i])
            continue
        vis_at_min = z[i] <= finite.min() + epsilon
        vis_at_max = (z[i] <= finite.max() + epsilon) or finite.size < patch.size
        if vis_at_min != vis_at_max:
            boundary[i] = True
    return boundary


def chamfer_brute(src: np.ndarray, tgt: np.ndarray) -> float:
    """Sum over src of squared distance to the nearest tgt point, O(n*m)."""
    d2 = ((src[:, None, :] - tgt[None, :, :]) ** 2).sum(axis=2)
    return float(d2.min(axis=1).sum())


def random_similarity_oracle(src: np.ndarray, tgt: np.ndarray, n: int, seed: int,
                             with_scale: bool = True) -> float:
    """Best residual over n random similarity transforms (never beats LSQ)."""
    rng = np.random.default_rng(seed)
    best = np.inf
    for _ in range(n):
        A = rng.standard_normal((3, 3))
        Q, _ = np.linalg.qr(A)
        if np.linalg.det(Q) < 0:
            Q[:, 0] = -Q[:, 0]
        s = float(np.exp(rng.normal(0, 0.5))) if with_scale else 1.0
        t = rng.normal(0, 1.0, 3)
        resid = float(np.sum((s * src @ Q.T + t - tgt) ** 2))
        best = min(best, resid)
    return best

"""Training objectives for the three stages and their building blocks.

All losses evaluate through the autodiff tape, so the same code path serves
plain evaluation (floats out) and training (gradients through predicted
scale, translations, and anything else passed in as a Tensor).  Robust-solver
outputs, anchor sampling, visibility masks, and nearest-neighbor indices are
stop-gradient by contract.

L1 norms are normalized as means over elements so the weights below are
resolution-independent; L2 terms are plain squared Euclidean norms.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import autodiff as ad
from .autodiff import Tensor, as_tensor
from .errors import DegenerateInputError, InvariantError, UnsolvableError
from .geometry import Intrinsics, unproject
from .roe import RoeConfig, solve_scale_shift


@dataclass
class LossWeights:
    lambda_h: float = 1.0
    lambda_preg: float = 0.1
    lambda_smpl: float = 1.0
    lambda_scale: float = 0.1
    lambda_v: float = 0.1
    lambda_j3d: float = 0.1
    lambda_j2d: float = 10.0
    lambda_pose: float = 0.1
    lambda_shape: float = 0.1
    lambda_trans: float = 1.0
    lambda_align: float = 1.0
    lambda_depth: float = 1.0

    def __post_init__(self):
        for name, value in self.__dict__.items():
            if value < 0:
                raise InvariantError(f"{name} must be non-negative, got {value}")

    @classmethod
    def from_dict(cls, d: dict) -> "LossWeights":
        known = {k: float(v) for k, v in d.items() if k in cls.__dataclass_fields__}
        unknown = set(d) - set(known)
        if unknown:
            raise InvariantError(f"unknown loss weights: {sorted(unknown)}")
        return cls(**known)


@dataclass
class PatchSpec:
    anchor_count: int = 64  # K; the reference setting leaves this open
    radius: float = 0.2  # tau, in the pseudo-depth point cloud's native units
    min_patch_size: int = 3

    def __post_init__(self):
        if self.anchor_count < 1:
            raise InvariantError("anchor_count must be >= 1")
        if self.radius <= 0:
            raise InvariantError("radius must be positive")
        if self.min_patch_size < 2:
            raise InvariantError("min_patch_size must be >= 2")


@dataclass
class LossReport:
    """Weighted-sum loss with its unweighted term breakdown.

    total == sum(weights[k] * terms[k]) within 1e-9 relative.  node is the
    autodiff root (present whenever any input carried gradients).
    """

    total: float
    terms: dict[str, float]
    weights: dict[str, float]
    per_frame: list[dict] = field(default_factory=list)
    flags: list[str] = field(default_factory=list)
    node: Tensor | None = None

    def to_dict(self) -> dict:
        return {
            "total": self.total,
            "terms": dict(self.terms),
            "weights": dict(self.weights),
            "per_frame": [dict(f) for f in self.per_frame],
            "flags": list(self.flags),
        }


def _weighted_total(terms: dict[str, Tensor], weights: dict[str, float]):
    node = None
    for name, term in terms.items():
        piece = ad.mul(term, weights[name])
        node = piece if node is None else ad.add(node, piece)
    return node


def _finish(terms: dict[str, Tensor], weights: dict[str, float],
            per_frame=None, flags=None, had_tensor_input=True) -> LossReport:
    node = _weighted_total(terms, weights)
    return LossReport(
        total=float(node.value),
        terms={k: float(v.value) for k, v in terms.items()},
        weights=dict(weights),
        per_frame=per_frame or [],
        flags=flags or [],
        node=node if had_tensor_input else None,
    )


def _isnode(*xs) -> bool:
    return any(isinstance(x, Tensor) for x in xs)


# -- surface distillation (stage 1) -------------------------------------------

def local_human_loss(pred_depth, pred_conf, pseudo_depth, mask, K_intr: Intrinsics,
                     spec: PatchSpec | None = None, rng_seed: int = 0,
                     roe_cfg: RoeConfig | None = None) -> LossReport:
    """Confidence-weighted patchwise L1 after per-patch scale/shift alignment.

    Anchors are sampled uniformly (seeded) from the foreground mask; each
    anchor's patch is the set of mask pixels whose pseudo-depth 3D lift lies
    within spec.radius of the anchor point.  Per-patch (s, t) come from the
    exact robust solver on detached values, making the loss invariant to any
    global positive affine transform of the predicted depth.  Patches smaller
    than min_patch_size (or with an unsolvable fit) are skipped and flagged.
    """
    spec = spec or PatchSpec()
    mask = np.asarray(mask, dtype=bool)
    pseudo = np.asarray(pseudo_depth, dtype=float)
    conf_v = np.asarray(pred_conf.value if isinstance(pred_conf, Tensor) else pred_conf,
                        dtype=float)
    if mask.shape != pseudo.shape:
        raise InvariantError(f"mask {mask.shape} vs pseudo-depth {pseudo.shape}")
    flat_idx = np.flatnonzero(mask)
    if flat_idx.size == 0:
        raise DegenerateInputError("empty mask")
    if np.any(pseudo.reshape(-1)[flat_idx] <= 0):
        raise DegenerateInputError("non-positive pseudo-depth inside the mask")

    cloud = unproject(K_intr, pseudo, valid=mask).points.reshape(-1, 3)[flat_idx]
    rng = np.random.default_rng(rng_seed)
    k = min(spec.anchor_count, flat_idx.size)
    anchors = rng.choice(flat_idx.size, size=k, replace=False)

    pred_t = as_tensor(pred_depth)
    pred_flat = ad.reshape(pred_t, (-1,))
    pseudo_flat = pseudo.reshape(-1)
    conf_flat = conf_v.reshape(-1)
    pred_vals = pred_t.value.reshape(-1)

    tree = cKDTree(cloud)
    patch_losses = []
    skipped = []
    for a in anchors:
        members = np.asarray(tree.query_ball_point(cloud[a], spec.radius), dtype=int)
        if members.size < spec.min_patch_size:
            skipped.append(f"anchor {int(a)}: patch size {members.size}")
            continue
        pix = flat_idx[members]
        try:
            fit = solve_scale_shift(pred_vals[pix], pseudo_flat[pix], conf_flat[pix], roe_cfg)
        except UnsolvableError as exc:
            skipped.append(f"anchor {int(a)}: {exc}")
            continue
        aligned = ad.add(ad.mul(ad.gather_rows(pred_flat, pix), fit.scale), fit.shift)
        resid = ad.absval(ad.sub(aligned, pseudo_flat[pix]))
        patch_losses.append(ad.vmean(ad.mul(resid, conf_flat[pix])))
    if not patch_losses:
        raise DegenerateInputError("all patches degenerate")
    value = ad.mul(ad.vsum(ad.concat([ad.reshape(p, (1,)) for p in patch_losses])),
                   1.0 / len(patch_losses))
    flags = [f"skipped_patch: {s}" for s in skipped]
    return _finish({"local": value}, {"local": 1.0}, flags=flags,
                   had_tensor_input=_isnode(pred_depth))


def stage1_loss(pred_pointmaps, orig_pointmaps, pred_conf, pseudo_depth, masks,
                intrinsics, weights: LossWeights | None = None,
                spec: PatchSpec | None = None, rng_seed: int = 0) -> LossReport:
    """Distillation + drift regularizer, averaged over frames.

    (1/N) sum_i [ lambda_h * L_local_i + lambda_preg * mean|P_i - P_i_orig| ],
    where the regularizer averages absolute per-coordinate deviation over
    pixels that are finite in both pointmaps.  Predicted depth for the local
    term is the pointmap z-channel.
    """
    weights = weights or LossWeights()
    pred_v = pred_pointmaps.value if isinstance(pred_pointmaps, Tensor) else pred_pointmaps
    pred_v = np.asarray(pred_v, dtype=float)
    orig = np.asarray(orig_pointmaps, dtype=float)
    if pred_v.shape != orig.shape:
        raise InvariantError(f"pointmap shapes differ: {pred_v.shape} vs {orig.shape}")
    N = pred_v.shape[0]
    ks = intrinsics if isinstance(intrinsics, (list, tuple)) else [intrinsics] * N

    pred_t = as_tensor(pred_pointmaps)
    local_terms = []
    reg_terms = []
    per_frame = []
    flags = []
    for i in range(N):
        rep = local_human_loss(ad.take(pred_t, (i, Ellipsis, 2)), pred_conf[i],
                               pseudo_depth[i], masks[i], ks[i], spec,
                               rng_seed=rng_seed + i)
        local_terms.append(rep.node if rep.node is not None else ad.as_tensor(rep.total))
        flags.extend(f"frame {i}: {f}" for f in rep.flags)
        valid = np.isfinite(pred_v[i]).all(axis=-1) & np.isfinite(orig[i]).all(axis=-1)
        if not valid.any():
            raise DegenerateInputError(f"frame {i}: no valid pixels for the regularizer")
        sel = np.flatnonzero(valid.reshape(-1))
        diff = ad.sub(ad.reshape(ad.take(pred_t, i), (-1, 3)), orig[i].reshape(-1, 3))
        reg = ad.l1_mean(ad.gather_rows(diff, sel))
        reg_terms.append(reg)
        per_frame.append({"local": float(local_terms[-1].value), "pointmap_reg": float(reg.value)})

    mean_local = ad.mul(ad.vsum(ad.concat([ad.reshape(t, (1,)) for t in local_terms])), 1.0 / N)
    mean_reg = ad.mul(ad.vsum(ad.concat([ad.reshape(t, (1,)) for t in reg_terms])), 1.0 / N)
    return _finish(
        {"local": mean_local, "pointmap_reg": mean_reg},
        {"local": weights.lambda_h, "pointmap_reg": weights.lambda_preg},
        per_frame=per_frame, flags=flags, had_tensor_input=_isnode(pred_pointmaps))


# -- coarse body supervision (stage 2) -----------------------------------------

def coarse_smpl_loss(pred_out, pred_params, gt_out, gt_params, s_opt,
                     K_intr: Intrinsics, weights: LossWeights | None = None) -> LossReport:
    """Standard body supervision: vertices, 3D/2D joints, parameters, placement.

    L1 terms (vertices, joints) are means over elements; pose/shape/translation
    are squared L2 norms.  The translation term compares s_opt * t_pred against
    the metric ground truth.  2D joints are projected with the predicted
    intrinsics; joints behind the camera are skipped and flagged.
    """
    weights = weights or LossWeights()
    flags = []

    terms = {
        "v": ad.l1_mean(ad.sub(pred_out.vertices, as_tensor(gt_out.vertices).value)),
        "j3d": ad.l1_mean(ad.sub(pred_out.joints3d, as_tensor(gt_out.joints3d).value)),
    }

    pred_j = pred_out.joints3d
    gt_j = np.asarray(gt_out.joints3d.value if isinstance(gt_out.joints3d, Tensor)
                      else gt_out.joints3d, dtype=float)
    pred_z = pred_j.value[:, 2] if isinstance(pred_j, Tensor) else pred_j[:, 2]
    in_front = (pred_z > 0) & (gt_j[:, 2] > 0)
    if not in_front.all():
        flags.append(f"j2d skipped {int(np.count_nonzero(~in_front))} behind-camera joints")
    if in_front.any():
        sel = np.flatnonzero(in_front)
        pj = ad.gather_rows(pred_j, sel)
        z = ad.take(pj, (slice(None), slice(2, 3)))
        u = ad.add(ad.mul(ad.div(ad.take(pj, (slice(None), slice(0, 1))), z), K_intr.fx), K_intr.cx)
        v = ad.add(ad.mul(ad.div(ad.take(pj, (slice(None), slice(1, 2))), z), K_intr.fy), K_intr.cy)
        pred_2d = ad.concat([u, v], axis=1)
        gz = gt_j[sel, 2]
        gt_2d = np.stack([K_intr.fx * gt_j[sel, 0] / gz + K_intr.cx,
                          K_intr.fy * gt_j[sel, 1] / gz + K_intr.cy], axis=1)
        terms["j2d"] = ad.l1_mean(ad.sub(pred_2d, gt_2d))
    else:
        flags.append("j2d term skipped entirely (no joints in front of the camera)")
        terms["j2d"] = ad.as_tensor(0.0)

    terms["pose"] = ad.sq_l2(ad.sub(as_tensor(pred_params.pose),
                                    np.asarray(gt_params.pose, dtype=float)))
    terms["shape"] = ad.sq_l2(ad.sub(as_tensor(pred_params.shape),
                                     np.asarray(gt_params.shape, dtype=float)))
    gt_t = gt_params.translation
    gt_t = gt_t.value if isinstance(gt_t, Tensor) else np.asarray(gt_t, dtype=float)
    terms["trans"] = ad.sq_l2(ad.sub(ad.mul(as_tensor(pred_params.translation), s_opt), gt_t))

    w = {
        "v": weights.lambda_v, "j3d": weights.lambda_j3d, "j2d": weights.lambda_j2d,
        "pose": weights.lambda_pose, "shape": weights.lambda_shape,
        "trans": weights.lambda_trans,
    }
    tensorish = _isnode(pred_out.vertices, pred_params.translation, s_opt)
    return _finish(terms, w, flags=flags, had_tensor_input=tensorish)


def stage2_loss(frame_losses: list[LossReport], s, s_opt: float,
                weights: LossWeights | None = None) -> LossReport:
    """(lambda_smpl/N) sum_i L_smpl_i + lambda_scale * |s - s_opt|."""
    weights = weights or LossWeights()
    if not frame_losses:
        raise DegenerateInputError("no frames")
    nodes = [r.node if r.node is not None else ad.as_tensor(r.total) for r in frame_losses]
    mean_smpl = ad.mul(ad.vsum(ad.concat([ad.reshape(n, (1,)) for n in nodes])),
                       1.0 / len(nodes))
    scale_term = ad.vsum(ad.absval(ad.sub(as_tensor(s), float(s_opt))))
    per_frame = [{"smpl": r.total, **{k: v for k, v in r.terms.items()}} for r in frame_losses]
    flags = [f for r in frame_losses for f in r.flags]
    tensorish = _isnode(s) or any(r.node is not None for r in frame_losses)
    return _finish({"smpl": mean_smpl, "scale": scale_term},
                   {"smpl": weights.lambda_smpl, "scale": weights.lambda_scale},
                   per_frame=per_frame, flags=flags, had_tensor_input=tensorish)


# -- geometric alignment (stage 3) ----------------------------------------------

def build_target_cloud(points, s, mask):
    """Scaled human point cloud (s * P)[M], in row-major pixel order."""
    pts = points.points if hasattr(points, "points") else points
    pts_v = pts.value if isinstance(pts, Tensor) else np.asarray(pts, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != pts_v.shape[:2]:
        raise InvariantError(f"mask {mask.shape} vs pointmap {pts_v.shape[:2]}")
    if not mask.any():
        raise DegenerateInputError("empty mask")
    sel = np.flatnonzero(mask.reshape(-1))
    if _isnode(pts, s):
        flat = ad.reshape(as_tensor(pts), (-1, 3))
        return ad.mul(ad.gather_rows(flat, sel), s)
    return pts_v.reshape(-1, 3)[sel] * float(s)


def chamfer_one_way(src, tgt, method: str = "kdtree"):
    """Sum over src of squared distance to its nearest tgt point.

    method 'kdtree' uses a spatial index for the nearest-neighbor search;
    'brute' evaluates all n*m pairs.  Both must agree to 1e-9 (the brute
    route is the oracle).  Differentiation treats the selected index as
    locally constant; gradients flow into both clouds' coordinates.
    """
    src_v = src.value if isinstance(src, Tensor) else np.asarray(src, dtype=float)
    tgt_v = tgt.value if isinstance(tgt, Tensor) else np.asarray(tgt, dtype=float)
    if src_v.size == 0 or tgt_v.size == 0:
        raise DegenerateInputError("empty point set")
    if method == "kdtree":
        _, idx = cKDTree(tgt_v).query(src_v, k=1)
    elif method == "brute":
        d2 = ((src_v[:, None, :] - tgt_v[None, :, :]) ** 2).sum(axis=2)
        idx = np.argmin(d2, axis=1)
    else:
        raise ValueError(f"unknown method {method!r}")
    if _isnode(src, tgt):
        diff = ad.sub(as_tensor(src), ad.gather_rows(as_tensor(tgt), idx))
        return ad.sq_l2(diff)
    diff = src_v - tgt_v[idx]
    return float(np.sum(diff * diff))


def depth_order_reg(src, tgt):
    """ReLU(mean_z(tgt) - mean_z(src)): the visible surface must stay in front."""
    src_v = src.value if isinstance(src, Tensor) else np.asarray(src, dtype=float)
    tgt_v = tgt.value if isinstance(tgt, Tensor) else np.asarray(tgt, dtype=float)
    if src_v.size == 0 or tgt_v.size == 0:
        raise DegenerateInputError("empty point set")
    if _isnode(src, tgt):
        gap = ad.sub(ad.vmean(ad.take(as_tensor(tgt), (slice(None), 2))),
                     ad.vmean(ad.take(as_tensor(src), (slice(None), 2))))
        return ad.vsum(ad.relu(gap))
    return float(max(tgt_v[:, 2].mean() - src_v[:, 2].mean(), 0.0))


def stage3_loss(frames: list[dict], weights: LossWeights | None = None,
                chamfer_method: str = "kdtree") -> LossReport:
    """(1/N) sum_i [ la*L_align + ld*L_dreg + lj*L_j2d ] over per-frame clouds.

    Each frame dict carries:
        src       (n,3) visible body vertices (Tensor for training)
        tgt       (m,3) scaled masked scene points (Tensor for training)
        j2d_pred  (J,2) projected joints, j2d_label (J,2) pixel labels
    Frames whose visibility selected no vertices are skipped and flagged.
    """
    weights = weights or LossWeights()
    if not frames:
        raise DegenerateInputError("no frames")
    align_terms, dreg_terms, j2d_terms = [], [], []
    per_frame = []
    flags = []
    tensorish = False
    for i, fr in enumerate(frames):
        src, tgt = fr["src"], fr["tgt"]
        n_src = (src.value if isinstance(src, Tensor) else np.asarray(src)).shape[0]
        if n_src == 0:
            flags.append(f"frame {i}: empty visibility mask, skipped")
            continue
        tensorish = tensorish or _isnode(src, tgt, fr.get("j2d_pred"))
        align = chamfer_one_way(src, tgt, method=chamfer_method)
        dreg = depth_order_reg(src, tgt)
        j2d = ad.l1_mean(ad.sub(as_tensor(fr["j2d_pred"]),
                                np.asarray(fr["j2d_label"].value
                                           if isinstance(fr["j2d_label"], Tensor)
                                           else fr["j2d_label"], dtype=float)))
        align_terms.append(as_tensor(align))
        dreg_terms.append(as_tensor(dreg))
        j2d_terms.append(j2d)
        per_frame.append({"align": float(as_tensor(align).value),
                          "depth_order": float(as_tensor(dreg).value),
                          "j2d": float(j2d.value)})
    if not align_terms:
        raise DegenerateInputError("every frame had an empty visibility mask")
    n = len(align_terms)

    def _mean(ts):
        return ad.mul(ad.vsum(ad.concat([ad.reshape(t, (1,)) for t in ts])), 1.0 / n)

    return _finish(
        {"align": _mean(align_terms), "depth_order": _mean(dreg_terms), "j2d": _mean(j2d_terms)},
        {"align": weights.lambda_align, "depth_order": weights.lambda_depth,
         "j2d": weights.lambda_j2d},
        per_frame=per_frame, flags=flags, had_tensor_input=tensorish)

"""Exact robust scale / scale-shift solvers.

Both solvers minimize a weighted (optionally truncated) L1 objective by
candidate enumeration and exact objective evaluation, so they are globally
optimal and deterministic.  For plain L1 the optimum is at a zero-residual
candidate (a ratio for scale-only, an interpolating pair for scale-shift);
for truncated L1 the objective is piecewise linear with kinks only at
zero-residual and truncation-crossing points, so those are enumerated too.
Patches have tens of points, which keeps the O(n^2)..O(n^3) enumeration
cheap and removes iterative-solver nondeterminism.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvariantError, UnsolvableError

# Truncation default when cfg.truncation is None: 0.2 x median |target|.
AUTO_TRUNCATION_RATIO = 0.2


@dataclass
class RoeConfig:
    mode: str = "scale_shift"  # scale_only | scale_shift
    objective: str = "l1"  # l1 | truncated_l1
    truncation: float | None = None  # None -> AUTO_TRUNCATION_RATIO * median|target|
    min_samples: int = 2

    def __post_init__(self):
        if self.mode not in ("scale_only", "scale_shift"):
            raise InvariantError(f"unknown mode {self.mode!r}")
        if self.objective not in ("l1", "truncated_l1"):
            raise InvariantError(f"unknown objective {self.objective!r}")
        if self.objective == "truncated_l1" and self.truncation is not None and self.truncation <= 0:
            raise InvariantError("truncation must be positive")
        if self.min_samples < 2:
            raise InvariantError("min_samples must be >= 2")


@dataclass
class AlignmentResult:
    scale: float
    shift: float
    objective: float
    inlier_count: int


def _prepare(pred, target, weights, cfg: RoeConfig):
    p = np.asarray(pred, dtype=float).ravel()
    y = np.asarray(target, dtype=float).ravel()
    if weights is None:
        w = np.ones_like(p)
    else:
        w = np.asarray(weights, dtype=float).ravel()
    if not (p.size == y.size == w.size):
        raise InvariantError(f"length mismatch: pred {p.size}, target {y.size}, weights {w.size}")
    if p.size < cfg.min_samples:
        raise UnsolvableError(f"need at least {cfg.min_samples} samples, got {p.size}")
    if np.any(w < 0):
        raise InvariantError("weights must be non-negative")
    trunc = None
    if cfg.objective == "truncated_l1":
        trunc = cfg.truncation
        if trunc is None:
            trunc = AUTO_TRUNCATION_RATIO * float(np.median(np.abs(y)))
        if trunc <= 0:
            raise UnsolvableError("auto truncation collapsed to zero (all targets zero)")
    return p, y, w, trunc


def _objective(resid: np.ndarray, w: np.ndarray, trunc: float | None) -> np.ndarray:
    rho = np.abs(resid)
    if trunc is not None:
        rho = np.minimum(rho, trunc)
    return rho @ w if rho.ndim == 1 else rho @ w  # (n,) or (c,n) against (n,)


def _count_inliers(resid: np.ndarray, w: np.ndarray, trunc: float | None) -> int:
    live = w > 0
    if trunc is None:
        return int(np.count_nonzero(live))
    return int(np.count_nonzero(live & (np.abs(resid) < trunc)))


def solve_scale(pred, target, weights=None, cfg: RoeConfig | None = None) -> AlignmentResult:
    """Best positive scale s minimizing sum_j w_j rho(s*pred_j - target_j).

    Exact: for L1 the minimizer is one of the ratios target_j/pred_j over
    samples with pred_j > 0 (the weighted-median breakpoints); for truncated
    L1 the truncation-crossing kinks (target_j +- c)/pred_j are enumerated as
    well.  Candidates are restricted to s > 0; negative-scale fits are
    rejected as physically meaningless for depth.
    """
    cfg = cfg or RoeConfig(mode="scale_only")
    p, y, w, trunc = _prepare(pred, target, weights, cfg)
    usable = (p > 0) & (w > 0)
    if not np.any(usable):
        raise UnsolvableError("no sample with positive pred and positive weight")
    cands = y[usable] / p[usable]
    if trunc is not None:
        cands = np.concatenate([
            cands,
            (y[usable] + trunc) / p[usable],
            (y[usable] - trunc) / p[usable],
        ])
    cands = cands[cands > 0]
    if cands.size == 0:
        raise UnsolvableError("no positive-scale candidate")
    resid = cands[:, None] * p[None, :] - y[None, :]  # (c, n)
    objs = _objective(resid, w, trunc)
    order = np.lexsort((cands, objs))
    best = order[0]
    s = float(cands[best])
    r = s * p - y
    return AlignmentResult(s, 0.0, float(objs[best]), _count_inliers(r, w, trunc))


def solve_scale_shift(pred, target, weights=None, cfg: RoeConfig | None = None) -> AlignmentResult:
    """Best (s, t), s > 0, minimizing sum_j w_j rho(s*pred_j + t - target_j).

    Every optimal L1 line interpolates two samples, so all sample pairs with
    distinct pred values are enumerated; for truncated L1 the enumeration
    also covers pairs of kink lines offset by +-truncation.  Ties break by
    smaller |t|, then smaller s, for cross-platform reproducibility.
    """
    cfg = cfg or RoeConfig(mode="scale_shift")
    p, y, w, trunc = _prepare(pred, target, weights, cfg)
    if np.all(p == p[0]):
        raise UnsolvableError("constant pred: scale is unidentifiable")
    i_idx, j_idx = np.triu_indices(p.size, k=1)
    keep = p[i_idx] != p[j_idx]
    i_idx, j_idx = i_idx[keep], j_idx[keep]
    offsets = (0.0,) if trunc is None else (0.0, trunc, -trunc)
    s_list, t_list = [], []
    for di in offsets:
        for dj in offsets:
            yi = y[i_idx] + di
            yj = y[j_idx] + dj
            s = (yi - yj) / (p[i_idx] - p[j_idx])
            t = yi - s * p[i_idx]
            s_list.append(s)
            t_list.append(t)
    s_cand = np.concatenate(s_list)
    t_cand = np.concatenate(t_list)
    pos = s_cand > 0
    s_cand, t_cand = s_cand[pos], t_cand[pos]
    if s_cand.size == 0:
        raise UnsolvableError("no positive-scale candidate")
    resid = s_cand[:, None] * p[None, :] + t_cand[:, None] - y[None, :]
    objs = _objective(resid, w, trunc)
    order = np.lexsort((t_cand, s_cand, np.abs(t_cand), objs))
    best = order[0]
    s, t = float(s_cand[best]), float(t_cand[best])
    r = s * p + t - y
    return AlignmentResult(s, t, float(objs[best]), _count_inliers(r, w, trunc))


def solve(pred, target, weights=None, cfg: RoeConfig | None = None) -> AlignmentResult:
    cfg = cfg or RoeConfig()
    if cfg.mode == "scale_only":
        return solve_scale(pred, target, weights, cfg)
    return solve_scale_shift(pred, target, weights, cfg)

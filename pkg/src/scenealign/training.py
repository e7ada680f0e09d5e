"""Synthetic oracle world and desk-scale coarse/fine training loops.

The world stands in for the frozen backbones: ground-truth scale, body
parameters, and scene geometry are drawn from a seeded RNG; geo/body tokens
are fixed random linear encodings of that ground truth plus noise.  What the
loops demonstrate is that the fusion head can extract (scale, translations)
through the stage-2 and stage-3 objectives, exercising every gradient path.

Placement convention: the head predicts translations in the backbone's
unscaled frame; the metric placement is scale * translation.  The coarse
stage metricizes with the oracle scale (decoupling the two predictions), the
fine stage with the predicted scale, which makes the geometric losses
self-consistent.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .alignnet import AlignNetConfig, TokenSequence, alignnet_forward, init_weights
from .autodiff import backward, clip_grad_norm, zero_grad
from .body import (
    BodyOutput,
    BodyParams,
    build_mini_template,
    forward_body,
    rasterize_zbuffer,
    visible_vertices,
)
from .errors import DegenerateInputError, InvariantError
from .geometry import Intrinsics, project, unproject
from .losses import (
    LossWeights,
    build_target_cloud,
    coarse_smpl_loss,
    stage2_loss,
    stage3_loss,
)
from .roe import RoeConfig, solve_scale

COARSE_STEPS = 500
COARSE_LR = 1e-2
FINE_STEPS = 300
FINE_LR = 5e-4
ADAM_BETA1, ADAM_BETA2 = 0.9, 0.95
WEIGHT_DECAY = 0.05
GRAD_CLIP = 1.0
WARMUP_FRAC = 0.03  # linear warmup, then cosine decay to zero
VIS_REFRESH = 10  # fine stage: recompute stop-gradient visibility every k steps


def lr_schedule(base_lr: float, step: int, total: int) -> float:
    """Linear warmup into cosine decay, both in step units."""
    warmup = max(int(round(WARMUP_FRAC * total)), 1)
    if step <= warmup:
        return base_lr * step / warmup
    frac = (step - warmup) / max(total - warmup, 1)
    return base_lr * 0.5 * (1.0 + np.cos(np.pi * frac))

GEO_TOKENS_PER_FRAME = 4
GEO_DIM = 12
HMR_DIM = 8


@dataclass
class SyntheticWorld:
    seed: int
    template: object
    K: Intrinsics
    image_size: tuple[int, int]
    scale_true: float
    scale_opt: float
    gt_translations: np.ndarray  # (N,3) metric
    gt_poses: np.ndarray
    gt_beta: np.ndarray
    pred_poses: np.ndarray  # noisy per-frame body-branch outputs
    pred_betas: np.ndarray
    beta_shared: np.ndarray
    base_pred: list  # BodyOutput per frame at zero translation (pred params)
    base_gt: list  # BodyOutput per frame at zero translation (gt params)
    pointmaps: np.ndarray  # (N,H,W,3) stored backbone-scale pointmaps
    confidence: np.ndarray
    masks: np.ndarray
    pseudo_depth: np.ndarray
    tokens: TokenSequence
    j2d_labels: np.ndarray  # (N,J,2)

    @property
    def frames(self) -> int:
        return self.gt_translations.shape[0]

    @property
    def body_scale(self) -> float:
        return self.template.body_scale


def build_world(seed: int, frames: int = 6, image_size: tuple[int, int] = (64, 96),
                token_noise: float = 0.01) -> SyntheticWorld:
    """Sample a seeded oracle world with known scale and body placements.

    The camera mimics the curated-footage setting: telephoto portrait framing
    with a prominent, sometimes off-center subject a few meters out.
    """
    rng = np.random.default_rng(seed)
    tmpl = build_mini_template()
    W, H = image_size
    K = Intrinsics(160.0, 160.0, (W - 1) / 2, (H - 1) / 2)
    s_true = float(rng.uniform(1.5, 3.0))

    gt_beta = rng.normal(0, 0.2, size=tmpl.num_shape_params)
    gt_poses = rng.normal(0, 0.12, size=(frames, tmpl.num_joints, 3))
    gt_poses[:, 0, 0] += np.pi  # flip the y-up template into image-down convention
    depth0 = rng.uniform(4.2, 5.4)
    half_w = (W - 1) / 2 / K.fx  # frustum half-extent per unit depth
    half_h = (H - 1) / 2 / K.fy
    center = np.array([
        rng.uniform(-1, 1) * max(half_w * depth0 - 0.85, 0.0),
        rng.uniform(-1, 1) * max(half_h * depth0 - 1.05, 0.0),
        depth0,
    ])
    walk = np.cumsum(rng.normal(0, 0.06, size=(frames, 3)), axis=0)
    gt_trans = center + walk
    gt_trans[:, 2] = np.clip(gt_trans[:, 2], 4.0, 5.6)
    lim_x = np.maximum(half_w * gt_trans[:, 2] - 0.85, 0.05)
    lim_y = np.maximum(half_h * gt_trans[:, 2] - 1.05, 0.05)
    gt_trans[:, 0] = np.clip(gt_trans[:, 0], -lim_x, lim_x)
    gt_trans[:, 1] = np.clip(gt_trans[:, 1], -lim_y, lim_y)

    pred_poses = gt_poses + rng.normal(0, 0.02, size=gt_poses.shape)
    pred_betas = gt_beta + rng.normal(0, 0.05, size=(frames, tmpl.num_shape_params))
    beta_shared = pred_betas.mean(axis=0)

    base_pred, base_gt = [], []
    pointmaps = np.zeros((frames, H, W, 3))
    confidence = np.zeros((frames, H, W))
    masks = np.zeros((frames, H, W), dtype=bool)
    pseudo = np.zeros((frames, H, W))
    j2d = np.zeros((frames, tmpl.num_joints, 2))
    metric_depths = np.zeros((frames, H, W))

    u = np.arange(W, dtype=float)[None, :]
    v = np.arange(H, dtype=float)[:, None]
    for i in range(frames):
        zero = np.zeros(3)
        base_pred.append(forward_body(tmpl, BodyParams(pred_poses[i], beta_shared, zero)))
        base_gt.append(forward_body(tmpl, BodyParams(gt_poses[i], gt_beta, zero)))
        gt_out = BodyOutput(base_gt[i].vertices + gt_trans[i], base_gt[i].joints3d + gt_trans[i])

        body_depth = rasterize_zbuffer(gt_out.vertices, tmpl.faces, K, image_size)
        bg_depth = 8.5 - 0.006 * (u - K.cx) + 0.004 * (v - K.cy)
        mask = np.isfinite(body_depth) & (body_depth < bg_depth)
        metric_depth = np.where(mask, body_depth, bg_depth)
        metric_depths[i] = metric_depth
        masks[i] = mask

        metric_points = unproject(K, metric_depth).points
        pointmaps[i] = metric_points / s_true + rng.normal(0, 0.002, size=metric_points.shape)
        confidence[i] = np.where(mask, rng.uniform(0.8, 1.2, size=(H, W)),
                                 rng.uniform(0.3, 1.0, size=(H, W)))
        a, b = rng.uniform(0.6, 1.4), rng.uniform(-0.2, 0.2)
        pseudo[i] = np.maximum(a * metric_depth + b + rng.normal(0, 0.01, size=(H, W)), 0.05)
        j2d[i] = project(K, gt_out.joints3d) + rng.normal(0, 0.3, size=(tmpl.num_joints, 2))

    # oracle scale via the robust solver on subsampled depth correspondences
    sub = rng.choice(frames * H * W, size=400, replace=False)
    s_opt = solve_scale(pointmaps[..., 2].reshape(-1)[sub],
                        metric_depths.reshape(-1)[sub],
                        cfg=RoeConfig(mode="scale_only", objective="l1")).scale

    # fixed random encodings of the ground-truth state, standing in for the
    # frozen backbones.  A shallow random tanh map (rather than a plain linear
    # one) keeps the information present but not linearly exposed; with linear
    # encodings the geometric stage is solvable even from random init, which
    # contradicts the documented coarse-before-fine requirement.
    def random_encoder(feat_dim, out_dim, hidden=16):
        W1 = rng.normal(0, 0.8, size=(feat_dim, hidden))
        b1 = rng.normal(0, 0.3, size=hidden)
        W2 = rng.normal(0, 0.8, size=(hidden, out_dim))
        b2 = rng.normal(0, 0.1, size=out_dim)
        return lambda f: np.tanh(f @ W1 + b1) @ W2 + b2

    hmr_feats = np.concatenate([
        gt_trans / s_true,
        gt_poses[:, 0, :],
        np.full((frames, 1), gt_beta[0]),
        np.ones((frames, 1)),
    ], axis=1)  # (N,8)
    enc_hmr = random_encoder(hmr_feats.shape[1], HMR_DIM)
    hmr_tokens = enc_hmr(hmr_feats) + rng.normal(0, token_noise, size=(frames, HMR_DIM))

    geo_feats = np.stack([
        np.full(frames, np.log(s_true)),
        [pointmaps[i][..., 2].mean() for i in range(frames)],
        [pointmaps[i][..., 2].std() for i in range(frames)],
        masks.reshape(frames, -1).mean(axis=1),
    ], axis=1)  # (N,4)
    geo_tokens = np.zeros((frames, GEO_TOKENS_PER_FRAME, GEO_DIM))
    for l in range(GEO_TOKENS_PER_FRAME):
        enc_geo = random_encoder(geo_feats.shape[1], GEO_DIM)
        geo_tokens[:, l, :] = enc_geo(geo_feats) + rng.normal(
            0, token_noise, size=(frames, GEO_DIM))

    return SyntheticWorld(
        seed=seed, template=tmpl, K=K, image_size=image_size,
        scale_true=s_true, scale_opt=float(s_opt),
        gt_translations=gt_trans, gt_poses=gt_poses, gt_beta=gt_beta,
        pred_poses=pred_poses, pred_betas=pred_betas, beta_shared=beta_shared,
        base_pred=base_pred, base_gt=base_gt,
        pointmaps=pointmaps, confidence=confidence, masks=masks, pseudo_depth=pseudo,
        tokens=TokenSequence(geo_tokens, hmr_tokens), j2d_labels=j2d,
    )


def _coarse_step_loss(world: SyntheticWorld, out, loss_weights: LossWeights):
    """Stage-2 objective: bodies metricized with the oracle scale."""
    frame_reports = []
    for i in range(world.frames):
        t_raw = ad.take(out.translations, i)
        metric_t = ad.mul(t_raw, world.scale_opt)
        pred_out = BodyOutput(world.base_pred[i].vertices + metric_t,
                              world.base_pred[i].joints3d + metric_t)
        pred_params = BodyParams(world.pred_poses[i], world.beta_shared, t_raw)
        gt_out = BodyOutput(world.base_gt[i].vertices + world.gt_translations[i],
                            world.base_gt[i].joints3d + world.gt_translations[i])
        gt_params = BodyParams(world.gt_poses[i], world.gt_beta, world.gt_translations[i])
        frame_reports.append(coarse_smpl_loss(pred_out, pred_params, gt_out, gt_params,
                                              world.scale_opt, world.K, loss_weights))
    return stage2_loss(frame_reports, out.scale, world.scale_opt, loss_weights)


def _fine_step_loss(world: SyntheticWorld, out, loss_weights: LossWeights,
                    vis_masks: list[np.ndarray]):
    """Stage-3 objective: geometry only, metricized with the predicted scale."""
    frames = []
    for i in range(world.frames):
        t_raw = ad.take(out.translations, i)
        metric_t = ad.mul(t_raw, out.scale)
        verts = world.base_pred[i].vertices + metric_t
        joints = world.base_pred[i].joints3d + metric_t
        idx = np.flatnonzero(vis_masks[i])
        src = ad.gather_rows(verts, idx) if idx.size else np.zeros((0, 3))
        tgt = build_target_cloud(world.pointmaps[i], out.scale, world.masks[i])
        front = np.flatnonzero(joints.value[:, 2] > 1e-6)
        if front.size:
            jf = ad.gather_rows(joints, front)
            jz = ad.take(jf, (slice(None), slice(2, 3)))
            ju = ad.add(ad.mul(ad.div(ad.take(jf, (slice(None), slice(0, 1))), jz),
                               world.K.fx), world.K.cx)
            jv = ad.add(ad.mul(ad.div(ad.take(jf, (slice(None), slice(1, 2))), jz),
                               world.K.fy), world.K.cy)
            j2d_pred = ad.concat([ju, jv], axis=1)
            j2d_label = world.j2d_labels[i][front]
        else:
            # every joint behind the camera: no usable reprojection signal
            j2d_pred = ad.as_tensor(np.zeros((1, 2)))
            j2d_label = np.zeros((1, 2))
        frames.append({
            "src": src, "tgt": tgt,
            "j2d_pred": j2d_pred,
            "j2d_label": j2d_label,
        })
    return stage3_loss(frames, loss_weights)


def _refresh_visibility(world: SyntheticWorld, out) -> list[np.ndarray]:
    s = out.scale_value()
    t = out.translations_value()
    masks = []
    for i in range(world.frames):
        verts = world.base_pred[i].vertices + s * t[i]
        if np.any(verts[:, 2] <= 0):
            masks.append(np.zeros(len(verts), dtype=bool))
            continue
        masks.append(visible_vertices(verts, world.template.faces, world.K,
                                      world.image_size))
    return masks


def train_synthetic(world_seed: int, cfg: AlignNetConfig | None = None,
                    stage: str = "coarse", steps: int | None = None,
                    lr: float | None = None, init_weights_dict: dict | None = None,
                    fine_only: bool = False, loss_weights: LossWeights | None = None,
                    vis_refresh: int = VIS_REFRESH, aux_worlds: int = 2,
                    coarse_steps: int | None = None, coarse_lr: float = COARSE_LR):
    """Train the fusion head on a small batch of worlds; returns (report, weights).

    Training follows the reference scheme: shared weights over a batch of
    sequences (the primary world named by world_seed plus aux_worlds extras
    with their own scales and placements), so the head must actually read
    the tokens rather than memorize one world through its output biases.
    Recovery metrics in the report are measured on the primary world.

    stage 'coarse' optimizes the supervised stage-2 objective; stage 'fine'
    optimizes the geometric stage-3 objective and, by default, runs the
    coarse stage first for initialization (the documented curriculum).
    fine_only=True skips that warm start; the report flags it.
    """
    if stage not in ("coarse", "fine"):
        raise InvariantError(f"unknown stage {stage!r}")
    worlds = [build_world(world_seed)]
    for k in range(aux_worlds):
        worlds.append(build_world((world_seed + 1) * 100_000 + k))
    cfg = cfg or AlignNetConfig.desk_scale(geo_dim=GEO_DIM, hmr_dim=HMR_DIM)
    loss_weights = loss_weights or LossWeights()
    steps = (COARSE_STEPS if stage == "coarse" else FINE_STEPS) if steps is None else steps
    lr = (COARSE_LR if stage == "coarse" else FINE_LR) if lr is None else lr

    warmup_report = None
    if init_weights_dict is not None:
        weights = init_weights_dict
    elif stage == "fine" and not fine_only:
        warmup_report, weights = train_synthetic(
            world_seed, cfg, stage="coarse", steps=coarse_steps, lr=coarse_lr,
            loss_weights=loss_weights, aux_worlds=aux_worlds)
    else:
        weights = init_weights(cfg, seed=world_seed + 1000)

    params = list(weights.values())
    t0 = time.perf_counter()
    history = []
    diverged = False
    collapsed = None
    vis_masks = [None] * len(worlds)

    def batch_loss():
        """Mean stage loss over the world batch; refreshes fine visibility."""
        total = None
        for wi, world in enumerate(worlds):
            out = alignnet_forward(cfg, weights, world.tokens)
            if stage == "coarse":
                rep = _coarse_step_loss(world, out, loss_weights)
            else:
                if vis_masks[wi] is None:
                    vis_masks[wi] = _refresh_visibility(world, out)
                rep = _fine_step_loss(world, out, loss_weights, vis_masks[wi])
            total = rep.node if total is None else ad.add(total, rep.node)
        return ad.mul(total, 1.0 / len(worlds))

    try:
        history.append(float(batch_loss().value))
        for step in range(1, steps + 1):
            if stage == "fine" and (step - 1) % vis_refresh == 0:
                vis_masks = [None] * len(worlds)
            node = batch_loss()
            if not np.isfinite(float(node.value)):
                diverged = True
                break
            zero_grad(params)
            backward(node)
            clip_grad_norm(params, GRAD_CLIP)
            ad.adamw_step(params, lr=lr_schedule(lr, step, steps), beta1=ADAM_BETA1,
                          beta2=ADAM_BETA2, weight_decay=WEIGHT_DECAY, step_count=step)
            history.append(float(node.value))
    except DegenerateInputError as exc:
        # e.g. every body left its camera frustum: the geometric objective is
        # undefined and training cannot proceed, the documented fine-only
        # failure mode
        collapsed = str(exc)
    world = worlds[0]

    out = alignnet_forward(cfg, weights, world.tokens)
    s_pred = out.scale_value()
    t_metric = s_pred * out.translations_value()
    trans_err = float(np.mean(np.linalg.norm(t_metric - world.gt_translations, axis=1)))
    report = {
        "world_seed": world_seed,
        "stage": stage,
        "steps": steps,
        "lr": lr,
        "n_worlds": len(worlds),
        "fine_only_from_random_init": bool(stage == "fine" and fine_only),
        "diverged": diverged,
        "collapsed": collapsed,
        "initial_loss": history[0] if history else None,
        "final_loss": history[-1] if history else None,
        "loss_history": history,
        "scale_true": world.scale_true,
        "scale_opt": world.scale_opt,
        "scale_pred": s_pred,
        "scale_error_rel": abs(s_pred - world.scale_true) / world.scale_true,
        "trans_error_mean": trans_err,
        "body_scale": world.body_scale,
        "elapsed_s": time.perf_counter() - t0,
    }
    if warmup_report is not None:
        report["coarse_warmup"] = {
            k: warmup_report[k]
            for k in ("steps", "lr", "initial_loss", "final_loss",
                      "scale_error_rel", "trans_error_mean")
        }
    return report, weights

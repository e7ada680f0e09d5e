"""Scale/translation fusion head: adapters, two cross-attention decoder
layers with rotary temporal embeddings, a softplus scale head, and a
translation head that scales raw (x, y) by the positive depth output.

Query = [scale token | adapted per-frame body tokens]; keys/values are the
adapted scene geometry tokens.  Rotary embeddings use position 0 for the
scale token and 1 + frame index for both frame queries and geometry keys, so
matching frames sit at relative offset zero.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor, as_tensor
from .errors import InvariantError
from .tensorio import TensorContainer, read_tensor, write_tensor

ROTARY_BASE = 10000.0


@dataclass
class AlignNetConfig:
    hidden_dim: int = 512  # reference setting; tests use the desk-scale 64
    layers: int = 2
    heads: int = 8
    geo_feature_dim: int = 64
    hmr_feature_dim: int = 32
    ffn_mult: int = 4
    use_rotary: bool = True

    def __post_init__(self):
        if self.hidden_dim % self.heads != 0:
            raise InvariantError("hidden_dim must be divisible by heads")
        if (self.hidden_dim // self.heads) % 2 != 0:
            raise InvariantError("head dimension must be even for rotary pairs")

    @classmethod
    def desk_scale(cls, geo_dim=12, hmr_dim=8) -> "AlignNetConfig":
        return cls(hidden_dim=64, heads=4, geo_feature_dim=geo_dim, hmr_feature_dim=hmr_dim)


@dataclass
class TokenSequence:
    """Per-frame backbone features feeding the fusion head."""

    geo_tokens: np.ndarray  # (N, L, D_geo) scene features, L tokens per frame
    hmr_tokens: np.ndarray  # (N, D_hmr) one body token per frame

    def __post_init__(self):
        self.geo_tokens = np.asarray(self.geo_tokens, dtype=float)
        self.hmr_tokens = np.asarray(self.hmr_tokens, dtype=float)
        if self.geo_tokens.ndim == 2:
            self.geo_tokens = self.geo_tokens[:, None, :]
        if self.geo_tokens.shape[0] != self.hmr_tokens.shape[0]:
            raise InvariantError("geo/hmr token frame counts differ")

    @property
    def frames(self) -> int:
        return self.hmr_tokens.shape[0]


@dataclass
class AlignOutput:
    scale: float | Tensor  # > 0
    translations: np.ndarray | Tensor  # (N,3), raw backbone-frame units

    def scale_value(self) -> float:
        return float(self.scale.value if isinstance(self.scale, Tensor) else self.scale)

    def translations_value(self) -> np.ndarray:
        t = self.translations
        return np.asarray(t.value if isinstance(t, Tensor) else t, dtype=float)


def rotary_embed(tokens, positions, base: float = ROTARY_BASE):
    """Rotate adjacent channel pairs by position * base^(-2k/D).

    Works on ndarrays or Tensors of shape (..., L, D) with D even; positions
    has length L.  Attention logits built from rotary-embedded queries and
    keys depend only on relative position.
    """
    is_node = isinstance(tokens, Tensor)
    shape = tokens.shape
    D = shape[-1]
    if D % 2 != 0:
        raise InvariantError("rotary embedding needs an even feature dimension")
    half = D // 2
    positions = np.asarray(positions, dtype=float)
    freqs = base ** (-2.0 * np.arange(half) / D)
    ang = positions[:, None] * freqs[None, :]  # (L, half)
    cos, sin = np.cos(ang), np.sin(ang)
    if not is_node:
        x = tokens.reshape(shape[:-1] + (half, 2))
        x1, x2 = x[..., 0], x[..., 1]
        out = np.stack([x1 * cos - x2 * sin, x1 * sin + x2 * cos], axis=-1)
        return out.reshape(shape)
    x = ad.reshape(tokens, shape[:-1] + (half, 2))
    x1 = ad.take(x, (Ellipsis, 0))
    x2 = ad.take(x, (Ellipsis, 1))
    y1 = ad.sub(ad.mul(x1, cos), ad.mul(x2, sin))
    y2 = ad.add(ad.mul(x1, sin), ad.mul(x2, cos))
    stacked = ad.concat([ad.reshape(y1, y1.shape + (1,)), ad.reshape(y2, y2.shape + (1,))],
                        axis=-1)
    return ad.reshape(stacked, shape)


def translation_head(raw):
    """(x, y, z) -> (x*softplus(z), y*softplus(z), softplus(z)); depth > 0."""
    if isinstance(raw, Tensor):
        z = ad.softplus(ad.take(raw, (Ellipsis, slice(2, 3))))
        xy = ad.mul(ad.take(raw, (Ellipsis, slice(0, 2))), z)
        return ad.concat([xy, z], axis=-1)
    raw = np.asarray(raw, dtype=float)
    z = np.logaddexp(0.0, raw[..., 2:3])
    return np.concatenate([raw[..., :2] * z, z], axis=-1)


def init_weights(cfg: AlignNetConfig, seed: int = 0) -> dict[str, Parameter]:
    """Gaussian init with std 1/sqrt(D), zero biases, unit layer-norm gains."""
    rng = np.random.default_rng(seed)
    D, G, Hm, F = cfg.hidden_dim, cfg.geo_feature_dim, cfg.hmr_feature_dim, cfg.ffn_mult
    std = 1.0 / np.sqrt(D)

    def mat(name, rows, cols):
        return Parameter(rng.normal(0.0, std, size=(rows, cols)), name)

    def vec(name, n, value=0.0):
        return Parameter(np.full(n, value, dtype=float), name)

    w: dict[str, Parameter] = {
        "geo_adapter.w": mat("geo_adapter.w", G, D),
        "geo_adapter.b": vec("geo_adapter.b", D),
        "hmr_adapter.w": mat("hmr_adapter.w", Hm, D),
        "hmr_adapter.b": vec("hmr_adapter.b", D),
        "scale_token": Parameter(rng.normal(0.0, std, size=(D,)), "scale_token"),
        "ln_mem.g": vec("ln_mem.g", D, 1.0),
        "ln_mem.b": vec("ln_mem.b", D),
        "ln_f.g": vec("ln_f.g", D, 1.0),
        "ln_f.b": vec("ln_f.b", D),
        "scale_head.w": mat("scale_head.w", D, 1),
        "scale_head.b": vec("scale_head.b", 1),
        "trans_head.w": mat("trans_head.w", D, 3),
        "trans_head.b": vec("trans_head.b", 3),
    }
    for layer in range(cfg.layers):
        p = f"layer{layer}."
        w[p + "ln1.g"] = vec(p + "ln1.g", D, 1.0)
        w[p + "ln1.b"] = vec(p + "ln1.b", D)
        for name in ("wq", "wk", "wv", "wo"):
            w[p + name] = mat(p + name, D, D)
            w[p + name + ".b"] = vec(p + name + ".b", D)
        w[p + "ln2.g"] = vec(p + "ln2.g", D, 1.0)
        w[p + "ln2.b"] = vec(p + "ln2.b", D)
        w[p + "ffn1.w"] = mat(p + "ffn1.w", D, F * D)
        w[p + "ffn1.b"] = vec(p + "ffn1.b", F * D)
        w[p + "ffn2.w"] = mat(p + "ffn2.w", F * D, D)
        w[p + "ffn2.b"] = vec(p + "ffn2.b", D)
    return w


def _split_heads(x, heads: int):
    L, D = x.shape
    dh = D // heads
    return ad.transpose(ad.reshape(x, (L, heads, dh)), (1, 0, 2))  # (H, L, dh)


def _merge_heads(x):
    H, L, dh = x.shape
    return ad.reshape(ad.transpose(x, (1, 0, 2)), (L, H * dh))


def alignnet_forward(cfg: AlignNetConfig, weights: dict, tokens: TokenSequence) -> AlignOutput:
    """Run the fusion head; returns positive scale and N raw translations."""
    N, L, G = tokens.geo_tokens.shape
    if G != cfg.geo_feature_dim:
        raise InvariantError(f"geo feature dim {G} != config {cfg.geo_feature_dim}")
    if tokens.hmr_tokens.shape[1] != cfg.hmr_feature_dim:
        raise InvariantError(
            f"hmr feature dim {tokens.hmr_tokens.shape[1]} != config {cfg.hmr_feature_dim}")
    if N < 1:
        raise InvariantError("need at least one frame")
    D, heads = cfg.hidden_dim, cfg.heads
    dh = D // heads

    geo_flat = tokens.geo_tokens.reshape(N * L, G)
    mem = ad.add(ad.matmul(as_tensor(geo_flat), weights["geo_adapter.w"]),
                 weights["geo_adapter.b"])
    mem = ad.layer_norm(mem, weights["ln_mem.g"], weights["ln_mem.b"])
    h = ad.add(ad.matmul(as_tensor(tokens.hmr_tokens), weights["hmr_adapter.w"]),
               weights["hmr_adapter.b"])
    x = ad.concat([ad.reshape(weights["scale_token"], (1, D)), h], axis=0)  # (N+1, D)

    q_pos = np.concatenate([[0.0], 1.0 + np.arange(N)])
    k_pos = np.repeat(1.0 + np.arange(N), L)
    inv_sqrt_dh = 1.0 / np.sqrt(dh)

    for layer in range(cfg.layers):
        p = f"layer{layer}."
        xq = ad.layer_norm(x, weights[p + "ln1.g"], weights[p + "ln1.b"])
        q = ad.add(ad.matmul(xq, weights[p + "wq"]), weights[p + "wq.b"])
        k = ad.add(ad.matmul(mem, weights[p + "wk"]), weights[p + "wk.b"])
        v = ad.add(ad.matmul(mem, weights[p + "wv"]), weights[p + "wv.b"])
        qh = _split_heads(q, heads)  # (H, N+1, dh)
        kh = _split_heads(k, heads)  # (H, N*L, dh)
        vh = _split_heads(v, heads)
        if cfg.use_rotary:
            qh = rotary_embed(qh, q_pos)
            kh = rotary_embed(kh, k_pos)
        logits = ad.mul(ad.matmul(qh, ad.transpose(kh, (0, 2, 1))), inv_sqrt_dh)
        attn = ad.softmax(logits, axis=-1)
        ctx = _merge_heads(ad.matmul(attn, vh))  # (N+1, D)
        x = ad.add(x, ad.add(ad.matmul(ctx, weights[p + "wo"]), weights[p + "wo.b"]))
        xf = ad.layer_norm(x, weights[p + "ln2.g"], weights[p + "ln2.b"])
        hmid = ad.relu(ad.add(ad.matmul(xf, weights[p + "ffn1.w"]), weights[p + "ffn1.b"]))
        x = ad.add(x, ad.add(ad.matmul(hmid, weights[p + "ffn2.w"]), weights[p + "ffn2.b"]))

    x = ad.layer_norm(x, weights["ln_f.g"], weights["ln_f.b"])
    scale_logit = ad.add(ad.matmul(ad.take(x, (slice(0, 1), slice(None))),
                                   weights["scale_head.w"]),
                         weights["scale_head.b"])
    s = ad.vsum(ad.softplus(scale_logit))
    raw = ad.add(ad.matmul(ad.take(x, (slice(1, None), slice(None))),
                           weights["trans_head.w"]),
                 weights["trans_head.b"])
    t = translation_head(raw)
    return AlignOutput(scale=s, translations=t)


# -- checkpoints ----------------------------------------------------------------

def save_checkpoint(cfg: AlignNetConfig, weights: dict, directory) -> None:
    directory = Path(directory)
    os.makedirs(directory, exist_ok=True)
    names = {}
    for i, (name, p) in enumerate(sorted(weights.items())):
        fname = f"w{i:03d}.tc"
        write_tensor(TensorContainer.from_array(name, p.value.astype(np.float32)),
                     directory / fname)
        names[name] = fname
    manifest = {
        "config": {
            "hidden_dim": cfg.hidden_dim, "layers": cfg.layers, "heads": cfg.heads,
            "geo_feature_dim": cfg.geo_feature_dim, "hmr_feature_dim": cfg.hmr_feature_dim,
            "ffn_mult": cfg.ffn_mult, "use_rotary": cfg.use_rotary,
        },
        "weights": names,
    }
    with open(directory / "manifest.json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def load_checkpoint(path) -> tuple[AlignNetConfig, dict[str, Parameter]]:
    path = Path(path)
    directory = path.parent if path.name == "manifest.json" else path
    with open(directory / "manifest.json", "r", encoding="utf-8") as f:
        manifest = json.load(f)
    cfg = AlignNetConfig(**manifest["config"])
    weights = {}
    for name, fname in manifest["weights"].items():
        weights[name] = Parameter(read_tensor(directory / fname).to_array().astype(float), name)
    return cfg, weights

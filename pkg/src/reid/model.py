"""Frame encoder -> temporal attention pooling -> BN-neck -> classifier.

Shapes: a batch holds ``B`` clips of ``N`` frames; frame features are
``(B, N, d)``, clip features ``(B, d)`` and logits ``(B, C)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericError
from .numerics import (
    BNState,
    RandomStream,
    batch_norm,
    batch_norm_backward,
    softmax,
    softmax_backward,
)

# trainable tensors, in canonical order
PARAM_NAMES = (
    "enc_w1", "enc_b1", "enc_w2", "enc_b2",
    "att_w", "att_b",
    "bn_gamma", "bn_beta",
    "cls_w",
)


@dataclass(frozen=True)
class ModelDims:
    d_raw: int = 64
    hidden: int = 64
    embed: int = 32
    classes: int = 2


@dataclass
class Model:
    dims: ModelDims
    params: dict[str, np.ndarray]
    running_mean: np.ndarray
    running_var: np.ndarray
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def bn_state(self) -> BNState:
        return BNState(self.params["bn_gamma"], self.params["bn_beta"],
                       self.running_mean, self.running_var, self.bn_momentum, self.bn_eps)

    def copy(self) -> "Model":
        return Model(self.dims, {k: v.copy() for k, v in self.params.items()},
                     self.running_mean.copy(), self.running_var.copy(),
                     self.bn_momentum, self.bn_eps)


def _xavier(rng: RandomStream, fan_out: int, fan_in: int) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(fan_out * fan_in, -a, a).reshape(fan_out, fan_in)


def init_model(dims: ModelDims, rng: RandomStream) -> Model:
    """Xavier-uniform weights, zero biases, identity BN."""
    if dims.classes < 2:
        raise ConfigError("classifier needs at least 2 classes")
    d_raw, h, d, C = dims.d_raw, dims.hidden, dims.embed, dims.classes
    params = {
        "enc_w1": _xavier(rng.split("enc_w1"), h, d_raw),
        "enc_b1": np.zeros(h),
        "enc_w2": _xavier(rng.split("enc_w2"), d, h),
        "enc_b2": np.zeros(d),
        "att_w": _xavier(rng.split("att_w"), 1, d).reshape(d),
        "att_b": np.zeros(()),
        "bn_gamma": np.ones(d),
        "bn_beta": np.zeros(d),
        "cls_w": _xavier(rng.split("cls_w"), C, d),
    }
    return Model(dims, params, np.zeros(d), np.ones(d))


def attention_pool(w, b, feats):
    """Score each frame, softmax over frames, return the weighted sum.

    ``feats`` is ``(..., N, d)``; returns ``(clip_feature (..., d),
    scores (..., N), logits (..., N))``.
    """
    feats = np.asarray(feats, dtype=np.float64)
    raw = feats @ w
    logits = raw + b
    # b shifts every logit of a clip equally, so it is left out of the softmax;
    # this keeps the scores bit-identical under changes of b
    scores = softmax(raw, axis=-1)
    pooled = np.einsum("...n,...nd->...d", scores, feats)
    return pooled, scores, logits


@dataclass
class ForwardCache:
    x: np.ndarray            # (B*N, d_raw) flattened frames
    hidden: np.ndarray       # (B*N, h) tanh activations
    frame_feats: np.ndarray  # (B, N, d)
    att_logits: np.ndarray   # (B, N)
    scores: np.ndarray       # (B, N)
    features: np.ndarray     # (B, d) pre-BN clip features
    features_bn: np.ndarray  # (B, d)
    logits: np.ndarray       # (B, C)
    bn_cache: object
    new_running_mean: np.ndarray
    new_running_var: np.ndarray
    mode: str


def encode_frames(model: Model, frames: np.ndarray):
    """frames ``(..., H, W)`` -> (features ``(..., d)``, x, hidden)."""
    frames = np.asarray(frames, dtype=np.float64)
    lead = frames.shape[:-2]
    d_raw = frames.shape[-2] * frames.shape[-1]
    if d_raw != model.dims.d_raw:
        raise ConfigError(f"frame grid has {d_raw} cells, encoder expects {model.dims.d_raw}")
    p = model.params
    x = frames.reshape(-1, d_raw)
    hidden = np.tanh(x @ p["enc_w1"].T + p["enc_b1"])
    feats = hidden @ p["enc_w2"].T + p["enc_b2"]
    return feats.reshape(*lead, -1), x, hidden


def forward(model: Model, frames: np.ndarray, mode: str = "train") -> ForwardCache:
    """Run the pipeline on a ``(B, N, H, W)`` clip tensor."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 4:
        raise ConfigError("forward expects a (B, N, H, W) clip tensor")
    if mode == "train" and frames.shape[0] < 2:
        raise NumericError("train-mode forward needs at least 2 clips (batch norm)")
    p = model.params
    frame_feats, x, hidden = encode_frames(model, frames)
    pooled, scores, att_logits = attention_pool(p["att_w"], p["att_b"], frame_feats)
    feats_bn, new_bn, bn_cache = batch_norm(pooled, model.bn_state(), mode)
    logits = feats_bn @ p["cls_w"].T
    return ForwardCache(
        x=x, hidden=hidden, frame_feats=frame_feats, att_logits=att_logits,
        scores=scores, features=pooled, features_bn=feats_bn, logits=logits,
        bn_cache=bn_cache, new_running_mean=new_bn.running_mean,
        new_running_var=new_bn.running_var, mode=mode,
    )


def backward(model: Model, cache: ForwardCache, grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Parameter gradients given upstream gradients per consumed tensor.

    ``grads`` may hold ``features`` (B, d), ``features_bn`` (B, d),
    ``logits`` (B, C) and ``scores`` (B, N); absent heads count as zero.
    """
    if cache is None or cache.bn_cache is None:
        raise NumericError("backward needs the cache of a matching forward pass")
    unknown = set(grads) - {"features", "features_bn", "logits", "scores"}
    if unknown:
        raise ValueError(f"no upstream tensor named {sorted(unknown)}")
    p = model.params
    B, N, d = cache.frame_feats.shape
    out: dict[str, np.ndarray] = {}

    d_logits = grads.get("logits")
    if d_logits is None:
        d_logits = np.zeros_like(cache.logits)
    out["cls_w"] = d_logits.T @ cache.features_bn
    d_bn = d_logits @ p["cls_w"]
    if "features_bn" in grads:
        d_bn = d_bn + grads["features_bn"]
    d_feat, out["bn_gamma"], out["bn_beta"] = batch_norm_backward(cache.bn_cache, d_bn)
    if "features" in grads:
        d_feat = d_feat + grads["features"]

    # pooled = sum_n scores[n] * frame_feats[n]
    d_frame = cache.scores[:, :, None] * d_feat[:, None, :]
    d_scores = np.einsum("bd,bnd->bn", d_feat, cache.frame_feats)
    if "scores" in grads:
        d_scores = d_scores + grads["scores"]
    d_att = softmax_backward(cache.scores, d_scores, axis=-1)
    out["att_w"] = np.einsum("bn,bnd->d", d_att, cache.frame_feats)
    out["att_b"] = np.asarray(d_att.sum())
    d_frame = d_frame + d_att[:, :, None] * p["att_w"]

    d_f = d_frame.reshape(B * N, d)
    out["enc_w2"] = d_f.T @ cache.hidden
    out["enc_b2"] = d_f.sum(axis=0)
    d_pre = (d_f @ p["enc_w2"]) * (1.0 - cache.hidden ** 2)
    out["enc_w1"] = d_pre.T @ cache.x
    out["enc_b1"] = d_pre.sum(axis=0)
    return {k: out[k] for k in PARAM_NAMES}

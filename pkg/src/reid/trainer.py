"""Training loop, warm-up schedule, gradient checking, checkpoints and random search."""
from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import losses as L
from .datamodel import TRAIN, ClipBatch, Dataset, EraseParams, pk_sample_batch
from .dictconv import to_dict
from .errors import (
    BadMagicError,
    ConfigError,
    NumericError,
    TruncatedFileError,
    VersionMismatchError,
)
from .evalkit import EvalConfig, evaluate
from .model import PARAM_NAMES, Model, ModelDims, backward, forward, init_model
from .numerics import RandomStream, numeric_gradient, relative_error

CHECKPOINT_MAGIC = b"RCKP"
CHECKPOINT_VERSION = 1


@dataclass
class Schedule:
    base_lr: float = 3.5e-4
    warmup_epochs: int = 10
    decay_epochs: tuple[int, ...] = (40, 70)
    decay_factor: float = 0.1

    def validate(self):
        if self.base_lr <= 0:
            raise ConfigError("schedule.base_lr must be > 0")
        if self.warmup_epochs < 0:
            raise ConfigError("schedule.warmup_epochs must be >= 0")
        d = list(self.decay_epochs)
        if any(b <= a for a, b in zip(d, d[1:])):
            raise ConfigError("schedule.decay_epochs must be strictly increasing")
        if any(e <= self.warmup_epochs for e in d):
            raise ConfigError("schedule.decay_epochs must all exceed warmup_epochs")


def lr_at_epoch(s: Schedule, epoch: int) -> float:
    """Linear warm-up to base_lr, then step decay (epochs are 1-based)."""
    if epoch < 1:
        raise ConfigError("epochs are 1-based")
    if epoch <= s.warmup_epochs:
        return s.base_lr * (epoch / s.warmup_epochs)
    passed = sum(1 for e in s.decay_epochs if epoch >= e)
    return s.base_lr * s.decay_factor ** passed


@dataclass
class OptimizerConfig:
    kind: str = "adam"  # or "momentum"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    momentum: float = 0.9


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros(cls, params: dict[str, np.ndarray]) -> "OptimizerState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()}, 0)

    def copy(self) -> "OptimizerState":
        return OptimizerState({k: v.copy() for k, v in self.m.items()},
                              {k: v.copy() for k, v in self.v.items()}, self.step)


def apply_update(params, grads, opt: OptimizerState, cfg: OptimizerConfig, lr: float):
    """One optimizer step; returns (new_params, new_state)."""
    step = opt.step + 1
    new_params, m_new, v_new = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        if cfg.kind == "adam":
            m = cfg.beta1 * opt.m[k] + (1 - cfg.beta1) * g
            v = cfg.beta2 * opt.v[k] + (1 - cfg.beta2) * g * g
            mhat = m / (1 - cfg.beta1 ** step)
            vhat = v / (1 - cfg.beta2 ** step)
            new_params[k] = p - lr * mhat / (np.sqrt(vhat) + cfg.eps)
        elif cfg.kind == "momentum":
            m = cfg.momentum * opt.m[k] + g
            v = opt.v[k]
            new_params[k] = p - lr * m
        else:
            raise ConfigError(f"unknown optimizer kind {cfg.kind!r}")
        m_new[k], v_new[k] = m, v
    return new_params, OptimizerState(m_new, v_new, step)


@dataclass
class TrainConfig:
    seed: int = 0
    preset: str = "baseline-bot"
    recipe: L.LossRecipe = field(default_factory=L.LossRecipe)
    P: int = 8
    K: int = 4
    N: int = 4
    epochs: int = 120
    steps_per_epoch: int = 2
    schedule: Schedule = field(default_factory=Schedule)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    erase: EraseParams = field(default_factory=EraseParams)
    hidden: int = 64
    embed: int = 32
    center_alpha: float = 0.5
    resume: bool = False

    @classmethod
    def from_preset(cls, preset: str, **kwargs) -> "TrainConfig":
        return cls(preset=preset, recipe=L.preset(preset), **kwargs)

    def validate(self):
        for name in ("P", "K", "N", "steps_per_epoch", "hidden", "embed"):
            if getattr(self, name) < 1:
                raise ConfigError(f"train.{name} must be >= 1")
        if self.epochs < 0:
            raise ConfigError("train.epochs must be >= 0")
        if self.P * self.K < 2:
            raise ConfigError("a batch needs at least 2 clips")
        self.recipe.validate()
        self.schedule.validate()
        self.erase.validate()


def config_digest(cfg: TrainConfig) -> str:
    blob = json.dumps(to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


@dataclass
class Checkpoint:
    model: Model
    centers: L.CenterState
    opt: OptimizerState
    epoch: int
    config: dict
    digest: str


# ---------------------------------------------------------------------------
# one step


def _terms(recipe: L.LossRecipe, model: Model, centers: L.CenterState, cache, batch: ClipBatch):
    w = recipe.weights()
    labels = batch.labels
    terms = {}
    if w["xent"] > 0:
        terms["xent"] = L.xent_label_smoothing(cache.logits, labels, recipe.epsilon)
    if w["tri"] > 0:
        terms["tri"] = L.batch_hard_triplet_cosine(cache.features, labels, recipe.margin)
    if w["center"] > 0:
        terms["center"] = L.center_loss(cache.features, labels, centers)
    if w["osm"] > 0:
        vectors = (centers.centers if recipe.class_vector_source == "cl_centers"
                   else model.params["cls_w"])
        terms["osm"] = L.osm_caa(cache.features, labels, vectors, recipe.osm)
    if w["att"] > 0:
        terms["att"] = L.attention_loss(cache.scores, batch.erase_labels)
    return terms


def loss_and_grads(model: Model, centers: L.CenterState, batch: ClipBatch, recipe: L.LossRecipe):
    """Forward in train mode, combine the enabled terms, backward.

    OSM class vectors receive gradient only when they are the classifier
    weights; centers are never optimized by gradient.
    """
    cache = forward(model, batch.frames, "train")
    out = L.combine(recipe, _terms(recipe, model, centers, cache, batch))
    upstream = {k: v for k, v in out.grads.items() if k in ("features", "logits", "scores")}
    grads = backward(model, cache, upstream)
    if "class_vectors" in out.grads and recipe.class_vector_source == "classifier_weights":
        grads["cls_w"] = grads["cls_w"] + out.grads["class_vectors"]
    return cache, out, grads


def erased_attention(scores, erase_labels):
    mask = np.asarray(erase_labels) > 0
    return float(scores[mask].mean()) if mask.any() else None


def train_step(model: Model, centers: L.CenterState, batch: ClipBatch, recipe: L.LossRecipe,
               opt: OptimizerState, lr: float, opt_cfg: OptimizerConfig | None = None):
    """Returns ``(model, centers, opt, metrics)``; inputs are not mutated."""
    opt_cfg = opt_cfg or OptimizerConfig()
    cache, out, grads = loss_and_grads(model, centers, batch, recipe)
    params, opt = apply_update(model.params, grads, opt, opt_cfg, lr)
    new_model = Model(model.dims, params, cache.new_running_mean, cache.new_running_var,
                      model.bn_momentum, model.bn_eps)
    new_centers = L.update_centers(centers, cache.features, batch.labels)
    metrics = {"total": out.total, **out.terms,
               "erased_attention": erased_attention(cache.scores, batch.erase_labels)}
    return new_model, new_centers, opt, metrics


# ---------------------------------------------------------------------------
# fit


def model_dims(cfg: TrainConfig, dataset: Dataset) -> ModelDims:
    H, W = dataset.grid
    return ModelDims(H * W, cfg.hidden, cfg.embed, len(dataset.identities(TRAIN)))


def fresh_state(cfg: TrainConfig, dims: ModelDims):
    root = RandomStream(cfg.seed)
    model = init_model(dims, root.split("init"))
    centers = L.CenterState(root.split("centers").normal((dims.classes, dims.embed)),
                            cfg.center_alpha)
    return model, centers, OptimizerState.zeros(model.params)


def check_compatible(cfg: TrainConfig, dataset: Dataset):
    cfg.validate()
    ids = dataset.identities(TRAIN)
    if len(ids) < 2:
        raise ConfigError("training needs at least 2 train identities")
    if len(ids) < cfg.P:
        raise ConfigError(f"train.P={cfg.P} exceeds the {len(ids)} train identities")
    shapes = {t.grid for t in dataset.tracklets}
    if len(shapes) != 1:
        raise ConfigError("all tracklets must share one frame grid")


def _from_init(cfg: TrainConfig, dims: ModelDims, init: Checkpoint):
    model, centers, opt = fresh_state(cfg, dims)
    if cfg.resume:
        if init.model.dims != dims:
            raise ConfigError(f"cannot resume: checkpoint dims {init.model.dims} != {dims}")
        return init.model.copy(), init.centers.copy(), init.opt.copy(), init.epoch
    # finetune: keep every tensor whose shape still fits, restart the clock
    params = dict(model.params)
    for k, v in init.model.params.items():
        if k in params and params[k].shape == v.shape:
            params[k] = v.copy()
    model = Model(dims, params, init.model.running_mean.copy(), init.model.running_var.copy(),
                  init.model.bn_momentum, init.model.bn_eps)
    if init.centers.centers.shape == centers.centers.shape:
        centers = L.CenterState(init.centers.centers.copy(), cfg.center_alpha)
    return model, centers, OptimizerState.zeros(model.params), 0


def fit(cfg: TrainConfig, dataset: Dataset, init: Checkpoint | None = None, on_epoch=None):
    """Train and return ``(checkpoint, log)``.

    With ``init`` and ``cfg.resume`` the run continues from ``init.epoch`` up to
    ``cfg.epochs`` with the stored optimizer state; otherwise ``init`` seeds
    the parameters for finetuning and training restarts at epoch 1.  Batches
    of epoch ``e`` come from ``RandomStream(seed).split("epoch-e")`` so a
    resumed run replays the unbroken one exactly.
    """
    check_compatible(cfg, dataset)
    dims = model_dims(cfg, dataset)
    if init is None:
        model, centers, opt = fresh_state(cfg, dims)
        start = 0
    else:
        model, centers, opt, start = _from_init(cfg, dims, init)
    label_map = dataset.train_label_map()
    root = RandomStream(cfg.seed)
    log = []
    for epoch in range(start + 1, cfg.epochs + 1):
        lr = lr_at_epoch(cfg.schedule, epoch)
        rng = root.split(f"epoch-{epoch}")
        sums: dict[str, float] = {}
        att = []
        for _ in range(cfg.steps_per_epoch):
            batch = pk_sample_batch(dataset, cfg.P, cfg.K, cfg.N, cfg.erase, rng, label_map)
            model, centers, opt, metrics = train_step(model, centers, batch, cfg.recipe, opt, lr,
                                                      cfg.optimizer)
            for k, v in metrics.items():
                if k == "erased_attention":
                    if v is not None:
                        att.append(v)
                else:
                    sums[k] = sums.get(k, 0.0) + v
        if not np.all(np.isfinite(centers.centers)):
            raise NumericError(f"centers diverged at epoch {epoch}")
        record = {
            "epoch": epoch,
            "lr": lr,
            "losses": {k: v / cfg.steps_per_epoch for k, v in sums.items()},
            "erased_attention": float(np.mean(att)) if att else None,
        }
        log.append(record)
        if on_epoch is not None:
            on_epoch(record, model)
    final_epoch = max(start, cfg.epochs) if init is not None and cfg.resume else cfg.epochs
    cp = Checkpoint(model, centers, opt, final_epoch, to_dict(cfg), config_digest(cfg))
    return cp, log


# ---------------------------------------------------------------------------
# gradient check


def grad_check(cfg: TrainConfig, dataset: Dataset, seed: int = 0, tol: float = 1e-4,
               step: float = 1e-5) -> dict:
    """Compare every parameter gradient of the total loss against central differences.

    Uses one PK batch drawn from ``seed``; BN runs in train mode and centers
    are held fixed.  The report maps each trainable tensor to its maximum
    elementwise relative error.
    """
    check_compatible(cfg, dataset)
    dims = model_dims(cfg, dataset)
    model, centers, _ = fresh_state(replace(cfg, seed=seed), dims)
    batch = pk_sample_batch(dataset, cfg.P, cfg.K, cfg.N, cfg.erase,
                            RandomStream(seed).split("gradcheck-batch"))
    _, out, grads = loss_and_grads(model, centers, batch, cfg.recipe)

    def total():
        cache = forward(model, batch.frames, "train")
        return L.combine(cfg.recipe, _terms(cfg.recipe, model, centers, cache, batch)).total

    errors = {}
    for name in PARAM_NAMES:
        numeric = numeric_gradient(total, model.params[name], step)
        errors[name] = float(relative_error(grads[name], numeric).max())
    return {
        "seed": seed,
        "tol": tol,
        "terms": out.terms,
        "max_rel_error": errors,
        "passed": all(e < tol for e in errors.values()),
    }


# ---------------------------------------------------------------------------
# checkpoints


def _tensors(cp: Checkpoint):
    out = [(f"param/{k}", cp.model.params[k]) for k in PARAM_NAMES]
    out += [("bn/running_mean", cp.model.running_mean), ("bn/running_var", cp.model.running_var),
            ("centers", cp.centers.centers)]
    out += [(f"opt_m/{k}", cp.opt.m[k]) for k in PARAM_NAMES]
    out += [(f"opt_v/{k}", cp.opt.v[k]) for k in PARAM_NAMES]
    return out


def checkpoint_bytes(cp: Checkpoint) -> bytes:
    meta = {
        "epoch": cp.epoch,
        "digest": cp.digest,
        "config": cp.config,
        "dims": to_dict(cp.model.dims),
        "bn_momentum": cp.model.bn_momentum,
        "bn_eps": cp.model.bn_eps,
        "center_alpha": cp.centers.alpha,
        "opt_step": cp.opt.step,
    }
    meta_raw = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    tensors = _tensors(cp)
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(meta_raw)), meta_raw,
              struct.pack("<I", len(tensors))]
    for name, arr in tensors:
        arr = np.asarray(arr, dtype=np.float64)
        raw_name = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw_name)) + raw_name)
        chunks.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.astype("<f8").tobytes())
    return b"".join(chunks)


def save_checkpoint(cp: Checkpoint, path):
    Path(path).write_bytes(checkpoint_bytes(cp))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedFileError(f"checkpoint truncated while reading {what}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_checkpoint(path) -> Checkpoint:
    r = _Reader(Path(path).read_bytes())
    if r.take(4, "magic") != CHECKPOINT_MAGIC:
        raise BadMagicError(f"{path}: not a checkpoint (bad magic)")
    (version,) = r.unpack("<I", "version")
    if version != CHECKPOINT_VERSION:
        raise VersionMismatchError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    (meta_len,) = r.unpack("<I", "metadata length")
    meta = json.loads(r.take(meta_len, "metadata").decode("utf-8"))
    (count,) = r.unpack("<I", "tensor count")
    tensors = {}
    for _ in range(count):
        (nlen,) = r.unpack("<I", "tensor name length")
        name = r.take(nlen, "tensor name").decode("utf-8")
        (ndim,) = r.unpack("<I", f"{name} rank")
        shape = r.unpack(f"<{ndim}Q", f"{name} shape")
        size = int(np.prod(shape)) if ndim else 1
        raw = r.take(8 * size, f"{name} data")
        tensors[name] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
    dims = ModelDims(**meta["dims"])
    model = Model(dims, {k: tensors[f"param/{k}"] for k in PARAM_NAMES},
                  tensors["bn/running_mean"], tensors["bn/running_var"],
                  meta["bn_momentum"], meta["bn_eps"])
    centers = L.CenterState(tensors["centers"], meta["center_alpha"])
    opt = OptimizerState({k: tensors[f"opt_m/{k}"] for k in PARAM_NAMES},
                         {k: tensors[f"opt_v/{k}"] for k in PARAM_NAMES}, meta["opt_step"])
    return Checkpoint(model, centers, opt, meta["epoch"], meta["config"], meta["digest"])


# ---------------------------------------------------------------------------
# random search

# name -> (low, high, log-uniform?)
DEFAULT_SPACE = {
    "sigma": (0.5, 3.0, False),
    "alpha_m": (0.8, 1.8, False),
    "l": (0.2, 0.8, False),
    "margin": (0.1, 0.5, False),
    "epsilon": (0.0, 0.2, False),
    "w_att": (0.1, 3.0, True),
    "base_lr": (1e-3, 1e-2, True),
}


def apply_hyperparameters(cfg: TrainConfig, values: dict) -> TrainConfig:
    recipe, osm, sched = cfg.recipe, cfg.recipe.osm, cfg.schedule
    for name, v in values.items():
        if name in ("sigma", "alpha_m", "l"):
            osm = replace(osm, **{name: v})
        elif name in ("margin", "epsilon", "w_xent", "w_tri", "w_center", "w_osm", "w_att"):
            recipe = replace(recipe, **{name: v})
        elif name == "base_lr":
            sched = replace(sched, base_lr=v)
        elif name == "center_alpha":
            cfg = replace(cfg, center_alpha=v)
        else:
            raise ConfigError(f"unknown hyperparameter {name!r}")
    return replace(cfg, recipe=replace(recipe, osm=osm), schedule=sched)


def sample_hyperparameters(space: dict, rng: RandomStream) -> dict:
    out = {}
    for name in sorted(space):
        low, high, log = space[name]
        u = rng.uniform()
        if log:
            out[name] = float(math.exp(math.log(low) + u * (math.log(high) - math.log(low))))
        else:
            out[name] = float(low + u * (high - low))
    return out


def random_search(space: dict, budget: int, base: TrainConfig, dataset: Dataset, seed: int,
                  eval_cfg: EvalConfig | None = None) -> list[dict]:
    """Seeded random search; trials ranked by plain mAP (ties by trial index)."""
    if not space:
        raise ConfigError("hyperparameter search space is empty")
    if budget < 1:
        raise ConfigError("search budget must be >= 1")
    eval_cfg = eval_cfg or EvalConfig(rerank=False)
    root = RandomStream(seed)
    trials = []
    for i in range(budget):
        values = sample_hyperparameters(space, root.split(f"trial-{i}"))
        cfg = apply_hyperparameters(base, values)
        cp, _ = fit(cfg, dataset)
        scores = evaluate(cp.model, dataset, eval_cfg)["plain"]
        trials.append({"trial": i, "params": values, "mAP": scores.mAP,
                       "cmc": scores.to_dict(eval_cfg.ranks)["cmc"], "config": to_dict(cfg)})
    trials.sort(key=lambda t: (-t["mAP"], t["trial"]))
    return trials

"""Loss terms with analytic gradients, center updates, and the weighted combiner.

Every term returns a :class:`LossTerm` holding the scalar value and the
gradient with respect to each tensor it consumed, keyed by the names used in
:func:`reid.model.backward` (``features``, ``logits``, ``scores``) plus
``class_vectors`` for the OSM class-vector matrix.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError
from .numerics import (
    l2_normalize,
    l2_normalize_backward,
    log_softmax,
    pairwise_distance,
    pairwise_distance_backward,
)

TERMS = ("xent", "tri", "center", "osm", "att")
CLASS_VECTOR_SOURCES = ("classifier_weights", "cl_centers")
GUARD = 1e-12


@dataclass
class LossTerm:
    value: float
    grads: dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class LossOutput:
    total: float
    terms: dict[str, float]
    grads: dict[str, np.ndarray]


@dataclass(frozen=True)
class OsmParams:
    sigma: float = 0.8
    alpha_m: float = 1.2
    l: float = 0.5

    def validate(self):
        if self.sigma <= 0 or self.alpha_m <= 0 or not 0 <= self.l <= 1:
            raise ConfigError("OSM needs sigma > 0, alpha_m > 0, 0 <= l <= 1")


@dataclass(frozen=True)
class LossRecipe:
    w_xent: float = 1.0
    w_tri: float = 1.0
    w_center: float = 5e-4
    w_osm: float = 0.0
    w_att: float = 0.0
    epsilon: float = 0.1
    margin: float = 0.3
    class_vector_source: str = "classifier_weights"
    osm: OsmParams = OsmParams()

    def weights(self) -> dict[str, float]:
        return {"xent": self.w_xent, "tri": self.w_tri, "center": self.w_center,
                "osm": self.w_osm, "att": self.w_att}

    def enabled(self) -> list[str]:
        return [t for t, w in self.weights().items() if w > 0]

    def validate(self):
        if any(w < 0 for w in self.weights().values()):
            raise ConfigError("loss weights must be >= 0")
        if not 0 <= self.epsilon < 1:
            raise ConfigError("label smoothing epsilon must lie in [0, 1)")
        if self.class_vector_source not in CLASS_VECTOR_SOURCES:
            raise ConfigError(f"class_vector_source must be one of {CLASS_VECTOR_SOURCES}")
        self.osm.validate()


PRESETS = {
    "baseline-bot": LossRecipe(w_xent=1.0, w_tri=1.0, w_center=5e-4, w_osm=0.0, w_att=0.0),
    "bot-osm": LossRecipe(w_xent=1.0, w_tri=0.0, w_center=5e-4, w_osm=1.0, w_att=0.0,
                          class_vector_source="classifier_weights"),
    "bot-osm-cl": LossRecipe(w_xent=1.0, w_tri=0.0, w_center=5e-4, w_osm=1.0, w_att=0.0,
                             class_vector_source="cl_centers"),
    "attn-cl": LossRecipe(w_xent=1.0, w_tri=0.0, w_center=5e-4, w_osm=1.0, w_att=1.0,
                          class_vector_source="cl_centers"),
}


def preset(name: str, **overrides) -> LossRecipe:
    try:
        return replace(PRESETS[name], **overrides)
    except KeyError:
        raise ConfigError(f"unknown recipe preset {name!r}; choose from {sorted(PRESETS)}") from None


# ---------------------------------------------------------------------------
# classification


def smoothed_targets(labels, C: int, eps: float) -> np.ndarray:
    labels = np.asarray(labels)
    q = np.full((labels.shape[0], C), eps / C)
    q[np.arange(labels.shape[0]), labels] = 1.0 - eps + eps / C
    return q


def xent_label_smoothing(logits, labels, eps: float) -> LossTerm:
    if not 0 <= eps < 1:
        raise ConfigError("label smoothing epsilon must lie in [0, 1)")
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    B, C = logits.shape
    if labels.min() < 0 or labels.max() >= C:
        raise ConfigError("labels out of range for the classifier")
    q = smoothed_targets(labels, C, eps)
    logp = log_softmax(logits)
    value = float(-np.sum(q * logp) / B)
    grad = (np.exp(logp) - q) / B
    return LossTerm(value, {"logits": grad})


# ---------------------------------------------------------------------------
# metric losses


def batch_hard_triplet_cosine(F, labels, margin: float) -> LossTerm:
    """Batch-hard triplet loss on cosine distance."""
    F = np.asarray(F, dtype=np.float64)
    labels = np.asarray(labels)
    B = F.shape[0]
    if np.unique(labels).size < 2:
        raise ConfigError("triplet loss needs at least two classes in the batch")
    D = pairwise_distance(F, "cosine")
    same = labels[:, None] == labels[None, :]
    pos_mask = same & ~np.eye(B, dtype=bool)
    if not np.all(pos_mask.any(axis=1)):
        raise ConfigError("triplet loss needs >= 2 samples per class in the batch")
    rows = np.arange(B)
    pos = np.argmax(np.where(pos_mask, D, -np.inf), axis=1)
    neg = np.argmin(np.where(same, np.inf, D), axis=1)
    hinge = D[rows, pos] - D[rows, neg] + margin
    active = hinge > 0
    value = float(np.sum(np.where(active, hinge, 0.0)) / B)
    G = np.zeros_like(D)
    np.add.at(G, (rows[active], pos[active]), 1.0 / B)
    np.add.at(G, (rows[active], neg[active]), -1.0 / B)
    grad = pairwise_distance_backward(F, G, "cosine")
    return LossTerm(value, {"features": grad})


@dataclass
class CenterState:
    centers: np.ndarray  # (C, d)
    alpha: float = 0.5

    def copy(self) -> "CenterState":
        return CenterState(self.centers.copy(), self.alpha)


def center_loss(F, labels, cs: CenterState) -> LossTerm:
    F = np.asarray(F, dtype=np.float64)
    labels = np.asarray(labels)
    B = F.shape[0]
    diff = F - cs.centers[labels]
    value = float(0.5 * np.sum(diff * diff) / B)
    return LossTerm(value, {"features": diff / B})


def update_centers(cs: CenterState, F, labels) -> CenterState:
    """c_y <- c_y - alpha * sum_{i: y_i = y}(c_y - F_i) / (1 + n_y)."""
    F = np.asarray(F, dtype=np.float64)
    labels = np.asarray(labels)
    centers = cs.centers.copy()
    for y in np.unique(labels):
        members = labels == y
        delta = np.sum(cs.centers[y] - F[members], axis=0) / (1 + members.sum())
        centers[y] = cs.centers[y] - cs.alpha * delta
    return CenterState(centers, cs.alpha)


def osm_caa(F, labels, class_vectors, p: OsmParams) -> LossTerm:
    """Online soft mining with class-aware attention.

    On unit-normalized features: positive pairs are weighted by
    exp(-d^2/sigma^2), negatives by the hinge max(alpha_m - d, 0), and every
    pair by a_i * a_j where a_i is the clamped cosine between sample i and its
    class vector.
    """
    p.validate()
    F = np.asarray(F, dtype=np.float64)
    V = np.asarray(class_vectors, dtype=np.float64)
    labels = np.asarray(labels)
    B = F.shape[0]
    if B < 2:
        raise ConfigError("OSM loss needs at least 2 samples")
    if V.shape[0] <= labels.max():
        raise ConfigError("class_vectors has fewer rows than labels require")

    xb = l2_normalize(F)
    dist = pairwise_distance(xb, "euclidean")
    d2 = dist * dist
    s_pos = np.exp(-d2 / p.sigma ** 2)
    hinge = p.alpha_m - dist
    s_neg = np.maximum(hinge, 0.0)

    vb = l2_normalize(V)
    vy = vb[labels]
    cos = np.sum(xb * vy, axis=1)
    a = np.clip(cos, 0.0, 1.0)
    A = np.outer(a, a)

    same = labels[:, None] == labels[None, :]
    m_pos = same & ~np.eye(B, dtype=bool)
    m_neg = ~same

    d_d2 = np.zeros((B, B))
    d_dist = np.zeros((B, B))
    d_A = np.zeros((B, B))

    l_pos = 0.0
    if m_pos.any():
        w_pos = np.where(m_pos, A * s_pos, 0.0)
        num, den_raw = np.sum(w_pos * d2), np.sum(w_pos)
        den = max(den_raw, GUARD)
        l_pos = num / den
        g = 1.0 - p.l
        d_w = g * (d2 / den - (num / den ** 2 if den_raw > GUARD else 0.0))
        d_d2 += g * w_pos / den
        d_A += np.where(m_pos, d_w * s_pos, 0.0)
        d_d2 += np.where(m_pos, d_w * A * (-s_pos / p.sigma ** 2), 0.0)

    l_neg = 0.0
    if m_neg.any():
        w_neg = np.where(m_neg, A, 0.0)
        num, den_raw = np.sum(w_neg * s_neg ** 2), np.sum(w_neg)
        den = max(den_raw, GUARD)
        l_neg = num / den
        g = p.l
        d_A += np.where(m_neg, g * (s_neg ** 2 / den - (num / den ** 2 if den_raw > GUARD else 0.0)), 0.0)
        d_sneg = np.where(m_neg, g * 2.0 * A * s_neg / den, 0.0)
        d_dist -= np.where(hinge > 0, d_sneg, 0.0)

    value = float((1.0 - p.l) * l_pos + p.l * l_neg)

    d_dist += 2.0 * dist * d_d2
    d_xb = pairwise_distance_backward(xb, d_dist, "euclidean")
    d_a = d_A @ a + d_A.T @ a
    d_cos = np.where((cos > 0.0) & (cos < 1.0), d_a, 0.0)
    d_xb += d_cos[:, None] * vy
    d_F = l2_normalize_backward(F, d_xb)
    d_vb = np.zeros_like(V)
    np.add.at(d_vb, labels, d_cos[:, None] * xb)
    d_V = l2_normalize_backward(V, d_vb)
    return LossTerm(value, {"features": d_F, "class_vectors": d_V})


def attention_loss(scores, erase_labels) -> LossTerm:
    """Mean over all frames of erase_label * attention weight."""
    scores = np.asarray(scores, dtype=np.float64)
    lab = np.asarray(erase_labels, dtype=np.float64)
    if scores.shape != lab.shape:
        raise ConfigError(f"scores {scores.shape} and erase labels {lab.shape} differ in shape")
    n_total = scores.size
    value = float(np.sum(lab * scores) / n_total)
    return LossTerm(value, {"scores": lab / n_total})


# ---------------------------------------------------------------------------


def combine(recipe: LossRecipe, terms: dict[str, LossTerm]) -> LossOutput:
    """Weighted sum of the enabled terms and their gradients."""
    weights = recipe.weights()
    missing = [t for t in recipe.enabled() if t not in terms]
    if missing:
        raise ConfigError(f"enabled loss terms missing: {missing}")
    total = 0.0
    grads: dict[str, np.ndarray] = {}
    values = {}
    for name in TERMS:
        if name not in terms:
            continue
        w = weights[name]
        values[name] = terms[name].value
        total += w * terms[name].value
        for key, g in terms[name].grads.items():
            grads[key] = grads[key] + w * g if key in grads else w * g
    return LossOutput(total, values, grads)

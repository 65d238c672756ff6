"""Retrieval evaluation: clip embeddings, CMC / mAP, k-reciprocal re-ranking."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datamodel import GALLERY, QUERY, Dataset, sample_frames
from .errors import ConfigError, NumericError
from .model import Model, forward
from .numerics import RandomStream, cross_distance


@dataclass
class Embeddings:
    features: np.ndarray   # (n, d) post-BN clip features
    person_ids: np.ndarray
    camera_ids: np.ndarray
    indices: np.ndarray    # tracklet indices into the dataset


def embed_clips(model: Model, dataset: Dataset, split: str, N: int = 4, seed: int = 0) -> Embeddings:
    """Post-BN clip embeddings in infer mode, no augmentation.

    Frames are sampled per tracklet from ``RandomStream(seed).split(index)``
    so a clip's frames do not depend on what else is in the split.
    """
    idx = dataset.indices(split)
    if not idx:
        raise ConfigError(f"split {split!r} is empty")
    rng = RandomStream(seed)
    clips = []
    for i in idx:
        t = dataset.tracklets[i]
        clips.append(t.frames[sample_frames(t, N, rng.split(i))])
    cache = forward(model, np.stack(clips), mode="infer")
    return Embeddings(
        features=cache.features_bn,
        person_ids=np.array([dataset.tracklets[i].person_id for i in idx]),
        camera_ids=np.array([dataset.tracklets[i].camera_id for i in idx]),
        indices=np.array(idx),
    )


@dataclass
class Scores:
    mAP: float
    cmc: np.ndarray  # cmc[k-1] = CMC-k, k = 1..G
    num_valid_queries: int
    num_queries: int = 0

    def cmc_at(self, k: int) -> float:
        if self.cmc.size == 0:
            return 0.0
        return float(self.cmc[min(k, self.cmc.size) - 1])

    def to_dict(self, ranks=(1, 5, 20)) -> dict:
        return {
            "mAP": float(self.mAP),
            "cmc": {str(k): self.cmc_at(k) for k in ranks},
            "num_valid_queries": int(self.num_valid_queries),
        }


def cmc_map(D, q_pids, q_cams, g_pids, g_cams) -> Scores:
    """CMC curve and mAP under the cross-camera protocol.

    Gallery entries sharing both identity and camera with the query are
    dropped before ranking.  Queries left without any true match are skipped.
    Ties in distance are broken by gallery index.
    """
    D = np.asarray(D, dtype=np.float64)
    if not np.all(np.isfinite(D)):
        raise NumericError("distance matrix has non-finite entries")
    q_pids, q_cams = np.asarray(q_pids), np.asarray(q_cams)
    g_pids, g_cams = np.asarray(g_pids), np.asarray(g_cams)
    Q, G = D.shape
    order = np.argsort(D, axis=1, kind="stable")
    cmc_sum = np.zeros(G)
    aps = []
    for q in range(Q):
        ranked = order[q]
        junk = (g_pids[ranked] == q_pids[q]) & (g_cams[ranked] == q_cams[q])
        hits = (g_pids[ranked] == q_pids[q])[~junk]
        if not hits.any():
            continue
        first = int(np.argmax(hits))
        curve = np.zeros(G)
        curve[first:] = 1.0
        cmc_sum += curve
        pos = np.flatnonzero(hits)
        aps.append(np.mean((np.arange(pos.size) + 1) / (pos + 1)))
    n = len(aps)
    if n == 0:
        return Scores(0.0, np.zeros(G), 0, Q)
    return Scores(float(np.mean(aps)), cmc_sum / n, n, Q)


def k_reciprocal_rerank(D_qg, D_qq, D_gg, k1: int = 20, k2: int = 6, lam: float = 0.3) -> np.ndarray:
    """k-reciprocal re-ranking of query-gallery distances.

    Neighbour structure is built on the (Q+G) x (Q+G) union matrix, squared
    and normalized per column.  Returns ``lam * D_qg + (1 - lam) * jaccard``.
    """
    D_qg = np.asarray(D_qg, dtype=np.float64)
    D_qq = np.asarray(D_qq, dtype=np.float64)
    D_gg = np.asarray(D_gg, dtype=np.float64)
    Q, G = D_qg.shape
    n = Q + G
    if D_qq.shape != (Q, Q) or D_gg.shape != (G, G):
        raise ConfigError("re-ranking distance matrices have inconsistent shapes")
    if not k1 > k2 >= 1:
        raise ConfigError("re-ranking needs k1 > k2 >= 1")
    if k1 >= n:
        raise ConfigError(f"k1={k1} must be smaller than Q+G={n}")
    if not 0.0 <= lam <= 1.0:
        raise ConfigError("lambda must lie in [0, 1]")
    if lam == 1.0:
        return D_qg.copy()

    full = np.block([[D_qq, D_qg], [D_qg.T, D_gg]]) ** 2
    colmax = full.max(axis=0)
    dist = (full / np.where(colmax > 0, colmax, 1.0)).T
    rank = np.argsort(dist, axis=1, kind="stable")
    half = int(np.around(k1 / 2.0))

    def reciprocal(i, k):
        forward_nb = rank[i, :k + 1]
        back = rank[forward_nb, :k + 1]
        return forward_nb[np.any(back == i, axis=1)]

    V = np.zeros((n, n))
    for i in range(n):
        base = reciprocal(i, k1)
        expanded = base
        for cand in base:
            cand_set = reciprocal(cand, half)
            if len(np.intersect1d(cand_set, base)) > 2.0 / 3.0 * len(cand_set):
                expanded = np.append(expanded, cand_set)
        expanded = np.unique(expanded)
        w = np.exp(-dist[i, expanded])
        V[i, expanded] = w / w.sum()
    if k2 != 1:
        V = np.stack([V[rank[i, :k2]].mean(axis=0) for i in range(n)])

    jaccard = np.zeros((Q, G))
    for i in range(Q):
        overlap = np.minimum(V[i][None, :], V[Q:]).sum(axis=1)
        jaccard[i] = 1.0 - overlap / (2.0 - overlap)
    jaccard = np.maximum(jaccard, 0.0)
    return lam * D_qg + (1.0 - lam) * jaccard


@dataclass
class EvalConfig:
    N: int = 4
    seed: int = 0
    ranks: tuple = (1, 5, 20)
    rerank: bool = True
    k1: int = 20
    k2: int = 6
    lam: float = 0.3


def effective_rerank_params(k1: int, k2: int, G: int) -> tuple[int, int]:
    """Shrink k1/k2 for small galleries (k1 <= G-1, k2 < k1)."""
    k1 = max(2, min(k1, G - 1))
    k2 = max(1, min(k2, k1 - 1))
    return k1, k2


def evaluate(model: Model, dataset: Dataset, cfg: EvalConfig | None = None) -> dict:
    """Plain (and optionally re-ranked) scores on the test split.

    Returns ``{"plain": Scores, "reranked": Scores | None}``.
    """
    cfg = cfg or EvalConfig()
    q = embed_clips(model, dataset, QUERY, cfg.N, cfg.seed)
    g = embed_clips(model, dataset, GALLERY, cfg.N, cfg.seed)
    D_qg = cross_distance(q.features, g.features, "euclidean")
    plain = cmc_map(D_qg, q.person_ids, q.camera_ids, g.person_ids, g.camera_ids)
    reranked = None
    if cfg.rerank:
        D_qq = cross_distance(q.features, q.features, "euclidean")
        D_gg = cross_distance(g.features, g.features, "euclidean")
        scale = max(D_qg.max(), D_qq.max(), D_gg.max())
        k1, k2 = effective_rerank_params(cfg.k1, cfg.k2, D_qg.shape[1])
        R = k_reciprocal_rerank(D_qg / scale, D_qq / scale, D_gg / scale, k1, k2, cfg.lam)
        reranked = cmc_map(R, q.person_ids, q.camera_ids, g.person_ids, g.camera_ids)
    return {"plain": plain, "reranked": reranked}


def scores_document(result: dict, ranks=(1, 5, 20)) -> dict:
    """JSON-ready document with plain metrics at top level."""
    doc = result["plain"].to_dict(ranks)
    rr = result.get("reranked")
    doc["reranked"] = None if rr is None else {k: v for k, v in rr.to_dict(ranks).items()
                                               if k != "num_valid_queries"}
    return doc

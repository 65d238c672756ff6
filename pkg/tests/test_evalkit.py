import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import cmc_map_reference, rerank_reference
from reid.datamodel import GALLERY, QUERY, SynthSpec, generate_synthetic
from reid.errors import ConfigError
from reid.evalkit import (
    EvalConfig,
    cmc_map,
    effective_rerank_params,
    embed_clips,
    evaluate,
    k_reciprocal_rerank,
    scores_document,
)
from reid.model import ModelDims, init_model
from reid.numerics import RandomStream, cross_distance
from reid.trainer import Schedule, TrainConfig, fit


def random_instance(rng, Q=None, G=None):
    Q = Q or int(rng.integers(1, 21))
    G = G or int(rng.integers(1, 21))
    ids = int(rng.integers(1, 6))
    return (rng.random((Q, G)), rng.integers(0, ids, Q), rng.integers(0, 3, Q),
            rng.integers(0, ids, G), rng.integers(0, 3, G))


def rerank_instance(rng, Q, G, d=4):
    X = rng.normal(size=(Q + G, d))
    D = cross_distance(X, X, "euclidean")
    return D[:Q, Q:], D[:Q, :Q], D[Q:, Q:]


class TestCmcMap:
    def test_nearest_correct(self):
        s = cmc_map([[0.1, 0.5]], [1], [0], [1, 2], [1, 1])
        assert s.cmc_at(1) == 1.0 and s.mAP == 1.0

    def test_rank_two(self):
        s = cmc_map([[0.1, 0.5, 0.9]], [1], [0], [2, 1, 3], [1, 1, 1])
        assert s.cmc_at(1) == 0.0 and s.cmc_at(5) == 1.0 and s.mAP == 0.5

    def test_junk_excluded(self):
        # the nearest gallery entry shares id and camera with the query: ignored
        s = cmc_map([[0.1, 0.2, 0.3]], [1], [0], [1, 1, 2], [0, 1, 1])
        assert s.cmc_at(1) == 1.0 and s.mAP == 1.0

    def test_query_without_match(self):
        s = cmc_map([[0.1, 0.2], [0.3, 0.1]], [1, 7], [0, 0], [1, 2], [1, 1])
        assert s.num_valid_queries == 1 and s.num_queries == 2 and s.mAP == 1.0

    def test_tie_breaks_by_index(self):
        s = cmc_map([[0.5, 0.5]], [1], [0], [2, 1], [1, 1])
        assert s.cmc_at(1) == 0.0 and s.mAP == 0.5

    def test_matches_reference(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            D, qp, qc, gp, gc = random_instance(rng)
            s = cmc_map(D, qp, qc, gp, gc)
            mAP, cmc, n = cmc_map_reference(D.tolist(), qp, qc, gp, gc)
            assert s.num_valid_queries == n
            assert s.cmc.tolist() == cmc
            assert abs(s.mAP - mAP) <= 1e-9

    @settings(max_examples=100)
    @given(st.integers(0, 2**32))
    def test_bounds(self, seed):
        s = cmc_map(*random_instance(np.random.default_rng(seed)))
        assert 0 <= s.mAP <= 1
        assert np.all(np.diff(s.cmc) >= 0) and np.all((s.cmc >= 0) & (s.cmc <= 1))

    @pytest.mark.parametrize("f", [lambda d: 3 * d + 1, np.exp, lambda d: d ** 3, np.sqrt])
    def test_monotone_transform(self, f):
        rng = np.random.default_rng(4)
        for _ in range(20):
            D, qp, qc, gp, gc = random_instance(rng)
            a, b = cmc_map(D, qp, qc, gp, gc), cmc_map(f(D), qp, qc, gp, gc)
            assert a.mAP == b.mAP and np.array_equal(a.cmc, b.cmc)

    def test_document(self):
        s = cmc_map([[0.1, 0.5]], [1], [0], [1, 2], [1, 1])
        doc = scores_document({"plain": s, "reranked": s})
        assert set(doc["cmc"]) == {"1", "5", "20"} and doc["reranked"]["mAP"] == 1.0


class TestRerank:
    def test_lambda_one_identity(self):
        D_qg, D_qq, D_gg = rerank_instance(np.random.default_rng(0), 5, 8)
        R = k_reciprocal_rerank(D_qg, D_qq, D_gg, 6, 3, 1.0)
        assert np.array_equal(R, D_qg) and R is not D_qg

    def test_single_gallery(self):
        D_qg, D_qq, D_gg = rerank_instance(np.random.default_rng(1), 4, 1)
        R = k_reciprocal_rerank(D_qg, D_qq, D_gg, 3, 1, 0.3)
        assert R.shape == (4, 1) and np.all(np.isfinite(R))
        assert np.all(np.argmin(R, axis=1) == 0)

    def test_k1_too_large(self):
        D_qg, D_qq, D_gg = rerank_instance(np.random.default_rng(2), 3, 4)
        with pytest.raises(ConfigError):
            k_reciprocal_rerank(D_qg, D_qq, D_gg, 7, 2)

    @pytest.mark.parametrize("k1,k2", [(3, 3), (3, 0)])
    def test_bad_k(self, k1, k2):
        D_qg, D_qq, D_gg = rerank_instance(np.random.default_rng(2), 3, 4)
        with pytest.raises(ConfigError):
            k_reciprocal_rerank(D_qg, D_qq, D_gg, k1, k2)

    def test_ten_by_ten_oracle(self):
        D_qg, D_qq, D_gg = rerank_instance(np.random.default_rng(3), 10, 10)
        R = k_reciprocal_rerank(D_qg, D_qq, D_gg, 6, 3, 0.3)
        want = rerank_reference(D_qg.tolist(), D_qq.tolist(), D_gg.tolist(), 6, 3, 0.3)
        assert np.max(np.abs(R - np.array(want))) <= 1e-9

    @pytest.mark.parametrize("seed", range(10))
    def test_random_oracle(self, seed):
        rng = np.random.default_rng(100 + seed)
        Q, G = int(rng.integers(2, 8)), int(rng.integers(2, 12))
        k1 = int(rng.integers(2, Q + G))
        k2 = int(rng.integers(1, k1))
        lam = float(rng.random())
        D_qg, D_qq, D_gg = rerank_instance(rng, Q, G)
        R = k_reciprocal_rerank(D_qg, D_qq, D_gg, k1, k2, lam)
        want = rerank_reference(D_qg.tolist(), D_qq.tolist(), D_gg.tolist(), k1, k2, lam)
        assert np.max(np.abs(R - np.array(want))) <= 1e-9
        assert np.all(np.isfinite(R))

    def test_effective_params(self):
        assert effective_rerank_params(20, 6, 12) == (11, 6)
        assert effective_rerank_params(20, 6, 3) == (2, 1)


class TestEmbedAndEvaluate:
    def _model(self, ds, seed=0):
        H, W = ds.grid
        return init_model(ModelDims(H * W, 8, 6, len(ds.identities())), RandomStream(seed))

    def test_embed(self, small_ds):
        m = self._model(small_ds)
        a = embed_clips(m, small_ds, GALLERY, 4, seed=3)
        b = embed_clips(m, small_ds, GALLERY, 4, seed=3)
        assert np.array_equal(a.features, b.features)
        assert a.features.shape == (len(small_ds.indices(GALLERY)), 6)

    def test_embed_empty_split(self, small_ds):
        from reid.datamodel import Dataset
        only_train = Dataset(small_ds.tracklets, ["train"] * len(small_ds.tracklets))
        with pytest.raises(ConfigError):
            embed_clips(self._model(small_ds), only_train, QUERY)

    def test_rerank_lambda_one_equals_plain(self, small_ds):
        m = self._model(small_ds)
        r = evaluate(m, small_ds, EvalConfig(rerank=True, lam=1.0))
        assert r["reranked"].mAP == r["plain"].mAP
        assert np.array_equal(r["reranked"].cmc, r["plain"].cmc)

    def test_chance_level_untrained(self):
        # identities differ by far less than the frame noise and cameras add nothing
        spec = SynthSpec(identities=40, tracklets_per_id=4, inter_separation=0.01, intra_noise=1.0,
                         camera_shift=0.0)
        ds = generate_synthetic(spec, 5)
        m = self._model(ds)
        observed = evaluate(m, ds, EvalConfig(rerank=False))["plain"].mAP
        q = embed_clips(m, ds, QUERY)
        g = embed_clips(m, ds, GALLERY)
        D = cross_distance(q.features, g.features, "euclidean")
        rng = np.random.default_rng(0)
        null = []
        for _ in range(200):
            perm = rng.permutation(len(g.person_ids))
            null.append(cmc_map(D, q.person_ids, q.camera_ids,
                                g.person_ids[perm], g.camera_ids[perm]).mAP)
        lo, hi = np.quantile(null, [0.005, 0.995])
        assert lo <= observed <= hi

    def test_separable_trained(self):
        spec = SynthSpec(identities=16, inter_separation=1.0, intra_noise=0.01, camera_shift=0.0)
        ds = generate_synthetic(spec, 1)
        cfg = TrainConfig.from_preset("baseline-bot", P=4, K=4, epochs=30,
                                      schedule=Schedule(3e-3, 5, (25,), 0.1))
        cp, _ = fit(cfg, ds)
        r = evaluate(cp.model, ds, EvalConfig())
        assert r["plain"].cmc_at(1) == 1.0

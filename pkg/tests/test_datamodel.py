import json
import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from reid.datamodel import (
    GALLERY,
    QUERY,
    TRAIN,
    Dataset,
    EraseParams,
    SynthSpec,
    Tracklet,
    generate_synthetic,
    manifest_path,
    pk_sample_batch,
    random_erase,
    read_tracklets,
    sample_frames,
    write_tracklets,
)
from reid.errors import (
    BadMagicError,
    ConfigError,
    FormatError,
    TruncatedFileError,
    VersionMismatchError,
)
from reid.numerics import RandomStream


class TestSynthetic:
    def test_half_split(self):
        ds = generate_synthetic(SynthSpec(identities=8, tracklets_per_id=4), 0)
        assert len(ds.identities(TRAIN)) == 4
        test_ids = set(ds.identities(QUERY)) | set(ds.identities(GALLERY))
        assert len(test_ids) == 4 and not test_ids & set(ds.identities(TRAIN))
        assert len(ds.indices(QUERY)) == 4 and len(ds.indices(GALLERY)) == 12
        ds.validate()

    def test_deterministic(self):
        spec = SynthSpec(identities=6)
        assert generate_synthetic(spec, 3) == generate_synthetic(spec, 3)
        assert not generate_synthetic(spec, 3) == generate_synthetic(spec, 4)

    def test_noise_free_frames_identical(self):
        ds = generate_synthetic(SynthSpec(identities=6, intra_noise=0.0, tracklets_per_id=5), 1)
        groups = {}
        for t in ds.tracklets:
            groups.setdefault((t.person_id, t.camera_id), []).append(t.frames)
        for frames in groups.values():
            ref = frames[0][0]
            assert all(np.array_equal(f, ref) for stack in frames for f in stack)

    def test_needs_two_identities(self):
        with pytest.raises(ConfigError):
            generate_synthetic(SynthSpec(identities=1), 0)

    def test_separation(self):
        ds = generate_synthetic(SynthSpec(identities=10, inter_separation=1.0, intra_noise=0.05,
                                          camera_shift=0.0), 2)
        protos = {}
        intra = []
        for t in ds.tracklets:
            protos.setdefault(t.person_id, []).append(t.frames.mean(axis=0))
            f = t.frames.reshape(len(t), -1)
            intra.append(np.linalg.norm(f[0] - f[1]))
        means = np.array([np.mean(v, axis=0).ravel() for _, v in sorted(protos.items())])
        inter = [np.linalg.norm(means[i] - means[j])
                 for i in range(len(means)) for j in range(i + 1, len(means))]
        assert np.mean(inter) > np.mean(intra)

    def test_shared_camera_seed(self):
        a = generate_synthetic(SynthSpec(identities=4, intra_noise=0.0, camera_seed=5), 1)
        b = generate_synthetic(SynthSpec(identities=4, intra_noise=0.0, camera_seed=5), 2)
        # same camera network, different people
        assert not np.array_equal(a.tracklets[0].frames, b.tracklets[0].frames)
        assert a != b


class TestSampleFrames:
    def test_forced(self):
        t = Tracklet(0, 0, np.zeros((4, 2, 2)))
        assert sample_frames(t, 4, RandomStream(0)).tolist() == [0, 1, 2, 3]

    def test_replacement(self):
        t = Tracklet(0, 0, np.zeros((2, 2, 2)))
        idx = sample_frames(t, 4, RandomStream(0))
        assert len(idx) == 4 and set(idx.tolist()) <= {0, 1}
        assert list(idx) == sorted(idx)

    def test_deterministic(self):
        t = Tracklet(0, 0, np.zeros((9, 2, 2)))
        a = sample_frames(t, 4, RandomStream(7))
        b = sample_frames(t, 4, RandomStream(7))
        assert np.array_equal(a, b) and len(set(a.tolist())) == 4

    def test_empty(self):
        with pytest.raises(ConfigError):
            sample_frames(Tracklet(0, 0, np.zeros((0, 2, 2))), 4, RandomStream(0))


class TestPKBatch:
    def test_shape(self, small_ds):
        b = pk_sample_batch(small_ds, 2, 2, 4, EraseParams(), RandomStream(0))
        assert b.frames.shape == (4, 4, 4, 4)
        assert b.erase_labels.shape == (4, 4)
        assert len(set(b.person_ids.tolist())) == 2

    def test_no_erase(self, small_ds):
        b = pk_sample_batch(small_ds, 4, 3, 4, EraseParams(p=0.0), RandomStream(1))
        assert not b.erase_labels.any()

    def test_too_many_ids(self, small_ds):
        with pytest.raises(ConfigError):
            pk_sample_batch(small_ds, 5, 2, 4, EraseParams(), RandomStream(0))

    def test_force_one_erase(self, small_ds):
        b = pk_sample_batch(small_ds, 4, 2, 4, EraseParams(p=0.0, force_one_erase=True),
                            RandomStream(2))
        assert np.all(b.erase_labels.sum(axis=1) == 1)

    def test_labels_mark_modified_frames(self, small_ds):
        b = pk_sample_batch(small_ds, 4, 3, 5, EraseParams(p=0.5), RandomStream(3))
        # with N == T every frame index is drawn once, in order
        for c in range(b.num_clips):
            pool = [t for i, t in enumerate(small_ds.tracklets)
                    if small_ds.splits[i] == TRAIN and t.person_id == b.person_ids[c]]
            originals = [t.frames for t in pool]
            for j in range(5):
                changed = not any(np.array_equal(b.frames[c, j], o[j]) for o in originals)
                assert changed == bool(b.erase_labels[c, j])

    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 7), st.integers(0, 2**32))
    def test_shape_property(self, P, K, N, seed):
        ds = generate_synthetic(SynthSpec(identities=8, tracklets_per_id=2, H=3, W=3), 0)
        b = pk_sample_batch(ds, P, K, N, EraseParams(), RandomStream(seed))
        assert b.frames.shape == (P * K, N, 3, 3)
        assert b.erase_labels.shape == (P * K, N)
        assert set(np.unique(b.erase_labels)) <= {0, 1}
        pids = b.person_ids.reshape(P, K)
        assert len(set(pids[:, 0].tolist())) == P
        assert np.all(pids == pids[:, :1])
        lm = ds.train_label_map()
        assert [lm[p] for p in b.person_ids] == b.labels.tolist()


class TestRandomErase:
    def test_p_zero(self):
        f = np.arange(16.0).reshape(4, 4)
        out, lab = random_erase(f, 0.0, (0.02, 0.4), (0.3, 3.33), -1.0, RandomStream(0))
        assert lab == 0 and np.array_equal(out, f)

    @pytest.mark.parametrize("seed", range(10))
    def test_square_block_oracle(self, seed):
        f = np.zeros((8, 8))
        out, lab = random_erase(f, 1.0, (0.25, 0.25), (1.0, 1.0), 1.0, RandomStream(seed))
        assert lab == 1
        placements = []
        for top in range(5):
            for left in range(5):
                m = np.zeros((8, 8))
                m[top:top + 4, left:left + 4] = 1.0
                placements.append((top, left, m))
        hits = [(t, l) for t, l, m in placements if np.array_equal(m, out)]
        assert len(hits) == 1
        # replay the draws: p-gate, area, aspect, top, left
        u = (RandomStream(seed).raw(5) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        assert hits[0] == (int(u[3] * 5), int(u[4] * 5))

    def test_deterministic(self):
        f = np.zeros((8, 8))
        a = random_erase(f, 1.0, (0.02, 0.4), (0.3, 3.33), 1.0, RandomStream(5))
        b = random_erase(f, 1.0, (0.02, 0.4), (0.3, 3.33), 1.0, RandomStream(5))
        assert np.array_equal(a[0], b[0]) and a[1] == b[1]

    @pytest.mark.parametrize("area,aspect", [((0.0, 0.4), (1, 1)), ((0.5, 0.2), (1, 1)),
                                             ((0.1, 1.0), (1, 1)), ((0.1, 0.2), (2, 1)),
                                             ((0.1, 0.2), (0, 1))])
    def test_invalid_ranges(self, area, aspect):
        with pytest.raises(ConfigError):
            random_erase(np.zeros((4, 4)), 0.5, area, aspect, 0.0, RandomStream(0))

    def test_invalid_p(self):
        with pytest.raises(ConfigError):
            random_erase(np.zeros((4, 4)), 1.5, (0.1, 0.2), (1, 1), 0.0, RandomStream(0))

    @settings(max_examples=200, deadline=None)
    @given(st.integers(0, 2**40), st.integers(2, 12), st.integers(2, 12),
           st.floats(0.02, 0.3), st.floats(0.0, 0.5))
    def test_erased_fraction(self, seed, H, W, sl, extra):
        sh = min(sl + extra, 0.9)
        f = np.zeros((H, W))
        out, lab = random_erase(f, 1.0, (sl, sh), (0.3, 3.33), 1.0, RandomStream(seed))
        frac = out.sum() / (H * W)
        if lab:
            assert 0.9 * sl <= frac <= 1.1 * sh
        else:
            assert frac == 0


class TestFiles:
    def test_round_trip(self, tmp_path, small_ds):
        p = tmp_path / "d.rtk"
        write_tracklets(small_ds, p)
        assert read_tracklets(p) == small_ds
        # and the bytes are stable
        first = p.read_bytes()
        write_tracklets(read_tracklets(p), p)
        assert p.read_bytes() == first

    def test_header_layout(self, tmp_path, small_ds):
        p = tmp_path / "d.rtk"
        write_tracklets(small_ds, p)
        buf = p.read_bytes()
        assert buf[:4] == b"RTK1"
        assert struct.unpack("<IQ", buf[4:16]) == (1, len(small_ds.tracklets))
        t = small_ds.tracklets[0]
        assert struct.unpack("<5I", buf[16:36]) == (t.person_id, t.camera_id, *t.frames.shape)
        assert json.loads(manifest_path(p).read_text())["splits"]["0"] == small_ds.splits[0]

    def test_bad_magic(self, tmp_path, small_ds):
        p = tmp_path / "d.rtk"
        write_tracklets(small_ds, p)
        p.write_bytes(b"XXXX" + p.read_bytes()[4:])
        with pytest.raises(BadMagicError):
            read_tracklets(p)

    def test_truncated(self, tmp_path, small_ds):
        p = tmp_path / "d.rtk"
        write_tracklets(small_ds, p)
        p.write_bytes(p.read_bytes()[:50])
        with pytest.raises(TruncatedFileError):
            read_tracklets(p)

    def test_version(self, tmp_path, small_ds):
        p = tmp_path / "d.rtk"
        write_tracklets(small_ds, p)
        buf = bytearray(p.read_bytes())
        buf[4:8] = struct.pack("<I", 2)
        p.write_bytes(bytes(buf))
        with pytest.raises(VersionMismatchError):
            read_tracklets(p)

    def test_error_codes_distinct(self):
        codes = {BadMagicError.code, TruncatedFileError.code, VersionMismatchError.code}
        assert len(codes) == 3

    def test_trailing_bytes(self, tmp_path, small_ds):
        p = tmp_path / "d.rtk"
        write_tracklets(small_ds, p)
        p.write_bytes(p.read_bytes() + b"\0")
        with pytest.raises(FormatError):
            read_tracklets(p)

    def test_missing_manifest_is_train(self, tmp_path, small_ds):
        p = tmp_path / "d.rtk"
        write_tracklets(small_ds, p)
        manifest_path(p).unlink()
        assert set(read_tracklets(p).splits) == {TRAIN}

    def test_float32_widening(self, tmp_path):
        ds = Dataset([Tracklet(0, 0, np.full((1, 2, 2), 0.1))], [TRAIN])
        p = tmp_path / "x.rtk"
        write_tracklets(ds, p)
        got = read_tracklets(p).tracklets[0].frames
        assert got.dtype == np.float64 and got[0, 0, 0] == float(np.float32(0.1))
        assert not math.isclose(got[0, 0, 0], 0.1, rel_tol=1e-12)

"""Tracklets, synthetic datasets, clip sampling, random erasing and file I/O."""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    ConfigError,
    FormatError,
    TruncatedFileError,
    VersionMismatchError,
)
from .numerics import RandomStream

TRAIN = "train"
QUERY = "test-query"
GALLERY = "test-gallery"
SPLITS = (TRAIN, QUERY, GALLERY)

TRACKLET_MAGIC = b"RTK1"
TRACKLET_VERSION = 1


@dataclass
class Tracklet:
    person_id: int
    camera_id: int
    frames: np.ndarray  # (T, H, W), temporal order

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 3:
            raise ConfigError("tracklet frames must be a (T, H, W) array")
        if self.person_id < 0 or self.camera_id < 0:
            raise ConfigError("person_id and camera_id must be non-negative")

    def __len__(self):
        return self.frames.shape[0]

    @property
    def grid(self) -> tuple[int, int]:
        return self.frames.shape[1], self.frames.shape[2]


@dataclass
class Dataset:
    tracklets: list[Tracklet]
    splits: list[str]

    def __post_init__(self):
        if len(self.tracklets) != len(self.splits):
            raise ConfigError("one split tag per tracklet is required")
        bad = set(self.splits) - set(SPLITS)
        if bad:
            raise ConfigError(f"unknown split tags {sorted(bad)}")

    def indices(self, split: str) -> list[int]:
        return [i for i, s in enumerate(self.splits) if s == split]

    def identities(self, split: str = TRAIN) -> list[int]:
        return sorted({self.tracklets[i].person_id for i in self.indices(split)})

    def train_label_map(self) -> dict[int, int]:
        """person_id -> classifier label (0..C-1) for the train split."""
        return {pid: k for k, pid in enumerate(self.identities(TRAIN))}

    @property
    def grid(self) -> tuple[int, int]:
        return self.tracklets[0].grid

    def train_mean(self) -> float:
        idx = self.indices(TRAIN) or range(len(self.tracklets))
        total = sum(float(self.tracklets[i].frames.sum()) for i in idx)
        count = sum(self.tracklets[i].frames.size for i in idx)
        return total / count

    def validate(self):
        """Check the cross-split invariants (train ids have >= 2 tracklets,
        every query identity appears in the gallery)."""
        counts: dict[int, int] = {}
        for i in self.indices(TRAIN):
            pid = self.tracklets[i].person_id
            counts[pid] = counts.get(pid, 0) + 1
        thin = [pid for pid, c in counts.items() if c < 2]
        if thin:
            raise ConfigError(f"train identities with < 2 tracklets: {thin}")
        gallery = set(self.identities(GALLERY))
        missing = set(self.identities(QUERY)) - gallery
        if missing:
            raise ConfigError(f"query identities absent from gallery: {sorted(missing)}")

    def __eq__(self, other):
        if not isinstance(other, Dataset) or self.splits != other.splits:
            return False
        if len(self.tracklets) != len(other.tracklets):
            return False
        return all(
            a.person_id == b.person_id
            and a.camera_id == b.camera_id
            and a.frames.shape == b.frames.shape
            and np.array_equal(a.frames, b.frames)
            for a, b in zip(self.tracklets, other.tracklets)
        )


@dataclass
class SynthSpec:
    identities: int = 32
    tracklets_per_id: int = 4
    frames_per_tracklet: int = 8
    H: int = 8
    W: int = 8
    cameras: int = 3
    intra_noise: float = 0.1
    inter_separation: float = 1.0
    # per-camera additive pattern, relative to inter_separation
    camera_shift: float = 1.0
    # when set, camera gains/patterns come from this seed instead of the
    # dataset seed, so several datasets can share one camera network
    camera_seed: int | None = None

    def validate(self):
        for name in ("identities", "tracklets_per_id", "frames_per_tracklet", "cameras"):
            if getattr(self, name) < 1:
                raise ConfigError(f"synth.{name} must be >= 1")
        if self.identities < 2:
            raise ConfigError("synth.identities must be >= 2 (retrieval needs distractors)")
        if self.tracklets_per_id < 2:
            raise ConfigError("synth.tracklets_per_id must be >= 2")
        if self.H < 2 or self.W < 2:
            raise ConfigError("synth grid must be at least 2x2")
        if self.intra_noise < 0 or self.inter_separation <= 0 or self.camera_shift < 0:
            raise ConfigError("synth noise/separation out of range")


def generate_synthetic(spec: SynthSpec, seed: int) -> Dataset:
    """Build a dataset of noisy identity prototypes seen through cameras.

    frame = gain[c] * prototype[p] + shift[c] + intra_noise * noise, with
    per-camera gain in [0.8, 1.2] and a per-camera additive grid.  Half of the
    identities (rounded down) go to train; each test identity contributes one
    query tracklet and the rest to the gallery.  Values are rounded to float32
    precision so that the on-disk format round-trips exactly.
    """
    spec.validate()
    rng = RandomStream(seed)
    HW = (spec.H, spec.W)
    protos = spec.inter_separation * rng.split("prototypes").normal((spec.identities, *HW))
    cam_root = rng if spec.camera_seed is None else RandomStream(spec.camera_seed)
    cam_rng = cam_root.split("cameras")
    gains = cam_rng.uniform(spec.cameras, 0.8, 1.2)
    shifts = spec.camera_shift * spec.inter_separation * cam_rng.normal((spec.cameras, *HW))

    order = rng.split("split").permutation(spec.identities)
    n_train = spec.identities // 2
    train_ids = set(int(p) for p in order[:n_train])

    noise_rng = rng.split("noise")
    offset_rng = rng.split("camera-offset")
    tracklets, splits = [], []
    for pid in range(spec.identities):
        first_cam = offset_rng.integers(spec.cameras)
        for j in range(spec.tracklets_per_id):
            cam = (first_cam + j) % spec.cameras
            noise = noise_rng.normal((spec.frames_per_tracklet, *HW))
            frames = gains[cam] * protos[pid] + shifts[cam] + spec.intra_noise * noise
            frames = frames.astype(np.float32).astype(np.float64)
            tracklets.append(Tracklet(pid, cam, frames))
            if pid in train_ids:
                splits.append(TRAIN)
            else:
                splits.append(QUERY if j == 0 else GALLERY)
    return Dataset(tracklets, splits)


# ---------------------------------------------------------------------------
# sampling


def sample_frames(t: Tracklet, N: int, rng: RandomStream) -> np.ndarray:
    """N frame indices in ascending order; without replacement when possible."""
    if N < 1:
        raise ConfigError("N must be >= 1")
    T = len(t)
    if T == 0:
        raise ConfigError("cannot sample frames from an empty tracklet")
    if T >= N:
        idx = rng.choice(T, N)
    else:
        idx = rng.choice(T, N, replace=True)
    return np.sort(idx)


@dataclass
class EraseParams:
    p: float = 0.5
    area_range: tuple[float, float] = (0.02, 0.4)
    aspect_range: tuple[float, float] = (0.3, 3.33)
    fill: float | None = None  # None -> dataset mean
    force_one_erase: bool = False

    def validate(self):
        sl, sh = self.area_range
        r1, r2 = self.aspect_range
        if not 0.0 <= self.p <= 1.0:
            raise ConfigError("erase p must lie in [0, 1]")
        if not 0.0 < sl <= sh < 1.0:
            raise ConfigError("erase area_range must satisfy 0 < sl <= sh < 1")
        if not 0.0 < r1 <= r2:
            raise ConfigError("erase aspect_range must satisfy 0 < r1 <= r2")


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def random_erase(frame, p, area_range, aspect_range, fill, rng: RandomStream,
                 max_attempts=10):
    """Overwrite a random rectangle with ``fill`` with probability ``p``.

    Returns ``(new_frame, erased)``.  A rectangle is accepted when it fits the
    grid and its realized area fraction lies within [0.9*sl, 1.1*sh]; after
    ``max_attempts`` rejected draws the frame is returned untouched.
    """
    EraseParams(p, tuple(area_range), tuple(aspect_range)).validate()
    frame = np.asarray(frame, dtype=np.float64)
    out = frame.copy()
    if rng.uniform() >= p:
        return out, 0
    H, W = frame.shape
    area = H * W
    sl, sh = area_range
    r1, r2 = aspect_range
    for _ in range(max_attempts):
        target = rng.uniform(low=sl, high=sh) * area
        aspect = rng.uniform(low=r1, high=r2)
        h = _round_half_up(math.sqrt(target * aspect))
        w = _round_half_up(math.sqrt(target / aspect))
        if not (1 <= h <= H and 1 <= w <= W):
            continue
        frac = h * w / area
        if not (0.9 * sl <= frac <= 1.1 * sh):
            continue
        top = rng.integers(H - h + 1)
        left = rng.integers(W - w + 1)
        out[top:top + h, left:left + w] = fill
        return out, 1
    return out, 0


@dataclass
class ClipBatch:
    frames: np.ndarray        # (P*K, N, H, W)
    person_ids: np.ndarray    # (P*K,)
    camera_ids: np.ndarray    # (P*K,)
    labels: np.ndarray        # (P*K,) classifier labels
    erase_labels: np.ndarray  # (P*K, N) in {0, 1}
    P: int = 0
    K: int = 0

    @property
    def num_clips(self) -> int:
        return self.frames.shape[0]

    @property
    def N(self) -> int:
        return self.frames.shape[1]


def pk_sample_batch(ds: Dataset, P: int, K: int, N: int, erase: EraseParams,
                    rng: RandomStream, label_map: dict[int, int] | None = None) -> ClipBatch:
    """P train identities x K clips x N frames, each frame passed through random_erase.

    Identities with fewer than K train tracklets are resampled with
    replacement.  With ``erase.force_one_erase`` exactly one frame per clip is
    erased and ``erase.p`` is ignored.
    """
    if min(P, K, N) < 1:
        raise ConfigError("P, K and N must be >= 1")
    erase.validate()
    label_map = label_map if label_map is not None else ds.train_label_map()
    by_id: dict[int, list[int]] = {}
    for i in ds.indices(TRAIN):
        by_id.setdefault(ds.tracklets[i].person_id, []).append(i)
    ids = sorted(by_id)
    if len(ids) < P:
        raise ConfigError(f"need {P} train identities, dataset has {len(ids)}")
    fill = ds.train_mean() if erase.fill is None else erase.fill

    chosen = [ids[k] for k in rng.choice(len(ids), P)]
    frames, pids, cams, labels, elabels = [], [], [], [], []
    for pid in chosen:
        pool = by_id[pid]
        picks = rng.choice(len(pool), K, replace=len(pool) < K)
        for k in picks:
            t = ds.tracklets[pool[k]]
            idx = sample_frames(t, N, rng)
            clip = t.frames[idx].copy()
            lab = np.zeros(N, dtype=np.int64)
            if erase.force_one_erase:
                j = rng.integers(N)
                # retry until a rectangle lands; defaults succeed almost surely
                for _ in range(100):
                    clip[j], lab[j] = random_erase(
                        t.frames[idx[j]], 1.0, erase.area_range, erase.aspect_range, fill, rng)
                    if lab[j]:
                        break
            else:
                for j in range(N):
                    clip[j], lab[j] = random_erase(
                        clip[j], erase.p, erase.area_range, erase.aspect_range, fill, rng)
            frames.append(clip)
            pids.append(pid)
            cams.append(t.camera_id)
            labels.append(label_map[pid])
            elabels.append(lab)
    return ClipBatch(
        frames=np.stack(frames),
        person_ids=np.array(pids, dtype=np.int64),
        camera_ids=np.array(cams, dtype=np.int64),
        labels=np.array(labels, dtype=np.int64),
        erase_labels=np.stack(elabels),
        P=P,
        K=K,
    )


# ---------------------------------------------------------------------------
# file format


def manifest_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".manifest.json")


def write_tracklets(ds: Dataset, path):
    """Write the binary tracklet file plus its JSON split manifest."""
    path = Path(path)
    chunks = [TRACKLET_MAGIC, struct.pack("<IQ", TRACKLET_VERSION, len(ds.tracklets))]
    for t in ds.tracklets:
        T, H, W = t.frames.shape
        chunks.append(struct.pack("<5I", t.person_id, t.camera_id, T, H, W))
        chunks.append(t.frames.astype("<f4").tobytes())
    path.write_bytes(b"".join(chunks))
    manifest = {
        "version": TRACKLET_VERSION,
        "splits": {str(i): s for i, s in enumerate(ds.splits)},
    }
    manifest_path(path).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n",
                                   encoding="utf-8")


def _take(buf: bytes, pos: int, n: int, what: str) -> bytes:
    if pos + n > len(buf):
        raise TruncatedFileError(f"file truncated while reading {what}")
    return buf[pos:pos + n]


def read_tracklets(path) -> Dataset:
    path = Path(path)
    buf = path.read_bytes()
    if _take(buf, 0, 4, "magic") != TRACKLET_MAGIC:
        raise BadMagicError(f"{path}: not a tracklet file (bad magic)")
    (version,) = struct.unpack("<I", _take(buf, 4, 4, "version"))
    if version != TRACKLET_VERSION:
        raise VersionMismatchError(f"{path}: version {version}, expected {TRACKLET_VERSION}")
    (count,) = struct.unpack("<Q", _take(buf, 8, 8, "tracklet count"))
    pos = 16
    tracklets = []
    for i in range(count):
        pid, cam, T, H, W = struct.unpack("<5I", _take(buf, pos, 20, f"tracklet {i} header"))
        pos += 20
        nbytes = 4 * T * H * W
        raw = _take(buf, pos, nbytes, f"tracklet {i} frames")
        pos += nbytes
        frames = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(T, H, W)
        tracklets.append(Tracklet(pid, cam, frames))
    if pos != len(buf):
        raise FormatError(f"{path}: {len(buf) - pos} trailing bytes after the last tracklet")
    mpath = manifest_path(path)
    if not mpath.exists():
        # bare feature files (no manifest) are treated as all-train
        return Dataset(tracklets, [TRAIN] * count)
    try:
        manifest = json.loads(mpath.read_text(encoding="utf-8"))
        splits = [manifest["splits"][str(i)] for i in range(count)]
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"{mpath}: malformed manifest ({exc})") from None
    return Dataset(tracklets, splits)

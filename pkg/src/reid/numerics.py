"""Dense-array primitives with explicit backward passes and a counter-based RNG.

Matrices are plain ``numpy.ndarray`` objects of dtype float64.  Every
differentiable primitive comes as a ``foo`` / ``foo_backward`` pair; the
backward function takes the upstream gradient and returns the gradient with
respect to the inputs.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import NumericError

DIST_FLOOR = 1e-12
NORM_FLOOR = 1e-12

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def as_matrix(x, name="input") -> np.ndarray:
    """Convert to a float64 array and reject NaN/Inf."""
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{name} contains non-finite values")
    return arr


# ---------------------------------------------------------------------------
# random stream


def mix64(z: int) -> int:
    """SplitMix64 finalizer on a Python int."""
    z &= _MASK64
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK64
    return z ^ (z >> 31)


def _mix64_array(z: np.ndarray) -> np.ndarray:
    z = z ^ (z >> np.uint64(30))
    z = z * np.uint64(_MIX1)
    z = z ^ (z >> np.uint64(27))
    z = z * np.uint64(_MIX2)
    return z ^ (z >> np.uint64(31))


def fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * _FNV_PRIME) & _MASK64
    return h


class RandomStream:
    """Counter-based SplitMix64 stream.

    Output ``k`` (0-based) is ``mix64(seed + (k + 1) * GOLDEN)``, i.e. the
    canonical SplitMix64 sequence started from state ``seed``.  The stream
    keeps only ``(seed, counter)``, so any output is reproducible from those
    two numbers.  ``split(label)`` derives an independent child whose seed is
    ``mix64(seed ^ fnv1a64(utf8(label)))``.
    """

    def __init__(self, seed: int, counter: int = 0):
        self.seed = int(seed) & _MASK64
        self.counter = int(counter)

    def __repr__(self):
        return f"RandomStream(seed={self.seed}, counter={self.counter})"

    def split(self, label) -> "RandomStream":
        key = fnv1a64(str(label).encode("utf-8"))
        return RandomStream(mix64(self.seed ^ key))

    def raw(self, n: int) -> np.ndarray:
        """Next ``n`` 64-bit outputs as uint64."""
        k = np.arange(self.counter + 1, self.counter + 1 + n, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            z = np.uint64(self.seed) + k * np.uint64(_GOLDEN)
            return _mix64_array(z)

    def uniform(self, n=None, low=0.0, high=1.0):
        """Uniform floats in [low, high); a scalar when ``n`` is None."""
        count = 1 if n is None else int(n)
        u = (self.raw(count) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        out = low + (high - low) * u
        return float(out[0]) if n is None else out

    def integers(self, high: int, n=None):
        """Integers in [0, high)."""
        if high < 1:
            raise ValueError("high must be >= 1")
        u = self.uniform(1 if n is None else n)
        out = np.minimum(np.floor(u * high).astype(np.int64), high - 1)
        return int(out[0]) if n is None else out

    def normal(self, shape) -> np.ndarray:
        """Standard normals via Box-Muller."""
        size = int(np.prod(shape))
        u = self.uniform(2 * size)
        u1 = 1.0 - u[:size]  # (0, 1]
        u2 = u[size:]
        z = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)
        return z.reshape(shape)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform(n), kind="stable")

    def choice(self, n: int, k: int, replace: bool = False) -> np.ndarray:
        if replace:
            return self.integers(n, k)
        if k > n:
            raise ValueError("cannot draw more than n items without replacement")
        return self.permutation(n)[:k]


# ---------------------------------------------------------------------------
# normalization


def l2_normalize(v) -> np.ndarray:
    """Row-wise unit vectors; rows with norm < 1e-12 map to zero."""
    v = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    safe = np.where(norm < NORM_FLOOR, 1.0, norm)
    return np.where(norm < NORM_FLOOR, 0.0, v / safe)


def l2_normalize_backward(v, grad) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    safe = np.where(norm < NORM_FLOOR, 1.0, norm)
    y = v / safe
    dv = (grad - y * np.sum(grad * y, axis=-1, keepdims=True)) / safe
    return np.where(norm < NORM_FLOOR, 0.0, dv)


# ---------------------------------------------------------------------------
# distances


def cross_distance(A, B, metric="euclidean") -> np.ndarray:
    """Distances between rows of ``A`` (m x d) and rows of ``B`` (n x d)."""
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if metric == "euclidean":
        diff = A[:, None, :] - B[None, :, :]
        sq = np.sum(diff * diff, axis=-1)
        return np.sqrt(np.maximum(sq, DIST_FLOOR))
    if metric == "cosine":
        return 1.0 - l2_normalize(A) @ l2_normalize(B).T
    raise ValueError(f"unknown metric {metric!r}")


def pairwise_distance(X, metric="euclidean") -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 1:
        raise ValueError("pairwise_distance expects a non-empty 2-D matrix")
    D = cross_distance(X, X, metric)
    if metric == "cosine":
        D = 0.5 * (D + D.T)
    return D


def pairwise_distance_backward(X, grad, metric="euclidean") -> np.ndarray:
    """Gradient of ``sum(grad * pairwise_distance(X))`` with respect to X."""
    X = np.asarray(X, dtype=np.float64)
    G = np.asarray(grad, dtype=np.float64)
    Gs = G + G.T
    if metric == "euclidean":
        diff = X[:, None, :] - X[None, :, :]
        sq = np.sum(diff * diff, axis=-1)
        live = sq > DIST_FLOOR
        D = np.sqrt(np.where(live, sq, 1.0))
        coef = np.where(live, Gs / D, 0.0)
        return np.einsum("ij,ijk->ik", coef, diff)
    if metric == "cosine":
        # D = 1 - Xn Xn^T (symmetrized), so dXn = -(G + G^T) Xn
        dXn = -Gs @ l2_normalize(X)
        return l2_normalize_backward(X, dXn)
    raise ValueError(f"unknown metric {metric!r}")


# ---------------------------------------------------------------------------
# softmax


def softmax(v, axis=-1) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    z = v - np.max(v, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax_backward(y, grad, axis=-1) -> np.ndarray:
    """Backward through softmax given its output ``y``."""
    return y * (grad - np.sum(grad * y, axis=axis, keepdims=True))


def log_softmax(v, axis=-1) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    z = v - np.max(v, axis=axis, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))


# ---------------------------------------------------------------------------
# batch norm


@dataclass(frozen=True)
class BNState:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def identity(cls, d: int, momentum=0.1, eps=1e-5) -> "BNState":
        return cls(np.ones(d), np.zeros(d), np.zeros(d), np.ones(d), momentum, eps)


@dataclass
class BNCache:
    xhat: np.ndarray
    inv_std: np.ndarray
    gamma: np.ndarray
    mode: str


def batch_norm(X, state: BNState, mode="train"):
    """Per-column batch normalization.

    Returns ``(Y, new_state, cache)``.  In train mode the batch statistics
    normalize the input and the running statistics move by ``momentum``
    (the running variance uses the unbiased estimate).  Infer mode uses the
    running statistics and returns ``state`` unchanged.
    """
    X = np.asarray(X, dtype=np.float64)
    if mode == "train":
        n = X.shape[0]
        if n < 2:
            raise NumericError("batch_norm in train mode needs at least 2 rows")
        mean = X.mean(axis=0)
        var = X.var(axis=0)
        inv_std = 1.0 / np.sqrt(var + state.eps)
        xhat = (X - mean) * inv_std
        m = state.momentum
        new_state = replace(
            state,
            running_mean=(1 - m) * state.running_mean + m * mean,
            running_var=(1 - m) * state.running_var + m * var * n / (n - 1),
        )
    elif mode == "infer":
        inv_std = 1.0 / np.sqrt(state.running_var + state.eps)
        xhat = (X - state.running_mean) * inv_std
        new_state = state
    else:
        raise ValueError(f"unknown batch_norm mode {mode!r}")
    Y = state.gamma * xhat + state.beta
    return Y, new_state, BNCache(xhat, inv_std, state.gamma, mode)


def batch_norm_backward(cache: BNCache, grad):
    """Returns ``(dX, dgamma, dbeta)``."""
    grad = np.asarray(grad, dtype=np.float64)
    dbeta = grad.sum(axis=0)
    dgamma = np.sum(grad * cache.xhat, axis=0)
    dxhat = grad * cache.gamma
    if cache.mode == "infer":
        return dxhat * cache.inv_std, dgamma, dbeta
    n = grad.shape[0]
    dX = (cache.inv_std / n) * (
        n * dxhat - dxhat.sum(axis=0) - cache.xhat * np.sum(dxhat * cache.xhat, axis=0)
    )
    return dX, dgamma, dbeta


# ---------------------------------------------------------------------------
# finite differences


def relative_error(a, b, floor=1e-8) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def numeric_gradient(f, x: np.ndarray, step=1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x`` (x is restored)."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f()
        flat[i] = orig - step
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * step)
    return grad

"""Hot numeric kernels with a numba fast path and a pure-numpy fallback.

The active path is chosen once at import from the ``UNISEP_NUMBA`` env var
("0"/"off"/"false" forces numpy; anything else, or unset, uses numba when it
imports cleanly). `set_backend` flips it at runtime for tests and benchmarks.
Both paths are deterministic: no fastmath, no parallel reductions, so a fixed
seed reproduces bit-identical training runs on one platform either way.

Kernels here are the non-BLAS inner loops that dominate profile time outside
matrix multiplies: RVQ nearest-code search, masked softmax (forward and
backward), layer norm (forward and backward), and row scatter-add (embedding
gradients and codebook accumulation).
"""

from __future__ import annotations

import os

import numpy as np

try:
    import numba

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only on stripped installs
    numba = None
    _HAVE_NUMBA = False


def _env_wants_numba() -> bool:
    val = os.environ.get("UNISEP_NUMBA", "1").strip().lower()
    return val not in ("0", "off", "false", "no")


_BACKEND = "numba" if (_HAVE_NUMBA and _env_wants_numba()) else "numpy"


def backend() -> str:
    """Active kernel backend, "numba" or "numpy"."""
    return _BACKEND


def numba_available() -> bool:
    return _HAVE_NUMBA


def set_backend(name: str) -> None:
    global _BACKEND
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown kernel backend {name!r}")
    if name == "numba" and not _HAVE_NUMBA:
        raise RuntimeError("numba backend requested but numba is not importable")
    _BACKEND = name


# ---------------------------------------------------------------------------
# numpy reference implementations

def _nearest_code_np(vectors, codebook):
    # (T,1,L)-(K,L) materializes T*K*L floats; fine at codec batch sizes
    diff = vectors[:, None, :] - codebook[None, :, :]
    dist = np.einsum("tkl,tkl->tk", diff, diff)
    return np.argmin(dist, axis=1).astype(np.int64)


def _masked_softmax_np(scores, mask):
    neg = np.float64(-np.inf) if scores.dtype == np.float64 else np.float32(-np.inf)
    masked = np.where(mask[None, :, :], scores, neg)
    m = masked.max(axis=-1, keepdims=True)
    e = np.exp(masked - m)
    e = np.where(mask[None, :, :], e, 0.0)
    return (e / e.sum(axis=-1, keepdims=True)).astype(scores.dtype)


def _masked_softmax_grad_np(probs, dprobs, mask):
    inner = np.sum(probs * dprobs, axis=-1, keepdims=True)
    d = probs * (dprobs - inner)
    return np.where(mask[None, :, :], d, 0.0).astype(probs.dtype)


def _layer_norm_np(x, eps):
    mean = x.mean(axis=-1, keepdims=True)
    var = np.mean((x - mean) ** 2, axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    y = (x - mean) * rstd
    return y.astype(x.dtype), mean[:, 0].astype(x.dtype), rstd[:, 0].astype(x.dtype)


def _layer_norm_grad_np(dy, y, rstd):
    d = dy.shape[-1]
    s1 = dy.sum(axis=-1, keepdims=True)
    s2 = np.sum(dy * y, axis=-1, keepdims=True)
    return (rstd[:, None] * (dy - s1 / d - y * s2 / d)).astype(dy.dtype)


def _scatter_add_rows_np(out, idx, src):
    np.add.at(out, idx, src)


# ---------------------------------------------------------------------------
# numba fast paths

if _HAVE_NUMBA:
    from numba import njit

    @njit(cache=True)
    def _nearest_code_nb(vectors, codebook):
        t, length = vectors.shape
        k = codebook.shape[0]
        out = np.empty(t, dtype=np.int64)
        for i in range(t):
            best = -1
            best_d = np.inf
            for c in range(k):
                d = 0.0
                for j in range(length):
                    diff = vectors[i, j] - codebook[c, j]
                    d += diff * diff
                if d < best_d:  # strict: ties keep the lowest index
                    best_d = d
                    best = c
            out[i] = best
        return out

    @njit(cache=True)
    def _masked_softmax_nb(scores, mask):
        b, r, c = scores.shape
        out = np.empty_like(scores)
        for bi in range(b):
            for ri in range(r):
                m = -np.inf
                for ci in range(c):
                    if mask[ri, ci] and scores[bi, ri, ci] > m:
                        m = scores[bi, ri, ci]
                s = 0.0
                for ci in range(c):
                    if mask[ri, ci]:
                        e = np.exp(scores[bi, ri, ci] - m)
                        out[bi, ri, ci] = e
                        s += e
                    else:
                        out[bi, ri, ci] = 0.0
                inv = 1.0 / s
                for ci in range(c):
                    out[bi, ri, ci] *= inv
        return out

    @njit(cache=True)
    def _masked_softmax_grad_nb(probs, dprobs, mask):
        b, r, c = probs.shape
        out = np.empty_like(probs)
        for bi in range(b):
            for ri in range(r):
                inner = 0.0
                for ci in range(c):
                    inner += probs[bi, ri, ci] * dprobs[bi, ri, ci]
                for ci in range(c):
                    if mask[ri, ci]:
                        out[bi, ri, ci] = probs[bi, ri, ci] * (dprobs[bi, ri, ci] - inner)
                    else:
                        out[bi, ri, ci] = 0.0
        return out

    @njit(cache=True)
    def _layer_norm_nb(x, eps):
        n, d = x.shape
        y = np.empty_like(x)
        means = np.empty(n, dtype=x.dtype)
        rstds = np.empty(n, dtype=x.dtype)
        for i in range(n):
            s = 0.0
            for j in range(d):
                s += x[i, j]
            mean = s / d
            v = 0.0
            for j in range(d):
                diff = x[i, j] - mean
                v += diff * diff
            rstd = 1.0 / np.sqrt(v / d + eps)
            for j in range(d):
                y[i, j] = (x[i, j] - mean) * rstd
            means[i] = mean
            rstds[i] = rstd
        return y, means, rstds

    @njit(cache=True)
    def _layer_norm_grad_nb(dy, y, rstd):
        n, d = dy.shape
        dx = np.empty_like(dy)
        for i in range(n):
            s1 = 0.0
            s2 = 0.0
            for j in range(d):
                s1 += dy[i, j]
                s2 += dy[i, j] * y[i, j]
            s1 /= d
            s2 /= d
            for j in range(d):
                dx[i, j] = rstd[i] * (dy[i, j] - s1 - y[i, j] * s2)
        return dx

    @njit(cache=True)
    def _scatter_add_rows_nb(out, idx, src):
        n, d = src.shape
        for i in range(n):
            row = idx[i]
            for j in range(d):
                out[row, j] += src[i, j]


# ---------------------------------------------------------------------------
# dispatchers

def nearest_code(vectors: np.ndarray, codebook: np.ndarray) -> np.ndarray:
    """Index of the nearest codebook row (squared Euclidean) per vector.

    Ties break to the lowest index. vectors (T, L), codebook (K, L) -> (T,).
    """
    if _BACKEND == "numba":
        return _nearest_code_nb(np.ascontiguousarray(vectors), np.ascontiguousarray(codebook))
    return _nearest_code_np(vectors, codebook)


def masked_softmax(scores: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Row softmax of (B, R, C) scores restricted to mask (R, C) True entries.

    Masked-out columns get probability 0; every row must have at least one
    allowed column.
    """
    if _BACKEND == "numba":
        return _masked_softmax_nb(np.ascontiguousarray(scores), np.ascontiguousarray(mask))
    return _masked_softmax_np(scores, mask)


def masked_softmax_grad(probs: np.ndarray, dprobs: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Backward of `masked_softmax`: d(scores) from d(probs)."""
    if _BACKEND == "numba":
        return _masked_softmax_grad_nb(
            np.ascontiguousarray(probs), np.ascontiguousarray(dprobs), np.ascontiguousarray(mask)
        )
    return _masked_softmax_grad_np(probs, dprobs, mask)


def layer_norm(x: np.ndarray, eps: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-row normalization of (N, D) to zero mean, unit variance.

    Returns (y, mean, rstd); mean/rstd are saved for the backward pass.
    """
    if _BACKEND == "numba":
        return _layer_norm_nb(np.ascontiguousarray(x), eps)
    return _layer_norm_np(x, eps)


def layer_norm_grad(dy: np.ndarray, y: np.ndarray, rstd: np.ndarray) -> np.ndarray:
    """Backward of `layer_norm` w.r.t. its input (pre-affine)."""
    if _BACKEND == "numba":
        return _layer_norm_grad_nb(
            np.ascontiguousarray(dy), np.ascontiguousarray(y), np.ascontiguousarray(rstd)
        )
    return _layer_norm_grad_np(dy, y, rstd)


def scatter_add_rows(out: np.ndarray, idx: np.ndarray, src: np.ndarray) -> None:
    """out[idx[i]] += src[i] for each row i, in order (deterministic)."""
    if _BACKEND == "numba":
        _scatter_add_rows_nb(out, np.ascontiguousarray(idx.astype(np.int64)), np.ascontiguousarray(src))
    else:
        _scatter_add_rows_np(out, idx, src)

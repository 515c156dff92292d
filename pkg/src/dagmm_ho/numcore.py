"""Dense numeric foundation: symmetric eigendecomposition, Cholesky
factorization, seeded k-means, reproducible RNG streams, and a central
finite-difference gradient used as a test oracle.

Every function here is a pure function of its inputs.  Random state is
always derived from an explicit unsigned 64-bit seed through numpy's PCG64
bit generator, so identical seeds give identical results on every run of
the same build.  Ties (nearest centroid, argmin) always resolve to the
lowest index.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import (
    DimensionError,
    NotPositiveDefiniteError,
    NumericError,
    ParameterError,
)

_SEED_MAX = 2**64


def make_rng(seed: int) -> np.random.Generator:
    """Return a PCG64-backed generator for an unsigned 64-bit seed."""
    if not (0 <= int(seed) < _SEED_MAX):
        raise ParameterError(f"seed must be an unsigned 64-bit integer, got {seed!r}")
    return np.random.Generator(np.random.PCG64(int(seed)))


def derive_seed(seed: int, *key: int) -> int:
    """Deterministically derive a child seed from a master seed and a key.

    Used wherever independent sub-streams are needed (k-means restarts,
    reference draws, per-layer init) so results do not depend on the order
    in which sub-tasks run.
    """
    if not (0 <= int(seed) < _SEED_MAX):
        raise ParameterError(f"seed must be an unsigned 64-bit integer, got {seed!r}")
    ss = np.random.SeedSequence([int(seed)] + [int(k) for k in key])
    return int(ss.generate_state(2, dtype=np.uint32).view(np.uint64)[0])


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Validate and convert input to a finite float64 2-D array."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NumericError(f"{name} contains non-finite values")
    return m


def eigendecompose_symmetric(a) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecompose a symmetric matrix.

    Returns eigenvalues sorted descending and the matching orthonormal
    eigenvectors as columns.  The input is symmetrized as (A + A^T)/2
    before factorization; inputs asymmetric beyond 1e-9 (relative to the
    largest entry) are rejected.
    """
    m = as_matrix(a)
    if m.shape[0] != m.shape[1]:
        raise DimensionError(f"expected a square matrix, got shape {m.shape}")
    scale = max(1.0, float(np.abs(m).max()))
    if float(np.abs(m - m.T).max()) > 1e-9 * scale:
        raise ParameterError("matrix is not symmetric within tolerance 1e-9")
    sym = (m + m.T) / 2.0
    try:
        w, v = np.linalg.eigh(sym)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - LAPACK failure
        raise NumericError(f"eigendecomposition failed to converge: {exc}") from exc
    order = np.argsort(w)[::-1]
    return w[order], v[:, order]


def cholesky(a) -> np.ndarray:
    """Lower-triangular Cholesky factor L with L L^T = A.

    Raises NotPositiveDefiniteError when A is not positive definite;
    callers that can tolerate near-singular input add jitter and retry.
    """
    m = as_matrix(a)
    if m.shape[0] != m.shape[1]:
        raise DimensionError(f"expected a square matrix, got shape {m.shape}")
    try:
        return np.linalg.cholesky((m + m.T) / 2.0)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefiniteError(
            f"matrix of shape {m.shape} is not positive definite"
        ) from exc


@dataclass(frozen=True)
class KMeansResult:
    """Best clustering found: k x d centroids, per-row labels, inertia."""

    centroids: np.ndarray
    assignment: np.ndarray
    inertia: float


def _squared_distances(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    # Broadcast rather than expand the quadratic form: exact zeros for
    # coincident points, which the k = n_rows contract relies on.
    return np.square(x[:, None, :] - centers[None, :, :]).sum(axis=2)


def _kmeans_pp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    d2 = np.square(x - centers[0]).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            idx = int(rng.integers(n))  # remaining points all coincide
        else:
            r = rng.random() * total
            idx = min(int(np.searchsorted(np.cumsum(d2), r, side="right")), n - 1)
        centers[j] = x[idx]
        d2 = np.minimum(d2, np.square(x - centers[j]).sum(axis=1))
    return centers


def _lloyd(
    x: np.ndarray, centers: np.ndarray, max_iter: int, tol: float
) -> tuple[np.ndarray, np.ndarray, float]:
    k = centers.shape[0]
    assignment = np.zeros(x.shape[0], dtype=np.intp)
    for _ in range(max_iter):
        d2 = _squared_distances(x, centers)
        assignment = d2.argmin(axis=1)
        new_centers = centers.copy()  # empty clusters keep their centroid
        for j in range(k):
            members = assignment == j
            if members.any():
                new_centers[j] = x[members].mean(axis=0)
        shift = float(np.sqrt(np.square(new_centers - centers).sum(axis=1)).max())
        centers = new_centers
        if shift < tol:
            break
    d2 = _squared_distances(x, centers)
    assignment = d2.argmin(axis=1)
    inertia = float(d2[np.arange(x.shape[0]), assignment].sum())
    return centers, assignment, inertia


def kmeans(
    data,
    k: int,
    seed: int,
    restarts: int = 10,
    max_iter: int = 100,
    tol: float = 1e-6,
) -> KMeansResult:
    """Lloyd's k-means with k-means++ initialization.

    Runs `restarts` independent seeded initializations and keeps the
    lowest-inertia result.  Deterministic given (data, k, seed, restarts).
    """
    x = as_matrix(data, "data")
    if k < 1:
        raise ParameterError(f"k must be >= 1, got {k}")
    if k > x.shape[0]:
        raise ParameterError(f"k={k} exceeds number of rows {x.shape[0]}")
    if restarts < 1:
        raise ParameterError(f"restarts must be >= 1, got {restarts}")
    best: KMeansResult | None = None
    for r in range(restarts):
        rng = make_rng(derive_seed(seed, 0x6B6D, r))
        centers = _kmeans_pp_init(x, k, rng)
        centers, assignment, inertia = _lloyd(x, centers, max_iter, tol)
        if best is None or inertia < best.inertia:
            best = KMeansResult(centers, assignment, inertia)
    assert best is not None
    return best


def finite_difference_gradient(
    f: Callable[[np.ndarray], float], at: Sequence[float], step: float = 1e-5
) -> np.ndarray:
    """Central-difference gradient of a scalar function.

    Component i is (f(p + step*e_i) - f(p - step*e_i)) / (2*step).  Serves
    as the independent oracle for analytic gradients; it never shares code
    with the paths it checks.
    """
    p = np.asarray(at, dtype=np.float64)
    if step <= 0.0:
        raise ParameterError(f"step must be positive, got {step}")
    grad = np.empty(p.size, dtype=np.float64)
    flat = p.ravel()
    for i in range(flat.size):
        bump = np.zeros_like(flat)
        bump[i] = step
        hi = float(f((flat + bump).reshape(p.shape)))
        lo = float(f((flat - bump).reshape(p.shape)))
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise NumericError(f"objective non-finite near component {i}")
        grad[i] = (hi - lo) / (2.0 * step)
    return grad.reshape(p.shape)

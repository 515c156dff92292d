"""Metric harness and the baseline detectors the energy model is compared
against: plain autoencoder reconstruction error, an EM-trained diagonal
GMM, and the two-step reduce-then-model variants (PCA+GMM, AE+GMM).

Scores are always oriented so that higher means more anomalous.  AUC uses
the rank-based Mann-Whitney form with ties counting one half, which the
tests pin against literal pair enumeration.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import dagmm
from .errors import DataError, DimensionError, ParameterError
from .numcore import derive_seed, eigendecompose_symmetric, kmeans, make_rng

_LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class LabeledScores:
    """Anomaly scores (higher = more anomalous) with boolean truth labels."""

    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.scores, dtype=np.float64)
        l = np.asarray(self.labels, dtype=bool)
        if s.ndim != 1 or l.shape != s.shape:
            raise DimensionError("scores and labels must be matching 1-D arrays")
        if not np.all(np.isfinite(s)):
            raise DataError("scores contain non-finite values")
        object.__setattr__(self, "scores", s)
        object.__setattr__(self, "labels", l)


@dataclass(frozen=True)
class MetricsReport:
    auc: float
    precision: float
    recall: float
    f1: float
    threshold: float
    tp: int
    fp: int
    tn: int
    fn: int


def auc(scores: LabeledScores) -> float:
    """Ranking quality of the scores: P(anomaly score > normal score),
    ties counting 1/2 (Mann-Whitney / average ranks)."""
    pos = scores.labels.sum()
    neg = scores.labels.size - pos
    if pos == 0 or neg == 0:
        raise DataError("AUC needs both an anomalous and a normal example")
    order = np.argsort(scores.scores, kind="mergesort")
    sorted_scores = scores.scores[order]
    ranks = np.empty(scores.scores.size, dtype=np.float64)
    i = 0
    while i < sorted_scores.size:
        j = i
        while j + 1 < sorted_scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0  # average 1-based rank
        i = j + 1
    rank_sum = ranks[scores.labels].sum()
    return float((rank_sum - pos * (pos + 1) / 2.0) / (pos * neg))


def classification_metrics(scores: LabeledScores, threshold: float) -> MetricsReport:
    """Confusion-matrix metrics predicting anomaly when score > threshold.

    Zero-denominator cases (no predictions, no positives) report 0.
    """
    pred = scores.scores > threshold
    tp = int(np.sum(pred & scores.labels))
    fp = int(np.sum(pred & ~scores.labels))
    fn = int(np.sum(~pred & scores.labels))
    tn = int(np.sum(~pred & ~scores.labels))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2.0 * precision * recall / (precision + recall) if precision + recall else 0.0
    try:
        area = auc(scores)
    except DataError:
        area = float("nan")
    return MetricsReport(area, precision, recall, f1, float(threshold), tp, fp, tn, fn)


def best_f1_threshold(scores: LabeledScores) -> MetricsReport:
    """Metrics at the score threshold that maximizes F1.

    Candidate thresholds are just below each distinct score (so that score
    is predicted anomalous); ties on F1 resolve to the lowest threshold.
    Applied uniformly to every method so the comparison stays internally
    fair.
    """
    uniq = np.unique(scores.scores)
    candidates = np.concatenate([[uniq[0] - 1.0], (uniq[:-1] + uniq[1:]) / 2.0])
    best = None
    for t in candidates:
        report = classification_metrics(scores, float(t))
        if best is None or report.f1 > best.f1 + 1e-15:
            best = report
    return best


def split_protocol(labels, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Test-set protocol: all anomalous segments plus an equal-sized seeded
    sample of normal segments form the test set; the remaining normal
    segments train.  Returns (train_indices, test_indices)."""
    lab = np.asarray(labels, dtype=bool)
    anom = np.flatnonzero(lab)
    norm = np.flatnonzero(~lab)
    if anom.size == 0:
        raise DataError("no anomalous segments in manifest")
    if norm.size <= anom.size:
        raise DataError(
            f"need more than {anom.size} normal segments to match the anomaly count, got {norm.size}"
        )
    rng = make_rng(derive_seed(seed, 0x5917))
    picked = np.sort(rng.choice(norm, size=anom.size, replace=False))
    test = np.sort(np.concatenate([anom, picked]))
    train = np.setdiff1d(norm, picked)
    return train, test


# ---------------------------------------------------------------------------
# baselines


def da_baseline(train_frames, test_frames, arch: dagmm.NetworkArchitecture,
                cfg: dagmm.TrainConfig) -> np.ndarray:
    """Deep-autoencoder baseline: train with lambda1 = lambda2 = 0 (pure
    reconstruction) and score by per-sample squared reconstruction error."""
    pure = replace(cfg, lambda1=0.0, lambda2=0.0)
    model = dagmm.train(train_frames, arch, pure)
    x = np.asarray(test_frames, dtype=np.float64)
    x_prime = dagmm.decode(dagmm.encode(x, model.params), model.params)
    return np.square(x - x_prime).sum(axis=1)


class DiagonalGmm:
    """Gaussian mixture with diagonal covariances trained by EM.

    k-means initialization, variance floor 1e-6, stops when the mean
    log-likelihood gain drops below 1e-7 or after 500 iterations.  The
    per-iteration mean log-likelihood trace is kept for the monotonicity
    checks.  A component whose responsibility mass empties out is
    re-initialized from the point the current mixture likes least.
    """

    def __init__(self, n_components: int, seed: int = 0, var_floor: float = 1e-6,
                 tol: float = 1e-7, max_iter: int = 500):
        if n_components < 1:
            raise ParameterError("n_components must be >= 1")
        self.n_components = n_components
        self.seed = seed
        self.var_floor = var_floor
        self.tol = tol
        self.max_iter = max_iter
        self.weights: np.ndarray | None = None
        self.means: np.ndarray | None = None
        self.variances: np.ndarray | None = None
        self.log_likelihood_trace: list[float] = []

    def _log_densities(self, x):
        # (n, K) log of weight_k * N(x | mean_k, diag var_k)
        n, d = x.shape
        out = np.empty((n, self.n_components))
        log_w = np.log(self.weights)
        for k in range(self.n_components):
            var = self.variances[k]
            quad = np.square(x - self.means[k]) / var
            out[:, k] = log_w[k] - 0.5 * (quad.sum(axis=1) + np.log(var).sum() + d * _LOG_2PI)
        return out

    @staticmethod
    def _logsumexp(ll):
        m = ll.max(axis=1, keepdims=True)
        return m[:, 0] + np.log(np.exp(ll - m).sum(axis=1))

    def fit(self, x) -> "DiagonalGmm":
        data = np.asarray(x, dtype=np.float64)
        if data.ndim != 2 or data.shape[0] < self.n_components:
            raise ParameterError("need a 2-D matrix with at least n_components rows")
        n, d = data.shape
        km = kmeans(data, self.n_components, derive_seed(self.seed, 0xE11), restarts=5)
        global_var = np.maximum(data.var(axis=0), self.var_floor)
        self.weights = np.full(self.n_components, 1.0 / self.n_components)
        self.means = km.centroids.copy()
        self.variances = np.tile(global_var, (self.n_components, 1))
        for k in range(self.n_components):
            members = data[km.assignment == k]
            if members.shape[0] > 0:
                self.weights[k] = members.shape[0] / n
                self.means[k] = members.mean(axis=0)
                self.variances[k] = np.maximum(members.var(axis=0), self.var_floor)
        self.weights /= self.weights.sum()

        self.log_likelihood_trace = []
        prev_ll = -np.inf
        for _ in range(self.max_iter):
            ld = self._log_densities(data)
            norm = self._logsumexp(ld)
            ll = float(norm.mean())
            self.log_likelihood_trace.append(ll)
            resp = np.exp(ld - norm[:, None])
            counts = resp.sum(axis=0)
            empty = counts < 1e-12
            if empty.any():
                worst = int(np.argmin(norm))
                for k in np.flatnonzero(empty):
                    self.means[k] = data[worst]
                    self.variances[k] = global_var.copy()
                    counts[k] = 1.0
                self.weights = counts / counts.sum()
                prev_ll = -np.inf  # restart convergence tracking after rescue
                continue
            self.weights = counts / n
            self.means = (resp.T @ data) / counts[:, None]
            for k in range(self.n_components):
                sq = np.square(data - self.means[k])
                self.variances[k] = np.maximum((resp[:, k] @ sq) / counts[k], self.var_floor)
            if ll - prev_ll < self.tol and np.isfinite(prev_ll):
                break
            prev_ll = ll
        return self

    def score_samples(self, x) -> np.ndarray:
        """Per-sample negative log-likelihood (higher = more anomalous)."""
        if self.weights is None:
            raise ParameterError("fit before scoring")
        data = np.asarray(x, dtype=np.float64)
        if data.ndim != 2 or data.shape[1] != self.means.shape[1]:
            raise DimensionError("test data dimension mismatch")
        return -self._logsumexp(self._log_densities(data))


def gmm_em_baseline(train_frames, test_frames, n_components: int, seed: int = 0) -> np.ndarray:
    """Diagonal-covariance GMM baseline scored by negative log-likelihood."""
    model = DiagonalGmm(n_components, seed=seed).fit(train_frames)
    return model.score_samples(test_frames)


class PcaReducer:
    """Linear projection onto the top-c principal axes of the training data."""

    def __init__(self, c: int):
        self.c = c
        self.mean: np.ndarray | None = None
        self.components: np.ndarray | None = None

    def fit(self, x) -> "PcaReducer":
        data = np.asarray(x, dtype=np.float64)
        if not (1 <= self.c <= data.shape[1]):
            raise ParameterError(f"need 1 <= c <= {data.shape[1]}, got {self.c}")
        self.mean = data.mean(axis=0)
        centered = data - self.mean
        cov = centered.T @ centered / data.shape[0]
        _, vecs = eigendecompose_symmetric(cov)
        self.components = vecs[:, : self.c]
        return self

    def transform(self, x) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) @ self.components


def two_step_baseline(
    reducer: str,
    detector: str,
    train_frames,
    test_frames,
    c: int,
    n_components: int,
    cfg: dagmm.TrainConfig,
) -> np.ndarray:
    """Reduce dimensionality on training data only, then run the density
    baseline in the reduced space.  reducer is "pca" or "autoencoder";
    detector is "gmm_em"."""
    if detector != "gmm_em":
        raise ParameterError(f"unknown detector {detector!r}")
    train_x = np.asarray(train_frames, dtype=np.float64)
    test_x = np.asarray(test_frames, dtype=np.float64)
    if not (1 <= c < train_x.shape[1]):
        raise ParameterError(f"need 1 <= c < {train_x.shape[1]}, got {c}")
    if reducer == "pca":
        red = PcaReducer(c).fit(train_x)
        z_train, z_test = red.transform(train_x), red.transform(test_x)
    elif reducer == "autoencoder":
        arch = dagmm.NetworkArchitecture.default(train_x.shape[1], c, max(n_components, 1))
        pure = replace(cfg, lambda1=0.0, lambda2=0.0)
        model = dagmm.train(train_x, arch, pure)
        z_train = dagmm.encode(train_x, model.params)
        z_test = dagmm.encode(test_x, model.params)
    else:
        raise ParameterError(f"unknown reducer {reducer!r}")
    return gmm_em_baseline(z_train, z_test, n_components, seed=derive_seed(cfg.seed, 0x25))

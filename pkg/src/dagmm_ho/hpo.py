"""Automatic hyper-parameter selection: the mixture size K from a gap
statistic curve and the bottleneck dimension c from the cumulative PCA
variance-ratio curve, both read off with the same bending-point detector.

The gap statistic compares the log within-cluster dispersion of the data
against its expectation under B uniform reference draws over the data's
bounding box; a sharp bend in G(k) marks the smallest k that already
explains the cluster structure.  The bending-point detector min-max
normalizes the curve, forms the difference y_n - x_n, finds its strict
local maxima, and confirms the first maximum whose difference curve later
drops below (maximum - mean normalized x-spacing) before the next
maximum.  Curves with no confirmed maximum yield a no-knee result and the
selectors fall back (K -> k_min, c -> 95% cumulative variance).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DataError, DimensionError, ParameterError
from .numcore import as_matrix, derive_seed, eigendecompose_symmetric, kmeans, make_rng


@dataclass(frozen=True)
class Curve:
    """Ordered (x, y) points; x strictly increasing, at least 3 points."""

    xs: np.ndarray
    ys: np.ndarray
    kind: str = "gap"

    def __post_init__(self):
        xs = np.asarray(self.xs, dtype=np.float64)
        ys = np.asarray(self.ys, dtype=np.float64)
        if xs.ndim != 1 or ys.ndim != 1 or xs.size != ys.size:
            raise DimensionError("curve needs matching 1-D x and y arrays")
        if xs.size < 3:
            raise ParameterError("bending-point detection needs at least 3 points")
        if not np.all(np.diff(xs) > 0):
            raise ParameterError("curve x values must be strictly increasing")
        if not (np.all(np.isfinite(xs)) and np.all(np.isfinite(ys))):
            raise DataError("curve contains non-finite values")
        object.__setattr__(self, "xs", xs)
        object.__setattr__(self, "ys", ys)

    def __len__(self) -> int:
        return int(self.xs.size)


@dataclass(frozen=True)
class GapConfig:
    """Gap-statistic settings: k range, reference draws B, master seed.

    `sample_size` defaults to the data's row count; `kmeans_restarts`
    bounds the clustering effort per (dataset, k) pair.  `noise_guard`
    controls when a gap curve counts as structureless: if its total range
    stays within noise_guard times the median Monte-Carlo standard error
    of the reference term, the selector skips knee detection and falls
    back to k_min (min-max normalization would otherwise blow pure noise
    up to full scale and confirm an arbitrary knee).
    """

    k_min: int = 1
    k_max: int = 10
    reference_draws: int = 10
    sample_size: int | None = None
    seed: int = 0
    kmeans_restarts: int = 5
    noise_guard: float = 5.0

    def __post_init__(self):
        if not (1 <= self.k_min < self.k_max):
            raise ParameterError(f"need 1 <= k_min < k_max, got {self.k_min}, {self.k_max}")
        if self.reference_draws < 1:
            raise ParameterError("reference_draws must be >= 1")
        if self.kmeans_restarts < 1:
            raise ParameterError("kmeans_restarts must be >= 1")
        if self.noise_guard < 0.0:
            raise ParameterError("noise_guard must be nonnegative")


@dataclass(frozen=True)
class BendingPointResult:
    """Everything the detector saw: normalized curve, difference curve,
    local maxima with their thresholds, and the selected x* (None when no
    maximum was confirmed)."""

    x_star: float | None
    x_norm: np.ndarray
    y_norm: np.ndarray
    x_diff: np.ndarray
    y_diff: np.ndarray
    maxima_x: np.ndarray
    maxima_y: np.ndarray
    thresholds: np.ndarray

    @property
    def found(self) -> bool:
        return self.x_star is not None


def dispersion(data, assignment, k: int) -> float:
    """Within-cluster dispersion: sum over clusters of the mean pairwise
    squared distance, i.e. sum_k (1/(2 n_k)) sum_{i,j in C_k} ||x_i-x_j||^2.

    Evaluated through the algebraic identity
    sum_{i,j in C_k} ||x_i - x_j||^2 = 2 n_k sum_{i in C_k} ||x_i - mean_k||^2,
    so it equals the k-means inertia of the assignment; the tests pin this
    against the direct double sum.  Empty clusters contribute 0.
    """
    x = as_matrix(data, "data")
    labels = np.asarray(assignment)
    if labels.shape != (x.shape[0],):
        raise DimensionError("assignment must have one label per row")
    if k < 1:
        raise ParameterError("k must be >= 1")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ParameterError(f"labels must lie in [0, {k})")
    total = 0.0
    for j in range(k):
        members = x[labels == j]
        if members.shape[0] == 0:
            continue
        total += float(np.square(members - members.mean(axis=0)).sum())
    return total


def _reference_draw(lo, hi, n, rng):
    return lo + rng.random((n, lo.size)) * (hi - lo)


def _gap_point(x, k: int, cfg: GapConfig) -> tuple[float, float]:
    """One gap value and the Monte-Carlo standard error of its reference term."""
    n = cfg.sample_size or x.shape[0]
    result = kmeans(x, k, derive_seed(cfg.seed, 0xDA7A, k), restarts=cfg.kmeans_restarts)
    d_obs = dispersion(x, result.assignment, k)
    if d_obs <= 0.0:
        raise DataError("zero within-cluster dispersion: all points identical?")
    lo, hi = x.min(axis=0), x.max(axis=0)
    ref_logs = np.empty(cfg.reference_draws)
    for b in range(cfg.reference_draws):
        ref = _reference_draw(lo, hi, n, make_rng(derive_seed(cfg.seed, 0x5EF, b)))
        res = kmeans(ref, k, derive_seed(cfg.seed, 0x5EF, b, k), restarts=cfg.kmeans_restarts)
        d_ref = dispersion(ref, res.assignment, k)
        if d_ref <= 0.0:
            raise DataError("degenerate reference draw")
        ref_logs[b] = np.log(d_ref)
    se = float(ref_logs.std() * np.sqrt(1.0 + 1.0 / cfg.reference_draws))
    return float(ref_logs.mean() - np.log(d_obs)), se


def gap_statistic(data, k: int, cfg: GapConfig) -> float:
    """G(k) = mean_b log D_ref^(b)(k) - log D_obs(k).

    Reference sets are uniform over the data's per-dimension bounding box
    and are seeded by (cfg.seed, draw index) only, so every k sees the same
    B reference sets; clustering seeds additionally mix in k.  Degenerate
    data with zero dispersion cannot be scored.
    """
    x = as_matrix(data, "data")
    if not (cfg.k_min <= k <= cfg.k_max):
        raise ParameterError(f"k={k} outside [{cfg.k_min}, {cfg.k_max}]")
    if x.shape[0] < k:
        raise ParameterError(f"k={k} exceeds number of rows {x.shape[0]}")
    return _gap_point(x, k, cfg)[0]


def gap_curve(data, cfg: GapConfig) -> Curve:
    """Gap statistic over k in [k_min, k_max] as a Curve."""
    return gap_curve_detailed(data, cfg)[0]


def gap_curve_detailed(data, cfg: GapConfig) -> tuple[Curve, np.ndarray]:
    """Gap curve plus the per-k Monte-Carlo standard errors."""
    x = as_matrix(data, "data")
    if x.shape[0] < cfg.k_max:
        raise ParameterError(f"need at least k_max={cfg.k_max} rows, got {x.shape[0]}")
    ks = np.arange(cfg.k_min, cfg.k_max + 1)
    points = [_gap_point(x, int(k), cfg) for k in ks]
    gs = np.array([p[0] for p in points])
    ses = np.array([p[1] for p in points])
    return Curve(ks.astype(np.float64), gs, kind="gap"), ses


def _minmax(values):
    lo, hi = float(values.min()), float(values.max())
    if hi - lo <= 0.0:
        return np.zeros_like(values)
    return (values - lo) / (hi - lo)


def bending_point(curve: Curve) -> BendingPointResult:
    """Locate the curve's bending point (point of maximum change).

    Steps: min-max normalize x and y; form the difference curve
    y_d = y_n - x_n; collect strict local maxima of y_d; give each maximum
    the threshold (its height - mean normalized x-spacing); scanning left
    to right, the first maximum whose difference curve drops below its
    threshold before the next maximum is the bending point, mapped back to
    the original abscissa.  No confirmed maximum means no knee.
    """
    m = len(curve)
    x_n = _minmax(curve.xs)
    y_n = _minmax(curve.ys)
    y_d = y_n - x_n

    maxima = [i for i in range(1, m - 1) if y_d[i] > y_d[i - 1] and y_d[i] > y_d[i + 1]]
    spacing = float(np.diff(x_n).sum()) / (m - 1)
    thresholds = np.array([y_d[i] - spacing for i in maxima])

    x_star = None
    for pos, i in enumerate(maxima):
        stop = maxima[pos + 1] if pos + 1 < len(maxima) else m
        if np.any(y_d[i + 1 : stop] < thresholds[pos]):
            x_star = float(curve.xs[i])
            break
    return BendingPointResult(
        x_star,
        x_n,
        y_n,
        x_n.copy(),
        y_d,
        np.array([curve.xs[i] for i in maxima]),
        np.array([y_d[i] for i in maxima]),
        thresholds,
    )


def _round_half_up(value: float) -> int:
    return int(np.floor(value + 0.5))


@dataclass(frozen=True)
class SelectionResult:
    """A selector's choice plus everything needed to report it."""

    value: int
    curve: Curve
    bend: BendingPointResult
    fallback: bool


def select_k_detailed(data, cfg: GapConfig) -> SelectionResult:
    x = as_matrix(data, "data")
    if x.shape[0] < cfg.k_max:
        raise ParameterError(f"need at least k_max={cfg.k_max} rows, got {x.shape[0]}")
    curve, ses = gap_curve_detailed(x, cfg)
    spread = float(curve.ys.max() - curve.ys.min())
    if spread <= cfg.noise_guard * float(np.median(ses)):
        # no pronounced change anywhere: the whole curve sits inside the
        # Monte-Carlo noise band, so a detected knee would be noise
        bend = bending_point(curve)
        return SelectionResult(cfg.k_min, curve, replace(bend, x_star=None), True)
    bend = bending_point(curve)
    if bend.found:
        k = min(max(_round_half_up(bend.x_star), cfg.k_min), cfg.k_max)
        return SelectionResult(k, curve, bend, False)
    return SelectionResult(cfg.k_min, curve, bend, True)


def select_k(data, cfg: GapConfig) -> int:
    """Number of mixture components: bending point of the gap curve,
    rounded to the nearest integer (k_min when no knee is confirmed)."""
    return select_k_detailed(data, cfg).value


def variance_ratio_curve(data) -> Curve:
    """Cumulative PCA variance-ratio curve.

    Centers the data, eigendecomposes its covariance, and accumulates the
    eigenvalue fractions in descending order; y is non-decreasing and ends
    at 1.
    """
    x = as_matrix(data, "data")
    if x.shape[0] < 2 or x.shape[1] < 2:
        raise ParameterError("need at least 2 rows and 2 columns")
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / x.shape[0]
    evals, _ = eigendecompose_symmetric(cov)
    evals = np.maximum(evals, 0.0)
    total = float(evals.sum())
    if total <= 0.0:
        raise DataError("zero total variance")
    ratios = evals / total
    return Curve(np.arange(1, x.shape[1] + 1, dtype=np.float64), np.cumsum(ratios), kind="variance")


_FALLBACK_VARIANCE = 0.95


def select_c_detailed(features) -> SelectionResult:
    frames = getattr(features, "frames", features)
    curve = variance_ratio_curve(frames)
    bend = bending_point(curve)
    d = len(curve)
    if bend.found:
        c = min(max(_round_half_up(bend.x_star), 1), d - 1)
        return SelectionResult(c, curve, bend, False)
    c = int(np.argmax(curve.ys >= _FALLBACK_VARIANCE)) + 1
    return SelectionResult(min(max(c, 1), d - 1), curve, bend, True)


def select_c(features) -> int:
    """Bottleneck dimension: bending point of the cumulative variance
    curve, clamped to [1, D-1]; falls back to the smallest dimension
    reaching 95% cumulative variance when no knee is confirmed."""
    return select_c_detailed(features).value


@dataclass(frozen=True)
class TuningReport:
    """Chosen (K, c) with both curves, bends, and fallback flags."""

    k: int
    c: int
    gap: SelectionResult
    variance: SelectionResult
    rows_used: int = 0
    notes: tuple[str, ...] = field(default_factory=tuple)


def tune(frames, gap_cfg: GapConfig, max_rows: int = 2000) -> TuningReport:
    """Run both selectors on one (standardized) feature matrix.

    K is selected on the raw standardized features (clustering happens
    before any encoder exists); rows are subsampled to `max_rows` with a
    seeded draw to bound the clustering cost.
    """
    x = as_matrix(frames, "frames")
    notes = []
    rows = x
    if max_rows and x.shape[0] > max_rows:
        rng = make_rng(derive_seed(gap_cfg.seed, 0x5AB))
        idx = np.sort(rng.choice(x.shape[0], size=max_rows, replace=False))
        rows = x[idx]
        notes.append(f"subsampled {max_rows} of {x.shape[0]} rows for clustering")
    gap_sel = select_k_detailed(rows, gap_cfg)
    var_sel = select_c_detailed(x)
    return TuningReport(gap_sel.value, var_sel.value, gap_sel, var_sel, rows.shape[0], tuple(notes))

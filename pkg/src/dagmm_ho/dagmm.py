"""Jointly trained autoencoder + mixture-estimation network scored by
sample energy.

The compression network maps an input x to a bottleneck code z_c and a
reconstruction x'; the scalar relative reconstruction error z_r is
appended to form z = [z_c, z_r].  The estimation network predicts soft
mixture memberships gamma over z, from which batch GMM parameters
(phi, mu, sigma) are estimated in closed form.  The training objective is

    J = mean ||x - x'||^2  +  lambda1 * mean E(z)  +  lambda2 * P(sigma)

where E(z) is the negative log-likelihood of z under the batch GMM and
P(sigma) sums reciprocal covariance diagonals to keep components from
collapsing.  Gradients of J with respect to every weight flow through the
energy, the GMM estimation, the softmax memberships, dropout, and both
halves of the autoencoder; they are implemented analytically below and
checked against central finite differences in the test suite.

Everything is deterministic given the seed: parameter init, minibatch
shuffling, and dropout masks all derive from it.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import solve_triangular

from .errors import (
    DataError,
    DimensionError,
    FormatError,
    NotPositiveDefiniteError,
    NumericError,
    ParameterError,
    TrainingDivergedError,
)
from .features import Standardizer
from .numcore import derive_seed, make_rng

MODEL_MAGIC = b"DGHM"
MODEL_VERSION = 1

_LOG_2PI = float(np.log(2.0 * np.pi))
_RELERR_EPS = 1e-12
_MAX_JITTER = 1e-2
_ADAM_BETA1 = 0.9
_ADAM_BETA2 = 0.999
_ADAM_EPS = 1e-8

_ACTIVATIONS = ("linear", "tanh", "softmax")
_ACT_CODE = {name: i for i, name in enumerate(_ACTIVATIONS)}


# ---------------------------------------------------------------------------
# architecture and parameters


@dataclass(frozen=True)
class NetworkArchitecture:
    """Layer layout of the three sub-networks.

    Layers are (output_size, activation) pairs.  The encoder ends in a
    linear bottleneck of size `bottleneck`, the decoder ends in a tanh
    layer of size `input_dim`, and the estimation network ends in a
    softmax over `components` logits with inverted dropout (keep
    probability `dropout_keep`) after each hidden layer at train time.
    """

    input_dim: int
    bottleneck: int
    components: int
    encoder: tuple[tuple[int, str], ...]
    decoder: tuple[tuple[int, str], ...]
    estimation: tuple[tuple[int, str], ...]
    dropout_keep: float = 0.5

    def __post_init__(self):
        if not (1 <= self.bottleneck < self.input_dim):
            raise ParameterError(
                f"need 1 <= bottleneck < input_dim, got {self.bottleneck}, {self.input_dim}"
            )
        if self.components < 1:
            raise ParameterError("components must be >= 1")
        if not (0.0 < self.dropout_keep <= 1.0):
            raise ParameterError("dropout_keep must be in (0, 1]")
        for net, name in ((self.encoder, "encoder"), (self.decoder, "decoder"), (self.estimation, "estimation")):
            if len(net) < 1:
                raise ParameterError(f"{name} needs at least one layer")
            for size, act in net:
                if size < 1:
                    raise ParameterError(f"{name} layer size must be >= 1")
                if act not in _ACTIVATIONS:
                    raise ParameterError(f"unknown activation {act!r}")
        if self.encoder[-1][0] != self.bottleneck:
            raise ParameterError("encoder must end in a layer of size bottleneck")
        if self.decoder[-1][0] != self.input_dim:
            raise ParameterError("decoder must end in a layer of size input_dim")
        if self.estimation[-1] != (self.components, "softmax"):
            raise ParameterError("estimation must end in a softmax layer of size components")

    @classmethod
    def default(
        cls,
        input_dim: int = 64,
        bottleneck: int = 4,
        components: int = 4,
        encoder_hidden: tuple[int, ...] = (30, 10),
        estimation_hidden: tuple[int, ...] = (10,),
        dropout_keep: float = 0.5,
    ) -> "NetworkArchitecture":
        """FC(D,30,tanh)-FC(30,10,tanh)-FC(10,c) encoder, mirrored tanh
        decoder, and FC(c+1,10,tanh)-Drop-FC(10,K,softmax) estimator."""
        encoder = tuple((h, "tanh") for h in encoder_hidden) + ((bottleneck, "linear"),)
        decoder = tuple((h, "tanh") for h in reversed(encoder_hidden)) + ((input_dim, "tanh"),)
        estimation = tuple((h, "tanh") for h in estimation_hidden) + ((components, "softmax"),)
        return cls(input_dim, bottleneck, components, encoder, decoder, estimation, dropout_keep)

    @property
    def latent_dim(self) -> int:
        """Dimension of z = [z_c, z_r]."""
        return self.bottleneck + 1

    def fan_chain(self, net: str) -> list[tuple[int, int]]:
        """(fan_in, fan_out) for each layer of the named sub-network."""
        start = {"encoder": self.input_dim, "decoder": self.bottleneck, "estimation": self.latent_dim}[net]
        layers = getattr(self, net)
        dims = [start] + [size for size, _ in layers]
        return list(zip(dims[:-1], dims[1:]))


@dataclass
class ModelParameters:
    """Weights and biases of the three sub-networks (x @ W + b convention)."""

    arch: NetworkArchitecture
    encoder: list[tuple[np.ndarray, np.ndarray]]
    decoder: list[tuple[np.ndarray, np.ndarray]]
    estimation: list[tuple[np.ndarray, np.ndarray]]

    def copy(self) -> "ModelParameters":
        return ModelParameters(
            self.arch,
            [(w.copy(), b.copy()) for w, b in self.encoder],
            [(w.copy(), b.copy()) for w, b in self.decoder],
            [(w.copy(), b.copy()) for w, b in self.estimation],
        )

    def flat(self) -> list[np.ndarray]:
        """All arrays in the documented (encoder, decoder, estimation) order."""
        out = []
        for net in (self.encoder, self.decoder, self.estimation):
            for w, b in net:
                out.extend((w, b))
        return out


def init_parameters(arch: NetworkArchitecture, seed: int) -> ModelParameters:
    """Seeded Glorot-uniform weights (+-sqrt(6/(fan_in+fan_out))), zero biases."""
    nets = {}
    for ni, net in enumerate(("encoder", "decoder", "estimation")):
        layers = []
        for li, (fan_in, fan_out) in enumerate(arch.fan_chain(net)):
            rng = make_rng(derive_seed(seed, 0x1A7, ni, li))
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-limit, limit, size=(fan_in, fan_out))
            layers.append((w, np.zeros(fan_out)))
        nets[net] = layers
    return ModelParameters(arch, nets["encoder"], nets["decoder"], nets["estimation"])


# ---------------------------------------------------------------------------
# forward passes


def _atleast_batch(x, dim: int, name: str) -> tuple[np.ndarray, bool]:
    a = np.asarray(x, dtype=np.float64)
    single = a.ndim == 1
    if single:
        a = a[None, :]
    if a.ndim != 2 or a.shape[1] != dim:
        raise DimensionError(f"{name} must have dimension {dim}, got shape {np.shape(x)}")
    if not np.all(np.isfinite(a)):
        raise NumericError(f"{name} contains non-finite values")
    return a, single


def _net_forward(x, layers, specs):
    a = x
    cache = []
    for (w, b), (_, act) in zip(layers, specs):
        s = a @ w + b
        out = np.tanh(s) if act == "tanh" else s
        cache.append((a, out, act))
        a = out
    return a, cache


def _net_backward(d_out, layers, cache):
    grads = []
    d = d_out
    for (w, _), (a_prev, out, act) in zip(reversed(layers), reversed(cache)):
        if act == "tanh":
            d = d * (1.0 - out * out)
        grads.append((a_prev.T @ d, d.sum(axis=0)))
        d = d @ w.T
    return d, list(reversed(grads))


def encode(x, params: ModelParameters) -> np.ndarray:
    """Bottleneck code z_c for one sample or a batch of rows."""
    a, single = _atleast_batch(x, params.arch.input_dim, "x")
    z_c, _ = _net_forward(a, params.encoder, params.arch.encoder)
    return z_c[0] if single else z_c


def decode(z_c, params: ModelParameters) -> np.ndarray:
    """Reconstruction x' from a bottleneck code (final tanh keeps it in (-1, 1))."""
    a, single = _atleast_batch(z_c, params.arch.bottleneck, "z_c")
    x_prime, _ = _net_forward(a, params.decoder, params.arch.decoder)
    return x_prime[0] if single else x_prime


def recon_feature(x, x_prime) -> np.ndarray | float:
    """Relative Euclidean reconstruction error z_r = ||x - x'|| / (||x|| + eps)."""
    a = np.asarray(x, dtype=np.float64)
    b = np.asarray(x_prime, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {a.shape} vs {b.shape}")
    dist = np.sqrt(np.square(a - b).sum(axis=-1))
    denom = np.sqrt(np.square(a).sum(axis=-1)) + _RELERR_EPS
    out = dist / denom
    return float(out) if a.ndim == 1 else out


def _dropout_masks(arch: NetworkArchitecture, n: int, rng: np.random.Generator | None):
    """Inverted-dropout masks (values 0 or 1/keep) per hidden estimation layer."""
    hidden = len(arch.estimation) - 1
    if rng is None or arch.dropout_keep >= 1.0:
        return [None] * hidden
    keep = arch.dropout_keep
    return [
        (rng.random((n, size)) < keep).astype(np.float64) / keep
        for size, _ in arch.estimation[:-1]
    ]


def _softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _estimation_forward(z, params: ModelParameters, masks):
    a = z
    cache = []
    for (w, b), mask in zip(params.estimation[:-1], masks):
        s = a @ w + b
        t = np.tanh(s)
        out = t if mask is None else t * mask
        cache.append((a, t, mask))
        a = out
    w, b = params.estimation[-1]
    logits = a @ w + b
    cache.append((a, None, None))
    return _softmax(logits), cache


def _estimation_backward(d_logits, params: ModelParameters, cache):
    grads = [None] * len(params.estimation)
    a_prev, _, _ = cache[-1]
    w_last, _ = params.estimation[-1]
    grads[-1] = (a_prev.T @ d_logits, d_logits.sum(axis=0))
    d = d_logits @ w_last.T
    for li in range(len(params.estimation) - 2, -1, -1):
        a_prev, t, mask = cache[li]
        if mask is not None:
            d = d * mask
        d = d * (1.0 - t * t)
        w, _ = params.estimation[li]
        grads[li] = (a_prev.T @ d, d.sum(axis=0))
        d = d @ w.T
    return d, grads


def membership(z, params: ModelParameters, train_mode: bool = False, seed: int = 0) -> np.ndarray:
    """Soft mixture memberships gamma = softmax(MLN(z)).

    Dropout fires only when train_mode is set; the mask stream is fixed by
    the seed, so repeated calls reproduce the same memberships.
    """
    a, single = _atleast_batch(z, params.arch.latent_dim, "z")
    rng = make_rng(seed) if train_mode else None
    masks = _dropout_masks(params.arch, a.shape[0], rng)
    gamma, _ = _estimation_forward(a, params, masks)
    return gamma[0] if single else gamma


# ---------------------------------------------------------------------------
# GMM estimation and sample energy


@dataclass(frozen=True)
class GmmParameters:
    """Mixture weights phi (K,), means mu (K, d), covariances sigma (K, d, d)."""

    phi: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        phi = np.asarray(self.phi, dtype=np.float64)
        mu = np.asarray(self.mu, dtype=np.float64)
        sigma = np.asarray(self.sigma, dtype=np.float64)
        k = phi.shape[0]
        if mu.shape[0] != k or sigma.shape[0] != k:
            raise DimensionError("phi, mu, sigma must agree on component count")
        d = mu.shape[1]
        if sigma.shape[1:] != (d, d):
            raise DimensionError("sigma must be K x d x d")
        if phi.min() < -1e-12 or abs(phi.sum() - 1.0) > 1e-9:
            raise ParameterError("mixture weights must be nonnegative and sum to 1")
        sigma = (sigma + np.swapaxes(sigma, 1, 2)) / 2.0
        object.__setattr__(self, "phi", phi)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)

    @property
    def n_components(self) -> int:
        return self.phi.shape[0]

    @property
    def dim(self) -> int:
        return self.mu.shape[1]


_DEAD_COMPONENT = 1e-12


def _gmm_stats(z, gamma):
    """Soft counts and weighted moments of a batch (no degeneracy rescue)."""
    n = z.shape[0]
    counts = gamma.sum(axis=0)
    phi = counts / n
    safe = np.maximum(counts, 1e-300)
    mu = (gamma.T @ z) / safe[:, None]
    diff = z[:, None, :] - mu[None, :, :]
    sigma = np.einsum("nk,nkd,nke->kde", gamma, diff, diff) / safe[:, None, None]
    return counts, phi, mu, sigma


def estimate_gmm(z, gamma, prev: GmmParameters | None = None) -> GmmParameters:
    """Closed-form batch GMM parameters from latent vectors and memberships.

    phi_k is the mean membership, mu_k the membership-weighted mean, and
    sigma_k the membership-weighted (biased) covariance.  A component whose
    soft count falls below 1e-12 keeps its previous parameters when `prev`
    is given, otherwise gets mu = 0, sigma = I; phi is renormalized.
    """
    zb = np.asarray(z, dtype=np.float64)
    gb = np.asarray(gamma, dtype=np.float64)
    if zb.ndim != 2 or gb.ndim != 2 or zb.shape[0] != gb.shape[0]:
        raise DimensionError("z and gamma must be 2-D with matching row counts")
    if zb.shape[0] < 1:
        raise ParameterError("need at least one sample")
    if np.abs(gb.sum(axis=1) - 1.0).max() > 1e-6:
        raise ParameterError("every membership row must sum to 1")
    counts, phi, mu, sigma = _gmm_stats(zb, gb)
    dead = counts < _DEAD_COMPONENT
    if dead.any():
        d = zb.shape[1]
        mu = mu.copy()
        sigma = sigma.copy()
        for k in np.flatnonzero(dead):
            if prev is not None:
                mu[k] = prev.mu[k]
                sigma[k] = prev.sigma[k]
            else:
                mu[k] = 0.0
                sigma[k] = np.eye(d)
        phi = phi / phi.sum()
    return GmmParameters(phi, mu, sigma)


def _factor_components(sigma, jitter: float):
    """Stacked Cholesky factors of sigma_k + jitter*I, escalating jitter.

    On failure the jitter grows tenfold up to 1e-2; if that still fails the
    mixture is declared numerically unusable.
    """
    if jitter <= 0.0:
        raise ParameterError("jitter must be positive")
    d = sigma.shape[1]
    eye = np.eye(d)
    j = float(jitter)
    while True:
        try:
            chols = np.linalg.cholesky(sigma + j * eye)
            break
        except np.linalg.LinAlgError:
            if j >= _MAX_JITTER:
                raise NotPositiveDefiniteError(
                    f"covariance not positive definite even with jitter {j:g}"
                ) from None
            j = min(j * 10.0, _MAX_JITTER)
    log_dets = 2.0 * np.log(np.diagonal(chols, axis1=1, axis2=2)).sum(axis=1)
    return chols, log_dets, j


def _component_log_terms(z, phi, mu, chols, log_dets):
    """Per-sample, per-component log( phi_k N(z | mu_k, sigma_k~) )."""
    n, d = z.shape
    k = phi.shape[0]
    ll = np.empty((n, k))
    with np.errstate(divide="ignore"):
        log_phi = np.log(phi)
    for ki in range(k):
        y = solve_triangular(chols[ki], (z - mu[ki]).T, lower=True, check_finite=False)
        q = np.square(y).sum(axis=0)
        ll[:, ki] = log_phi[ki] - 0.5 * (q + d * _LOG_2PI + log_dets[ki])
    return ll


def _logsumexp_rows(ll):
    m = ll.max(axis=1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    return m[:, 0] + np.log(np.exp(ll - m).sum(axis=1))


def energies(z, gmm: GmmParameters, jitter: float = 1e-6) -> np.ndarray:
    """Sample energies E(z_i) for a batch of latent vectors.

    E(z) = -log sum_k phi_k exp(-(z-mu_k)^T sigma_k~^{-1} (z-mu_k)/2)
    / sqrt(|2 pi sigma_k~|) with sigma_k~ = sigma_k + jitter*I, evaluated
    through Cholesky solves and log-sum-exp so neither the inverse nor the
    determinant is formed explicitly.
    """
    zb, single = _atleast_batch(z, gmm.dim, "z")
    chols, log_dets, _ = _factor_components(gmm.sigma, jitter)
    e = -_logsumexp_rows(_component_log_terms(zb, gmm.phi, gmm.mu, chols, log_dets))
    return float(e[0]) if single else e


def sample_energy(z, gmm: GmmParameters, jitter: float = 1e-6) -> float:
    """Energy of a single latent vector (see :func:`energies`)."""
    return float(energies(np.asarray(z, dtype=np.float64), gmm, jitter))


# ---------------------------------------------------------------------------
# joint objective and its gradient


@dataclass(frozen=True)
class TrainConfig:
    """Joint-training hyper-parameters.

    lambda1 weights the energy term, lambda2 the covariance-singularity
    penalty; jitter is the diagonal added before every Cholesky.  The
    energy threshold eta is set at `threshold_percentile` of the training
    energies once training finishes.
    """

    lambda1: float = 0.1
    lambda2: float = 0.005
    learning_rate: float = 1e-4
    batch_size: int = 128
    epochs: int = 100
    seed: int = 0
    jitter: float = 1e-6
    threshold_percentile: float = 99.0

    def __post_init__(self):
        if self.lambda1 < 0.0 or self.lambda2 < 0.0:
            raise ParameterError("lambda1 and lambda2 must be nonnegative")
        if self.learning_rate <= 0.0 or self.jitter <= 0.0:
            raise ParameterError("learning_rate and jitter must be positive")
        if self.batch_size < 1 or self.epochs < 0:
            raise ParameterError("batch_size must be >= 1 and epochs >= 0")
        if not (0.0 < self.threshold_percentile <= 100.0):
            raise ParameterError("threshold_percentile must be in (0, 100]")


def _forward_batch(x, params: ModelParameters, masks):
    z_c, enc_cache = _net_forward(x, params.encoder, params.arch.encoder)
    x_prime, dec_cache = _net_forward(z_c, params.decoder, params.arch.decoder)
    diff = x - x_prime
    dist = np.sqrt(np.square(diff).sum(axis=1))
    xnorm = np.sqrt(np.square(x).sum(axis=1)) + _RELERR_EPS
    z = np.concatenate([z_c, (dist / xnorm)[:, None]], axis=1)
    gamma, est_cache = _estimation_forward(z, params, masks)
    return {
        "z_c": z_c,
        "x_prime": x_prime,
        "diff": diff,
        "dist": dist,
        "xnorm": xnorm,
        "z": z,
        "gamma": gamma,
        "enc_cache": enc_cache,
        "dec_cache": dec_cache,
        "est_cache": est_cache,
    }


def _energy_stage(z, gamma, cfg: TrainConfig, prev: GmmParameters | None):
    """Batch GMM estimate, factorization, energies, and penalty."""
    counts, phi, mu, sigma = _gmm_stats(z, gamma)
    dead = counts < _DEAD_COMPONENT
    if dead.any():
        d = z.shape[1]
        for k in np.flatnonzero(dead):
            mu[k] = prev.mu[k] if prev is not None else 0.0
            sigma[k] = prev.sigma[k] if prev is not None else np.eye(d)
        phi = phi / phi.sum()
    chols, log_dets, j_used = _factor_components(sigma, cfg.jitter)
    ll = _component_log_terms(z, phi, mu, chols, log_dets)
    e = -_logsumexp_rows(ll)
    diag = np.diagonal(sigma, axis1=1, axis2=2) + j_used
    penalty = float((1.0 / diag).sum())
    return {
        "counts": counts,
        "phi": phi,
        "mu": mu,
        "sigma": sigma,
        "dead": dead,
        "chols": chols,
        "log_dets": log_dets,
        "jitter": j_used,
        "ll": ll,
        "energies": e,
        "penalty": penalty,
    }


def _check_terms(recon, energy, penalty):
    for name, value in (("reconstruction", recon), ("energy", energy), ("penalty", penalty)):
        if not np.isfinite(value):
            raise TrainingDivergedError(f"objective term '{name}' is non-finite", term=name)


def objective(
    x,
    params: ModelParameters,
    cfg: TrainConfig,
    train_mode: bool = False,
    dropout_seed: int = 0,
    prev_gmm: GmmParameters | None = None,
) -> tuple[float, dict]:
    """Joint objective J on a batch, with its per-term breakdown.

    Returns (J, breakdown) where breakdown holds the unweighted terms:
    mean squared reconstruction error, mean sample energy, and the
    singularity penalty (plus the jitter actually used).  When lambda1 and
    lambda2 are both zero the GMM stage is skipped and those terms report 0.
    """
    xb, _ = _atleast_batch(x, params.arch.input_dim, "x")
    if xb.shape[0] < 1:
        raise ParameterError("batch must be nonempty")
    rng = make_rng(dropout_seed) if train_mode else None
    masks = _dropout_masks(params.arch, xb.shape[0], rng)
    fw = _forward_batch(xb, params, masks)
    recon = float(np.square(fw["diff"]).sum(axis=1).mean())
    if cfg.lambda1 == 0.0 and cfg.lambda2 == 0.0:
        _check_terms(recon, 0.0, 0.0)
        return recon, {"reconstruction": recon, "energy": 0.0, "penalty": 0.0, "jitter": 0.0}
    eg = _energy_stage(fw["z"], fw["gamma"], cfg, prev_gmm)
    energy = float(eg["energies"].mean())
    _check_terms(recon, energy, eg["penalty"])
    j = recon + cfg.lambda1 * energy + cfg.lambda2 * eg["penalty"]
    return j, {
        "reconstruction": recon,
        "energy": energy,
        "penalty": eg["penalty"],
        "jitter": eg["jitter"],
    }


def _objective_and_gradient(x, params, cfg, masks, prev_gmm=None):
    """J, breakdown, and analytic dJ/dparams for one batch.

    The energy-term backward treats the batch GMM parameters as functions
    of (gamma, z): phi = counts/N, mu the weighted mean, sigma the weighted
    covariance.  Because the weighted residuals around mu sum to zero, the
    covariance stage contributes no gradient through mu, which keeps the
    chain below compact.  Rescued (empty) components are held constant.
    """
    n = x.shape[0]
    arch = params.arch
    fw = _forward_batch(x, params, masks)
    z, gamma = fw["z"], fw["gamma"]
    recon = float(np.square(fw["diff"]).sum(axis=1).mean())

    pure_recon = cfg.lambda1 == 0.0 and cfg.lambda2 == 0.0
    if pure_recon:
        breakdown = {"reconstruction": recon, "energy": 0.0, "penalty": 0.0, "jitter": 0.0}
        _check_terms(recon, 0.0, 0.0)
        j = recon
        dz = np.zeros_like(z)
        d_logits = np.zeros_like(gamma)
    else:
        eg = _energy_stage(z, gamma, cfg, prev_gmm)
        energy = float(eg["energies"].mean())
        _check_terms(recon, energy, eg["penalty"])
        j = recon + cfg.lambda1 * energy + cfg.lambda2 * eg["penalty"]
        breakdown = {
            "reconstruction": recon,
            "energy": energy,
            "penalty": eg["penalty"],
            "jitter": eg["jitter"],
        }

        phi, mu, sigma = eg["phi"], eg["mu"], eg["sigma"]
        counts, dead = eg["counts"], eg["dead"]
        sigma_j = sigma + eg["jitter"] * np.eye(arch.latent_dim)
        # Inverses are needed explicitly for the quadratic-form gradients.
        inv = np.linalg.inv(sigma_j)
        inv = (inv + np.swapaxes(inv, 1, 2)) / 2.0

        # responsibilities of the estimated mixture for each sample
        ll = eg["ll"]
        m = ll.max(axis=1, keepdims=True)
        expd = np.exp(ll - m)
        resp = expd / expd.sum(axis=1, keepdims=True)
        w_ll = -(cfg.lambda1 / n) * resp  # dJ/d ll_ik

        zdiff = z[:, None, :] - mu[None, :, :]
        u = np.einsum("kde,nke->nkd", inv, zdiff)  # sigma~^{-1} (z - mu)

        alive = ~dead
        w_sum = w_ll.sum(axis=0)
        g_phi = np.where(phi > 0, w_sum / np.maximum(phi, 1e-300), 0.0)
        g_mu = np.einsum("nk,nkd->kd", w_ll, u)
        g_sigma = 0.5 * (
            np.einsum("nk,nkd,nke->kde", w_ll, u, u) - w_sum[:, None, None] * inv
        )
        diag_idx = np.arange(arch.latent_dim)
        diag_j = np.diagonal(sigma_j, axis1=1, axis2=2)
        g_sigma[:, diag_idx, diag_idx] -= cfg.lambda2 / np.square(diag_j)

        # energy's direct dependence on z
        dz = -np.einsum("nk,nkd->nd", w_ll, u)

        # chain through the batch GMM estimation, skipping rescued components
        safe_counts = np.maximum(counts, 1e-300)
        g_delta = np.einsum("kde,nke->nkd", g_sigma, zdiff)
        quad = np.einsum("nkd,nkd->nk", zdiff, g_delta)
        tr_gs = np.einsum("kde,kde->k", g_sigma, sigma)
        d_gamma = (
            g_phi[None, :] / n
            + np.einsum("kd,nkd->nk", g_mu, zdiff) / safe_counts[None, :]
            + (quad - tr_gs[None, :]) / safe_counts[None, :]
        )
        d_gamma = np.where(alive[None, :], d_gamma, 0.0)
        gg = gamma / safe_counts[None, :]
        gg = np.where(alive[None, :], gg, 0.0)
        dz = dz + gg @ g_mu + 2.0 * np.einsum("nk,nkd->nd", gg, g_delta)

        # softmax backward
        inner = (d_gamma * gamma).sum(axis=1, keepdims=True)
        d_logits = gamma * (d_gamma - inner)

    dz_est, est_grads = _estimation_backward(d_logits, params, fw["est_cache"])
    dz = dz + dz_est

    dz_c = dz[:, : arch.bottleneck].copy()
    dz_r = dz[:, arch.bottleneck]

    # z_r = ||x - x'|| / (||x|| + eps): gradient w.r.t. the reconstruction
    safe_dist = np.maximum(fw["dist"], 1e-12)
    dxp = (-dz_r / (safe_dist * fw["xnorm"]))[:, None] * fw["diff"]
    dxp = dxp + (2.0 / n) * (fw["x_prime"] - x)

    dzc_dec, dec_grads = _net_backward(dxp, params.decoder, fw["dec_cache"])
    dz_c += dzc_dec
    _, enc_grads = _net_backward(dz_c, params.encoder, fw["enc_cache"])

    grads = ModelParameters(arch, enc_grads, dec_grads, est_grads)
    return j, breakdown, grads


def objective_gradient(
    x,
    params: ModelParameters,
    cfg: TrainConfig,
    train_mode: bool = False,
    dropout_seed: int = 0,
) -> tuple[float, dict, ModelParameters]:
    """Public wrapper: (J, breakdown, analytic gradients) for one batch."""
    xb, _ = _atleast_batch(x, params.arch.input_dim, "x")
    rng = make_rng(dropout_seed) if train_mode else None
    masks = _dropout_masks(params.arch, xb.shape[0], rng)
    return _objective_and_gradient(xb, params, cfg, masks)


# ---------------------------------------------------------------------------
# training, scoring, persistence


@dataclass
class TrainedModel:
    """Frozen artifact of a training run.

    Scoring always uses the frozen `gmm` (estimated in one full pass over
    the training set after the last epoch) and the stored feature
    standardization; test data never re-estimates the density.
    """

    params: ModelParameters
    gmm: GmmParameters
    standardizer: Standardizer
    eta: float
    train_config: TrainConfig
    loss_trace: tuple[float, ...]

    @property
    def arch(self) -> NetworkArchitecture:
        return self.params.arch


class _Adam:
    def __init__(self, shapes, lr):
        self.lr = lr
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.t = 0

    def step(self, arrays, grads):
        self.t += 1
        bias1 = 1.0 - _ADAM_BETA1**self.t
        bias2 = 1.0 - _ADAM_BETA2**self.t
        for i, (a, g) in enumerate(zip(arrays, grads)):
            self.m[i] = _ADAM_BETA1 * self.m[i] + (1.0 - _ADAM_BETA1) * g
            self.v[i] = _ADAM_BETA2 * self.v[i] + (1.0 - _ADAM_BETA2) * np.square(g)
            a -= self.lr * (self.m[i] / bias1) / (np.sqrt(self.v[i] / bias2) + _ADAM_EPS)


def choose_threshold(train_energies, percentile: float = 99.0) -> float:
    """Energy threshold eta: the given percentile (linear interpolation)."""
    e = np.asarray(train_energies, dtype=np.float64)
    if e.size == 0:
        raise ParameterError("need at least one training energy")
    if not (0.0 < percentile <= 100.0):
        raise ParameterError(f"percentile must be in (0, 100], got {percentile}")
    return float(np.percentile(e, percentile))


def latent_batch(x, params: ModelParameters) -> np.ndarray:
    """z = [z_c, z_r] for a batch, dropout off."""
    xb, _ = _atleast_batch(x, params.arch.input_dim, "x")
    fw = _forward_batch(xb, params, [None] * (len(params.arch.estimation) - 1))
    return fw["z"]


def train(frames, arch: NetworkArchitecture, cfg: TrainConfig,
          standardizer: Standardizer | None = None) -> TrainedModel:
    """Minibatch Adam on the joint objective; returns the frozen model.

    `frames` must already be standardized; pass the fitted standardizer so
    it travels with the model.  The run is deterministic given cfg.seed:
    init, shuffling, and dropout all derive from it.  A non-finite
    objective aborts with the parameters of the last clean step attached.
    """
    x = np.asarray(frames, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != arch.input_dim:
        raise DimensionError(f"frames must be N x {arch.input_dim}")
    n = x.shape[0]
    if n < cfg.batch_size:
        raise ParameterError(f"need at least batch_size={cfg.batch_size} rows, got {n}")
    if standardizer is None:
        standardizer = Standardizer.identity(arch.input_dim)

    params = init_parameters(arch, derive_seed(cfg.seed, 0x11))
    shuffle_rng = make_rng(derive_seed(cfg.seed, 0x22))
    drop_rng = make_rng(derive_seed(cfg.seed, 0x33))
    flats = params.flat()
    adam = _Adam([a.shape for a in flats], cfg.learning_rate)

    n_batches = n // cfg.batch_size
    loss_trace: list[float] = []
    checkpoint = params.copy()
    for epoch in range(cfg.epochs):
        perm = shuffle_rng.permutation(n)
        epoch_losses = []
        for b in range(n_batches):
            batch = x[perm[b * cfg.batch_size : (b + 1) * cfg.batch_size]]
            masks = _dropout_masks(arch, batch.shape[0], drop_rng)
            try:
                j, _, grads = _objective_and_gradient(batch, params, cfg, masks)
            except (TrainingDivergedError, NotPositiveDefiniteError) as exc:
                raise TrainingDivergedError(
                    f"training diverged at epoch {epoch}, batch {b}: {exc}",
                    checkpoint=checkpoint,
                    term=getattr(exc, "term", "covariance"),
                ) from exc
            checkpoint = params.copy()
            adam.step(params.flat(), grads.flat())
            epoch_losses.append(j)
        loss_trace.append(float(np.mean(epoch_losses)))

    z = latent_batch(x, params)
    gamma = membership(z, params, train_mode=False)
    gmm = estimate_gmm(z, gamma)
    train_energies = energies(z, gmm, cfg.jitter)
    eta = choose_threshold(train_energies, cfg.threshold_percentile)
    return TrainedModel(params, gmm, standardizer, eta, cfg, tuple(loss_trace))


def score(model: TrainedModel, frames) -> np.ndarray:
    """Per-sample energies under the model's frozen GMM (dropout off).

    `frames` must already be standardized with the model's stored stats.
    Pure per sample: permuting rows permutes energies.
    """
    xb, single = _atleast_batch(frames, model.arch.input_dim, "frames")
    z = latent_batch(xb, model.params)
    e = np.atleast_1d(energies(z, model.gmm, model.train_config.jitter))
    return float(e[0]) if single else e


# ---------------------------------------------------------------------------
# model file (magic "DGHM")


def _pack_net(spec) -> bytes:
    blob = struct.pack("<I", len(spec))
    for size, act in spec:
        blob += struct.pack("<IB", size, _ACT_CODE[act])
    return blob


class _Reader:
    def __init__(self, blob, path):
        self.blob = blob
        self.off = 0
        self.path = path

    def unpack(self, fmt):
        size = struct.calcsize(fmt)
        if self.off + size > len(self.blob):
            raise FormatError(f"{self.path}: truncated model file")
        out = struct.unpack_from(fmt, self.blob, self.off)
        self.off += size
        return out

    def floats(self, count):
        size = 8 * count
        if self.off + size > len(self.blob):
            raise FormatError(f"{self.path}: truncated model file")
        out = np.frombuffer(self.blob, dtype="<f8", count=count, offset=self.off).copy()
        self.off += size
        return out


def save_model(path, model: TrainedModel) -> None:
    """Serialize a trained model to the versioned "DGHM" binary format.

    Layout (little-endian): magic, u32 version, architecture block
    (D, c, K, dropout keep, then each sub-network's (size, activation)
    list), parameter blocks as float64 in encoder/decoder/estimation order
    (W row-major then b per layer), the GMM block (phi, mu, sigma), the
    standardization stats, eta, the training-config echo, and the loss
    trace.
    """
    arch = model.arch
    blob = struct.pack("<4sI", MODEL_MAGIC, MODEL_VERSION)
    blob += struct.pack("<IIId", arch.input_dim, arch.bottleneck, arch.components, arch.dropout_keep)
    blob += _pack_net(arch.encoder) + _pack_net(arch.decoder) + _pack_net(arch.estimation)
    for a in model.params.flat():
        blob += np.ascontiguousarray(a, dtype="<f8").tobytes()
    blob += np.ascontiguousarray(model.gmm.phi, dtype="<f8").tobytes()
    blob += np.ascontiguousarray(model.gmm.mu, dtype="<f8").tobytes()
    blob += np.ascontiguousarray(model.gmm.sigma, dtype="<f8").tobytes()
    blob += np.ascontiguousarray(model.standardizer.mean, dtype="<f8").tobytes()
    blob += np.ascontiguousarray(model.standardizer.std, dtype="<f8").tobytes()
    cfg = model.train_config
    blob += struct.pack(
        "<dddddIIQ",
        model.eta,
        cfg.lambda1,
        cfg.lambda2,
        cfg.learning_rate,
        cfg.jitter,
        cfg.batch_size,
        cfg.epochs,
        cfg.seed,
    )
    blob += struct.pack("<d", cfg.threshold_percentile)
    blob += struct.pack("<I", len(model.loss_trace))
    blob += np.asarray(model.loss_trace, dtype="<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(blob)


def load_model(path) -> TrainedModel:
    """Load a "DGHM" model file; a version mismatch is reported explicitly."""
    with open(path, "rb") as fh:
        r = _Reader(fh.read(), str(path))
    magic, version = r.unpack("<4sI")
    if magic != MODEL_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {MODEL_MAGIC!r}")
    if version != MODEL_VERSION:
        raise FormatError(
            f"{path}: model file version {version} unsupported (this build reads {MODEL_VERSION})"
        )
    d, c, k, keep = r.unpack("<IIId")

    def read_net():
        (count,) = r.unpack("<I")
        spec = []
        for _ in range(count):
            size, code = r.unpack("<IB")
            if code >= len(_ACTIVATIONS):
                raise FormatError(f"{path}: unknown activation code {code}")
            spec.append((size, _ACTIVATIONS[code]))
        return tuple(spec)

    arch = NetworkArchitecture(d, c, k, read_net(), read_net(), read_net(), keep)
    nets = []
    for net in ("encoder", "decoder", "estimation"):
        layers = []
        for fan_in, fan_out in arch.fan_chain(net):
            w = r.floats(fan_in * fan_out).reshape(fan_in, fan_out)
            b = r.floats(fan_out)
            layers.append((w, b))
        nets.append(layers)
    params = ModelParameters(arch, *nets)
    latent = arch.latent_dim
    phi = r.floats(k)
    mu = r.floats(k * latent).reshape(k, latent)
    sigma = r.floats(k * latent * latent).reshape(k, latent, latent)
    mean = r.floats(d)
    std = r.floats(d)
    eta, lambda1, lambda2, lr, jitter, batch, epochs, seed = r.unpack("<dddddIIQ")
    (percentile,) = r.unpack("<d")
    (trace_len,) = r.unpack("<I")
    trace = tuple(float(v) for v in r.floats(trace_len))
    if r.off != len(r.blob):
        raise FormatError(f"{path}: {len(r.blob) - r.off} trailing bytes")
    cfg = TrainConfig(lambda1, lambda2, lr, batch, epochs, seed, jitter, percentile)
    return TrainedModel(params, GmmParameters(phi, mu, sigma), Standardizer(mean, std), eta, cfg, trace)

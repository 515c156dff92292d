"""Unsupervised acoustic anomaly detection: a jointly trained autoencoder
plus mixture-estimation network scored by sample energy, with automatic
selection of the mixture size (gap statistic) and bottleneck dimension
(cumulative PCA variance), baselines, and an evaluation harness.
"""

from . import cli, config, dagmm, evaluate, features, hpo, numcore, pipeline, synth
from .dagmm import (
    GmmParameters,
    ModelParameters,
    NetworkArchitecture,
    TrainConfig,
    TrainedModel,
    choose_threshold,
    decode,
    encode,
    energies,
    estimate_gmm,
    load_model,
    membership,
    objective,
    recon_feature,
    sample_energy,
    save_model,
    score,
    train,
)
from .errors import (
    DagmmHoError,
    DataError,
    DimensionError,
    FormatError,
    NotPositiveDefiniteError,
    NumericError,
    ParameterError,
    TrainingDivergedError,
    UnsupportedFormatError,
)
from .features import (
    AudioClip,
    FeatureConfig,
    FeatureMatrix,
    Standardizer,
    load_wav,
    log_mel,
    mel_filterbank,
    save_wav,
    stft_power,
)
from .hpo import (
    BendingPointResult,
    Curve,
    GapConfig,
    bending_point,
    dispersion,
    gap_statistic,
    select_c,
    select_k,
    variance_ratio_curve,
)
from .numcore import (
    KMeansResult,
    cholesky,
    eigendecompose_symmetric,
    finite_difference_gradient,
    kmeans,
    make_rng,
)

__version__ = "0.1.0"

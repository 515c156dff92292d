"""Flat key = value pipeline configuration.

Every key has a documented default; unknown keys are rejected.  Seed
precedence: the --seed flag beats the DAGMM_HO_SEED environment variable,
which beats the config file, which beats the default.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, fields

from .dagmm import TrainConfig
from .errors import ParameterError
from .features import FeatureConfig
from .hpo import GapConfig

ENV_SEED = "DAGMM_HO_SEED"


def _int_tuple(raw: str) -> tuple[int, ...]:
    try:
        return tuple(int(part) for part in str(raw).split(",") if part.strip())
    except ValueError as exc:
        raise ParameterError(f"expected a comma-separated integer list, got {raw!r}") from exc


@dataclass
class PipelineConfig:
    """All pipeline knobs in one place (see `_HELP` for meanings)."""

    seed: int = 0
    # features
    sample_rate: int = 16000
    frame_size: int = 1024
    hop_size: int = 512
    n_mels: int = 64
    input_dim: int = 64
    log_floor: float = 1e-10
    segment_seconds: float = 1.0
    # synthetic fixture
    n_fans: int = 6
    clip_seconds: float = 60.0
    anomalies_per_fan: int = 10
    # hyper-parameter search
    k_min: int = 1
    k_max: int = 10
    gap_draws: int = 10
    tune_max_rows: int = 2000
    # architecture
    bottleneck: int = 4
    components: int = 4
    encoder_hidden: tuple[int, ...] = (30, 10)
    estimation_hidden: tuple[int, ...] = (10,)
    dropout_keep: float = 0.5
    # training
    lambda1: float = 0.1
    lambda2: float = 0.005
    learning_rate: float = 1e-4
    batch_size: int = 128
    epochs: int = 100
    jitter: float = 1e-6
    threshold_percentile: float = 99.0
    # paths
    data_dir: str = "data"
    manifest: str = ""
    model_file: str = "model.dghm"
    report_dir: str = "reports"

    def feature_config(self) -> FeatureConfig:
        return FeatureConfig(self.frame_size, self.hop_size, self.n_mels, self.input_dim, self.log_floor)

    def train_config(self, seed: int | None = None) -> TrainConfig:
        return TrainConfig(
            self.lambda1, self.lambda2, self.learning_rate, self.batch_size,
            self.epochs, self.seed if seed is None else seed, self.jitter,
            self.threshold_percentile,
        )

    def gap_config(self, seed: int | None = None) -> GapConfig:
        return GapConfig(self.k_min, self.k_max, self.gap_draws,
                         seed=self.seed if seed is None else seed)


_HELP = {
    "seed": "master seed for every random draw",
    "sample_rate": "fixture sample rate in Hz (loaded WAVs keep their own)",
    "frame_size": "analysis frame length in samples (power of two)",
    "hop_size": "hop between frames in samples",
    "n_mels": "number of mel filter bands",
    "input_dim": "model input dimension (lowest input_dim mel bands kept)",
    "log_floor": "floor applied before the log compression",
    "segment_seconds": "segment window length for labels and scoring",
    "n_fans": "fan count in the synthetic fixture",
    "clip_seconds": "length of each synthetic recording",
    "anomalies_per_fan": "injected anomaly windows per fan",
    "k_min": "smallest mixture size tried by the gap statistic",
    "k_max": "largest mixture size tried by the gap statistic",
    "gap_draws": "uniform reference draws per gap value",
    "tune_max_rows": "row cap (seeded subsample) for tuning-time clustering",
    "bottleneck": "encoder output size c (overridden by tuning/--c)",
    "components": "mixture size K (overridden by tuning/--k)",
    "encoder_hidden": "encoder hidden layer sizes, comma separated",
    "estimation_hidden": "estimation hidden layer sizes, comma separated",
    "dropout_keep": "keep probability of estimation-network dropout",
    "lambda1": "weight of the sample-energy term",
    "lambda2": "weight of the covariance singularity penalty",
    "learning_rate": "Adam learning rate",
    "batch_size": "minibatch size",
    "epochs": "training epochs",
    "jitter": "diagonal added to covariances before factorization",
    "threshold_percentile": "training-energy percentile that sets eta",
    "data_dir": "directory holding the WAV files",
    "manifest": "segment-labels manifest path",
    "model_file": "model output/input path",
    "report_dir": "directory for reports and tables",
}


def _coerce(key: str, raw, kind):
    if isinstance(raw, kind) and not isinstance(raw, str):
        return raw
    text = str(raw).strip()
    try:
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        if kind is tuple:
            return _int_tuple(text)
        return text
    except ValueError as exc:
        raise ParameterError(f"config key {key!r}: cannot parse {raw!r}") from exc


def load_config_file(path) -> dict:
    """Parse a flat `key = value` file (# starts a comment)."""
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            if "=" not in text:
                raise ParameterError(f"{path}:{lineno}: expected 'key = value', got {line.rstrip()!r}")
            key, _, value = text.partition("=")
            out[key.strip()] = value.strip()
    return out


def make_config(path=None, overrides: dict | None = None, env=None) -> PipelineConfig:
    """Assemble the pipeline config from file, environment, and overrides."""
    env = os.environ if env is None else env
    kinds = {
        f.name: (tuple if f.name.endswith("_hidden") else type(getattr(PipelineConfig(), f.name)))
        for f in fields(PipelineConfig)
    }
    values: dict = {}
    if path:
        for key, raw in load_config_file(path).items():
            if key not in kinds:
                raise ParameterError(f"unknown config key {key!r}")
            values[key] = _coerce(key, raw, kinds[key])
    if ENV_SEED in env:
        values["seed"] = _coerce("seed", env[ENV_SEED], int)
    for key, raw in (overrides or {}).items():
        if raw is None:
            continue
        if key not in kinds:
            raise ParameterError(f"unknown config key {key!r}")
        values[key] = _coerce(key, raw, kinds[key])
    return PipelineConfig(**values)


def config_epilog() -> str:
    """Help text listing every config key with its default."""
    defaults = PipelineConfig()
    lines = ["configuration keys (key = value file given with --config):"]
    for f in fields(PipelineConfig):
        default = getattr(defaults, f.name)
        if isinstance(default, tuple):
            default = ",".join(str(v) for v in default)
        lines.append(f"  {f.name:<21} {_HELP[f.name]} (default: {default!r})")
    lines.append(f"  environment: {ENV_SEED} overrides the config-file seed")
    return "\n".join(lines)

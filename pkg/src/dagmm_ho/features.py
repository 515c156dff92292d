"""Audio front end: WAV loading, short-time power spectra, mel filterbank,
and the log-mel feature matrices consumed by the model.

The recipe is fixed by :class:`FeatureConfig`: frames of `frame_size`
samples every `hop_size` samples, Hann-windowed, reduced to `n_mels`
triangular mel bands, log-compressed, then truncated to the lowest
`input_dim` bands.  Per-dimension standardization is fitted on training
data only (:class:`Standardizer`) and reused verbatim at test time.
"""

from __future__ import annotations

import struct
import wave
from dataclasses import dataclass

import numpy as np

from .errors import DataError, DimensionError, FormatError, ParameterError, UnsupportedFormatError

CACHE_MAGIC = b"DGHF"
CACHE_VERSION = 1

_INT16_SCALE = 32768.0


@dataclass(frozen=True)
class FeatureConfig:
    """Feature-extraction parameters (defaults match the model's recipe)."""

    frame_size: int = 1024
    hop_size: int = 512
    n_mels: int = 64
    input_dim: int = 64
    log_floor: float = 1e-10

    def __post_init__(self):
        if self.frame_size < 2 or self.frame_size & (self.frame_size - 1):
            raise ParameterError(f"frame_size must be a power of two, got {self.frame_size}")
        if not (1 <= self.hop_size <= self.frame_size):
            raise ParameterError("hop_size must be in [1, frame_size]")
        if not (1 <= self.input_dim <= self.n_mels):
            raise ParameterError("need 1 <= input_dim <= n_mels")
        if self.log_floor <= 0.0:
            raise ParameterError("log_floor must be positive")

    @property
    def n_bins(self) -> int:
        return self.frame_size // 2 + 1


@dataclass(frozen=True)
class AudioClip:
    """Mono audio in [-1, 1] at a fixed sample rate."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float64)
        if s.ndim != 1 or s.size == 0:
            raise DimensionError("samples must be a nonempty 1-D array")
        if not np.all(np.isfinite(s)):
            raise DataError("samples contain non-finite values")
        if float(np.abs(s).max()) > 1.0:
            raise DataError("samples exceed [-1, 1]")
        if self.sample_rate <= 0:
            raise ParameterError("sample_rate must be positive")
        object.__setattr__(self, "samples", s)

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass(frozen=True)
class FeatureMatrix:
    """N x D matrix of per-frame feature vectors plus its config provenance."""

    frames: np.ndarray
    config: FeatureConfig

    def __post_init__(self):
        f = np.asarray(self.frames, dtype=np.float64)
        if f.ndim != 2:
            raise DimensionError("frames must be 2-D")
        if not np.all(np.isfinite(f)):
            raise DataError("feature matrix contains non-finite values")
        if f.shape[1] != self.config.input_dim:
            raise DimensionError(
                f"feature dimension {f.shape[1]} != config input_dim {self.config.input_dim}"
            )
        object.__setattr__(self, "frames", f)


def load_wav(path) -> AudioClip:
    """Load a RIFF/WAVE PCM 16-bit file; multichannel input is averaged to mono.

    Samples are scaled by 1/32768 into [-1, 1].
    """
    try:
        with wave.open(str(path), "rb") as wav:
            channels = wav.getnchannels()
            width = wav.getsampwidth()
            rate = wav.getframerate()
            comp = wav.getcomptype()
            n = wav.getnframes()
            raw = wav.readframes(n)
    except wave.Error as exc:
        msg = str(exc)
        if "unknown format" in msg:
            raise UnsupportedFormatError(f"{path}: {msg}") from exc
        raise FormatError(f"{path}: {msg}") from exc
    except EOFError as exc:
        raise FormatError(f"{path}: truncated WAV header") from exc
    if comp != "NONE":
        raise UnsupportedFormatError(f"{path}: compressed WAV ({comp}) not supported")
    if width != 2:
        raise UnsupportedFormatError(f"{path}: only PCM 16-bit supported, got {8 * width}-bit")
    data = np.frombuffer(raw, dtype="<i2")
    if channels > 1:
        usable = (data.size // channels) * channels
        data = data[:usable].reshape(-1, channels).mean(axis=1)
    if data.size == 0:
        raise FormatError(f"{path}: no audio frames")
    return AudioClip(np.asarray(data, dtype=np.float64) / _INT16_SCALE, rate)


def save_wav(path, clip: AudioClip) -> None:
    """Write a mono PCM 16-bit WAV; samples are quantized to the int16 grid."""
    ints = np.clip(np.round(clip.samples * _INT16_SCALE), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wav:
        wav.setnchannels(1)
        wav.setsampwidth(2)
        wav.setframerate(int(clip.sample_rate))
        wav.writeframes(ints.tobytes())


def quantize(samples: np.ndarray) -> np.ndarray:
    """Snap samples to the int16 grid used by the WAV writer.

    Generators apply this as their last step so that a write/load round
    trip is bit-identical.
    """
    ints = np.clip(np.round(np.asarray(samples, dtype=np.float64) * _INT16_SCALE), -32768, 32767)
    return ints / _INT16_SCALE


def hann_window(n: int) -> np.ndarray:
    """Periodic Hann window of length n."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def stft_power(clip: AudioClip, cfg: FeatureConfig) -> np.ndarray:
    """One-sided power spectrogram, frames x (frame_size/2 + 1).

    Frame t covers samples [t*hop, t*hop + frame_size); the trailing
    partial frame is dropped.  Power is |FFT(hann * frame)|^2 folded onto
    the one-sided bins and scaled by 1/frame_size, so each row sums to the
    windowed frame's total energy (Parseval).
    """
    x = clip.samples
    n = cfg.frame_size
    if x.size < n:
        raise DataError(f"clip of {x.size} samples shorter than frame_size {n}")
    count = (x.size - n) // cfg.hop_size + 1
    idx = cfg.hop_size * np.arange(count)[:, None] + np.arange(n)[None, :]
    frames = x[idx] * hann_window(n)
    spec = np.fft.rfft(frames, axis=1)
    power = (spec.real**2 + spec.imag**2) / n
    power[:, 1:-1] *= 2.0  # fold the conjugate-symmetric half
    return power


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(cfg: FeatureConfig, sample_rate: int) -> np.ndarray:
    """Triangular mel filterbank, n_mels x (frame_size/2 + 1).

    Centers are equally spaced on the mel scale between 0 Hz and the
    Nyquist frequency; each filter peaks at 1 and is nonnegative.
    """
    if sample_rate <= 0:
        raise ParameterError("sample_rate must be positive")
    points_hz = mel_to_hz(np.linspace(0.0, float(hz_to_mel(sample_rate / 2.0)), cfg.n_mels + 2))
    bin_hz = np.arange(cfg.n_bins) * sample_rate / cfg.frame_size
    lower = points_hz[:-2, None]
    center = points_hz[1:-1, None]
    upper = points_hz[2:, None]
    rise = (bin_hz[None, :] - lower) / np.maximum(center - lower, 1e-12)
    fall = (upper - bin_hz[None, :]) / np.maximum(upper - center, 1e-12)
    return np.maximum(0.0, np.minimum(rise, fall))


def filter_centers_hz(cfg: FeatureConfig, sample_rate: int) -> np.ndarray:
    """Center frequency of each mel filter in Hz."""
    points = mel_to_hz(np.linspace(0.0, float(hz_to_mel(sample_rate / 2.0)), cfg.n_mels + 2))
    return points[1:-1]


def log_mel(clip: AudioClip, cfg: FeatureConfig) -> FeatureMatrix:
    """Raw (unstandardized) log-mel feature matrix for one clip.

    Rows are log(max(filterbank @ power_frame, log_floor)) truncated to the
    lowest `input_dim` mel bands.
    """
    power = stft_power(clip, cfg)
    fb = mel_filterbank(cfg, clip.sample_rate)
    mel_power = power @ fb.T
    feats = np.log(np.maximum(mel_power, cfg.log_floor))[:, : cfg.input_dim]
    return FeatureMatrix(feats, cfg)


@dataclass(frozen=True)
class Standardizer:
    """Per-dimension z-scoring fitted on training features.

    Variances are clamped at 1e-12, so constant columns map to zero rather
    than dividing by zero.
    """

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, frames) -> "Standardizer":
        x = np.asarray(frames, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] < 1:
            raise DimensionError("need a nonempty 2-D feature matrix")
        mean = x.mean(axis=0)
        std = np.sqrt(np.maximum(x.var(axis=0), 1e-12))
        return cls(mean, std)

    @classmethod
    def identity(cls, dim: int) -> "Standardizer":
        return cls(np.zeros(dim), np.ones(dim))

    def transform(self, frames) -> np.ndarray:
        x = np.asarray(frames, dtype=np.float64)
        if x.shape[-1] != self.mean.size:
            raise DimensionError(
                f"feature dimension {x.shape[-1]} != fitted dimension {self.mean.size}"
            )
        return (x - self.mean) / self.std


def frame_count(n_samples: int, cfg: FeatureConfig) -> int:
    """Number of full frames extracted from a clip of n_samples."""
    if n_samples < cfg.frame_size:
        return 0
    return (n_samples - cfg.frame_size) // cfg.hop_size + 1


def write_feature_cache(path, frames, mean, std) -> None:
    """Write the versioned binary feature cache ("DGHF").

    Layout: magic, u32 version, u32 N, u32 D, N*D float64 row-major
    payload, then D float64 means and D float64 stds.  Little-endian.
    """
    x = np.ascontiguousarray(np.asarray(frames, dtype="<f8"))
    if x.ndim != 2:
        raise DimensionError("frames must be 2-D")
    mean = np.asarray(mean, dtype="<f8")
    std = np.asarray(std, dtype="<f8")
    if mean.shape != (x.shape[1],) or std.shape != (x.shape[1],):
        raise DimensionError("standardization stats must have one entry per column")
    blob = struct.pack("<4sIII", CACHE_MAGIC, CACHE_VERSION, x.shape[0], x.shape[1])
    blob += x.tobytes() + mean.tobytes() + std.tobytes()
    with open(path, "wb") as fh:
        fh.write(blob)


def read_feature_cache(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Read a "DGHF" cache back as (frames, mean, std)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    header = struct.calcsize("<4sIII")
    if len(blob) < header:
        raise FormatError(f"{path}: truncated feature cache")
    magic, version, n, d = struct.unpack_from("<4sIII", blob)
    if magic != CACHE_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {CACHE_MAGIC!r}")
    if version != CACHE_VERSION:
        raise FormatError(
            f"{path}: feature cache version {version} unsupported (expected {CACHE_VERSION})"
        )
    need = header + 8 * (n * d + 2 * d)
    if len(blob) != need:
        raise FormatError(f"{path}: payload length {len(blob)} != expected {need}")
    body = np.frombuffer(blob, dtype="<f8", offset=header)
    frames = body[: n * d].reshape(n, d).copy()
    mean = body[n * d : n * d + d].copy()
    std = body[n * d + d :].copy()
    return frames, mean, std

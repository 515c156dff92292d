"""Deterministic synthetic industrial-fan audio: tonal hum (harmonic
stack), low-passed broadband noise, and slow amplitude modulation, plus
four anomaly injections spanning narrowband and broadband deviations.

Profiles and anomaly windows are plumbing invented for desk-scale
fixtures; nothing here models real aeroacoustics.  All output is
quantized to the int16 grid so a WAV write/load round trip is
bit-identical.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from .errors import DataError, FormatError, ParameterError
from .features import AudioClip, quantize, save_wav
from .numcore import derive_seed, make_rng

ANOMALY_KINDS = ("added_tone", "amplitude_drop", "noise_burst", "harmonic_shift")

_AM_DEPTH = 0.1
_NOISE_CUTOFF_HZ = 2000.0
_TONE_GAIN = 0.25
_BURST_GAIN = 0.2


@dataclass(frozen=True)
class FanProfile:
    """Tonal + broadband recipe for one fan."""

    fundamental: float
    harmonics: tuple[float, ...]
    noise_level: float
    am_rate: float

    def __post_init__(self):
        if self.fundamental <= 20.0:
            raise ParameterError("fundamental must exceed 20 Hz")
        if not self.harmonics or min(self.harmonics) < 0.0:
            raise ParameterError("harmonics must be nonnegative amplitudes")
        if self.noise_level < 0.0 or self.am_rate < 0.0:
            raise ParameterError("noise_level and am_rate must be nonnegative")


@dataclass(frozen=True)
class AnomalySpec:
    kind: str
    onset: float
    duration: float
    severity: float

    def __post_init__(self):
        if self.kind not in ANOMALY_KINDS:
            raise ParameterError(f"unknown anomaly kind {self.kind!r}")
        if self.onset < 0.0 or self.duration <= 0.0:
            raise ParameterError("need onset >= 0 and duration > 0")
        if not (0.0 < self.severity <= 1.0):
            raise ParameterError("severity must be in (0, 1]")


def generate_fan(profile: FanProfile, duration: float, sample_rate: int, seed: int) -> AudioClip:
    """One fan recording: harmonic stack + shaped noise, slowly modulated.

    Deterministic per seed; raises when the profile would clip.
    """
    if duration < 1.0:
        raise ParameterError("duration must be at least 1 second")
    if profile.fundamental >= sample_rate / 4:
        raise ParameterError("fundamental must stay below sample_rate/4")
    n = int(round(duration * sample_rate))
    t = np.arange(n) / sample_rate
    rng = make_rng(seed)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=len(profile.harmonics))
    sig = np.zeros(n)
    for h, (amp, phase) in enumerate(zip(profile.harmonics, phases), start=1):
        sig += amp * np.sin(2.0 * np.pi * profile.fundamental * h * t + phase)
    if profile.noise_level > 0.0:
        alpha = float(np.exp(-2.0 * np.pi * _NOISE_CUTOFF_HZ / sample_rate))
        white = rng.standard_normal(n)
        shaped = lfilter([1.0 - alpha], [1.0, -alpha], white)
        sig += profile.noise_level * shaped
    if profile.am_rate > 0.0:
        sig *= 1.0 + _AM_DEPTH * np.sin(2.0 * np.pi * profile.am_rate * t)
    peak = float(np.abs(sig).max())
    if peak >= 1.0:
        raise ParameterError(f"profile clips (peak {peak:.3f} >= 1); lower its amplitudes")
    return AudioClip(quantize(sig), sample_rate)


def inject_anomaly(clip: AudioClip, spec: AnomalySpec, seed: int) -> AudioClip:
    """Apply one perturbation over [onset, onset + duration).

    Samples outside the window are bit-identical to the input; the window
    is re-quantized to the int16 grid.  Every kind scales with severity and
    vanishes as severity -> 0.
    """
    sr = clip.sample_rate
    i0 = int(round(spec.onset * sr))
    i1 = int(round((spec.onset + spec.duration) * sr))
    if i1 > clip.samples.size or i0 >= i1:
        raise ParameterError("anomaly window exceeds the clip")
    rng = make_rng(seed)
    t = np.arange(i1 - i0) / sr
    window = clip.samples[i0:i1].copy()
    if spec.kind == "added_tone":
        freq = rng.uniform(1000.0, 6000.0)
        window = window + spec.severity * _TONE_GAIN * np.sin(2.0 * np.pi * freq * t)
    elif spec.kind == "amplitude_drop":
        window = window * (1.0 - spec.severity)
    elif spec.kind == "noise_burst":
        window = window + spec.severity * _BURST_GAIN * rng.standard_normal(t.size)
    elif spec.kind == "harmonic_shift":
        shift = rng.uniform(30.0, 80.0)
        window = window * ((1.0 - spec.severity) + spec.severity * np.cos(2.0 * np.pi * shift * t))
    out = clip.samples.copy()
    out[i0:i1] = quantize(np.clip(window, -1.0, 1.0))
    return AudioClip(out, sr)


def default_profiles(count: int = 6) -> tuple[FanProfile, ...]:
    """Six stock fans in three loosely similar pairs.

    Pairs share a fundamental register and harmonic tilt, so a clustering
    of their spectra may merge them; that is deliberate.
    """
    stock = (
        FanProfile(96.0, (0.32, 0.20, 0.12, 0.07), 0.030, 0.7),
        FanProfile(108.0, (0.30, 0.22, 0.10, 0.06), 0.034, 0.9),
        FanProfile(172.0, (0.26, 0.08, 0.16, 0.04), 0.060, 1.3),
        FanProfile(186.0, (0.28, 0.07, 0.14, 0.05), 0.055, 1.1),
        FanProfile(251.0, (0.22, 0.15, 0.05, 0.10), 0.095, 1.7),
        FanProfile(268.0, (0.20, 0.17, 0.06, 0.08), 0.100, 1.9),
    )
    if count < 1:
        raise ParameterError("count must be >= 1")
    if count <= len(stock):
        return stock[:count]
    extra = []
    for i in range(count - len(stock)):
        base = stock[i % len(stock)]
        extra.append(
            FanProfile(base.fundamental * 1.31 + 7 * i, base.harmonics, base.noise_level, base.am_rate)
        )
    return stock + tuple(extra)


@dataclass(frozen=True)
class SegmentLabel:
    """One manifest row: a labeled time window of one file."""

    file: str
    start: float
    end: float
    label: str  # "normal" | "anomaly"
    kind: str  # anomaly kind or "-"


def write_manifest(path, segments) -> None:
    # write-to-temp + rename: consumers never see a partial manifest
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["file", "start", "end", "label", "kind"])
        for seg in segments:
            writer.writerow([seg.file, repr(seg.start), repr(seg.end), seg.label, seg.kind])
    tmp.replace(path)


def read_manifest(path) -> list[SegmentLabel]:
    segments = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["file", "start", "end", "label", "kind"]:
            raise FormatError(f"{path}: unexpected manifest header {header}")
        for row in reader:
            if len(row) != 5:
                raise FormatError(f"{path}: bad manifest row {row}")
            label = row[3]
            if label not in ("normal", "anomaly"):
                raise FormatError(f"{path}: unknown label {label!r}")
            segments.append(SegmentLabel(row[0], float(row[1]), float(row[2]), label, row[4]))
    if not segments:
        raise DataError(f"{path}: empty manifest")
    return segments


def build_fixture(
    out_dir,
    n_fans: int = 6,
    clip_seconds: float = 60.0,
    anomalies_per_fan: int = 10,
    sample_rate: int = 16000,
    segment_seconds: float = 1.0,
    seed: int = 0,
    severity_range: tuple[float, float] = (0.35, 0.9),
) -> Path:
    """Write the default fixture: one WAV per fan with anomaly events
    injected into whole segment windows, plus the labels manifest.

    Returns the manifest path.  Deterministic per seed, so a rerun
    produces byte-identical files.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n_segments = int(clip_seconds / segment_seconds)
    if anomalies_per_fan >= n_segments:
        raise ParameterError("anomalies_per_fan must be below the segment count")
    profiles = default_profiles(n_fans)
    segments: list[SegmentLabel] = []
    for fan, profile in enumerate(profiles):
        clip = generate_fan(profile, clip_seconds, sample_rate, derive_seed(seed, 0xFA0, fan))
        rng = make_rng(derive_seed(seed, 0xA0A, fan))
        chosen = np.sort(rng.choice(n_segments, size=anomalies_per_fan, replace=False))
        kinds = {}
        for j, seg in enumerate(chosen):
            kind = ANOMALY_KINDS[j % len(ANOMALY_KINDS)]
            severity = float(rng.uniform(*severity_range))
            spec = AnomalySpec(kind, float(seg) * segment_seconds, segment_seconds, severity)
            clip = inject_anomaly(clip, spec, derive_seed(seed, 0xA0A, fan, j))
            kinds[int(seg)] = kind
        name = f"fan{fan}.wav"
        save_wav(out / name, clip)
        for seg in range(n_segments):
            start = seg * segment_seconds
            if seg in kinds:
                segments.append(SegmentLabel(name, start, start + segment_seconds, "anomaly", kinds[seg]))
            else:
                segments.append(SegmentLabel(name, start, start + segment_seconds, "normal", "-"))
    manifest = out / "manifest.csv"
    write_manifest(manifest, segments)
    return manifest

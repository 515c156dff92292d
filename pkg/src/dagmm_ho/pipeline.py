"""End-to-end orchestration shared by the command line and the test
harness: segment feature assembly, the train/test split protocol, model
training, per-segment scoring, and the method-comparison table.

Segments are scored by the mean frame energy inside their window; a
segment is flagged when that mean exceeds the model's threshold eta.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import dagmm, evaluate, hpo
from .errors import DataError, ParameterError
from .features import AudioClip, FeatureConfig, FeatureMatrix, Standardizer, load_wav, log_mel
from .numcore import derive_seed
from .synth import SegmentLabel

METHOD_ORDER = ("DAE", "GMM", "PCA+GMM", "DAE+GMM", "Proposed")


def slice_clip(clip: AudioClip, start: float, end: float) -> AudioClip:
    i0 = int(round(start * clip.sample_rate))
    i1 = int(round(end * clip.sample_rate))
    if not (0 <= i0 < i1 <= clip.samples.size):
        raise DataError(f"segment [{start}, {end}) outside clip of {clip.duration:.2f} s")
    return AudioClip(clip.samples[i0:i1], clip.sample_rate)


def segment_windows(clip: AudioClip, segment_seconds: float) -> list[tuple[float, float]]:
    """Whole segment windows covering the clip; the partial tail is dropped."""
    if segment_seconds <= 0:
        raise ParameterError("segment_seconds must be positive")
    count = int(clip.duration / segment_seconds)
    return [(i * segment_seconds, (i + 1) * segment_seconds) for i in range(count)]


def extract_segment_features(
    data_dir, segments: list[SegmentLabel], cfg: FeatureConfig
) -> list[np.ndarray]:
    """Raw (unstandardized) log-mel frames for each manifest segment."""
    root = Path(data_dir)
    clips: dict[str, AudioClip] = {}
    out = []
    for seg in segments:
        if seg.file not in clips:
            clips[seg.file] = load_wav(root / seg.file)
        piece = slice_clip(clips[seg.file], seg.start, seg.end)
        out.append(log_mel(piece, cfg).frames)
    return out


def _stack(per_segment: list[np.ndarray], idx) -> np.ndarray:
    return np.vstack([per_segment[i] for i in idx])


@dataclass(frozen=True)
class SplitFeatures:
    """Features assembled under the split protocol, standardized on the
    training normals only."""

    segments: list[SegmentLabel]
    train_idx: np.ndarray
    test_idx: np.ndarray
    standardizer: Standardizer
    train_frames: np.ndarray            # standardized, stacked
    test_per_segment: list[np.ndarray]  # standardized, one matrix per test segment
    test_labels: np.ndarray


def assemble_split(data_dir, segments: list[SegmentLabel], cfg: FeatureConfig,
                   seed: int) -> SplitFeatures:
    labels = np.array([s.label == "anomaly" for s in segments])
    train_idx, test_idx = evaluate.split_protocol(labels, seed)
    per_segment = extract_segment_features(data_dir, segments, cfg)
    std = Standardizer.fit(_stack(per_segment, train_idx))
    train_frames = std.transform(_stack(per_segment, train_idx))
    test_per_segment = [std.transform(per_segment[i]) for i in test_idx]
    return SplitFeatures(
        segments, train_idx, test_idx, std, train_frames, test_per_segment, labels[test_idx]
    )


def train_model(
    split: SplitFeatures,
    cfg: dagmm.TrainConfig,
    bottleneck: int,
    components: int,
    encoder_hidden: tuple[int, ...] = (30, 10),
    estimation_hidden: tuple[int, ...] = (10,),
    dropout_keep: float = 0.5,
) -> dagmm.TrainedModel:
    arch = dagmm.NetworkArchitecture.default(
        split.train_frames.shape[1], bottleneck, components,
        encoder_hidden, estimation_hidden, dropout_keep,
    )
    return dagmm.train(split.train_frames, arch, cfg, split.standardizer)


def segment_mean_scores(per_segment: list[np.ndarray], frame_scores_fn) -> np.ndarray:
    """Mean per-segment score under any frame-level scoring function."""
    return np.array([float(np.mean(frame_scores_fn(frames))) for frames in per_segment])


@dataclass(frozen=True)
class SegmentScore:
    file: str
    start: float
    end: float
    mean_energy: float
    max_energy: float
    flagged: bool


def score_clip(model: dagmm.TrainedModel, clip: AudioClip, cfg: FeatureConfig,
               segment_seconds: float, file_name: str = "-") -> list[SegmentScore]:
    """Per-segment energies of one clip under a trained model."""
    out = []
    for start, end in segment_windows(clip, segment_seconds):
        frames = model.standardizer.transform(log_mel(slice_clip(clip, start, end), cfg).frames)
        e = dagmm.score(model, frames)
        mean_e, max_e = float(np.mean(e)), float(np.max(e))
        out.append(SegmentScore(file_name, start, end, mean_e, max_e, mean_e > model.eta))
    return out


# ---------------------------------------------------------------------------
# method comparison


@dataclass(frozen=True)
class MethodRow:
    method: str
    precision: float
    recall: float
    f1: float
    auc: float


@dataclass(frozen=True)
class ComparisonTable:
    rows: tuple[MethodRow, ...]

    def to_text(self) -> str:
        header = f"{'Method':<10} {'Precision':>9} {'Recall':>9} {'F1 score':>9} {'AUC':>9}"
        lines = [header, "-" * len(header)]
        for r in self.rows:
            lines.append(
                f"{r.method:<10} {r.precision:>9.3f} {r.recall:>9.3f} {r.f1:>9.3f} {r.auc:>9.3f}"
            )
        return "\n".join(lines)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["method", "precision", "recall", "f1", "auc"])
            for r in self.rows:
                writer.writerow([r.method, repr(r.precision), repr(r.recall), repr(r.f1), repr(r.auc)])

    @classmethod
    def read_csv(cls, path) -> "ComparisonTable":
        rows = []
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            next(reader)
            for row in reader:
                rows.append(MethodRow(row[0], float(row[1]), float(row[2]), float(row[3]), float(row[4])))
        return cls(tuple(rows))


def evaluate_methods(
    split: SplitFeatures,
    model: dagmm.TrainedModel,
    train_cfg: dagmm.TrainConfig,
    seed: int,
) -> ComparisonTable:
    """Run the proposed model and every in-scope baseline on one split.

    Baselines reuse the model's (K, c) so all methods see the same tuned
    hyper-parameters.  F1 thresholds maximize F1 on the test scores,
    applied uniformly to every method.
    """
    k = model.arch.components
    c = model.arch.bottleneck
    d = split.train_frames.shape[1]
    test_flat = np.vstack(split.test_per_segment)
    sizes = [m.shape[0] for m in split.test_per_segment]

    def per_segment_means(frame_scores: np.ndarray) -> np.ndarray:
        out, pos = [], 0
        for size in sizes:
            out.append(float(frame_scores[pos : pos + size].mean()))
            pos += size
        return np.array(out)

    arch_da = dagmm.NetworkArchitecture.default(d, c, k)
    scores = {
        "DAE": per_segment_means(
            evaluate.da_baseline(
                split.train_frames, test_flat, arch_da, replace(train_cfg, seed=derive_seed(seed, 1))
            )
        ),
        "GMM": per_segment_means(
            evaluate.gmm_em_baseline(split.train_frames, test_flat, k, seed=derive_seed(seed, 2))
        ),
        "PCA+GMM": per_segment_means(
            evaluate.two_step_baseline(
                "pca", "gmm_em", split.train_frames, test_flat, c, k,
                replace(train_cfg, seed=derive_seed(seed, 3)),
            )
        ),
        "DAE+GMM": per_segment_means(
            evaluate.two_step_baseline(
                "autoencoder", "gmm_em", split.train_frames, test_flat, c, k,
                replace(train_cfg, seed=derive_seed(seed, 4)),
            )
        ),
        "Proposed": np.array(
            [float(np.mean(dagmm.score(model, frames))) for frames in split.test_per_segment]
        ),
    }
    rows = []
    for method in METHOD_ORDER:
        labeled = evaluate.LabeledScores(scores[method], split.test_labels)
        report = evaluate.best_f1_threshold(labeled)
        rows.append(MethodRow(method, report.precision, report.recall, report.f1, report.auc))
    return ComparisonTable(tuple(rows))


def tune_features(split_or_frames, gap_cfg: hpo.GapConfig, max_rows: int = 2000) -> hpo.TuningReport:
    """Select (K, c) on normal training features."""
    frames = getattr(split_or_frames, "train_frames", split_or_frames)
    if isinstance(frames, FeatureMatrix):
        frames = frames.frames
    return hpo.tune(frames, gap_cfg, max_rows=max_rows)

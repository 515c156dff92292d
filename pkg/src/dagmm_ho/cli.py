"""Operator command line tying the pipeline together.

Subcommands: synth (write the synthetic fixture), tune (select K and c),
train (fit and persist a model), score (per-segment energy listing), and
eval (method-comparison table).  Exit codes: 0 success, 1 usage/config
error, 2 data error, 3 numeric failure.  Primary outputs are written to a
temporary file and renamed, so a nonzero exit never leaves a partial one.
"""

from __future__ import annotations

import argparse
import csv
import io
import sys
from pathlib import Path

from . import dagmm, pipeline, synth
from .config import PipelineConfig, config_epilog, load_config_file, make_config
from .errors import DataError, NumericError, ParameterError
from .features import load_wav, read_feature_cache
from .hpo import TuningReport


class _UsageError(ParameterError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); usage errors are exit 1
        raise _UsageError(message)


def _atomic_write(path: Path, text: str) -> None:
    tmp = Path(str(path) + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def _say(args, message: str) -> None:
    if not args.quiet:
        print(message)


def build_parser() -> _Parser:
    common = _Parser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="flat key = value config file")
    common.add_argument("--seed", type=int, metavar="U64", help="override every seed")
    common.add_argument("--out", metavar="DIR", help="output directory for this command")
    common.add_argument("--quiet", action="store_true", help="suppress progress output")

    parser = _Parser(
        prog="dagmm-ho",
        description=__doc__,
        epilog=config_epilog(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="write the synthetic fan fixture",
                       epilog=config_epilog(), formatter_class=argparse.RawDescriptionHelpFormatter)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("tune", parents=[common], help="select K (gap statistic) and c (PCA variance)",
                       epilog=config_epilog(), formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--manifest", metavar="PATH", help="segment labels manifest")
    p.add_argument("--data-dir", metavar="DIR", help="directory holding the WAV files")
    p.add_argument("--features", metavar="PATH", help="tune on a DGHF feature cache instead of audio")
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("train", parents=[common], help="train and persist a model",
                       epilog=config_epilog(), formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--manifest", metavar="PATH", help="segment labels manifest")
    p.add_argument("--data-dir", metavar="DIR", help="directory holding the WAV files")
    p.add_argument("--k", type=int, metavar="N", help="mixture components (beats config/tuning)")
    p.add_argument("--c", type=int, metavar="N", help="bottleneck dimension (beats config/tuning)")
    p.add_argument("--tuning", metavar="PATH", help="selected.kv written by `tune`")
    p.add_argument("--model-out", metavar="PATH", help="model file destination")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("score", parents=[common], help="per-segment energy listing for audio files",
                       epilog=config_epilog(), formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--model", required=True, metavar="PATH", help="trained model file")
    p.add_argument("audio", nargs="*", metavar="WAV", help="audio files to score")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("eval", parents=[common], help="compare the model against the baselines",
                       epilog=config_epilog(), formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--model", required=True, metavar="PATH", help="trained model file")
    p.add_argument("--manifest", metavar="PATH", help="segment labels manifest")
    p.add_argument("--data-dir", metavar="DIR", help="directory holding the WAV files")
    p.set_defaults(func=cmd_eval)
    return parser


def _resolve_config(args) -> PipelineConfig:
    overrides = {"seed": args.seed} if args.seed is not None else {}
    return make_config(args.config, overrides)


def _manifest_and_dir(args, cfg: PipelineConfig) -> tuple[Path, Path]:
    manifest = args.manifest or cfg.manifest
    if not manifest:
        raise _UsageError("a manifest is required (--manifest or config `manifest`)")
    data_dir = args.data_dir or cfg.data_dir
    return Path(manifest), Path(data_dir)


def cmd_synth(args, cfg: PipelineConfig) -> int:
    out = Path(args.out or cfg.data_dir)
    manifest = synth.build_fixture(
        out,
        n_fans=cfg.n_fans,
        clip_seconds=cfg.clip_seconds,
        anomalies_per_fan=cfg.anomalies_per_fan,
        sample_rate=cfg.sample_rate,
        segment_seconds=cfg.segment_seconds,
        seed=cfg.seed,
    )
    _say(args, f"wrote {cfg.n_fans} fan recordings and {manifest}")
    return 0


def _curves_csv(report: TuningReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["kind", "x", "y"])
    for sel, kind in ((report.gap, "gap"), (report.variance, "variance")):
        for x, y in zip(sel.curve.xs, sel.curve.ys):
            writer.writerow([kind, repr(float(x)), repr(float(y))])
    return buf.getvalue()


def _tuning_text(report: TuningReport) -> str:
    lines = [
        "hyper-parameter tuning report",
        f"rows used for clustering: {report.rows_used}",
        f"selected K = {report.k} (fallback: {report.gap.fallback})",
        f"selected c = {report.c} (fallback: {report.variance.fallback})",
        "",
        "gap curve (k, G):",
    ]
    for x, y in zip(report.gap.curve.xs, report.gap.curve.ys):
        lines.append(f"  {int(x):>3d}  {y: .6f}")
    lines.append("")
    lines.append("cumulative variance curve (dim, ratio):")
    for x, y in zip(report.variance.curve.xs, report.variance.curve.ys):
        lines.append(f"  {int(x):>3d}  {y: .6f}")
    for note in report.notes:
        lines.append(f"note: {note}")
    return "\n".join(lines) + "\n"


def cmd_tune(args, cfg: PipelineConfig) -> int:
    gap_cfg = cfg.gap_config()
    if args.features:
        frames, _, _ = read_feature_cache(args.features)
        report = pipeline.tune_features(frames, gap_cfg, max_rows=cfg.tune_max_rows)
    else:
        manifest, data_dir = _manifest_and_dir(args, cfg)
        segments = synth.read_manifest(manifest)
        split = pipeline.assemble_split(data_dir, segments, cfg.feature_config(), cfg.seed)
        report = pipeline.tune_features(split, gap_cfg, max_rows=cfg.tune_max_rows)
    out = Path(args.out or cfg.report_dir)
    out.mkdir(parents=True, exist_ok=True)
    _atomic_write(out / "tuning_report.txt", _tuning_text(report))
    _atomic_write(out / "tuning_curves.csv", _curves_csv(report))
    _atomic_write(
        out / "tuning_selected.kv",
        f"k = {report.k}\nc = {report.c}\n"
        f"k_fallback = {str(report.gap.fallback).lower()}\n"
        f"c_fallback = {str(report.variance.fallback).lower()}\n",
    )
    _say(args, f"selected K = {report.k}, c = {report.c}; report in {out}")
    return 0


def _selected_hyperparams(args, cfg: PipelineConfig) -> tuple[int, int]:
    k, c = cfg.components, cfg.bottleneck
    if args.tuning:
        kv = load_config_file(args.tuning)
        k = int(kv.get("k", k))
        c = int(kv.get("c", c))
    if args.k is not None:
        k = args.k
    if args.c is not None:
        c = args.c
    return k, c


def cmd_train(args, cfg: PipelineConfig) -> int:
    manifest, data_dir = _manifest_and_dir(args, cfg)
    k, c = _selected_hyperparams(args, cfg)
    segments = synth.read_manifest(manifest)
    split = pipeline.assemble_split(data_dir, segments, cfg.feature_config(), cfg.seed)
    model = pipeline.train_model(
        split, cfg.train_config(), c, k,
        cfg.encoder_hidden, cfg.estimation_hidden, cfg.dropout_keep,
    )
    model_path = Path(args.model_out) if args.model_out else Path(args.out or ".") / cfg.model_file
    model_path.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(str(model_path) + ".tmp")
    dagmm.save_model(tmp, model)
    tmp.replace(model_path)
    if model.loss_trace:
        _say(
            args,
            f"trained K={k}, c={c} on {split.train_frames.shape[0]} frames: "
            f"loss {model.loss_trace[0]:.4f} -> {model.loss_trace[-1]:.4f}, eta = {model.eta:.4f}",
        )
    _say(args, f"model written to {model_path}")
    return 0


def cmd_score(args, cfg: PipelineConfig) -> int:
    model = dagmm.load_model(args.model)
    rows = []
    for path in args.audio:
        clip = load_wav(path)
        rows.extend(
            pipeline.score_clip(model, clip, cfg.feature_config(), cfg.segment_seconds, str(path))
        )
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["file", "start", "end", "mean_energy", "max_energy", "flag"])
    for r in rows:
        writer.writerow([r.file, repr(r.start), repr(r.end), repr(r.mean_energy),
                         repr(r.max_energy), int(r.flagged)])
    text = buf.getvalue()
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _atomic_write(out / "scores.csv", text)
        _say(args, f"wrote {out / 'scores.csv'} ({len(rows)} segments)")
    if not args.quiet:
        sys.stdout.write(text)
    return 0


def cmd_eval(args, cfg: PipelineConfig) -> int:
    manifest, data_dir = _manifest_and_dir(args, cfg)
    model = dagmm.load_model(args.model)
    segments = synth.read_manifest(manifest)
    split = pipeline.assemble_split(data_dir, segments, cfg.feature_config(), cfg.seed)
    table = pipeline.evaluate_methods(split, model, cfg.train_config(), cfg.seed)
    out = Path(args.out or cfg.report_dir)
    out.mkdir(parents=True, exist_ok=True)
    _atomic_write(out / "comparison.txt", table.to_text() + "\n")
    tmp = out / "comparison.csv.tmp"
    table.write_csv(tmp)
    tmp.replace(out / "comparison.csv")
    if not args.quiet:
        print(table.to_text())
        print(f"tables written to {out}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = _resolve_config(args)
        return args.func(args, cfg)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except ParameterError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        term = getattr(exc, "term", None)
        suffix = f" (term: {term})" if term else ""
        print(f"numeric failure: {exc}{suffix}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())

"""Command-line driver: train / infer / evaluate / mix / analyze-exits.

The CLI never mutates its inputs; everything it produces lands under
--out. --seed pins every stochastic choice (mixture composition, batch
order, initialization).
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import data as D
from .inference import FramePrediction, InferenceConfig, frames_to_segments, majority_exit, predict_recording
from .losses import LossWeights
from .metrics import (
    DetectionReport,
    ExitRateReport,
    detection_counts,
    exit_rates,
    render_exit_csv,
    render_json,
    render_text,
    report_from_counts,
)
from .model import (
    ConfigError,
    CheckpointError,
    ModelConfig,
    build_model,
    load_checkpoint,
    save_checkpoint,
)
from .training import TrainConfig, fit, load_keyvalue_config, write_history

_MODEL_FIELDS = set(ModelConfig.__dataclass_fields__)
_TRAIN_FIELDS = set(TrainConfig.__dataclass_fields__) - {"loss_weights"}
_LOSS_FIELDS = set(LossWeights.__dataclass_fields__)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="exitvad",
        description="Joint voice-activity and overlapped-speech detection "
        "with a multi-exit CRNN over raw waveforms.",
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    fmt = argparse.ArgumentDefaultsHelpFormatter

    p_train = sub.add_parser(
        "train", formatter_class=fmt, help="train a model from annotated audio manifests"
    )
    p_train.add_argument("--config", type=Path, default=None, help="key=value config file (model and training keys)")
    p_train.add_argument("--manifest", type=Path, required=True, help="training manifest (JSON lines: id, audio, rttm)")
    p_train.add_argument("--dev-manifest", type=Path, default=None, help="dev manifest; when omitted, 10%% of training chunks are held out")
    p_train.add_argument("--out", type=Path, required=True, help="output directory for checkpoints and history")
    p_train.add_argument("--epochs", type=int, default=None, help="number of training epochs (published setting: 50)")
    p_train.add_argument("--batch", type=int, default=None, help="batch size in chunks (published setting: 256; desk-scale default 32)")
    p_train.add_argument("--seed", type=int, default=None, help="seed for init, shuffling, and splits")
    p_train.add_argument("--dc", action="store_true", help="use dense-connection conv stages")
    p_train.add_argument("--hop", type=float, default=0.75, help="training chunk hop in seconds")
    p_train.add_argument("--jobs", type=int, default=1, help="parallel workers for data loading")

    p_infer = sub.add_parser(
        "infer", formatter_class=fmt, help="predict speech/overlap segments for audio"
    )
    p_infer.add_argument("--checkpoint", type=Path, required=True, help="model checkpoint")
    p_infer.add_argument("--manifest", type=Path, required=True, help="audio manifest (rttm optional)")
    p_infer.add_argument("--out", type=Path, required=True, help="output directory for RTTM and frame dumps")
    p_infer.add_argument("--mode", choices=("normal", "exiting"), default="normal", help="labeling policy")
    p_infer.add_argument("--gamma", type=float, default=None, help="exit threshold (exiting mode only; published setting: 0.9)")
    p_infer.add_argument("--hop", type=float, default=0.3, help="window hop in seconds")
    p_infer.add_argument("--jobs", type=int, default=1, help="recordings processed in parallel")

    p_eval = sub.add_parser(
        "evaluate", formatter_class=fmt, help="score hypothesis segments against a reference"
    )
    p_eval.add_argument("--ref", type=Path, default=None, help="reference RTTM")
    p_eval.add_argument("--hyp", type=Path, default=None, help="hypothesis RTTM (alternative to --checkpoint)")
    p_eval.add_argument("--manifest", type=Path, default=None, help="annotated audio manifest (with --checkpoint)")
    p_eval.add_argument("--checkpoint", type=Path, default=None, help="model checkpoint to run before scoring")
    p_eval.add_argument("--out", type=Path, default=None, help="directory for the JSON report (text goes to stdout)")
    p_eval.add_argument("--mode", choices=("normal", "exiting"), default="normal", help="labeling policy (with --checkpoint)")
    p_eval.add_argument("--gamma", type=float, default=None, help="exit threshold (exiting mode only; published setting: 0.9)")
    p_eval.add_argument("--hop", type=float, default=0.3, help="window hop in seconds (with --checkpoint)")
    p_eval.add_argument("--jobs", type=int, default=1, help="recordings processed in parallel")

    p_mix = sub.add_parser(
        "mix", formatter_class=fmt, help="synthesize overlapped mixtures from a corpus"
    )
    p_mix.add_argument("--manifest", type=Path, required=True, help="source manifest (id, audio, rttm)")
    p_mix.add_argument("--out", type=Path, required=True, help="output directory for mixtures and combined manifest")
    p_mix.add_argument("--proportion", type=float, default=0.4, help="mixtures to add, as a fraction of source recordings")
    p_mix.add_argument("--seed", type=int, default=0, help="seed for pair choice, crops, and gains")
    p_mix.add_argument("--gain-range", type=float, default=5.0, help="mixing gain drawn uniformly from [-R, +R] dB")

    p_exits = sub.add_parser(
        "analyze-exits", formatter_class=fmt, help="exit-usage distribution per class over a threshold grid"
    )
    p_exits.add_argument("--checkpoint", type=Path, required=True, help="model checkpoint")
    p_exits.add_argument("--manifest", type=Path, required=True, help="annotated audio manifest")
    p_exits.add_argument("--out", type=Path, required=True, help="output directory for CSV/JSON reports")
    p_exits.add_argument("--gammas", type=str, default="0.9", help="comma-separated exit thresholds")
    p_exits.add_argument("--hop", type=float, default=0.3, help="window hop in seconds")
    p_exits.add_argument("--by-predicted", action="store_true", help="condition classes on predictions instead of the reference")
    p_exits.add_argument("--jobs", type=int, default=1, help="recordings processed in parallel")

    return parser


# ---------------------------------------------------------------------------
# Shared helpers
# ---------------------------------------------------------------------------

def _build_configs(args) -> tuple[ModelConfig, TrainConfig]:
    """Model + training config from an optional key=value file and flags."""
    model_kv: dict = {}
    train_kv: dict = {}
    loss_kv: dict = {}
    if args.config is not None:
        for key, value in load_keyvalue_config(args.config).items():
            if key in _MODEL_FIELDS:
                model_kv[key] = value
            elif key in _TRAIN_FIELDS:
                train_kv[key] = value
            elif key in _LOSS_FIELDS:
                loss_kv[key] = value
            else:
                raise ConfigError(f"unknown config key {key!r} in {args.config}")
    if args.dc:
        model_kv["dc_enabled"] = True
    if args.epochs is not None:
        train_kv["epochs"] = args.epochs
    if args.batch is not None:
        train_kv["batch_size"] = args.batch
    if args.seed is not None:
        train_kv["seed"] = args.seed
    model_config = ModelConfig.from_dict(model_kv) if model_kv else ModelConfig()
    train_config = TrainConfig(loss_weights=LossWeights(**loss_kv), **train_kv)
    return model_config, train_config


def _inference_config(args) -> InferenceConfig:
    if args.gamma is not None and args.mode == "normal":
        raise UsageError("--gamma only applies to --mode exiting")
    gamma = args.gamma if args.gamma is not None else 0.9
    return InferenceConfig(mode=args.mode, gamma=gamma, hop_s=args.hop)


class UsageError(Exception):
    """Bad flag combination; reported through argparse with status 2."""


def _map_recordings(fn, items: Sequence, jobs: int) -> list:
    if jobs <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def _labels_from_segments(segments, duration_s: float) -> np.ndarray:
    return D.frame_labels(segments, duration_s)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    model_config, train_config = _build_configs(args)
    hop = args.hop
    all_chunks = D.chunks_from_manifest(D.load_manifest(args.manifest), hop, jobs=args.jobs)
    if args.dev_manifest is not None:
        train_chunks = all_chunks
        dev_chunks = D.chunks_from_manifest(D.load_manifest(args.dev_manifest), hop, jobs=args.jobs)
    else:
        rng = np.random.default_rng(train_config.seed)
        order = rng.permutation(len(all_chunks))
        n_dev = max(1, len(all_chunks) // 10)
        dev_chunks = [all_chunks[i] for i in order[:n_dev]]
        train_chunks = [all_chunks[i] for i in order[n_dev:]] or dev_chunks

    args.out.mkdir(parents=True, exist_ok=True)
    model = build_model(model_config, seed=train_config.seed)
    result = fit(model, train_chunks, dev_chunks, train_config)
    save_checkpoint(result.best_model, args.out / "best.ckpt", training_state=result.training_state)
    save_checkpoint(model, args.out / "last.ckpt", training_state=result.training_state)
    write_history(result.history, args.out / "history.jsonl")
    print(
        f"trained {train_config.epochs} epochs on {len(train_chunks)} chunks "
        f"(dev {len(dev_chunks)}); best epoch {result.best_epoch}; "
        f"checkpoints in {args.out}"
    )
    return 0


def _predictions_to_segments(rec_id: str, predictions: list[FramePrediction]) -> list[D.SegmentAnnotation]:
    labels = [p.final_label for p in predictions]
    segs = frames_to_segments(labels)
    out = [
        D.SegmentAnnotation(rec_id, "speech", onset, offset - onset)
        for onset, offset in segs.vad_segments
    ] + [
        D.SegmentAnnotation(rec_id, "overlap", onset, offset - onset)
        for onset, offset in segs.osd_segments
    ]
    return sorted(out, key=lambda s: (s.onset_s, s.speaker_id))


def _frame_dump(predictions: list[FramePrediction]) -> str:
    lines = []
    for p in predictions:
        lines.append(
            json.dumps(
                {
                    "t": round(p.frame_index * D.FRAME_MS / 1000.0, 6),
                    "label": p.final_label,
                    "exit": majority_exit(p.votes),
                    "confidence": round(p.confidence, 6),
                }
            )
        )
    return "".join(line + "\n" for line in lines)


def cmd_infer(args) -> int:
    config = _inference_config(args)
    model, _ = load_checkpoint(args.checkpoint)
    entries = D.load_manifest(args.manifest)
    args.out.mkdir(parents=True, exist_ok=True)
    frames_dir = args.out / "frames"
    frames_dir.mkdir(exist_ok=True)

    def run(entry: D.ManifestEntry):
        audio = D.read_wav(entry.audio)
        predictions = predict_recording(model, audio, config)
        return entry.recording_id, predictions

    results = _map_recordings(run, entries, args.jobs)
    all_segments: list[D.SegmentAnnotation] = []
    for rec_id, predictions in results:
        all_segments.extend(_predictions_to_segments(rec_id, predictions))
        (frames_dir / f"{rec_id}.jsonl").write_text(_frame_dump(predictions))
    D.write_rttm(all_segments, args.out / "segments.rttm")
    print(f"wrote {args.out / 'segments.rttm'} and {len(results)} frame dumps")
    return 0


def _score_label_pairs(pairs: Sequence[tuple[np.ndarray, np.ndarray]]) -> list[DetectionReport]:
    reports = []
    for task in ("VAD", "OSD"):
        tp = fp = fn = frames = 0
        for ref, hyp in pairs:
            a, b, c = detection_counts(ref, hyp, task)
            tp, fp, fn = tp + a, fp + b, fn + c
            frames += len(ref)
        reports.append(report_from_counts(task, tp, fp, fn, frames))
    return reports


def cmd_evaluate(args) -> int:
    if args.hyp is not None:
        if args.ref is None:
            raise UsageError("--hyp requires --ref")
        if args.checkpoint is not None:
            raise UsageError("use either --hyp or --checkpoint, not both")
        ref_segments = D.load_rttm(args.ref)
        hyp_segments = D.load_rttm(args.hyp)
        rec_ids = sorted(
            {s.recording_id for s in ref_segments} | {s.recording_id for s in hyp_segments}
        )
        pairs = []
        for rec_id in rec_ids:
            ref_recording = [s for s in ref_segments if s.recording_id == rec_id]
            hyp_recording = [s for s in hyp_segments if s.recording_id == rec_id]
            duration = max(
                [s.end_s for s in ref_recording + hyp_recording], default=0.0
            )
            pairs.append(
                (
                    _labels_from_segments(ref_recording, duration),
                    _labels_from_segments(hyp_recording, duration),
                )
            )
    elif args.checkpoint is not None:
        if args.manifest is None:
            raise UsageError("--checkpoint requires --manifest with reference rttm entries")
        config = _inference_config(args)
        model, _ = load_checkpoint(args.checkpoint)
        entries = D.load_manifest(args.manifest)

        def run(entry: D.ManifestEntry) -> tuple[np.ndarray, np.ndarray]:
            audio, ref = D.load_recording(entry)
            predictions = predict_recording(model, audio, config)
            hyp = np.array([p.final_label for p in predictions], dtype=np.int64)
            return ref, hyp

        pairs = _map_recordings(run, entries, args.jobs)
    else:
        raise UsageError("evaluate needs --ref/--hyp or --manifest/--checkpoint")

    reports = _score_label_pairs(pairs)
    sys.stdout.write(render_text(reports))
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "report.json").write_text(render_json(reports))
    return 0


def _grid_crop(rng: np.random.Generator, length: int, target: int) -> int:
    slack = (length - target) // D.FRAME_SAMPLES
    return int(rng.integers(0, slack + 1)) * D.FRAME_SAMPLES if slack > 0 else 0


def cmd_mix(args) -> int:
    if not 0 <= args.proportion:
        raise UsageError("--proportion must be nonnegative")
    entries = D.load_manifest(args.manifest)
    for entry in entries:
        if entry.rttm is None:
            raise UsageError(f"mix needs rttm annotations; {entry.recording_id!r} has none")
    n_mix = int(round(args.proportion * len(entries)))
    if n_mix > 0 and len(entries) < 2:
        raise UsageError("mixing needs at least two source recordings")

    args.out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    out_entries = list(entries)
    for k in range(n_mix):
        i, j = rng.choice(len(entries), size=2, replace=False)
        wave_a = D.read_wav(entries[i].audio)
        wave_b = D.read_wav(entries[j].audio)
        target = min(wave_a.shape[0], wave_b.shape[0])
        target -= target % D.FRAME_SAMPLES
        if target == 0:
            raise ValueError("source recordings shorter than one frame cannot be mixed")
        off_a = _grid_crop(rng, wave_a.shape[0], target)
        off_b = _grid_crop(rng, wave_b.shape[0], target)
        duration = target / D.SAMPLE_RATE

        mix_id = f"mix{k:04d}"
        segments: list[D.SegmentAnnotation] = []
        for entry, offset in ((entries[i], off_a), (entries[j], off_b)):
            shift = offset / D.SAMPLE_RATE
            for seg in D.load_rttm(entry.rttm):
                if seg.recording_id != entry.recording_id:
                    continue
                onset = max(0.0, seg.onset_s - shift)
                end = min(duration, seg.end_s - shift)
                if end - onset > 1e-9:
                    segments.append(
                        D.SegmentAnnotation(
                            mix_id,
                            f"{entry.recording_id}_{seg.speaker_id}",
                            onset,
                            end - onset,
                        )
                    )
        labels_a = D.frame_labels(
            [s for s in segments if s.speaker_id.startswith(entries[i].recording_id + "_")], duration
        )
        labels_b = D.frame_labels(
            [s for s in segments if s.speaker_id.startswith(entries[j].recording_id + "_")], duration
        )
        gain_db = float(rng.uniform(-args.gain_range, args.gain_range))
        mixed, _ = D.synth_mix(
            wave_a[off_a : off_a + target],
            labels_a,
            wave_b[off_b : off_b + target],
            labels_b,
            gain_db,
        )
        wav_path = args.out / f"{mix_id}.wav"
        rttm_path = args.out / f"{mix_id}.rttm"
        D.write_wav(wav_path, mixed)
        D.write_rttm(sorted(segments, key=lambda s: (s.onset_s, s.speaker_id)), rttm_path)
        out_entries.append(D.ManifestEntry(mix_id, wav_path, rttm_path))

    D.write_manifest(out_entries, args.out / "manifest.jsonl")
    print(
        f"wrote {n_mix} mixtures; combined manifest "
        f"({len(out_entries)} recordings) at {args.out / 'manifest.jsonl'}"
    )
    return 0


def cmd_analyze_exits(args) -> int:
    try:
        gammas = [float(g) for g in args.gammas.split(",") if g.strip()]
    except ValueError:
        raise UsageError(f"--gammas must be comma-separated floats, got {args.gammas!r}")
    if not gammas:
        raise UsageError("--gammas must name at least one threshold")
    model, _ = load_checkpoint(args.checkpoint)
    entries = D.load_manifest(args.manifest)
    args.out.mkdir(parents=True, exist_ok=True)

    reports: list[ExitRateReport] = []
    for gamma in gammas:
        config = InferenceConfig(mode="exiting", gamma=gamma, hop_s=args.hop)

        def run(entry: D.ManifestEntry):
            audio, ref = D.load_recording(entry)
            return predict_recording(model, audio, config), ref

        results = _map_recordings(run, entries, args.jobs)
        predictions = [p for preds, _ in results for p in preds]
        refs = np.concatenate([ref for _, ref in results])
        reports.append(
            exit_rates(
                predictions,
                refs,
                gamma,
                num_exits=model.config.num_exits,
                by_predicted=args.by_predicted,
                dataset=f"gamma={gamma:g}",
            )
        )

    sys.stdout.write(render_text(reports))
    (args.out / "exit_rates.json").write_text(render_json(reports))
    (args.out / "exit_rates.csv").write_text(render_exit_csv(reports))
    return 0


_COMMANDS = {
    "train": cmd_train,
    "infer": cmd_infer,
    "evaluate": cmd_evaluate,
    "mix": cmd_mix,
    "analyze-exits": cmd_analyze_exits,
}


def run(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        parser.error(str(exc))  # exits with status 2
        return 2  # unreachable; keeps type checkers calm
    except (
        ValueError,
        FileNotFoundError,
        NotADirectoryError,
        IsADirectoryError,
        PermissionError,
        RuntimeError,
        CheckpointError,
        ConfigError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()

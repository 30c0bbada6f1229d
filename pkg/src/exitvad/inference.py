"""Sliding-window prediction, vote fusion, and segment emission.

Every exit is always evaluated; "exiting" is a per-frame labeling policy
(take the first exit whose top softmax probability beats the threshold),
not a compute-saving shortcut. Overlapping windows produce up to
ceil(window / hop) votes per frame, fused by majority vote.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Iterator, NamedTuple, Sequence

import numpy as np
import torch

from .data import (
    FRAME_MS,
    FRAME_SAMPLES,
    SAMPLE_RATE,
    AudioFormatError,
    _ceil_div,
    first_covered_frame,
    hop_samples_from_seconds,
    window_offsets,
)
from .model import MultiExitCRNN

_BATCH = 32


@dataclass(frozen=True)
class InferenceConfig:
    """Prediction-policy settings: mode, exit threshold, window geometry."""

    mode: str = "normal"
    gamma: float = 0.9
    hop_s: float = 0.3
    window_s: float = 1.5
    median_filter: int = 0  # odd smoothing window over fused labels; 0/1 = off

    def __post_init__(self) -> None:
        if self.mode not in ("normal", "exiting"):
            raise ValueError(f"mode must be 'normal' or 'exiting', got {self.mode!r}")
        if self.gamma < 0:
            raise ValueError(f"gamma must be nonnegative, got {self.gamma}")
        hop_samples_from_seconds(self.hop_s)
        if self.window_s <= 0:
            raise ValueError(f"window_s must be positive, got {self.window_s}")
        if self.hop_s > self.window_s + 1e-9:
            raise ValueError(f"hop_s ({self.hop_s}) must not exceed window_s ({self.window_s})")
        if self.median_filter < 0 or (self.median_filter > 1 and self.median_filter % 2 == 0):
            raise ValueError(f"median_filter must be 0 or an odd window, got {self.median_filter}")


class Vote(NamedTuple):
    """One chunk's opinion about one frame."""

    label: int
    exit_index: int  # 1-based; the final exit is num_exits
    confidence: float


@dataclass
class FramePrediction:
    """All votes covering one frame plus their fused decision."""

    frame_index: int
    votes: list[Vote]
    final_label: int
    confidence: float


@dataclass
class SegmentOutput:
    """Speech (classes 1+2) and overlap (class 2) segments in seconds."""

    vad_segments: list[tuple[float, float]]
    osd_segments: list[tuple[float, float]]


@contextlib.contextmanager
def _frozen(model: MultiExitCRNN) -> Iterator[None]:
    # Mode flips are not thread-safe; callers running recordings in
    # parallel must pass a model already in eval mode (as load_checkpoint
    # returns), which makes this a no-op apart from no_grad.
    was_training = model.training
    if was_training:
        model.eval()
    try:
        with torch.no_grad():
            yield
    finally:
        if was_training:
            model.train()


def _check_window(model: MultiExitCRNN, config: InferenceConfig) -> None:
    window_samples = int(round(config.window_s * SAMPLE_RATE))
    if window_samples != model.config.chunk_samples:
        raise ValueError(
            f"window_s={config.window_s} does not match the model chunk of "
            f"{model.config.chunk_samples} samples"
        )
    if model.config.chunk_samples != model.config.frames_per_chunk * FRAME_SAMPLES:
        raise ValueError(
            f"model frame grid is not {FRAME_MS} ms; recording-level "
            "prediction requires the standard grid"
        )


def exit_probabilities(model: MultiExitCRNN, waveforms: np.ndarray) -> np.ndarray:
    """Softmax class probabilities at every exit.

    waveforms: (n, chunk_samples) -> probabilities (n, num_exits, frames, classes).
    """
    arr = np.ascontiguousarray(waveforms, dtype=np.float32)
    if arr.ndim == 1:
        arr = arr[None, :]
    out_chunks = []
    with _frozen(model):
        for start in range(0, arr.shape[0], _BATCH):
            batch = torch.from_numpy(arr[start : start + _BATCH])
            outputs = model(batch)
            probs = torch.stack(
                [torch.softmax(z, dim=-1) for z in outputs.logits], dim=1
            )
            out_chunks.append(probs.numpy())
    return np.concatenate(out_chunks, axis=0)


def select_exits(probs: np.ndarray, config: InferenceConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Apply the labeling policy to per-exit probabilities.

    probs: (n, num_exits, frames, classes). Returns (labels, exits, confidence)
    each shaped (n, frames); exits are 1-based.

    Normal mode reads only the final exit. Exiting mode scans exits in
    order and takes the first whose top probability strictly exceeds
    gamma, falling back to the final exit.
    """
    n, num_exits, frames, _ = probs.shape
    top = probs.max(axis=-1)            # (n, M, T)
    arg = probs.argmax(axis=-1)         # (n, M, T)

    chosen = np.full((n, frames), num_exits - 1, dtype=np.int64)
    if config.mode == "exiting":
        for i in range(num_exits - 2, -1, -1):
            chosen = np.where(top[:, i, :] > config.gamma, i, chosen)

    rows = np.arange(n)[:, None]
    cols = np.arange(frames)[None, :]
    labels = arg[rows, chosen, cols]
    confidence = top[rows, chosen, cols]
    return labels, chosen + 1, confidence


def predict_chunk(model: MultiExitCRNN, waveform: np.ndarray, config: InferenceConfig) -> list[Vote]:
    """Per-frame (label, exit, confidence) for a single model window."""
    _check_window(model, config)
    probs = exit_probabilities(model, np.asarray(waveform, dtype=np.float32)[None, :])
    labels, exits, confidence = select_exits(probs, config)
    return [
        Vote(int(labels[0, t]), int(exits[0, t]), float(confidence[0, t]))
        for t in range(labels.shape[1])
    ]


def majority_vote(labels: Sequence[int]) -> int:
    """Most frequent label; ties go to the larger class index."""
    if len(labels) == 0:
        raise ValueError("majority_vote needs at least one label")
    counts: dict[int, int] = {}
    for lab in labels:
        counts[int(lab)] = counts.get(int(lab), 0) + 1
    best = max(counts.items(), key=lambda kv: (kv[1], kv[0]))
    return best[0]


def majority_exit(votes: Sequence[Vote]) -> int:
    """Most frequent exit index among votes; ties go to the earlier exit."""
    if len(votes) == 0:
        raise ValueError("majority_exit needs at least one vote")
    counts: dict[int, int] = {}
    for v in votes:
        counts[v.exit_index] = counts.get(v.exit_index, 0) + 1
    best = max(counts.items(), key=lambda kv: (kv[1], -kv[0]))
    return best[0]


def _median_smooth(labels: np.ndarray, window: int) -> np.ndarray:
    half = window // 2
    padded = np.pad(labels, half, mode="edge")
    stacked = np.stack([padded[i : i + labels.shape[0]] for i in range(window)])
    return np.median(stacked, axis=0).astype(np.int64)


def predict_recording(
    model: MultiExitCRNN,
    audio: np.ndarray,
    config: InferenceConfig,
) -> list[FramePrediction]:
    """Slide windows over a recording and fuse per-frame votes.

    Returns one prediction per 30 ms frame (ceil(duration / 30 ms) of
    them). The fused label is the majority of the covering chunks' labels;
    the fused confidence is the best confidence among winning votes.
    """
    _check_window(model, config)
    audio = np.asarray(audio, dtype=np.float32)
    if audio.ndim != 1:
        raise AudioFormatError(f"expected mono audio, got shape {audio.shape}")
    n = audio.shape[0]
    n_frames = _ceil_div(n, FRAME_SAMPLES) if n > 0 else 0
    if n_frames == 0:
        return []

    window = model.config.chunk_samples
    chunk_frames = model.config.frames_per_chunk
    hop = hop_samples_from_seconds(config.hop_s)
    offsets = window_offsets(n, hop, window)
    windows = np.zeros((len(offsets), window), dtype=np.float32)
    for row, o in enumerate(offsets):
        piece = audio[o : o + window]
        windows[row, : piece.shape[0]] = piece

    probs = exit_probabilities(model, windows)
    labels, exits, confidence = select_exits(probs, config)

    votes_per_frame: list[list[Vote]] = [[] for _ in range(n_frames)]
    for row, o in enumerate(offsets):
        base = first_covered_frame(o)
        for t in range(chunk_frames):
            g = base + t
            if 0 <= g < n_frames:
                votes_per_frame[g].append(
                    Vote(int(labels[row, t]), int(exits[row, t]), float(confidence[row, t]))
                )

    # A final frame whose midpoint falls past the last window end gets no
    # vote of its own (at most one per recording); it inherits the nearest
    # covered frame's votes so the output grid matches the label grid.
    last_votes: list[Vote] = []
    for frame_votes in votes_per_frame:
        if frame_votes:
            last_votes = frame_votes
    predictions: list[FramePrediction] = []
    for g, frame_votes in enumerate(votes_per_frame):
        if not frame_votes:
            frame_votes = list(last_votes)
        label = majority_vote([v.label for v in frame_votes])
        conf = max(v.confidence for v in frame_votes if v.label == label)
        predictions.append(FramePrediction(g, frame_votes, label, conf))

    if config.median_filter > 1:
        smoothed = _median_smooth(
            np.array([p.final_label for p in predictions], dtype=np.int64),
            config.median_filter,
        )
        for p, lab in zip(predictions, smoothed):
            p.final_label = int(lab)
    return predictions


def frames_to_segments(labels: Sequence[int], frame_ms: int = FRAME_MS) -> SegmentOutput:
    """Maximal runs of speech (label >= 1) and overlap (label == 2)."""
    labels = np.asarray(labels, dtype=np.int64)
    frame_s = frame_ms / 1000.0

    def runs(mask: np.ndarray) -> list[tuple[float, float]]:
        if mask.size == 0:
            return []
        edges = np.flatnonzero(np.diff(np.concatenate(([0], mask.view(np.int8), [0]))))
        return [
            (float(start * frame_s), float(end * frame_s))
            for start, end in zip(edges[::2], edges[1::2])
        ]

    return SegmentOutput(
        vad_segments=runs(labels >= 1),
        osd_segments=runs(labels == 2),
    )

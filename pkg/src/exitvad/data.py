"""Audio + annotation ingestion and training-chunk preparation.

Fixed geometry throughout: 16 kHz PCM16 mono WAV, 30 ms label frames,
1.5 s chunks of 50 frames. Anything off-contract is rejected rather than
silently converted (resampling would break frame-grid reproducibility).

Frame labels: 0 = non-speech, 1 = single speaker, 2 = overlapped. A
speaker counts as active in a frame iff one of their segments covers the
frame midpoint.
"""

from __future__ import annotations

import dataclasses
import json
import math
import wave
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

SAMPLE_RATE = 16000
FRAME_MS = 30
FRAME_SAMPLES = SAMPLE_RATE * FRAME_MS // 1000  # 480
CHUNK_SAMPLES = 24000
CHUNK_FRAMES = CHUNK_SAMPLES // FRAME_SAMPLES   # 50
NUM_CLASSES = 3

# Peak ceiling applied when mixing, leaves headroom below int16 full scale.
MIX_PEAK = 0.99


class RttmParseError(ValueError):
    """Malformed RTTM content; message names the offending line."""


class AudioFormatError(ValueError):
    """Audio that is not 16 kHz 16-bit PCM mono WAV."""


@dataclass(frozen=True)
class SegmentAnnotation:
    """One speaker-activity segment of a recording."""

    recording_id: str
    speaker_id: str
    onset_s: float
    duration_s: float

    @property
    def end_s(self) -> float:
        return self.onset_s + self.duration_s


@dataclass
class ChunkSample:
    """A 1.5 s training/inference window with its 50 frame labels."""

    waveform: np.ndarray   # float32, (CHUNK_SAMPLES,)
    labels: np.ndarray     # int64, (CHUNK_FRAMES,)
    source_id: str
    offset_s: float


@dataclass(frozen=True)
class ManifestEntry:
    recording_id: str
    audio: Path
    rttm: Optional[Path] = None  # absent for unannotated audio lists


def _ceil_div(a: int, b: int) -> int:
    return -((-a) // b)


def first_covered_frame(offset_samples: int) -> int:
    """Index of the first frame whose midpoint falls at/after the offset."""
    return _ceil_div(offset_samples - FRAME_SAMPLES // 2, FRAME_SAMPLES)


def window_offsets(n_samples: int, hop: int, window: int = CHUNK_SAMPLES) -> list[int]:
    """Window start samples: 0, hop, 2*hop, ..., with the last window moved
    back to end flush with the recording end.

    Moving (rather than adding) the dangling window keeps consecutive
    offsets >= hop apart, which caps votes per frame at ceil(window/hop).
    Only when hop > window/2 would the move open a coverage gap; then the
    end-aligned window is appended instead and the tail may collect one
    extra vote.
    """
    if n_samples <= window:
        return [0]
    last = n_samples - window
    offsets = list(range(0, last + 1, hop))
    if offsets[-1] == last:
        return offsets
    if len(offsets) >= 2 and last - offsets[-2] <= window:
        offsets[-1] = last
    else:
        offsets.append(last)
    return offsets


# ---------------------------------------------------------------------------
# RTTM
# ---------------------------------------------------------------------------

def parse_rttm(text: str) -> list[SegmentAnnotation]:
    """Parse RTTM lines into segment annotations.

    Only SPEAKER lines are read; other line types are ignored. Order is
    preserved. Malformed numeric fields raise RttmParseError with the
    1-based line number.
    """
    segments: list[SegmentAnnotation] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        fields = line.split()
        if fields[0] != "SPEAKER":
            continue
        if len(fields) < 8:
            raise RttmParseError(f"line {lineno}: expected at least 8 fields, got {len(fields)}")
        try:
            onset = float(fields[3])
            duration = float(fields[4])
        except ValueError as exc:
            raise RttmParseError(f"line {lineno}: non-numeric onset/duration") from exc
        if not math.isfinite(onset) or not math.isfinite(duration):
            raise RttmParseError(f"line {lineno}: non-finite onset/duration")
        if onset < 0:
            raise RttmParseError(f"line {lineno}: negative onset {onset}")
        if duration <= 0:
            raise RttmParseError(f"line {lineno}: non-positive duration {duration}")
        segments.append(
            SegmentAnnotation(
                recording_id=fields[1],
                speaker_id=fields[7],
                onset_s=onset,
                duration_s=duration,
            )
        )
    return segments


def load_rttm(path) -> list[SegmentAnnotation]:
    return parse_rttm(Path(path).read_text())


def format_rttm(segments: Iterable[SegmentAnnotation]) -> str:
    """Render segments as RTTM, onset/duration with 2-decimal fixed point."""
    lines = [
        f"SPEAKER {s.recording_id} 1 {s.onset_s:.2f} {s.duration_s:.2f} "
        f"<NA> <NA> {s.speaker_id} <NA> <NA>"
        for s in segments
    ]
    return "".join(line + "\n" for line in lines)


def write_rttm(segments: Iterable[SegmentAnnotation], path) -> None:
    Path(path).write_text(format_rttm(segments))


# ---------------------------------------------------------------------------
# Frame labels
# ---------------------------------------------------------------------------

def num_frames(duration_s: float, frame_ms: int = FRAME_MS) -> int:
    """ceil(duration / frame), tolerant of float rounding at grid points."""
    if duration_s < 0:
        raise ValueError(f"duration must be nonnegative, got {duration_s}")
    return max(0, math.ceil(duration_s * 1000.0 / frame_ms - 1e-9))


def frame_labels(
    segments: Sequence[SegmentAnnotation],
    total_duration_s: float,
    frame_ms: int = FRAME_MS,
) -> np.ndarray:
    """Rasterize speaker segments to per-frame labels {0, 1, 2}.

    A frame's label is the number of distinct active speakers, saturated
    at 2. Segments reaching past total_duration_s are clipped with a
    warning.
    """
    frame_s = frame_ms / 1000.0
    n = num_frames(total_duration_s, frame_ms)
    counts = np.zeros(n, dtype=np.int64)

    by_speaker: dict[str, list[SegmentAnnotation]] = {}
    for seg in segments:
        if seg.end_s > total_duration_s + 1e-9:
            warnings.warn(
                f"segment {seg.speaker_id}@{seg.onset_s:.2f}s extends past the "
                f"recording end ({total_duration_s:.2f}s); clipping",
                stacklevel=2,
            )
        by_speaker.setdefault(seg.speaker_id, []).append(seg)

    for speaker_segments in by_speaker.values():
        active = np.zeros(n, dtype=bool)
        for seg in speaker_segments:
            end = min(seg.end_s, total_duration_s)
            # frame i is covered iff onset <= (i + 0.5) * frame_s < end
            i0 = max(0, math.ceil(seg.onset_s / frame_s - 0.5 - 1e-9))
            i1 = min(n, math.ceil(end / frame_s - 0.5 - 1e-9))
            if i1 > i0:
                active[i0:i1] = True
        counts += active

    return np.minimum(counts, 2).astype(np.int64)


# ---------------------------------------------------------------------------
# Chunking
# ---------------------------------------------------------------------------

def hop_samples_from_seconds(hop_s: float) -> int:
    """Validate a hop and convert it to samples (must sit on the 30 ms grid)."""
    hop = int(round(hop_s * SAMPLE_RATE))
    if hop <= 0 or abs(hop - hop_s * SAMPLE_RATE) > 1e-6 or hop % FRAME_SAMPLES != 0:
        raise ValueError(f"hop must be a positive multiple of {FRAME_MS} ms, got {hop_s}")
    return hop


def make_chunks(audio: np.ndarray, labels: np.ndarray, hop_s: float, source_id: str = "") -> list[ChunkSample]:
    """Cut an annotated recording into 1.5 s windows.

    Windows start at 0, hop, 2*hop, ...; when the recording length is not
    a whole number of hops the last window is shifted back to end exactly
    at the recording end. A recording shorter than one window yields a
    single zero-padded chunk (labels padded with 0). Each chunk carries
    the 50 labels whose frame midpoints fall inside its span.
    """
    audio = np.asarray(audio)
    if audio.ndim != 1:
        raise AudioFormatError(f"expected mono audio, got shape {audio.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    n = audio.shape[0]
    expected_frames = _ceil_div(n, FRAME_SAMPLES)
    if labels.shape != (expected_frames,):
        raise ValueError(
            f"labels must cover the 30 ms grid: expected {expected_frames} frames "
            f"for {n} samples, got {labels.shape}"
        )
    hop = hop_samples_from_seconds(hop_s)

    if n < CHUNK_SAMPLES:
        wave_out = np.zeros(CHUNK_SAMPLES, dtype=np.float32)
        wave_out[:n] = audio
        labels_out = np.zeros(CHUNK_FRAMES, dtype=np.int64)
        labels_out[: labels.shape[0]] = labels[:CHUNK_FRAMES]
        return [ChunkSample(wave_out, labels_out, source_id, 0.0)]

    chunks = []
    for o in window_offsets(n, hop):
        i0 = first_covered_frame(o)
        chunks.append(
            ChunkSample(
                waveform=audio[o : o + CHUNK_SAMPLES].astype(np.float32, copy=False),
                labels=labels[i0 : i0 + CHUNK_FRAMES].copy(),
                source_id=source_id,
                offset_s=o / SAMPLE_RATE,
            )
        )
    return chunks


# ---------------------------------------------------------------------------
# Mixing and augmentation
# ---------------------------------------------------------------------------

def merge_overlap_labels(labels_a: np.ndarray, labels_b: np.ndarray) -> np.ndarray:
    """Label merge for a two-source mixture: overlap where both speak."""
    la = np.asarray(labels_a, dtype=np.int64)
    lb = np.asarray(labels_b, dtype=np.int64)
    if la.shape != lb.shape:
        raise ValueError(f"label length mismatch: {la.shape} vs {lb.shape}")
    both = (la >= 1) & (lb >= 1)
    return np.where(both, 2, np.maximum(la, lb)).astype(np.int64)


def synth_mix(
    wave_a: np.ndarray,
    labels_a: np.ndarray,
    wave_b: np.ndarray,
    labels_b: np.ndarray,
    gain_db: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Weighted downmix of two equal-length sources.

    The second source is scaled by 10^(gain_db/20); the sum is peak
    normalized down to MIX_PEAK full scale when it would exceed it.
    """
    wa = np.asarray(wave_a, dtype=np.float32)
    wb = np.asarray(wave_b, dtype=np.float32)
    if wa.shape != wb.shape:
        raise ValueError(f"waveform length mismatch: {wa.shape} vs {wb.shape}")
    gain = 10.0 ** (gain_db / 20.0)
    mixed = wa + np.float32(gain) * wb
    peak = float(np.max(np.abs(mixed))) if mixed.size else 0.0
    if peak > MIX_PEAK:
        mixed = mixed * np.float32(MIX_PEAK / peak)
    return mixed.astype(np.float32), merge_overlap_labels(labels_a, labels_b)


def apply_augmentation(
    chunk: ChunkSample,
    transform: Callable[[np.ndarray], np.ndarray],
) -> ChunkSample:
    """Apply a waveform-to-waveform transform (noise, reverb, ...).

    Labels are untouched: additive corruption never changes who is
    speaking. The transform must preserve length.
    """
    out = np.asarray(transform(chunk.waveform), dtype=np.float32)
    if out.shape != chunk.waveform.shape:
        raise ValueError(
            f"augmentation changed the waveform length: "
            f"{chunk.waveform.shape} -> {out.shape}"
        )
    return dataclasses.replace(chunk, waveform=out)


def label_histogram(chunks: Iterable[ChunkSample], num_classes: int = NUM_CLASSES) -> np.ndarray:
    """Frame counts per class over a chunk dataset."""
    counts = np.zeros(num_classes, dtype=np.int64)
    for chunk in chunks:
        counts += np.bincount(chunk.labels, minlength=num_classes)[:num_classes]
    return counts


# ---------------------------------------------------------------------------
# WAV I/O (strict contract, no conversion)
# ---------------------------------------------------------------------------

def read_wav(path) -> np.ndarray:
    """Read a 16 kHz PCM16 mono WAV into float32 in [-1, 1)."""
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as wf:
            channels = wf.getnchannels()
            width = wf.getsampwidth()
            rate = wf.getframerate()
            if channels != 1:
                raise AudioFormatError(f"{path}: expected mono audio, got {channels} channels")
            if width != 2:
                raise AudioFormatError(f"{path}: expected 16-bit PCM, got {8 * width}-bit")
            if rate != SAMPLE_RATE:
                raise AudioFormatError(
                    f"{path}: expected {SAMPLE_RATE} Hz, got {rate} Hz (no resampling is done)"
                )
            frames = wf.readframes(wf.getnframes())
    except wave.Error as exc:
        raise AudioFormatError(f"{path}: not a readable WAV file ({exc})") from exc
    return np.frombuffer(frames, dtype="<i2").astype(np.float32) / 32768.0


def write_wav(path, samples: np.ndarray, sample_rate: int = SAMPLE_RATE) -> None:
    """Write float samples as PCM16 mono WAV."""
    clipped = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 32767.0 / 32768.0)
    pcm = np.round(clipped * 32768.0).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(sample_rate)
        wf.writeframes(pcm.tobytes())


# ---------------------------------------------------------------------------
# Manifests (JSON lines: {"audio": ..., "rttm": ..., "id": ...})
# ---------------------------------------------------------------------------

def load_manifest(path) -> list[ManifestEntry]:
    """Load a JSON-lines manifest; relative paths resolve against its directory."""
    path = Path(path)
    base = path.parent
    entries: list[ManifestEntry] = []
    seen: set[str] = set()
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        try:
            record = json.loads(line)
            rec_id = record["id"]
            audio = Path(record["audio"])
            rttm = Path(record["rttm"]) if "rttm" in record else None
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ValueError(f"{path}:{lineno}: bad manifest entry ({exc})") from exc
        audio = audio if audio.is_absolute() else base / audio
        if rttm is not None and not rttm.is_absolute():
            rttm = base / rttm
        if rec_id in seen:
            raise ValueError(f"{path}:{lineno}: duplicate recording id {rec_id!r}")
        seen.add(rec_id)
        for p in (audio, rttm):
            if p is not None and not p.exists():
                raise FileNotFoundError(f"{path}:{lineno}: missing file {p}")
        entries.append(ManifestEntry(recording_id=rec_id, audio=audio, rttm=rttm))
    return entries


def write_manifest(entries: Iterable[ManifestEntry], path) -> None:
    """Write a manifest; paths under the manifest directory are relativized."""
    path = Path(path)
    base = path.parent.resolve()

    def fmt(p: Path) -> str:
        p = p.resolve()
        try:
            return str(p.relative_to(base))
        except ValueError:
            return str(p)

    with open(path, "w") as fh:
        for e in entries:
            record = {"id": e.recording_id, "audio": fmt(e.audio)}
            if e.rttm is not None:
                record["rttm"] = fmt(e.rttm)
            fh.write(json.dumps(record) + "\n")


def load_recording(entry: ManifestEntry) -> tuple[np.ndarray, np.ndarray]:
    """Read one manifest entry into (audio, frame labels)."""
    if entry.rttm is None:
        raise ValueError(f"manifest entry {entry.recording_id!r} has no rttm annotation")
    audio = read_wav(entry.audio)
    segments = [s for s in load_rttm(entry.rttm) if s.recording_id == entry.recording_id]
    duration = audio.shape[0] / SAMPLE_RATE
    return audio, frame_labels(segments, duration)


def chunks_from_manifest(
    entries: Sequence[ManifestEntry], hop_s: float, jobs: int = 1
) -> list[ChunkSample]:
    """Cut every manifest recording into chunks; order follows the manifest."""

    def one(entry: ManifestEntry) -> list[ChunkSample]:
        audio, labels = load_recording(entry)
        return make_chunks(audio, labels, hop_s, source_id=entry.recording_id)

    if jobs <= 1 or len(entries) <= 1:
        per_recording = [one(e) for e in entries]
    else:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=jobs) as pool:
            per_recording = list(pool.map(one, entries))
    return [chunk for rec in per_recording for chunk in rec]

"""Frame-level detection metrics and per-exit usage analysis.

FA and Miss are both normalized by the reference positive-class frame
count, so ER = FA + Miss holds identically. Metrics that would divide by
zero are reported as explicitly undefined (None), never as 0.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from .inference import FramePrediction, majority_exit

TASKS = ("VAD", "OSD")
_POSITIVE = {"VAD": (1, 2), "OSD": (2,)}


@dataclass(frozen=True)
class DetectionReport:
    """Detection scores for one task; rate fields are None when undefined."""

    task: str
    fa: Optional[float]         # percent of reference positives
    miss: Optional[float]       # percent of reference positives
    er: Optional[float]         # fa + miss
    precision: Optional[float]
    recall: Optional[float]
    f1: Optional[float]
    frame_count: int


@dataclass(frozen=True)
class ExitRateReport:
    """Share of frames of each reference class decided at each exit."""

    gamma: float
    num_exits: int
    rates: dict[int, Optional[tuple[float, ...]]]  # class -> per-exit rates
    dataset: str = ""


def detection_counts(
    ref: Sequence[int], hyp: Sequence[int], task: str
) -> tuple[int, int, int]:
    """(true positives, false positives, false negatives) for one task."""
    if task not in _POSITIVE:
        raise ValueError(f"task must be one of {TASKS}, got {task!r}")
    ref = np.asarray(ref, dtype=np.int64)
    hyp = np.asarray(hyp, dtype=np.int64)
    if ref.shape != hyp.shape:
        raise ValueError(f"ref and hyp lengths differ: {ref.shape} vs {hyp.shape}")
    positive = _POSITIVE[task]
    ref_pos = np.isin(ref, positive)
    hyp_pos = np.isin(hyp, positive)
    tp = int(np.sum(ref_pos & hyp_pos))
    fp = int(np.sum(~ref_pos & hyp_pos))
    fn = int(np.sum(ref_pos & ~hyp_pos))
    return tp, fp, fn


def report_from_counts(task: str, tp: int, fp: int, fn: int, frame_count: int) -> DetectionReport:
    ref_pos = tp + fn
    if ref_pos > 0:
        miss = 100.0 * fn / ref_pos
        fa = 100.0 * fp / ref_pos
        er = fa + miss
    else:
        miss = fa = er = None
    precision = tp / (tp + fp) if (tp + fp) > 0 else None
    recall = tp / (tp + fn) if (tp + fn) > 0 else None
    if precision is None or recall is None:
        f1 = None
    elif precision + recall == 0:
        f1 = 0.0
    else:
        f1 = 2 * precision * recall / (precision + recall)
    return DetectionReport(task, fa, miss, er, precision, recall, f1, frame_count)


def detection_metrics(ref: Sequence[int], hyp: Sequence[int], task: str) -> DetectionReport:
    """Score a hypothesis label sequence against a reference, per frame."""
    tp, fp, fn = detection_counts(ref, hyp, task)
    return report_from_counts(task, tp, fp, fn, frame_count=len(ref))


def exit_rates(
    predictions: Sequence[FramePrediction],
    ref: Sequence[int],
    gamma: float,
    num_exits: int = 3,
    by_predicted: bool = False,
    dataset: str = "",
) -> ExitRateReport:
    """Per-class distribution of decision exits under exiting mode.

    A frame's exit is the majority exit among its votes (ties toward the
    earlier exit). Classes are reference classes by default; set
    by_predicted to condition on the fused predicted class instead.
    Absent classes get None.
    """
    ref = np.asarray(ref, dtype=np.int64)
    if len(predictions) != ref.shape[0]:
        raise ValueError(
            f"predictions ({len(predictions)}) and reference ({ref.shape[0]}) lengths differ"
        )
    tallies = {k: np.zeros(num_exits, dtype=np.int64) for k in range(3)}
    for pred, ref_label in zip(predictions, ref):
        cls = pred.final_label if by_predicted else int(ref_label)
        exit_idx = majority_exit(pred.votes)
        if not 1 <= exit_idx <= num_exits:
            raise ValueError(f"exit index {exit_idx} outside 1..{num_exits}")
        tallies[cls][exit_idx - 1] += 1
    rates: dict[int, Optional[tuple[float, ...]]] = {}
    for cls, tally in tallies.items():
        total = int(tally.sum())
        rates[cls] = tuple(float(t) / total for t in tally) if total > 0 else None
    return ExitRateReport(gamma=gamma, num_exits=num_exits, rates=rates, dataset=dataset)


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

Report = Union[DetectionReport, ExitRateReport]


def _fmt(value: Optional[float], digits: int) -> str:
    return "n/a" if value is None else f"{value:.{digits}f}"


_DETECTION_HEADER = (
    f"{'fa%':>8} {'miss%':>8} {'er%':>8} {'precision':>10} {'recall':>8} {'f1':>8} {'frames':>8}"
)


def render_text(reports: Sequence[Report]) -> str:
    """One section per report: detection reports first, then exit rates."""
    detection = [r for r in reports if isinstance(r, DetectionReport)]
    exits = [r for r in reports if isinstance(r, ExitRateReport)]
    lines: list[str] = []
    for r in detection:
        if lines:
            lines.append("")
        lines.append(f"== {r.task} ==")
        lines.append(_DETECTION_HEADER)
        lines.append(
            f"{_fmt(r.fa, 2):>8} {_fmt(r.miss, 2):>8} {_fmt(r.er, 2):>8} "
            f"{_fmt(r.precision, 3):>10} {_fmt(r.recall, 3):>8} {_fmt(r.f1, 3):>8} {r.frame_count:>8}"
        )
    for r in exits:
        if lines:
            lines.append("")
        label = f" [{r.dataset}]" if r.dataset else ""
        lines.append(f"== exit rates (gamma={r.gamma:g}){label} ==")
        lines.append(f"{'class':<6} " + " ".join(f"{'exit' + str(i + 1):>8}" for i in range(r.num_exits)))
        for cls in sorted(r.rates):
            row = r.rates[cls]
            cells = (
                " ".join(f"{_fmt(None, 3):>8}" for _ in range(r.num_exits))
                if row is None
                else " ".join(f"{v:>8.3f}" for v in row)
            )
            lines.append(f"{cls:<6} {cells}")
    return "\n".join(lines) + "\n"


def render_json(reports: Sequence[Report]) -> str:
    payload: dict = {"detection": [], "exit_rates": []}
    for r in reports:
        if isinstance(r, DetectionReport):
            payload["detection"].append(
                {
                    "task": r.task,
                    "fa": r.fa,
                    "miss": r.miss,
                    "er": r.er,
                    "precision": r.precision,
                    "recall": r.recall,
                    "f1": r.f1,
                    "frames": r.frame_count,
                }
            )
        else:
            payload["exit_rates"].append(
                {
                    "dataset": r.dataset,
                    "gamma": r.gamma,
                    "num_exits": r.num_exits,
                    "rates": {
                        str(cls): (list(v) if v is not None else None)
                        for cls, v in sorted(r.rates.items())
                    },
                }
            )
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def render_exit_csv(reports: Sequence[Report]) -> str:
    """Plot-ready long-format CSV of per-exit rates."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["dataset", "class", "exit", "rate"])
    for r in reports:
        if not isinstance(r, ExitRateReport):
            continue
        for cls in sorted(r.rates):
            row = r.rates[cls]
            if row is None:
                continue
            for i, rate in enumerate(row):
                writer.writerow([r.dataset, cls, i + 1, f"{rate:.6f}"])
    return buf.getvalue()


def parse_report_json(text: str) -> list[Report]:
    """Inverse of render_json; rendering the result reproduces the text."""
    payload = json.loads(text)
    reports: list[Report] = []
    for d in payload.get("detection", []):
        reports.append(
            DetectionReport(
                task=d["task"],
                fa=d["fa"],
                miss=d["miss"],
                er=d["er"],
                precision=d["precision"],
                recall=d["recall"],
                f1=d["f1"],
                frame_count=d["frames"],
            )
        )
    for e in payload.get("exit_rates", []):
        reports.append(
            ExitRateReport(
                gamma=e["gamma"],
                num_exits=e["num_exits"],
                rates={
                    int(cls): (tuple(v) if v is not None else None)
                    for cls, v in e["rates"].items()
                },
                dataset=e["dataset"],
            )
        )
    return reports


def render_report(reports: Sequence[Report]) -> tuple[str, str, str]:
    """(text table, JSON document, exit-rate CSV) for a set of reports."""
    return render_text(reports), render_json(reports), render_exit_csv(reports)

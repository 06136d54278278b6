"""Group robustness, Attention-IoU and non-target bias correlation."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .encoder import cosine_similarity
from .exceptions import InputError, NumericalError, UndefinedCorrelationError

REPORT_COLUMNS = ("run_id", "dataset", "variant", "wg", "avg", "gap", "mean_attention_iou",
                  "correlation", "n_samples")


@dataclass(frozen=True)
class GroupedPrediction:
    predicted_class: int
    true_class: int
    group_id: int


@dataclass(frozen=True)
class GroupMetrics:
    wg: float
    avg: float
    gap: float
    group_accuracy: dict[int, float] = field(default_factory=dict)
    group_counts: dict[int, int] = field(default_factory=dict)


def group_metrics(predictions: Sequence[GroupedPrediction],
                  groups: Iterable[int] | None = None) -> GroupMetrics:
    """Average accuracy, worst-group accuracy and their gap.

    ``groups`` declares the expected group ids; a declared group with no
    predictions is an error. By default the groups present in
    ``predictions`` are used.
    """
    if not predictions:
        raise InputError("no predictions to score")
    correct: dict[int, int] = {}
    counts: dict[int, int] = {}
    for p in predictions:
        counts[p.group_id] = counts.get(p.group_id, 0) + 1
        correct[p.group_id] = correct.get(p.group_id, 0) + int(p.predicted_class == p.true_class)
    declared = sorted(set(groups)) if groups is not None else sorted(counts)
    for g in declared:
        if counts.get(g, 0) == 0:
            raise InputError(f"group {g} has no predictions")
    acc = {g: correct[g] / counts[g] for g in declared}
    avg = sum(correct.values()) / len(predictions)
    wg = min(acc.values())
    return GroupMetrics(wg=wg, avg=avg, gap=avg - wg, group_accuracy=acc,
                        group_counts={g: counts[g] for g in declared})


def attention_threshold(attention, mass: float = 0.5) -> float:
    """Largest threshold whose super-level set carries at least ``mass`` of the attention.

    The set ``{p : A(p) >= tau}`` for this ``tau`` is the smallest patch set
    (ties included) reaching the requested cumulative mass. Sums use
    ``math.fsum`` so ties and exact-boundary cases are resolved consistently.
    """
    values = np.asarray(attention, dtype=np.float64).ravel()
    if values.size == 0 or np.any(values < 0) or not np.all(np.isfinite(values)):
        raise NumericalError("attention must be finite, non-negative and non-empty")
    if math.fsum(values) <= 0:
        raise NumericalError("attention map has zero mass")
    ordered = np.sort(values)[::-1]
    for k in range(ordered.size):
        if math.fsum(ordered[:k + 1]) >= mass:
            return float(ordered[k])
    # only reachable when the total mass is below ``mass``
    return float(ordered[-1])


@dataclass(frozen=True)
class AttentionIoU:
    iou: float
    threshold: float
    selected: np.ndarray
    empty_target: bool = False


def attention_iou(attention, target_patches, mass: float = 0.5) -> AttentionIoU:
    """IoU between the high-attention patch set and the target patch mask.

    ``attention`` must be mass-normalized (sum 1) on the same grid as
    ``target_patches``. An empty target yields IoU 0 with ``empty_target`` set.
    """
    att = np.asarray(attention, dtype=np.float64)
    tgt = np.asarray(target_patches)
    if att.shape != tgt.shape:
        raise InputError(f"attention grid {att.shape} and target grid {tgt.shape} differ")
    if not np.all((tgt == 0) | (tgt == 1)):
        raise InputError("target patch mask must be binary")
    tau = attention_threshold(att, mass)
    selected = att >= tau
    tgt = tgt.astype(bool)
    union = np.logical_or(selected, tgt).sum()
    inter = np.logical_and(selected, tgt).sum()
    return AttentionIoU(iou=float(inter / union) if union else 0.0, threshold=tau,
                        selected=selected, empty_target=not tgt.any())


@dataclass(frozen=True)
class DeltaPair:
    delta_nontarget: float
    delta_full: float


def delta_similarities(nontarget_emb, full_emb, prompt1, prompt2) -> DeltaPair:
    """Similarity differences between two prompts for the non-target and the full embedding."""
    return DeltaPair(
        cosine_similarity(nontarget_emb, prompt1) - cosine_similarity(nontarget_emb, prompt2),
        cosine_similarity(full_emb, prompt1) - cosine_similarity(full_emb, prompt2),
    )


def correlation(pairs: Sequence[DeltaPair]) -> float:
    """Pearson correlation of ``(delta_nontarget, delta_full)``."""
    if len(pairs) < 2:
        raise UndefinedCorrelationError("correlation needs at least two pairs")
    x = np.array([p.delta_nontarget for p in pairs], dtype=np.float64)
    y = np.array([p.delta_full for p in pairs], dtype=np.float64)
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise UndefinedCorrelationError("correlation needs finite deltas")
    # exact constancy test; centring a constant column can leave rounding residue
    if np.ptp(x) == 0.0 or np.ptp(y) == 0.0:
        raise UndefinedCorrelationError("correlation is undefined for zero-variance data")
    xc, yc = x - x.mean(), y - y.mean()
    sx, sy = math.sqrt(float(xc @ xc)), math.sqrt(float(yc @ yc))
    return float(np.clip((xc @ yc) / (sx * sy), -1.0, 1.0))


@dataclass
class ReportRow:
    run_id: str
    dataset: str
    variant: str
    wg: float
    avg: float
    gap: float
    mean_attention_iou: float | None
    correlation: float | None
    n_samples: int
    group_counts: dict[int, int] = field(default_factory=dict)
    group_accuracy: dict[int, float] = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {c: getattr(self, c) for c in REPORT_COLUMNS}


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(round(value, 10))
    return str(value)


def emit_report(rows: Sequence[ReportRow], path, format: str = "csv") -> Path:
    """Write report rows as CSV (fixed column order) or JSON.

    Per-group counts and accuracies are appended as ``n_group<k>`` /
    ``acc_group<k>`` columns in CSV output.
    """
    if not rows:
        raise InputError("no results to report")
    path = Path(path)
    groups = sorted({g for r in rows for g in r.group_counts})
    if format == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        extra = [f"n_group{g}" for g in groups] + [f"acc_group{g}" for g in groups]
        writer.writerow(list(REPORT_COLUMNS) + extra)
        for r in rows:
            writer.writerow([_fmt(getattr(r, c)) for c in REPORT_COLUMNS]
                            + [_fmt(r.group_counts.get(g)) for g in groups]
                            + [_fmt(r.group_accuracy.get(g)) for g in groups])
        text = buf.getvalue()
    elif format in ("json", "structured-text"):
        payload = []
        for r in rows:
            d = r.as_dict()
            d["group_counts"] = {str(g): r.group_counts[g] for g in sorted(r.group_counts)}
            d["group_accuracy"] = {str(g): r.group_accuracy[g] for g in sorted(r.group_accuracy)}
            payload.append(d)
        text = json.dumps(payload, indent=2, sort_keys=False) + "\n"
    else:
        raise InputError(f"unknown report format {format!r}")
    try:
        path.write_text(text)
    except OSError as exc:
        raise OSError(f"cannot write report to {path}: {exc}") from exc
    return path


def write_deltas(pairs: Sequence[DeltaPair], path) -> Path:
    """Two-column CSV ``delta_nontarget,delta_full`` for scatter plots."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["delta_nontarget", "delta_full"])
        for p in pairs:
            writer.writerow([repr(float(p.delta_nontarget)), repr(float(p.delta_full))])
    return path

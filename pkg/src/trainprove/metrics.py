"""Scoring verdicts against ground truth: confusion counts, accuracy, F1, AUROC.

Illegal is the positive class. AUROC uses the illegality score carried by
each report and the Mann-Whitney formulation with half credit for ties.

Per-cell CSV (``cells.csv``) columns::

    defender,source,suspect_index,variant,truth,verdict,correct,g,g0,score,suspect_mean,shadow_mean,status

Summary CSV (``summary.csv``) columns::

    variant,defender,tp,fp,fn,tn,accuracy,f1,auroc

with one ``defender=AVERAGE`` row per variant holding the mean of the
per-defender accuracy, F1, and AUROC.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from trainprove.errors import OneClassOnly, UndefinedF1

CELL_COLUMNS = [
    "defender", "source", "suspect_index", "variant", "truth", "verdict", "correct",
    "g", "g0", "score", "suspect_mean", "shadow_mean", "status",
]
SUMMARY_COLUMNS = ["variant", "defender", "tp", "fp", "fn", "tn", "accuracy", "f1", "auroc"]
AVERAGE = "AVERAGE"


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    @classmethod
    def from_pairs(cls, predicted: Iterable[bool], actual: Iterable[bool]) -> "ConfusionCounts":
        tp = fp = fn = tn = 0
        for p, a in zip(predicted, actual):
            if p and a:
                tp += 1
            elif p:
                fp += 1
            elif a:
                fn += 1
            else:
                tn += 1
        return cls(tp, fp, fn, tn)


def accuracy_f1(c: ConfusionCounts) -> tuple[float, float]:
    if c.total == 0:
        raise ValueError("no instances to score")
    denom = 2 * c.tp + c.fp + c.fn
    if denom == 0:
        raise UndefinedF1("F1 is undefined without any positive predictions or positives")
    return (c.tp + c.tn) / c.total, 2 * c.tp / denom


def auroc(scores: Sequence[float], labels: Sequence[bool]) -> float:
    """P(random positive outscores random negative), ties count one half."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=bool)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise OneClassOnly("AUROC needs at least one positive and one negative")
    ranks = _average_ranks(s)
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _average_ranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    ranks = np.empty(x.size, dtype=np.float64)
    i = 0
    while i < xs.size:
        j = i
        while j + 1 < xs.size and xs[j + 1] == xs[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


@dataclass(frozen=True)
class BlockScore:
    defender: str
    counts: ConfusionCounts
    accuracy: float
    f1: float
    auroc: float


@dataclass(frozen=True)
class Aggregate:
    blocks: tuple[BlockScore, ...]
    accuracy: float
    f1: float
    auroc: float

    @property
    def counts(self) -> ConfusionCounts:
        total = ConfusionCounts()
        for b in self.blocks:
            total = total + b.counts
        return total


def _nan_safe_f1(c: ConfusionCounts) -> float:
    try:
        return accuracy_f1(c)[1]
    except UndefinedF1:
        return math.nan


def _nan_safe_auroc(scores, labels) -> float:
    try:
        return auroc(scores, labels)
    except OneClassOnly:
        return math.nan


def score_block(defender: str, rows: Sequence[tuple[bool, bool, float]]) -> BlockScore:
    """``rows`` holds (predicted_illegal, truly_illegal, illegality_score)."""
    if not rows:
        raise ValueError("cannot score an empty block")
    counts = ConfusionCounts.from_pairs((r[0] for r in rows), (r[1] for r in rows))
    acc = (counts.tp + counts.tn) / counts.total
    return BlockScore(
        defender, counts, acc, _nan_safe_f1(counts),
        _nan_safe_auroc([r[2] for r in rows], [r[1] for r in rows]),
    )


def aggregate(reports: Sequence[tuple]) -> Aggregate:
    """Score ``(report, truly_illegal)`` pairs, one block per defender.

    The overall accuracy/F1/AUROC is the unweighted mean over defender blocks,
    matching the per-generator averaging of the evaluation tables.
    """
    if not reports:
        raise ValueError("no reports to aggregate")
    by_defender: dict[str, list] = {}
    for report, truth in reports:
        illegal = report.verdict.value == "illegal"
        by_defender.setdefault(report.defender_id, []).append((illegal, bool(truth), report.illegality_score))
    blocks = tuple(score_block(d, rows) for d, rows in by_defender.items())
    return Aggregate(
        blocks,
        float(np.mean([b.accuracy for b in blocks])),
        float(np.mean([b.f1 for b in blocks])),
        float(np.mean([b.auroc for b in blocks])),
    )


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------


def fmt(v) -> str:
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(rows: Sequence[dict], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([fmt(r.get(c, "")) for c in columns])
    return buf.getvalue()


def read_csv(text: str) -> list[dict]:
    return list(csv.DictReader(io.StringIO(text)))


def summarize_cells(cells: Sequence[dict]) -> list[dict]:
    """Collapse per-cell rows into per-(variant, defender) rows plus averages.

    Cells whose ``status`` is not ``ok`` are excluded. Input values may be
    strings as read back from ``cells.csv``.
    """
    grouped: dict[str, dict[str, list]] = {}
    for c in cells:
        if c.get("status", "ok") != "ok":
            continue
        rows = grouped.setdefault(str(c["variant"]), {}).setdefault(str(c["defender"]), [])
        rows.append((str(c["verdict"]) == "illegal", str(c["truth"]) == "illegal", float(c["score"])))
    out = []
    for variant in sorted(grouped):
        blocks = [score_block(d, rows) for d, rows in grouped[variant].items()]
        for b in blocks:
            out.append({
                "variant": variant, "defender": b.defender,
                "tp": b.counts.tp, "fp": b.counts.fp, "fn": b.counts.fn, "tn": b.counts.tn,
                "accuracy": b.accuracy, "f1": b.f1, "auroc": b.auroc,
            })
        total = ConfusionCounts()
        for b in blocks:
            total = total + b.counts
        out.append({
            "variant": variant, "defender": AVERAGE,
            "tp": total.tp, "fp": total.fp, "fn": total.fn, "tn": total.tn,
            "accuracy": float(np.mean([b.accuracy for b in blocks])),
            "f1": float(np.mean([b.f1 for b in blocks])),
            "auroc": float(np.mean([b.auroc for b in blocks])),
        })
    return out

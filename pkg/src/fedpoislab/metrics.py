"""Detection quality metrics, the composite score, trace summaries, CSV sinks."""

import csv
from dataclasses import dataclass

import numpy as np

from .defenses import pca_reduce
from .errors import InputError


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise InputError("confusion counts must be non-negative")

    @property
    def population(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def __add__(self, other):
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.tn + other.tn, self.fn + other.fn)


@dataclass(frozen=True)
class CompositeParams:
    alpha: float = 0.6
    beta: float = 0.4

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise InputError("weights must be >= 0")
        if abs(self.alpha + self.beta - 1.0) > 1e-9:
            raise InputError("alpha + beta must equal 1")


def confusion(flags: set, truth: set, population: set) -> ConfusionCounts:
    """Set arithmetic over flagged / truly-malicious / all evaluated clients."""
    flags, truth, population = set(flags), set(truth), set(population)
    if not flags <= population:
        raise InputError("flags must be a subset of the population")
    if not truth <= population:
        raise InputError("truth must be a subset of the population")
    tp = len(flags & truth)
    fp = len(flags - truth)
    fn = len(truth - flags)
    tn = len(population) - tp - fp - fn
    return ConfusionCounts(tp, fp, tn, fn)


def prf(counts: ConfusionCounts) -> tuple:
    """(accuracy, precision, recall, f1) with explicit degenerate conventions:
    an empty flag set is perfectly precise only when nothing was malicious,
    and recall over an empty truth set is 1."""
    if counts.population == 0:
        raise InputError("empty population")
    accuracy = (counts.tp + counts.tn) / counts.population
    if counts.tp + counts.fp == 0:
        precision = 1.0 if counts.tp + counts.fn == 0 else 0.0
    else:
        precision = counts.tp / (counts.tp + counts.fp)
    if counts.tp + counts.fn == 0:
        recall = 1.0
    else:
        recall = counts.tp / (counts.tp + counts.fn)
    f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return accuracy, precision, recall, f1


def false_positive_rate(counts: ConfusionCounts) -> float:
    """FPR = FP / (FP + TN); 0 when there are no benign clients to misflag."""
    denom = counts.fp + counts.tn
    return counts.fp / denom if denom else 0.0


def composite_score(recall: float, fpr: float, params: CompositeParams = CompositeParams()) -> float:
    """100 * (alpha * recall + beta * (1 - FPR)), bounded in [0, 100]."""
    if not 0.0 <= recall <= 1.0:
        raise InputError(f"recall {recall} outside [0, 1]")
    if not 0.0 <= fpr <= 1.0:
        raise InputError(f"fpr {fpr} outside [0, 1]")
    return 100.0 * (params.alpha * recall + params.beta * (1.0 - fpr))


@dataclass(frozen=True)
class TraceSummary:
    final_accuracy: float
    last10_mean: float
    max_drop: float


def summarize(trace, clean_trace=None) -> TraceSummary:
    """Final accuracy, mean of the last up-to-10 rounds, max drop vs clean."""
    trace = np.asarray(trace, dtype=np.float64)
    if trace.size == 0:
        raise InputError("empty accuracy trace")
    drop = 0.0
    if clean_trace is not None:
        clean = np.asarray(clean_trace, dtype=np.float64)
        if clean.shape != trace.shape:
            raise InputError("traces have different lengths")
        drop = float((clean - trace).max())
    return TraceSummary(float(trace[-1]), float(trace[-10:].mean()), drop)


def project_window(update_rows: dict, truth: set) -> list:
    """Fig-style stealthiness export: 2-D PCA of all updates in a window.

    update_rows maps round -> UpdateMatrix. The projection is fitted on every
    update in the window at once; each (client, round) becomes one output row
    (round, client_id, pc1, pc2, truth_malicious).
    """
    rounds = sorted(update_rows)
    stacked, owners = [], []
    for r in rounds:
        um = update_rows[r]
        stacked.append(um.rows)
        owners.extend((r, int(cid)) for cid in um.ids)
    if not stacked:
        raise InputError("no updates to project")
    all_rows = np.vstack(stacked)
    if all_rows.shape[0] < 2:
        raise InputError("need at least 2 updates to project")
    coords = pca_reduce(all_rows, 2)
    return [(r, cid, float(c[0]), float(c[1]), cid in truth)
            for (r, cid), c in zip(owners, coords)]


def projection_history(rows: list) -> dict:
    """Regroup projection rows into client id -> list of 2-D points,
    the shape the interval detectors consume."""
    history = {}
    for _, cid, pc1, pc2, _ in rows:
        history.setdefault(cid, []).append(np.array([pc1, pc2]))
    return history


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


RESULTS_HEADER = ["round", "scenario", "malicious_fraction", "attack", "aggregator",
                  "defense", "accuracy"]
DETECTIONS_HEADER = ["round", "detector", "client_id", "score", "threshold",
                     "flagged", "truth_malicious"]
PROJECTIONS_HEADER = ["round", "client_id", "pc1", "pc2", "truth_malicious"]


def write_results_csv(path, rows):
    _write_csv(path, RESULTS_HEADER, rows)


def write_detections_csv(path, rows):
    _write_csv(path, DETECTIONS_HEADER, rows)


def write_projections_csv(path, rows):
    _write_csv(path, PROJECTIONS_HEADER, rows)

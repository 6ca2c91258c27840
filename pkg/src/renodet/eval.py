"""Kidney-wise voting, ROC analysis, Dice, and cross-validation folds.

Scores flow in per sample, get voted into one number per kidney, summed
across folds, and judged by threshold sweeps. AUC uses tie-aware pairwise
counting in integer arithmetic, so it agrees bit-for-bit with a brute
force pairwise comparison at any size.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence

import numpy as np

from .errors import DataError

TOP_TILE_VOTES = 10
SMALL_CUTOFF_MM = 40.0
N_FOLDS = 5


@dataclass
class KidneyRecord:
    """One kidney's ground truth and a model's score for it."""

    kidney_id: str
    patient_id: str
    truth: str                  # cancerous | healthy
    tumour_max_diameter: float  # mm, 0 for healthy kidneys
    score: float

    def __post_init__(self):
        if self.truth not in ("cancerous", "healthy"):
            raise DataError(f"unknown truth value {self.truth!r}")
        if self.tumour_max_diameter < 0:
            raise DataError("tumour diameter must be non-negative")
        if not np.isfinite(self.score):
            raise DataError(f"score for {self.kidney_id} is not finite")


@dataclass
class RocCurve:
    """Threshold sweep: predict positive when score >= threshold."""

    thresholds: np.ndarray
    sensitivities: np.ndarray
    specificities: np.ndarray
    auc: float


def kidney_score(probabilities: Sequence[float], kind: str,
                 top_votes: int | None = None) -> float:
    """Vote samples into one kidney score.

    Tiles: sum of the 10 highest cancer probabilities, or all of them when
    fewer exist. Blocks: the single highest. Accumulation is left to right
    in descending order, so an independent sort-based oracle reproduces
    the result exactly.
    """
    if top_votes is None:
        top_votes = TOP_TILE_VOTES
    values = [float(p) for p in probabilities]
    if not values:
        raise DataError("cannot score a kidney with no samples")
    if kind == "block3d":
        return max(values)
    if kind != "tile2d":
        raise DataError(f"unknown sample kind {kind!r}")
    top = sorted(values, reverse=True)[:top_votes]
    total = 0.0
    for v in top:
        total += v
    return total


def fold_sum(per_fold_scores: Sequence[float]) -> float:
    """Sum of the five fold scores; summed in sorted order so the result
    does not depend on fold ordering."""
    if len(per_fold_scores) != N_FOLDS:
        raise DataError(
            f"expected {N_FOLDS} fold scores, got {len(per_fold_scores)}")
    return float(np.sort(np.asarray(per_fold_scores, dtype=np.float64)).sum())


# ---------------------------------------------------------------------------
# ROC / AUC
# ---------------------------------------------------------------------------

def _mann_whitney_half_credits(pos: np.ndarray, neg: np.ndarray) -> int:
    """Twice the Mann-Whitney win count: 2 per strict win, 1 per tie.

    Pure integer arithmetic over sorted unique values; dividing by 2|P||N|
    afterwards gives the exact same float a pairwise loop would.
    """
    values = np.unique(np.concatenate([pos, neg]))
    pos_at = {v: 0 for v in values}
    neg_at = {v: 0 for v in values}
    for v in pos:
        pos_at[v] += 1
    for v in neg:
        neg_at[v] += 1
    credits = 0
    neg_below = 0
    for v in values:   # ascending
        credits += pos_at[v] * (2 * neg_below + neg_at[v])
        neg_below += neg_at[v]
    return credits


def roc_auc(records: Sequence[KidneyRecord]) -> RocCurve:
    """Threshold sweep over the unique scores plus AUC.

    The sweep starts above the maximum score (nothing predicted positive)
    and descends through every distinct value.
    """
    scores = np.array([r.score for r in records], dtype=np.float64)
    positive = np.array([r.truth == "cancerous" for r in records])
    n_pos = int(positive.sum())
    n_neg = len(records) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DataError("ROC needs both cancerous and healthy kidneys")

    thresholds = [np.inf]
    sens = [0.0]
    spec = [1.0]
    for t in np.unique(scores)[::-1]:
        predicted = scores >= t
        tp = int((predicted & positive).sum())
        tn = int((~predicted & ~positive).sum())
        thresholds.append(float(t))
        sens.append(tp / n_pos)
        spec.append(tn / n_neg)

    credits = _mann_whitney_half_credits(scores[positive], scores[~positive])
    auc = credits / (2 * n_pos * n_neg)
    return RocCurve(thresholds=np.array(thresholds),
                    sensitivities=np.array(sens),
                    specificities=np.array(spec), auc=float(auc))


def stratify(records: Sequence[KidneyRecord],
             cutoff_mm: float = SMALL_CUTOFF_MM) -> Dict[str, List[KidneyRecord]]:
    """Small-lesion vs large-lesion strata; healthy kidneys join both.

    Small keeps cancerous kidneys at or under the cutoff; both strata get
    every healthy kidney so specificity stays computable.
    """
    healthy = [r for r in records if r.truth == "healthy"]
    cancerous = [r for r in records if r.truth == "cancerous"]
    small = [r for r in cancerous if r.tumour_max_diameter <= cutoff_mm]
    large = [r for r in cancerous if r.tumour_max_diameter > cutoff_mm]
    return {"small": small + healthy, "large": large + healthy}


def dice(gt, pred) -> float:
    """Overlap coefficient 2|A^B|/(|A|+|B|); two empty masks count as 1."""
    a = np.asarray(getattr(gt, "labels", getattr(gt, "values", gt)))
    b = np.asarray(getattr(pred, "labels", getattr(pred, "values", pred)))
    if a.shape != b.shape:
        raise DataError(f"mask geometries differ: {a.shape} vs {b.shape}")
    a = a.astype(bool)
    b = b.astype(bool)
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / denom


# ---------------------------------------------------------------------------
# Folds
# ---------------------------------------------------------------------------

def make_folds(patient_ids: Sequence[str], k: int = N_FOLDS,
               seed: int = 0) -> List[List[str]]:
    """Patient-wise folds: shuffled patients dealt round-robin.

    Sizes differ by at most one patient; duplicates in the input collapse
    to one patient. Deterministic for a given seed.
    """
    unique = sorted(set(patient_ids))
    if len(unique) < k:
        raise DataError(f"{len(unique)} patients cannot fill {k} folds")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(unique))
    folds: List[List[str]] = [[] for _ in range(k)]
    for pos, idx in enumerate(order):
        folds[pos % k].append(unique[idx])
    return [sorted(f) for f in folds]


def fold_record_indices(record_patients: Sequence[str],
                        patient_folds: Sequence[Sequence[str]]
                        ) -> List[List[int]]:
    """Record indices held out per fold, from a patient-level assignment."""
    where = {}
    for fold, patients in enumerate(patient_folds):
        for p in patients:
            if p in where:
                raise DataError(f"patient {p} assigned to two folds")
            where[p] = fold
    out: List[List[int]] = [[] for _ in patient_folds]
    for i, patient in enumerate(record_patients):
        if patient not in where:
            raise DataError(f"patient {patient} missing from fold assignment")
        out[where[patient]].append(i)
    return out


# ---------------------------------------------------------------------------
# Export
# ---------------------------------------------------------------------------

def save_roc_csv(curve: RocCurve, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["threshold", "sensitivity", "specificity"])
        for t, sn, sp in zip(curve.thresholds, curve.sensitivities,
                             curve.specificities):
            writer.writerow([repr(float(t)), repr(float(sn)),
                             repr(float(sp))])


def save_summary_json(summary: dict, path) -> None:
    Path(path).write_text(json.dumps(summary, indent=2, sort_keys=True)
                          + "\n")

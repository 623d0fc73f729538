"""Optimal matching of predictions to ground truth and the derived metrics.

Matching minimizes the total Euclidean distance over one-to-one pairs
(linear sum assignment on the full rectangular distance matrix, no distance
gating) and is thresholded afterwards: pairs within t_match are true
positives, pairs beyond it count one false positive and one false negative,
and unmatched coordinates count per side.

Calibration scores (Brier, NLL) run over the union of scored terms:
matched ground truth contributes (1, p of its prediction), ground truth
without a usable match contributes (1, 0), and surplus predictions
contribute (0, p). Deterministic detectors are scored with p = 1.
Probabilities are clipped to [eps, 1 - eps] for the NLL so deterministic
mistakes stay finite.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .coords import CoordSet

NLL_EPS = 1e-7
DEFAULT_T_MATCH_UM = 4.0


@dataclass
class MatchReport:
    t_match_um: float
    pairs: list[tuple[int, int, float]]
    unmatched_gt: list[int]
    unmatched_pred: list[int]
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    f1: float
    brier: float
    nll: float
    zero_prediction_precision: bool = False
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "t_match_um": self.t_match_um,
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "brier": self.brier,
            "nll": self.nll,
            "n_gt": self.tp + self.fn,
            "n_pred": self.tp + self.fp,
            "zero_prediction_precision": self.zero_prediction_precision,
        }


def hungarian_match(gt: CoordSet, pred: CoordSet) -> list[tuple[int, int, float]]:
    """One-to-one assignment of min(|gt|, |pred|) pairs minimizing summed distance.

    Returns (gt_index, pred_index, distance_um) sorted by gt index. Either
    side may be empty.
    """
    n, m = len(gt), len(pred)
    if n == 0 or m == 0:
        return []
    diff = gt.coords[:, None, :] - pred.coords[None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=2))
    rows, cols = linear_sum_assignment(dist)
    pairs = [(int(r), int(c), float(dist[r, c])) for r, c in zip(rows, cols)]
    pairs.sort()
    return pairs


def _match_terms(gt: CoordSet, pred: CoordSet, t_match_um: float):
    """Split the assignment into TP pairs and unmatched/far leftovers."""
    pairs = hungarian_match(gt, pred)
    tp_pairs = [p for p in pairs if p[2] <= t_match_um]
    far_pairs = [p for p in pairs if p[2] > t_match_um]
    matched_gt = {p[0] for p in pairs}
    matched_pred = {p[1] for p in pairs}
    un_gt = [i for i in range(len(gt)) if i not in matched_gt]
    un_pred = [j for j in range(len(pred)) if j not in matched_pred]
    return tp_pairs, far_pairs, un_gt, un_pred


def score_probability_terms(targets, probs, eps: float = NLL_EPS) -> tuple[float, float]:
    """Brier and NLL of binary targets under predicted probabilities.

    Normalization is by the number of scored terms; probabilities are
    clipped to [eps, 1 - eps] for the NLL only.
    """
    targets = np.asarray(targets, dtype=np.float64)
    probs = np.asarray(probs, dtype=np.float64)
    if targets.shape != probs.shape:
        raise ValueError("targets and probs must have equal length")
    if targets.size == 0:
        return 0.0, 0.0
    brier = float(np.mean((targets - probs) ** 2))
    q = np.clip(probs, eps, 1.0 - eps)
    nll = float(-np.mean(targets * np.log(q) + (1.0 - targets) * np.log1p(-q)))
    return brier, nll


def _calibration_targets(gt, pred, t_match_um):
    tp_pairs, far_pairs, un_gt, un_pred = _match_terms(gt, pred, t_match_um)
    p_pred = pred.p if pred.p is not None else np.ones(len(pred), dtype=np.float64)
    targets = []
    probs = []
    for gi, pj, _ in tp_pairs:
        targets.append(1.0)
        probs.append(float(p_pred[pj]))
    for gi, pj, _ in far_pairs:
        # too far to count: the annotation is missed and the prediction is surplus
        targets.append(1.0)
        probs.append(0.0)
        targets.append(0.0)
        probs.append(float(p_pred[pj]))
    for _ in un_gt:
        targets.append(1.0)
        probs.append(0.0)
    for pj in un_pred:
        targets.append(0.0)
        probs.append(float(p_pred[pj]))
    return targets, probs


def score_calibration(
    gt: CoordSet, pred: CoordSet, t_match_um: float = DEFAULT_T_MATCH_UM
) -> tuple[float, float]:
    """(brier, nll) of a prediction set against ground truth.

    Predictions without probabilities are treated as deterministic (p = 1).
    """
    targets, probs = _calibration_targets(gt, pred, t_match_um)
    return score_probability_terms(targets, probs)


def aggregate_reports(reports: list[MatchReport]) -> dict:
    """Mean and SD of each metric across per-sample reports."""
    if not reports:
        raise ValueError("need at least one report")
    out = {"n_samples": len(reports)}
    for key in ("precision", "recall", "f1", "brier", "nll"):
        values = np.asarray([getattr(r, key) for r in reports], dtype=np.float64)
        out[key] = {"mean": float(values.mean()), "sd": float(values.std())}
    for key in ("tp", "fp", "fn"):
        out[key] = int(sum(getattr(r, key) for r in reports))
    return out


def score_detection(
    gt: CoordSet, pred: CoordSet, t_match_um: float = DEFAULT_T_MATCH_UM
) -> MatchReport:
    """Full detection + calibration report at the given match radius."""
    if t_match_um <= 0:
        raise ValueError("t_match must be positive")
    tp_pairs, far_pairs, un_gt, un_pred = _match_terms(gt, pred, t_match_um)
    tp = len(tp_pairs)
    fp = len(far_pairs) + len(un_pred)
    fn = len(far_pairs) + len(un_gt)
    zero_pred = (tp + fp) == 0
    precision = tp / (tp + fp) if (tp + fp) > 0 else 0.0
    recall = tp / (tp + fn) if (tp + fn) > 0 else 0.0
    f1 = 0.0 if tp == 0 else 2.0 * precision * recall / (precision + recall)
    brier, nll = score_calibration(gt, pred, t_match_um)
    return MatchReport(
        t_match_um=t_match_um,
        pairs=tp_pairs,
        unmatched_gt=sorted(un_gt + [p[0] for p in far_pairs]),
        unmatched_pred=sorted(un_pred + [p[1] for p in far_pairs]),
        tp=tp,
        fp=fp,
        fn=fn,
        precision=precision,
        recall=recall,
        f1=f1,
        brier=brier,
        nll=nll,
        zero_prediction_precision=zero_pred,
    )

"""Compositional pair metrics and poison-detection metrics.

Pair accuracy is exact match over a candidate list. The calibration
curve adds a scalar bias to the seen-pair logit columns, sweeps it over
a symmetric grid spanning the logit range (every decision flip falls
inside that span), and integrates unseen accuracy against seen accuracy
with the trapezoid rule. The grid is proportional to the logit spread,
so the area is unchanged by positive affine rescaling of the logits.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from dbom.pairs import PairSpace, PairSplit

BIAS_GRID_POINTS = 201


def harmonic_mean(seen_acc: float, unseen_acc: float) -> float:
    """2SU / (S + U), zero when both accuracies are zero."""
    total = seen_acc + unseen_acc
    if total == 0:
        return 0.0
    return 2.0 * seen_acc * unseen_acc / total


@dataclass(frozen=True)
class BiasCurve:
    """Seen/unseen accuracy traced while biasing seen-pair columns."""

    biases: np.ndarray
    seen_acc: np.ndarray
    unseen_acc: np.ndarray

    @property
    def auc(self) -> float:
        order = np.argsort(self.seen_acc, kind="stable")
        return float(np.trapezoid(self.unseen_acc[order], self.seen_acc[order]))


@dataclass(frozen=True)
class CzslMetrics:
    """Pair-level and primitive-level accuracy on a compositional split.

    seen_acc, unseen_acc, harmonic and auc are None when the test batch
    has no samples on that side of the split.
    """

    seen_acc: float | None
    unseen_acc: float | None
    harmonic: float | None
    auc: float | None
    attack_acc: float
    object_acc: float
    n_seen: int
    n_unseen: int

    def to_dict(self) -> dict:
        return {
            "seen_acc": self.seen_acc,
            "unseen_acc": self.unseen_acc,
            "harmonic": self.harmonic,
            "auc": self.auc,
            "attack_acc": self.attack_acc,
            "object_acc": self.object_acc,
            "n_seen": self.n_seen,
            "n_unseen": self.n_unseen,
        }


def _check_logits(logits: np.ndarray, candidates: Sequence[int], labels: np.ndarray) -> None:
    if logits.ndim != 2:
        raise ValueError("logits must be [n_samples, n_candidates]")
    if logits.shape[1] != len(candidates):
        raise ValueError("logit columns do not match the candidate list")
    if logits.shape[0] != labels.shape[0]:
        raise ValueError("label count does not match the logit rows")
    if logits.shape[0] == 0:
        raise ValueError("no samples to score")


def bias_curve(logits, candidates: Sequence[int], labels, split: PairSplit,
               *, points: int = BIAS_GRID_POINTS) -> BiasCurve:
    """Sweep a scalar bias on seen-pair columns and record accuracies.

    logits is [n_samples, n_candidates] over candidate pair indices;
    labels holds true pair indices. Needs test samples and candidate
    columns on both sides of the split.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    _check_logits(logits, candidates, labels)
    if points < 2:
        raise ValueError("bias grid needs at least 2 points")
    cand = np.asarray(candidates, dtype=np.int64)
    seen_col = np.array([int(k) in split.seen_set for k in cand])
    if not seen_col.any() or seen_col.all():
        raise ValueError("bias sweep needs candidates on both sides of the split")
    true_seen = np.array([int(k) in split.seen_set for k in labels])
    if not true_seen.any() or true_seen.all():
        raise ValueError("bias sweep needs test samples on both sides of the split")
    spread = float(logits.max() - logits.min())
    biases = np.linspace(-spread, spread, points)
    seen_accs = np.empty(points)
    unseen_accs = np.empty(points)
    for i, bias in enumerate(biases):
        adjusted = logits + bias * seen_col
        pred = cand[np.argmax(adjusted, axis=1)]
        hit = pred == labels
        seen_accs[i] = hit[true_seen].mean()
        unseen_accs[i] = hit[~true_seen].mean()
    return BiasCurve(biases=biases, seen_acc=seen_accs, unseen_acc=unseen_accs)


def czsl_metrics(logits, candidates: Sequence[int], labels, split: PairSplit,
                 space: PairSpace, *, bias_grid_points: int = BIAS_GRID_POINTS) -> CzslMetrics:
    """Score pair logits against true pair labels on a compositional split.

    Exact-match accuracy is reported separately for samples whose true
    pair is seen and unseen; attack and object accuracy compare the
    trigger and object components of the argmax pair over all samples.
    Either accuracy (and the bias-sweep area) is None when its side has
    no test samples.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    _check_logits(logits, candidates, labels)
    cand = np.asarray(candidates, dtype=np.int64)
    trig_of = np.array([t for t, _ in space.pairs], dtype=np.int64)
    obj_of = np.array([o for _, o in space.pairs], dtype=np.int64)

    pred = cand[np.argmax(logits, axis=1)]
    hit = pred == labels
    true_seen = np.array([int(k) in split.seen_set for k in labels])
    n_seen = int(true_seen.sum())
    n_unseen = int(labels.shape[0] - n_seen)

    seen_acc = float(hit[true_seen].mean()) if n_seen else None
    unseen_acc = float(hit[~true_seen].mean()) if n_unseen else None
    harmonic = harmonic_mean(seen_acc, unseen_acc) if n_seen and n_unseen else None
    auc = None
    if n_seen and n_unseen:
        curve = bias_curve(logits, candidates, labels, split, points=bias_grid_points)
        auc = curve.auc
    return CzslMetrics(
        seen_acc=seen_acc,
        unseen_acc=unseen_acc,
        harmonic=harmonic,
        auc=auc,
        attack_acc=float((trig_of[pred] == trig_of[labels]).mean()),
        object_acc=float((obj_of[pred] == obj_of[labels]).mean()),
        n_seen=n_seen,
        n_unseen=n_unseen,
    )


@dataclass(frozen=True)
class PoisonMetrics:
    """Binary detection quality with poisoned as the positive class."""

    accuracy: float
    recall: float
    precision: float
    f1: float

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "recall": self.recall,
            "precision": self.precision,
            "f1": self.f1,
        }


def _as_flag(value) -> bool:
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    # str-enum verdicts are str instances carrying the value directly
    text = value.lower() if isinstance(value, str) else str(value).lower()
    if text == "poisoned":
        return True
    if text == "clean":
        return False
    raise ValueError(f"verdict must be poisoned or clean, got {value!r}")


def poison_metrics(verdicts: Sequence, truth: Sequence) -> PoisonMetrics:
    """Confusion-matrix metrics for poison verdicts against ground truth.

    verdicts and truth accept booleans (True = poisoned) or the verdict
    strings; ratios with an empty denominator are reported as 0.
    """
    flags = np.array([_as_flag(v) for v in verdicts])
    actual = np.array([_as_flag(t) for t in truth])
    if flags.shape != actual.shape:
        raise ValueError("verdict count does not match the truth count")
    if flags.size == 0:
        raise ValueError("no verdicts to score")
    tp = int((flags & actual).sum())
    tn = int((~flags & ~actual).sum())
    fp = int((flags & ~actual).sum())
    fn = int((~flags & actual).sum())

    def ratio(num: int, den: int) -> float:
        return num / den if den else 0.0

    recall = ratio(tp, tp + fn)
    precision = ratio(tp, tp + fp)
    return PoisonMetrics(
        accuracy=(tp + tn) / flags.size,
        recall=recall,
        precision=precision,
        f1=harmonic_mean(precision, recall),
    )


def trigger_confusion(true_triggers, pred_triggers, n_triggers: int) -> np.ndarray:
    """Count matrix with true triggers on rows, predicted on columns."""
    true_arr = np.asarray(true_triggers, dtype=np.int64)
    pred_arr = np.asarray(pred_triggers, dtype=np.int64)
    if true_arr.shape != pred_arr.shape:
        raise ValueError("trigger label arrays differ in length")
    if true_arr.size and not (
        (0 <= true_arr).all() and (true_arr < n_triggers).all()
        and (0 <= pred_arr).all() and (pred_arr < n_triggers).all()
    ):
        raise ValueError("trigger index outside [0, n_triggers)")
    counts = np.zeros((n_triggers, n_triggers), dtype=np.int64)
    np.add.at(counts, (true_arr, pred_arr), 1)
    return counts

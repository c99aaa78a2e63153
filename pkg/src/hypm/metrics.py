"""Open-set evaluation: closed-set accuracy, H-score and OSCR.

Scores come from a softmax over all C + 1 logits; the known-class part is
the first C entries, so mass claimed by the extra class lowers confidence
without ever being predicted.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from hypm import autodiff as ad
from hypm.datasets import DomainDataset, SplitSpec
from hypm.model import ModelState, predict_logits

UNKNOWN = -1
DEFAULT_THRESHOLD = 0.5


class MetricsError(ValueError):
    pass


@dataclass(frozen=True)
class EvalRecord:
    sample_id: str
    true_class: int  # UNKNOWN for unseen-class samples
    scores: tuple[float, ...]
    predicted: int
    confidence: float

    @property
    def is_known(self) -> bool:
        return self.true_class != UNKNOWN

    @classmethod
    def from_scores(cls, sample_id: str, true_class: int, scores: Sequence[float]) -> "EvalRecord":
        s = np.asarray(scores, dtype=np.float64)
        k = int(np.argmax(s))
        return cls(sample_id, int(true_class), tuple(float(v) for v in s), k, float(s[k]))


@dataclass(frozen=True)
class MetricsReport:
    acc: float
    h_score_at_threshold: float
    h_score_best: float
    oscr: float
    threshold_used: float
    n_known: int
    n_unknown: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


# ----------------------------------------------------------------------
# scoring


def score_logits(ids: Sequence[str], true_classes: Sequence[int], logits: np.ndarray) -> list[EvalRecord]:
    probs = ad.softmax(np.asarray(logits, dtype=np.float64))
    known = probs[:, :-1]
    return [EvalRecord.from_scores(i, t, row) for i, t, row in zip(ids, true_classes, known)]


def score_test_set(state: ModelState, test: DomainDataset, split: SplitSpec) -> list[EvalRecord]:
    if test.name != split.test_domain:
        raise MetricsError(f"dataset {test.name!r} is not the held-out domain {split.test_domain!r}")
    known = {c: i for i, c in enumerate(split.known_classes)}
    truth = [known.get(int(y), UNKNOWN) for y in test.labels]
    return score_logits(test.ids, truth, predict_logits(state, test.images))


# ----------------------------------------------------------------------
# metrics


def _arrays(records: Sequence[EvalRecord]):
    known = np.array([r.is_known for r in records], dtype=bool)
    conf = np.array([r.confidence for r in records], dtype=np.float64)
    correct = np.array([r.predicted == r.true_class for r in records], dtype=bool)
    return known, conf, correct


def _need_both(known: np.ndarray) -> None:
    if not known.any():
        raise MetricsError("no known-class records")
    if known.all():
        raise MetricsError("no unknown-class records")


def closed_set_accuracy(records: Sequence[EvalRecord]) -> float:
    known, _, correct = _arrays(records)
    if not known.any():
        raise MetricsError("no known-class records")
    return float(correct[known].mean())


def h_score(records: Sequence[EvalRecord], threshold: float = DEFAULT_THRESHOLD) -> float:
    known, conf, correct = _arrays(records)
    _need_both(known)
    acc_k = float((correct[known] & (conf[known] >= threshold)).mean())
    acc_u = float((conf[~known] < threshold).mean())
    if acc_k + acc_u == 0:
        return 0.0
    return 2 * acc_k * acc_u / (acc_k + acc_u)


def _candidate_thresholds(conf: np.ndarray) -> np.ndarray:
    return np.unique(np.concatenate([conf, [0.0, 1.0]]))


def h_score_best(records: Sequence[EvalRecord]) -> tuple[float, float]:
    """Best H-score over all distinct confidences (plus 0 and 1) and the
    lowest threshold attaining it."""
    _, conf, _ = _arrays(records)
    best, best_t = -1.0, 0.0
    for t in _candidate_thresholds(conf):
        h = h_score(records, float(t))
        if h > best:
            best, best_t = h, float(t)
    return best, best_t


def oscr_curve(records: Sequence[EvalRecord]) -> list[tuple[float, float, float]]:
    """(threshold, ccr, fpr) for every distinct confidence plus 0 and 1,
    in increasing threshold order."""
    known, conf, correct = _arrays(records)
    _need_both(known)
    ck, cu = conf[known], conf[~known]
    hit = correct[known]
    rows = []
    for t in _candidate_thresholds(conf):
        ccr = float((hit & (ck >= t)).mean())
        fpr = float((cu >= t).mean())
        rows.append((float(t), ccr, fpr))
    return rows


def oscr(records: Sequence[EvalRecord]) -> float:
    """Trapezoidal area under CCR against FPR.

    The curve is anchored at (0, 0), the limit of a threshold above every
    confidence, so ties at the top end are credited by the trapezoid rule.
    """
    pts = [(0.0, 0.0)] + [(fpr, ccr) for _, ccr, fpr in oscr_curve(records)]
    pts.sort()
    x = np.array([p[0] for p in pts])
    y = np.array([p[1] for p in pts])
    return float(np.sum((x[1:] - x[:-1]) * (y[1:] + y[:-1]) / 2.0))


def evaluate(records: Sequence[EvalRecord], threshold: float = DEFAULT_THRESHOLD) -> MetricsReport:
    known, _, _ = _arrays(records)
    best, _ = h_score_best(records)
    return MetricsReport(
        acc=closed_set_accuracy(records),
        h_score_at_threshold=h_score(records, threshold),
        h_score_best=best,
        oscr=oscr(records),
        threshold_used=float(threshold),
        n_known=int(known.sum()),
        n_unknown=int((~known).sum()),
    )


# ----------------------------------------------------------------------
# files

CONFIDENCE_COLUMNS = ("sample_id", "population", "confidence", "predicted", "true")


def export_confidences(records: Sequence[EvalRecord], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CONFIDENCE_COLUMNS)
        for r in records:
            w.writerow(
                [
                    r.sample_id,
                    "known" if r.is_known else "unknown",
                    repr(r.confidence),
                    r.predicted,
                    r.true_class if r.is_known else "",
                ]
            )


def import_confidences(path: str | Path) -> list[EvalRecord]:
    """Records rebuilt from a confidence export; score vectors are not kept,
    so each record carries only its confidence."""
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CONFIDENCE_COLUMNS:
            raise MetricsError(f"unexpected columns {reader.fieldnames} in {path}")
        for row in reader:
            true = int(row["true"]) if row["population"] == "known" else UNKNOWN
            conf = float(row["confidence"])
            out.append(EvalRecord(row["sample_id"], true, (conf,), int(row["predicted"]), conf))
    return out


def write_oscr_curve(records: Sequence[EvalRecord], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "ccr", "fpr"])
        for t, ccr, fpr in oscr_curve(records):
            w.writerow([repr(t), repr(ccr), repr(fpr)])


def write_metrics(report: MetricsReport, path: str | Path) -> None:
    Path(path).write_text(report.to_json() + "\n")

"""Counting metrics and per-image evaluation.

``mse_paper`` evaluates the formula as printed in the method's evaluation
protocol, ``(1/N) * sqrt(sum (E - GT)^2)``; ``rmse`` is the conventional
root-mean-square count error.  They differ by exactly ``sqrt(N)``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import EmptyRecords


@dataclass(frozen=True)
class EvalRecord:
    image_id: str
    gt_count: float
    est_count_hr: float
    est_count_lr: float

    @property
    def abs_error(self) -> float:
        return abs(self.est_count_hr - self.gt_count)

    def to_dict(self) -> dict:
        return {**asdict(self), "abs_error": self.abs_error}


def count(dmap) -> float:
    """Signed sum of all cells (compensated)."""
    return math.fsum(np.asarray(dmap, dtype=np.float64).ravel())


def _errors(records, head):
    if not records:
        raise EmptyRecords("metrics need at least one record")
    key = "est_count_hr" if head == "hr" else "est_count_lr"
    return [getattr(r, key) - r.gt_count for r in records]


def mae(records, head: str = "hr") -> float:
    errs = _errors(records, head)
    return math.fsum(abs(e) for e in errs) / len(errs)


# math.hypot scales internally, so tiny errors do not underflow when squared


def mse_paper(records, head: str = "hr") -> float:
    errs = _errors(records, head)
    return math.hypot(*errs) / len(errs)


def rmse(records, head: str = "hr") -> float:
    errs = _errors(records, head)
    return math.hypot(*errs) / math.sqrt(len(errs))


def summarize(records, head: str = "hr") -> dict:
    return {
        "mae": mae(records, head),
        "mse_paper": mse_paper(records, head),
        "rmse": rmse(records, head),
        "n": len(records),
    }


def evaluate(model, samples, clamp_nonneg: bool = False):
    """Run ``model.predict`` over ``samples`` (``(image_id, AnnotatedImage)`` pairs).

    Returns the per-image records and ``{"summary_hr": ..., "summary_lr": ...}``.
    """
    records = []
    for image_id, ann in samples:
        hr, lr = model.predict(ann.image)
        if clamp_nonneg:
            hr, lr = np.maximum(hr, 0), np.maximum(lr, 0)
        records.append(EvalRecord(image_id, float(ann.count), count(hr), count(lr)))
    return records, {"summary_hr": summarize(records, "hr"), "summary_lr": summarize(records, "lr")}


def report_dict(records, summary) -> dict:
    return {**summary, "records": [r.to_dict() for r in records]}

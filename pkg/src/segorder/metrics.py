"""Segment-level F1, MAP@k and the report record shared by training and the CLI."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, UndefinedMetricError


def _as_set(x) -> frozenset:
    if isinstance(x, (set, frozenset, tuple, list, np.ndarray)):
        return frozenset(int(c) for c in x)
    return frozenset((int(x),))


def f1_scores(predictions, labels, num_classes: int | None = None) -> tuple:
    """(micro, macro) F1 over aligned per-segment predictions and labels.

    Items are class ids (multi-class) or collections of ids (multi-label).
    Micro pools TP/FP/FN over every class. Macro averages per-class F1 over
    the classes seen in labels or predictions, plus ``range(num_classes)``
    when given; a class with no support scores 0 and still counts.
    """
    predictions, labels = list(predictions), list(labels)
    if len(predictions) != len(labels):
        raise ValueError(f"{len(predictions)} predictions for {len(labels)} labels")
    if not labels:
        raise UndefinedMetricError("F1 is undefined on an empty input")
    classes = set(range(num_classes)) if num_classes is not None else set()
    tp, fp, fn = {}, {}, {}
    for p, y in zip(predictions, labels):
        p, y = _as_set(p), _as_set(y)
        classes |= p | y
        for c in p & y:
            tp[c] = tp.get(c, 0) + 1
        for c in p - y:
            fp[c] = fp.get(c, 0) + 1
        for c in y - p:
            fn[c] = fn.get(c, 0) + 1

    def f1(t, f_pos, f_neg):
        denom = 2 * t + f_pos + f_neg
        return 2 * t / denom if denom else 0.0

    micro = f1(sum(tp.values()), sum(fp.values()), sum(fn.values()))
    per_class = [f1(tp.get(c, 0), fp.get(c, 0), fn.get(c, 0)) for c in sorted(classes)]
    macro = float(np.mean(per_class)) if per_class else 0.0
    return micro, macro


def rank_classes(scores) -> np.ndarray:
    """Class ids by descending score; ties keep the lower id first."""
    scores = np.asarray(scores)
    return np.argsort(-scores, axis=-1, kind="stable")


def average_precision_at_k(ranking, relevant, k: int) -> float:
    relevant = _as_set(relevant)
    hits, total = 0, 0.0
    for i, c in enumerate(list(ranking)[:k], 1):
        if int(c) in relevant:
            hits += 1
            total += hits / i
    return total / min(k, len(relevant))


def map_at_k(rankings, relevant_sets, k: int) -> float:
    """Mean AP@k over segments whose relevant set is non-empty."""
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    rankings, relevant_sets = list(rankings), list(relevant_sets)
    if len(rankings) != len(relevant_sets):
        raise ValueError(f"{len(rankings)} rankings for {len(relevant_sets)} relevant sets")
    aps = [average_precision_at_k(r, rel, k) for r, rel in zip(rankings, relevant_sets) if len(_as_set(rel))]
    if not aps:
        raise UndefinedMetricError("MAP is undefined when no segment has a relevant label")
    return float(np.mean(aps))


@dataclass
class MetricReport:
    step: int = 0
    split: str = "validation"
    mlm_accuracy: float | None = None
    so_segment_accuracy: float | None = None
    so_exact_accuracy: float | None = None
    nsp_accuracy: float | None = None
    f1_micro: float | None = None
    f1_macro: float | None = None
    map_at_k: dict = field(default_factory=dict)
    losses: dict = field(default_factory=dict)
    wall_time: float = 0.0

    _RATES = ("mlm_accuracy", "so_segment_accuracy", "so_exact_accuracy", "nsp_accuracy", "f1_micro", "f1_macro")

    def __post_init__(self):
        rates = [(n, getattr(self, n)) for n in self._RATES]
        rates += [(f"map@{k}", v) for k, v in self.map_at_k.items()]
        for name, value in rates:
            if value is not None and not (0.0 <= value <= 1.0):
                raise ValueError(f"{name}={value} lies outside [0, 1]")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["map_at_k"] = {str(k): v for k, v in self.map_at_k.items()}
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "MetricReport":
        data = dict(data)
        data["map_at_k"] = {int(k): v for k, v in data.get("map_at_k", {}).items()}
        return cls(**data)

    def scalars(self) -> dict:
        """Flat metric name -> value, skipping unset entries (used by the metrics log)."""
        out = {n: getattr(self, n) for n in self._RATES if getattr(self, n) is not None}
        out.update({f"map@{k}": v for k, v in self.map_at_k.items()})
        out.update({f"loss.{k}": v for k, v in self.losses.items()})
        return {k: float(v) for k, v in out.items() if v is not None and not math.isnan(v)}

"""Prediction aggregation and evaluation metrics.

Per-document predictions are combined into character-level decisions by
majority vote or by the geometric mean of the per-class probabilities
(computed in log space so long products cannot underflow). Metrics are
per-class and macro-averaged precision/recall/F1, plus the
most-frequent-class baseline, quartile-by-length tables and
confidence-ranked correct/incorrect lists.

Predictions are any objects with ``probs`` (length-2 array, Male then
Female) and ``label`` attributes, e.g. :class:`dramagender.model.Prediction`.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field

import numpy as np

from .tei import Gender

log = logging.getLogger(__name__)

BINARY_GENDERS = (Gender.MALE, Gender.FEMALE)


class AggregationMethod(str, enum.Enum):
    NONE = "none"
    MAJORITY = "majority"
    GEOMETRIC_MEAN = "gmean"


@dataclass
class AggregateDecision:
    char_key: tuple[str, str] | None
    method: AggregationMethod
    label: Gender
    confidence: float
    gm_scores: np.ndarray | None = None  # raw per-gender geometric means, unnormalized
    vote_counts: tuple[int, int] | None = None  # (male, female)


@dataclass
class Metrics:
    per_class: dict[Gender, tuple[float, float, float]]  # precision, recall, f1
    macro: tuple[float, float, float]
    support: dict[Gender, int]
    flags: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "per_class": {g.value: {"precision": v[0], "recall": v[1], "f1": v[2]}
                          for g, v in self.per_class.items()},
            "macro": {"precision": self.macro[0], "recall": self.macro[1],
                      "f1": self.macro[2]},
            "support": {g.value: n for g, n in self.support.items()},
            "flags": list(self.flags),
        }


@dataclass
class QuartileTable:
    boundaries: list[tuple[int, int]]  # min-max word count per quartile
    f1_per_quartile: list[float]
    sizes: list[int]

    def to_dict(self) -> dict:
        return {"boundaries": [list(b) for b in self.boundaries],
                "macro_f1": self.f1_per_quartile, "sizes": self.sizes}


def _gm_scores(preds) -> np.ndarray:
    probs = np.array([np.asarray(p.probs, dtype=np.float64) for p in preds])
    if np.any(probs <= 0.0):
        raise ValueError("geometric mean needs strictly positive probabilities")
    return np.exp(np.log(probs).mean(axis=0))


def geometric_mean(preds, char_key=None) -> AggregateDecision:
    """Per-gender geometric mean of prediction probabilities, argmax decision.

    The two scores are not renormalized; confidence reports the winning
    raw geometric mean.
    """
    if not preds:
        raise ValueError("cannot aggregate an empty prediction list")
    gm = _gm_scores(preds)
    idx = int(np.argmax(gm))
    return AggregateDecision(char_key=char_key, method=AggregationMethod.GEOMETRIC_MEAN,
                             label=BINARY_GENDERS[idx], confidence=float(gm[idx]),
                             gm_scores=gm)


def majority_vote(preds, char_key=None) -> AggregateDecision:
    """Label with the most predicted documents; confidence is the winning share.

    An exact tie falls back to the geometric-mean argmax, which is
    probability-aware and deterministic.
    """
    if not preds:
        raise ValueError("cannot aggregate an empty prediction list")
    males = sum(1 for p in preds if p.label == Gender.MALE)
    females = len(preds) - males
    gm = _gm_scores(preds)
    if males > females:
        label = Gender.MALE
    elif females > males:
        label = Gender.FEMALE
    else:
        label = BINARY_GENDERS[int(np.argmax(gm))]
    confidence = max(males, females) / len(preds)
    return AggregateDecision(char_key=char_key, method=AggregationMethod.MAJORITY,
                             label=label, confidence=confidence, gm_scores=gm,
                             vote_counts=(males, females))


def single_decision(pred, char_key=None) -> AggregateDecision:
    """Wrap an unaggregated prediction as a decision (method None)."""
    return AggregateDecision(char_key=char_key, method=AggregationMethod.NONE,
                             label=pred.label, confidence=float(pred.confidence))


def evaluate(pairs) -> Metrics:
    """Per-class and macro precision/recall/F1 from (gold, predicted) pairs.

    A class that is never predicted has undefined precision; it is scored 0
    and flagged.
    """
    pairs = list(pairs)
    if not pairs:
        raise ValueError("cannot evaluate an empty prediction list")
    per_class: dict[Gender, tuple[float, float, float]] = {}
    support: dict[Gender, int] = {}
    flags: list[str] = []
    for cls in BINARY_GENDERS:
        tp = sum(1 for gold, pred in pairs if gold == cls and pred == cls)
        fp = sum(1 for gold, pred in pairs if gold != cls and pred == cls)
        fn = sum(1 for gold, pred in pairs if gold == cls and pred != cls)
        if tp + fp == 0:
            precision = 0.0
            flags.append(f"undefined-precision:{cls.value}")
        else:
            precision = tp / (tp + fp)
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        per_class[cls] = (precision, recall, f1)
        support[cls] = tp + fn
    macro = tuple(float(np.mean([per_class[c][i] for c in BINARY_GENDERS]))
                  for i in range(3))
    return Metrics(per_class=per_class, macro=macro, support=support, flags=flags)


def most_frequent_baseline(golds) -> Metrics:
    """Score of the trivial classifier that predicts Male for every input."""
    return evaluate([(gold, Gender.MALE) for gold in golds])


def quartile_f1(items) -> QuartileTable:
    """Macro-F1 over four near-equal groups sorted by word count.

    ``items`` are (word_count, gold, predicted) triples; remainders go to
    the earlier quartiles and boundaries report each group's min-max
    word count.
    """
    items = sorted(items, key=lambda it: it[0])
    n = len(items)
    if n < 4:
        raise ValueError(f"need at least 4 items for quartiles, got {n}")
    base, rem = divmod(n, 4)
    sizes = [base + (1 if q < rem else 0) for q in range(4)]
    boundaries, f1s = [], []
    start = 0
    for size in sizes:
        group = items[start: start + size]
        start += size
        boundaries.append((group[0][0], group[-1][0]))
        f1s.append(evaluate([(g, p) for _, g, p in group]).macro[2])
    return QuartileTable(boundaries=boundaries, f1_per_quartile=f1s, sizes=sizes)


def confidence_ranking(decisions, k: int = 10):
    """Split decisions by correctness; top-k of each by confidence.

    ``decisions`` are (AggregateDecision, gold) pairs. The incorrect list
    is the entry point for mining gold-annotation errors.
    """
    correct, incorrect = [], []
    for decision, gold in decisions:
        (correct if decision.label == gold else incorrect).append((decision, gold))
    def sort_key(pair):
        decision, _ = pair
        return (-decision.confidence, decision.char_key or ("", ""))
    correct.sort(key=sort_key)
    incorrect.sort(key=sort_key)
    return correct[:k], incorrect[:k]

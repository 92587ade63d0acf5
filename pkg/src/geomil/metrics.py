"""Evaluation metrics computed from first principles.

AUROC is the normalized Mann-Whitney statistic (concordant pairs plus half
the ties), evaluated through average ranks; the multiclass variant is the
unweighted one-vs-rest macro average.  Macro F1 gives an absent class an
F1 of zero.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .model import BagFeatures, ModelParams, forward_bag, forward_bags_batch


class MetricError(ValueError):
    """Metric undefined for the given inputs (e.g. a single-class AUROC)."""


def _average_ranks(scores: np.ndarray) -> np.ndarray:
    """1-based ranks with ties replaced by their group average."""
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(scores.shape[0], dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < scores.shape[0]:
        j = i
        while j + 1 < scores.shape[0] and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def auroc(scores, labels) -> float:
    """Binary AUROC: ``(concordant + 0.5 * tied) / (n_pos * n_neg)``."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be matching 1-D arrays")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = labels.shape[0] - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUROC is undefined when only one class is present")
    ranks = _average_ranks(scores)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def auroc_macro(probs, labels, n_classes: int) -> float:
    """One-vs-rest macro AUROC over the classes present in ``labels``."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if probs.ndim != 2 or probs.shape[1] != n_classes:
        raise ValueError(f"probs must be (n, {n_classes})")
    values = []
    for cls in range(n_classes):
        binary = (labels == cls).astype(np.int64)
        if binary.sum() in (0, binary.shape[0]):
            continue
        values.append(auroc(probs[:, cls], binary))
    if not values:
        raise MetricError("AUROC is undefined: no class has both positives and negatives")
    return float(np.mean(values))


def precision_recall(preds, labels, n_classes: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-class precision and recall; empty denominators yield zero."""
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    precision = np.zeros(n_classes)
    recall = np.zeros(n_classes)
    for cls in range(n_classes):
        tp = int(np.sum((preds == cls) & (labels == cls)))
        fp = int(np.sum((preds == cls) & (labels != cls)))
        fn = int(np.sum((preds != cls) & (labels == cls)))
        precision[cls] = tp / (tp + fp) if tp + fp else 0.0
        recall[cls] = tp / (tp + fn) if tp + fn else 0.0
    return precision, recall


def f1_macro(preds, labels, n_classes: int) -> float:
    """Unweighted mean of per-class F1; an absent class contributes 0."""
    precision, recall = precision_recall(preds, labels, n_classes)
    denom = precision + recall
    f1 = np.divide(2.0 * precision * recall, denom,
                   out=np.zeros(n_classes), where=denom > 0)
    return float(f1.mean())


@dataclass
class EvalReport:
    auroc: float
    accuracy: float
    f1_macro: float
    per_class: list[dict] = field(default_factory=list)
    n_eval: int = 0
    fold: str = ""

    def to_dict(self) -> dict:
        return {
            "auroc": self.auroc,
            "accuracy": self.accuracy,
            "f1_macro": self.f1_macro,
            "f1_averaging": "macro (absent classes contribute 0)",
            "per_class": self.per_class,
            "n_eval": self.n_eval,
            "fold": self.fold,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def predict_proba(params: ModelParams, bags: list[BagFeatures],
                  force_expert: int | None = None,
                  batch_size: int = 32) -> np.ndarray:
    """Eval-mode class probabilities, one row per bag.

    Equal-length bags are grouped into stacked forward passes; forced
    single-expert routing falls back to the per-bag path.
    """
    out = np.empty((len(bags), params.config.n_classes))
    if force_expert is not None:
        for i, bag in enumerate(bags):
            logits, _, _ = forward_bag(params, bag, mode="eval",
                                       force_expert=force_expert)
            out[i] = _softmax_rows(logits)
        return out
    groups: dict[int, list[int]] = {}
    for i, bag in enumerate(bags):
        groups.setdefault(np.asarray(bag.features).shape[0], []).append(i)
    for _, members in sorted(groups.items()):
        for start in range(0, len(members), batch_size):
            chunk = members[start : start + batch_size]
            if len(chunk) == 1:
                logits, _, _ = forward_bag(params, bags[chunk[0]], mode="eval")
                out[chunk[0]] = _softmax_rows(logits)
            else:
                logits, _ = forward_bags_batch(params, [bags[i] for i in chunk],
                                               mode="eval")
                out[chunk] = _softmax_rows(logits)
    return out


def evaluate_bags(params: ModelParams, bags: list[BagFeatures], labels,
                  fold: str = "", force_expert: int | None = None) -> EvalReport:
    """Score a bag set and assemble the evaluation report."""
    labels = np.asarray(labels, dtype=np.int64)
    n_classes = params.config.n_classes
    probs = predict_proba(params, bags, force_expert=force_expert)
    preds = probs.argmax(axis=1)
    precision, recall = precision_recall(preds, labels, n_classes)
    return EvalReport(
        auroc=auroc_macro(probs, labels, n_classes),
        accuracy=float(np.mean(preds == labels)),
        f1_macro=f1_macro(preds, labels, n_classes),
        per_class=[
            {"class": cls, "precision": float(precision[cls]), "recall": float(recall[cls])}
            for cls in range(n_classes)
        ],
        n_eval=len(bags),
        fold=fold,
    )

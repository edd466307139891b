"""Pretraining and AU losses, plus padding-aware F1 evaluation."""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import torch

LOG_EPS = 1e-7


def masked_mse_loss(reconstructed, original):
    """Mean squared pixel error over the masked patches (both ``(..., M, p*p*C)``)."""
    if reconstructed.shape != original.shape:
        raise ValueError(f"shape mismatch: {tuple(reconstructed.shape)} vs {tuple(original.shape)}")
    return ((reconstructed - original) ** 2).mean()


def _label_mask(labels, valid_mask):
    """Elements that may enter a loss or metric: real frames with a 0/1 label."""
    keep = labels >= 0
    if valid_mask is not None:
        keep = keep & valid_mask[..., None]
    return keep


def asymmetric_au_loss(scores, labels, valid_mask=None, eps=LOG_EPS):
    """-[y log p + p (1 - y) log(1 - p)] averaged over valid, annotated (t, i) pairs.

    The leading ``p`` on the negative term down-weights easy negatives and is
    differentiated through like any other occurrence of ``p``.
    scores/labels are ``(..., T, N)``; valid_mask is ``(..., T)``.
    """
    keep = _label_mask(labels, valid_mask)
    p = scores.clamp(eps, 1 - eps)
    y = labels.clamp(min=0).to(p.dtype)
    per_elem = -(y * torch.log(p) + p * (1 - y) * torch.log(1 - p))
    # reduce over the selected elements only, so trailing padding cannot even
    # change the summation order
    kept = per_elem[keep]
    if kept.numel() == 0:
        return (per_elem * 0).sum()
    return kept.sum() / kept.numel()


@dataclass
class AUPredictions:
    scores: np.ndarray  # (T, N) or (B, T, N)
    labels: np.ndarray  # same shape; -1 marks unannotated
    valid_mask: np.ndarray | None = None  # (T,) or (B, T)

    def __post_init__(self):
        self.scores = _numpy(self.scores)
        self.labels = _numpy(self.labels).astype(np.int64)
        if self.valid_mask is None:
            self.valid_mask = np.ones(self.scores.shape[:-1], dtype=bool)
        self.valid_mask = _numpy(self.valid_mask).astype(bool)
        if self.scores.shape != self.labels.shape or self.valid_mask.shape != self.scores.shape[:-1]:
            raise ValueError("scores, labels and valid_mask shapes disagree")

    @property
    def num_aus(self):
        return self.scores.shape[-1]


def _numpy(x):
    if isinstance(x, torch.Tensor):
        return x.detach().cpu().numpy()
    return np.asarray(x)


@dataclass
class ConfusionCounts:
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    tn: np.ndarray

    @classmethod
    def zeros(cls, num_aus):
        return cls(*(np.zeros(num_aus, dtype=np.int64) for _ in range(4)))

    @property
    def num_aus(self):
        return len(self.tp)

    def __add__(self, other):
        if other.num_aus != self.num_aus:
            raise ValueError(f"AU count mismatch: {self.num_aus} vs {other.num_aus}")
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    def __eq__(self, other):
        return all(np.array_equal(getattr(self, f), getattr(other, f)) for f in ("tp", "fp", "fn", "tn"))

    def f1(self):
        """Per-AU F1 and their unweighted mean; 0/0 counts as 0."""
        precision, recall = self.precision_recall()
        denom = precision + recall
        f1 = np.divide(2 * precision * recall, denom, out=np.zeros_like(denom), where=denom > 0)
        return f1, float(f1.mean())

    def precision_recall(self):
        tp, fp, fn = (a.astype(np.float64) for a in (self.tp, self.fp, self.fn))
        precision = np.divide(tp, tp + fp, out=np.zeros_like(tp), where=(tp + fp) > 0)
        recall = np.divide(tp, tp + fn, out=np.zeros_like(tp), where=(tp + fn) > 0)
        return precision, recall


def binarize(scores, threshold=0.5):
    return (np.asarray(scores) >= threshold).astype(np.int64)


def confusion_counts(pred: AUPredictions, threshold=0.5) -> ConfusionCounts:
    keep = _label_mask(pred.labels, pred.valid_mask).reshape(-1, pred.num_aus)
    hat = binarize(pred.scores, threshold).reshape(-1, pred.num_aus).astype(bool)
    y = pred.labels.reshape(-1, pred.num_aus) == 1
    return ConfusionCounts(
        tp=(hat & y & keep).sum(0).astype(np.int64),
        fp=(hat & ~y & keep).sum(0).astype(np.int64),
        fn=(~hat & y & keep).sum(0).astype(np.int64),
        tn=(~hat & ~y & keep).sum(0).astype(np.int64),
    )


def confusion_accumulate(pred: AUPredictions, threshold, running: ConfusionCounts) -> ConfusionCounts:
    if pred.num_aus != running.num_aus:
        raise ValueError(f"AU count mismatch: {pred.num_aus} vs {running.num_aus}")
    return running + confusion_counts(pred, threshold)


def f1_scores(pred: AUPredictions, threshold=0.5):
    if not 0 < threshold < 1:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    return confusion_counts(pred, threshold).f1()


def metric_report(counts: ConfusionCounts, au_names):
    f1, avg = counts.f1()
    precision, recall = counts.precision_recall()
    return {
        "au_names": list(au_names),
        "f1": [float(v) for v in f1],
        "precision": [float(v) for v in precision],
        "recall": [float(v) for v in recall],
        "average_f1": avg,
        "counts": {k: getattr(counts, k).tolist() for k in ("tp", "fp", "fn", "tn")},
    }


def format_report(report):
    """Table-style text: one header row of AU names, one row of F1 in percent."""
    names = report["au_names"] + ["Average"]
    values = [f"{100 * v:.1f}" for v in report["f1"]] + [f"{100 * report['average_f1']:.1f}"]
    widths = [max(len(a), len(b)) for a, b in zip(names, values)]
    head = "  ".join(n.rjust(w) for n, w in zip(names, widths))
    row = "  ".join(v.rjust(w) for v, w in zip(values, widths))
    return f"{head}\n{row}\n"


def write_report(report, path):
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2)

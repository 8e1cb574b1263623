"""Grouped mIoU, class-token similarity and background-shift diagnostics."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .scenes import BACKGROUND, IGNORE


@dataclass
class IoUReport:
    per_class_iou: dict[int, float]
    group_miou: dict[str, float]
    confusion: np.ndarray  # rows: ground truth, cols: prediction

    def to_text(self) -> str:
        lines = [f"miou.{g} = {v!r}" for g, v in self.group_miou.items()]
        lines += [f"iou.{c} = {v!r}" for c, v in self.per_class_iou.items()]
        return "\n".join(lines)


@dataclass
class SimilarityReport:
    new_new: float  # nan when there is a single new class
    new_bg: float
    new_old: float  # nan when there are no old classes

    def as_dict(self) -> dict[str, float]:
        return {"Ct_Ct": self.new_new, "Ct_c0": self.new_bg, "Ct_old": self.new_old}


def predict_labels(probs: np.ndarray) -> np.ndarray:
    """Argmax over classes; ties go to the lowest class id."""
    return np.argmax(probs, axis=-1)


def confusion_matrix(predictions: Sequence[np.ndarray], ground_truth: Sequence[np.ndarray],
                     num_labels: int) -> np.ndarray:
    if len(predictions) != len(ground_truth):
        raise ValueError("prediction and ground-truth lists differ in length")
    if len(predictions) == 0:
        raise ValueError("empty test set")
    cm = np.zeros((num_labels, num_labels), dtype=np.int64)
    for p, g in zip(predictions, ground_truth):
        if p.shape != g.shape:
            raise ValueError(f"shape mismatch {p.shape} vs {g.shape}")
        keep = g != IGNORE
        cm += np.bincount(num_labels * g[keep].astype(np.int64) + p[keep].astype(np.int64),
                          minlength=num_labels ** 2).reshape(num_labels, num_labels)
    return cm


def miou(predictions: Sequence[np.ndarray], ground_truth: Sequence[np.ndarray],
         groups: dict[str, Iterable[int]]) -> IoUReport:
    """Per-class IoU from the aggregated confusion matrix, and group means.

    Ground-truth pixels equal to 255 are skipped. Classes that never occur in
    either prediction or ground truth are left out of the group means.
    """
    members = {g: [int(c) for c in cs] for g, cs in groups.items()}
    top = max([c for cs in members.values() for c in cs] + [0])
    top = max(top, max(int(p.max()) for p in predictions),
              max(int(g[g != IGNORE].max(initial=0)) for g in ground_truth))
    cm = confusion_matrix(predictions, ground_truth, top + 1)
    tp = np.diag(cm).astype(np.float64)
    union = cm.sum(axis=0) + cm.sum(axis=1) - tp
    per_class = {c: float(tp[c] / union[c]) for c in range(top + 1) if union[c] > 0}
    group_miou = {}
    for g, cs in members.items():
        vals = [per_class[c] for c in cs if c in per_class]
        group_miou[g] = float(np.mean(vals)) if vals else float("nan")
    return IoUReport(per_class, group_miou, cm)


def _cosine(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return (a @ b.T) / np.outer(np.linalg.norm(a, axis=1), np.linalg.norm(b, axis=1))


def token_similarity(tokens: np.ndarray, new_classes: Iterable[int],
                     old_classes: Iterable[int]) -> SimilarityReport:
    """Mean cosine similarity x100 between new tokens and new/background/old tokens."""
    new = [int(c) for c in new_classes]
    old = [int(c) for c in old_classes]
    if not new:
        raise ValueError("need at least one new class")
    if np.any(np.linalg.norm(tokens, axis=1) == 0):
        raise ValueError("zero-norm token")
    t_new = tokens[new]
    nn = _cosine(t_new, t_new)
    off = ~np.eye(len(new), dtype=bool)
    new_new = 100 * float(nn[off].mean()) if off.any() else float("nan")
    new_bg = 100 * float(_cosine(t_new, tokens[[BACKGROUND]]).mean())
    new_old = 100 * float(_cosine(t_new, tokens[old]).mean()) if old else float("nan")
    return SimilarityReport(new_new, new_bg, new_old)


def ignored_label_ratio(y_tilde: np.ndarray, y_bar: np.ndarray, full_labels: np.ndarray,
                        old_classes: Iterable[int]) -> float:
    """Share of old-class pixels mislabeled background by naive pseudo-labels that SPL ignores.

    Returns nan when naive pseudo-labeling mislabeled nothing.
    """
    mis = np.isin(full_labels, np.asarray(list(old_classes))) & (y_tilde == BACKGROUND)
    n = int(mis.sum())
    if n == 0:
        return float("nan")
    return int((mis & (y_bar == IGNORE)).sum()) / n


@dataclass
class IgnoredLabelCounter:
    """Accumulates the ignored-label ratio over many scenes."""
    mispredicted: int = 0
    ignored: int = 0

    def update(self, y_tilde, y_bar, full_labels, old_classes) -> None:
        mis = np.isin(full_labels, np.asarray(list(old_classes))) & (y_tilde == BACKGROUND)
        self.mispredicted += int(mis.sum())
        self.ignored += int((mis & (y_bar == IGNORE)).sum())

    @property
    def ratio(self) -> float:
        return self.ignored / self.mispredicted if self.mispredicted else float("nan")


def background_shift_rate(predictions: Sequence[np.ndarray], full_labels: Sequence[np.ndarray],
                          classes: Iterable[int]) -> float:
    """Fraction of pixels of ``classes`` predicted as background (nan if none)."""
    cs = np.asarray(list(classes))
    total = hit = 0
    for p, g in zip(predictions, full_labels):
        sel = np.isin(g, cs)
        total += int(sel.sum())
        hit += int((sel & (p == BACKGROUND)).sum())
    return hit / total if total else float("nan")

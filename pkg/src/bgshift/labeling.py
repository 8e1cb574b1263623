"""Pseudo-labels from the old model and the selective (ignore-aware) variant.

Class axis convention: column 0 of any prediction is background, column k
is class k.
"""
from __future__ import annotations

import numpy as np

from .numerics import downsample_label_center, downsample_mean
from .scenes import BACKGROUND, IGNORE


def pseudo_label(y_t: np.ndarray, s_old: np.ndarray, tau: float = 0.7) -> np.ndarray:
    """Naive thresholded pseudo-labels.

    Ground-truth new-class pixels are kept. A background pixel takes the
    argmax over old object classes (background excluded) when any of them
    exceeds ``tau``; otherwise it stays background. Ties go to the lower id.
    """
    y_t = np.asarray(y_t)
    if s_old.shape[:-1] != y_t.shape:
        raise ValueError(f"label shape {y_t.shape} vs prediction shape {s_old.shape[:-1]}")
    if not 0 < tau < 1:
        raise ValueError("tau must lie in (0, 1)")
    obj = s_old[..., 1:]
    if obj.shape[-1] == 0:
        return y_t.astype(np.int64, copy=True)
    confident = (obj > tau).any(axis=-1)
    best = obj.argmax(axis=-1) + 1
    out = np.where(y_t != BACKGROUND, y_t, np.where(confident, best, BACKGROUND))
    return out.astype(np.int64)


def object_identifier(s_old: np.ndarray) -> np.ndarray:
    """1 where the background probability is below the total object mass."""
    return (s_old[..., 0] < s_old[..., 1:].sum(axis=-1)).astype(np.int64)


def selective_pseudo_label(y_tilde: np.ndarray, obj: np.ndarray) -> np.ndarray:
    if y_tilde.shape != obj.shape:
        raise ValueError(f"shape mismatch {y_tilde.shape} vs {obj.shape}")
    out = np.where(y_tilde != BACKGROUND, y_tilde, np.where(obj == 1, IGNORE, BACKGROUND))
    return out.astype(np.int64)


def downsample_labels_and_probs(y_bar: np.ndarray, s_old: np.ndarray, patch_size: int
                                ) -> tuple[np.ndarray, np.ndarray]:
    """Patch-resolution labels (block center) and probabilities (block mean).

    Works on ``[H, W]`` / ``[H, W, C]`` or with a leading batch axis.
    """
    axis = y_bar.ndim - 2
    y_hat = downsample_label_center(y_bar, patch_size, spatial_axis=axis)
    s_hat = downsample_mean(s_old, patch_size, spatial_axis=axis)
    s_hat = s_hat / s_hat.sum(axis=-1, keepdims=True)
    return y_hat, s_hat

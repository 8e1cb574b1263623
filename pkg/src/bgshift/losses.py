"""Training objectives with hand-derived gradients.

Prediction-based losses accept either a probability array (value only) or a
:class:`~bgshift.segmenter.ForwardPass` (value plus gradients with respect
to the decoder and the class tokens).
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Iterable, Union

import numpy as np

from .numerics import block_sum
from .scenes import BACKGROUND, IGNORE
from .segmenter import ForwardPass

LOG_FLOOR = 1e-12

Prediction = Union[np.ndarray, ForwardPass]


@dataclass
class LossBundle:
    value: float
    grad_decoder: np.ndarray | None = None
    grad_tokens: np.ndarray | None = None

    @classmethod
    def zero(cls) -> "LossBundle":
        return cls(0.0)

    def __add__(self, other: "LossBundle") -> "LossBundle":
        return LossBundle(self.value + other.value,
                          _add(self.grad_decoder, other.grad_decoder),
                          _add(self.grad_tokens, other.grad_tokens))

    def scaled(self, k: float) -> "LossBundle":
        return LossBundle(k * self.value,
                          None if self.grad_decoder is None else k * self.grad_decoder,
                          None if self.grad_tokens is None else k * self.grad_tokens)


def _add(a, b):
    if a is None:
        return b
    if b is None:
        return a
    return a + b


@dataclass(frozen=True)
class LossCoefficients:
    lambda_lgkd: float = 25.0
    lambda_ortho: Union[float, str] = "adaptive"

    def __post_init__(self):
        if self.lambda_lgkd < 0:
            raise ValueError("lambda_lgkd must be >= 0")
        if self.lambda_ortho != "adaptive" and float(self.lambda_ortho) < 0:
            raise ValueError("lambda_ortho must be >= 0 or 'adaptive'")

    def resolve(self, n_current: int, n_seen: int) -> tuple[float, float]:
        """``(lambda_lgkd, lambda_ortho)``; adaptive ortho is |C^t| / |C^{1:t}|."""
        if self.lambda_ortho == "adaptive":
            return float(self.lambda_lgkd), n_current / n_seen
        return float(self.lambda_lgkd), float(self.lambda_ortho)


def _unpack(pred: Prediction) -> tuple[np.ndarray, ForwardPass | None]:
    if isinstance(pred, ForwardPass):
        return pred.probs, pred
    return np.asarray(pred, dtype=np.float64), None


def _soft_target_loss(pred: Prediction, target: np.ndarray) -> LossBundle:
    """-(1/N) sum_pixels sum_c target_c log max(S_c, floor), N = pixel count.

    With a ForwardPass the prediction is constant over each patch, so the
    target is block-summed and everything is evaluated per patch.
    """
    s, fwd = _unpack(pred)
    if s.shape != target.shape:
        raise ValueError(f"prediction shape {s.shape} vs target shape {target.shape}")
    n = int(np.prod(s.shape[:-1]))
    if fwd is None:
        value = -float(np.sum(target * np.log(np.maximum(s, LOG_FLOOR)))) / n
        return LossBundle(value)
    s = fwd.patch_probs
    target = block_sum(target, fwd.model.patch_size, spatial_axis=-3)
    value = -float(np.sum(target * np.log(np.maximum(s, LOG_FLOOR)))) / n
    # S * dL/dS, with the clamped region contributing nothing.
    w = np.where(s >= LOG_FLOOR, -target, 0.0) / n
    d_logits = w - s * w.sum(axis=-1, keepdims=True)
    return LossBundle(value, *fwd.backward(d_patch_logits=d_logits))


def ce_loss(pred: Prediction, y_bar: np.ndarray) -> LossBundle:
    """Masked cross-entropy averaged over all pixels, ignored ones included in the count."""
    s, _ = _unpack(pred)
    y_bar = np.asarray(y_bar)
    if s.shape[:-1] != y_bar.shape:
        raise ValueError(f"prediction shape {s.shape} vs label shape {y_bar.shape}")
    valid = y_bar != IGNORE
    if not valid.any():
        warnings.warn("every pixel is ignored; cross-entropy is zero", RuntimeWarning, stacklevel=2)
    if np.any(y_bar[valid] >= s.shape[-1]) or np.any(y_bar[valid] < 0):
        raise ValueError("label outside the prediction's class axis")
    target = np.zeros_like(s)
    idx = np.where(valid, y_bar, 0)[..., None]
    np.put_along_axis(target, idx, valid[..., None].astype(np.float64), axis=-1)
    return _soft_target_loss(pred, target)


def reliability_map(y_hat: np.ndarray, s_hat_old: np.ndarray,
                    old_classes: Iterable[int], new_classes: Iterable[int]) -> np.ndarray:
    """Per-patch distillation weight: 1 on old classes, 0 on new/ignored, S_bg on background."""
    old = np.asarray(list(old_classes), dtype=np.int64)
    new = np.asarray(list(new_classes), dtype=np.int64)
    is_old = np.isin(y_hat, old)
    is_zero = np.isin(y_hat, new) | (y_hat == IGNORE)
    is_bg = y_hat == BACKGROUND
    if not np.all(is_old | is_zero | is_bg):
        bad = np.unique(y_hat[~(is_old | is_zero | is_bg)])
        raise ValueError(f"labels {bad.tolist()} belong to no known class set")
    return np.where(is_old, 1.0, np.where(is_bg, s_hat_old[..., 0], 0.0))


def afd_loss(f_new: Prediction, f_old: np.ndarray, m: np.ndarray) -> LossBundle:
    """Reliability-weighted squared feature distance, averaged over patches.

    Pass the live model's ForwardPass as ``f_new`` to get gradients.
    """
    fwd = f_new if isinstance(f_new, ForwardPass) else None
    feats = fwd.features if fwd is not None else np.asarray(f_new, dtype=np.float64)
    if feats.shape != f_old.shape or feats.shape[:-1] != m.shape:
        raise ValueError(f"shape mismatch: {feats.shape}, {f_old.shape}, {m.shape}")
    n = int(np.prod(m.shape))
    diff = feats - f_old
    value = float(np.sum(m * np.sum(diff * diff, axis=-1))) / n
    if fwd is None:
        return LossBundle(value)
    d_feat = 2.0 * m[..., None] * diff / n
    return LossBundle(value, *fwd.backward(d_features=d_feat))


def extend_teacher(s_old: np.ndarray, width: int) -> np.ndarray:
    """Zero-pad the class axis of an old prediction to ``width`` columns."""
    pad = width - s_old.shape[-1]
    if pad < 0:
        raise ValueError("teacher is wider than the target class axis")
    return np.concatenate([s_old, np.zeros(s_old.shape[:-1] + (pad,))], axis=-1)


def refine_teacher(s_old: np.ndarray, y_bar: np.ndarray, new_classes: Iterable[int]) -> np.ndarray:
    """Move the teacher's background mass onto the labeled new class.

    At a pixel labeled with new class c the background entry becomes 0 and
    entry c receives the old background probability. Every other new-class
    entry is 0. Ignored pixels fall into the copy branch.
    """
    new = sorted(int(c) for c in new_classes)
    width = max(s_old.shape[-1], new[-1] + 1) if new else s_old.shape[-1]
    out = extend_teacher(s_old, width)
    for c in new:
        at = y_bar == c
        out[..., c] = np.where(at, s_old[..., 0], 0.0)
        out[..., 0] = np.where(at, 0.0, out[..., 0])
    return out


def lgkd_loss(teacher: np.ndarray, pred: Prediction) -> LossBundle:
    """Distillation of a (refined) teacher distribution into the student, per pixel."""
    return _soft_target_loss(pred, np.asarray(teacher, dtype=np.float64))


def ortho_loss(tokens: np.ndarray, current_classes: Iterable[int], all_classes: Iterable[int],
               anchor: np.ndarray | None = None) -> LossBundle:
    """Mean |dot| between each new-class token and every other seen token.

    ``all_classes`` is C^{1:t} (it includes the current classes); background
    is added here. The second factor of every pair is a stop-gradient
    constant, taken from ``anchor`` (defaults to ``tokens``). Only rows in
    ``current_classes`` receive gradient.
    """
    cur = [int(c) for c in current_classes]
    seen = [int(c) for c in all_classes]
    if not cur:
        raise ValueError("need at least one current class")
    anchor = tokens if anchor is None else anchor
    partners = [BACKGROUND] + seen
    norm = len(cur) * len(seen)
    value = 0.0
    grad = np.zeros_like(tokens)
    for i in cur:
        js = [j for j in partners if j != i]
        dots = anchor[js] @ tokens[i]
        value += float(np.abs(dots).sum())
        grad[i] = np.sign(dots) @ anchor[js]
    return LossBundle(value / norm, None, grad / norm)


def sep_loss(lgkd: LossBundle, ortho: LossBundle, coeffs: LossCoefficients,
             n_current: int = 1, n_seen: int = 1) -> LossBundle:
    lam_lgkd, lam_ortho = coeffs.resolve(n_current, n_seen)
    if lam_lgkd < 0 or lam_ortho < 0:
        raise ValueError("coefficients must be non-negative")
    return lgkd.scaled(lam_lgkd) + ortho.scaled(lam_ortho)


def total_loss(ce: LossBundle, afd: LossBundle, sep: LossBundle) -> LossBundle:
    return ce + afd + sep

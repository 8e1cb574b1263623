"""Finite-difference validation of every hand-derived loss gradient.

Each trial draws a small random model and random inputs, then compares the
analytic gradient over (decoder, tokens) with central differences. The
orthogonality term holds its stop-gradient factor at the base point, so the
reference function is the one the analytic gradient actually describes.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import losses
from .numerics import finite_diff_check, softmax
from .runner import AblationFlags, TrainConfig, build_targets, incremental_objective
from .scenes import IGNORE, ScenarioSpec
from .segmenter import ToySegmenter, forward, snapshot

TOLERANCE = 1e-4
EPS = 1e-5
LOSSES = ("ce", "afd", "lgkd", "ortho", "total")

# 8x8 images, 2x2 patches, two old classes and one new class
SMALL = ScenarioSpec(num_classes=3, schedule=(2, 1), image_size=8, patch_size=4,
                     feature_channels=2, scenes_per_step=2, noise_sigma=0.3)


@dataclass
class Trial:
    model: ToySegmenter
    old: ToySegmenter
    images: np.ndarray
    rng: np.random.Generator


def _pack(model: ToySegmenter) -> np.ndarray:
    return np.concatenate([model.decoder.ravel(), model.tokens.ravel()])


def _unpack(model: ToySegmenter, p: np.ndarray) -> ToySegmenter:
    n = model.decoder.size
    return ToySegmenter(model.embed, p[:n].reshape(model.decoder.shape),
                        p[n:].reshape(model.tokens.shape), model.patch_size, model.temperature)


def make_trial(seed: int, batch: int = 2) -> Trial:
    rng = np.random.default_rng([seed, 2024])
    spec = SMALL
    old = ToySegmenter.init(rng, spec.patch_size, spec.feature_channels, 2, d_embed=4, d_model=4)
    model = ToySegmenter(old.embed, old.decoder + 0.3 * rng.standard_normal(old.decoder.shape),
                         rng.standard_normal((4, 4)), old.patch_size, old.temperature)
    images = rng.standard_normal((batch, spec.image_size, spec.image_size, spec.feature_channels))
    return Trial(model, snapshot(old), images, rng)


def _loss_factory(name: str, trial: Trial) -> Callable[[ToySegmenter], losses.LossBundle]:
    rng, images = trial.rng, trial.images
    shape = images.shape[:3]
    new_classes, seen = [3], [1, 2, 3]
    if name == "ce":
        y = rng.integers(0, 4, size=shape)
        y[rng.random(shape) < 0.2] = IGNORE
        return lambda m: losses.ce_loss(forward(m, images), y)
    if name == "afd":
        f_old = forward(trial.old, images).features
        mask = rng.random(f_old.shape[:-1])
        return lambda m: losses.afd_loss(forward(m, images), f_old, mask)
    if name == "lgkd":
        s_old = softmax(3 * rng.standard_normal(shape + (3,)))
        y_bar = rng.choice([0, 1, 2, 3, IGNORE], size=shape)
        teacher = losses.refine_teacher(s_old, y_bar, new_classes)
        return lambda m: losses.lgkd_loss(teacher, forward(m, images))
    if name == "ortho":
        anchor = trial.model.tokens.copy()
        return lambda m: losses.ortho_loss(m.tokens, new_classes, seen, anchor=anchor)
    if name == "total":
        y_t = np.where(rng.random(shape) < 0.3, 3, 0)
        cfg = TrainConfig(flags=AblationFlags(True, True, True), coefficients=losses.LossCoefficients(2.0))
        targets = build_targets(trial.old, images, y_t, SMALL, 1, cfg)
        anchor = trial.model.tokens.copy()
        return lambda m: incremental_objective(m, images, targets, SMALL, 1, cfg, anchor=anchor)
    raise KeyError(name)


def check_loss(name: str, seed: int) -> float:
    """Max relative gradient error of loss ``name`` on random trial ``seed``."""
    trial = make_trial(seed)
    fn = _loss_factory(name, trial)
    bundle = fn(trial.model)
    grad_dec = bundle.grad_decoder if bundle.grad_decoder is not None else np.zeros_like(trial.model.decoder)
    grad_tok = bundle.grad_tokens if bundle.grad_tokens is not None else np.zeros_like(trial.model.tokens)
    analytic = np.concatenate([grad_dec.ravel(), grad_tok.ravel()])
    return finite_diff_check(lambda p: fn(_unpack(trial.model, p)).value, analytic,
                             _pack(trial.model), EPS)


def run_suite(trials: int = 100, names=LOSSES) -> dict[str, float]:
    """Worst relative error per loss over ``trials`` random configurations."""
    return {name: max(check_loss(name, seed) for seed in range(trials)) for name in names}

"""Synthetic rectangle scenes and per-step label masking."""
from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Iterable

import numpy as np

BACKGROUND = 0
IGNORE = 255
MAX_CLASSES = 200
MIN_SIDE = 4  # 4x4 = 16 pixels, the smallest allowed object


@dataclass(frozen=True)
class ScenarioSpec:
    num_classes: int = 6
    schedule: tuple[int, ...] = (4, 1, 1)
    setting: str = "overlapped"
    image_size: int = 32
    patch_size: int = 4
    feature_channels: int = 8
    scenes_per_step: int = 200
    seed: int = 0
    noise_sigma: float = 0.2

    def __post_init__(self):
        object.__setattr__(self, "schedule", tuple(int(s) for s in self.schedule))
        if not self.schedule or any(s < 1 for s in self.schedule):
            raise ValueError(f"schedule entries must be >= 1: {self.schedule}")
        if sum(self.schedule) != self.num_classes:
            raise ValueError(f"schedule {self.schedule} does not sum to num_classes={self.num_classes}")
        if not 1 <= self.num_classes <= MAX_CLASSES:
            raise ValueError(f"num_classes must be in [1, {MAX_CLASSES}]")
        if self.setting not in ("disjoint", "overlapped"):
            raise ValueError(f"setting must be disjoint or overlapped, got {self.setting!r}")
        if self.patch_size < 1 or self.image_size % self.patch_size:
            raise ValueError("image_size must be divisible by patch_size")
        if self.image_size < MIN_SIDE:
            raise ValueError("image_size too small for a single object")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")

    @property
    def num_steps(self) -> int:
        return len(self.schedule)

    def classes_at(self, step: int) -> list[int]:
        """C^t for a 0-based step index."""
        self._check_step(step)
        start = 1 + sum(self.schedule[:step])
        return list(range(start, start + self.schedule[step]))

    def classes_through(self, step: int) -> list[int]:
        """C^{1:t}: every object class learned up to and including ``step``."""
        self._check_step(step)
        return list(range(1, 1 + sum(self.schedule[: step + 1])))

    def classes_after(self, step: int) -> list[int]:
        self._check_step(step)
        return list(range(1 + sum(self.schedule[: step + 1]), self.num_classes + 1))

    def _check_step(self, step: int) -> None:
        if not 0 <= step < self.num_steps:
            raise IndexError(f"step {step} outside schedule of {self.num_steps} steps")


@dataclass
class Scene:
    image: np.ndarray        # [H, W, ch] float64
    full_labels: np.ndarray  # [H, W] int, oracle labels over all classes
    step_labels: np.ndarray  # [H, W] int, labels visible at this step


def class_signatures(num_classes: int, channels: int) -> np.ndarray:
    """Row k is the unit signature of class k; row 0 (background) is zero.

    Standard basis vectors when they fit, otherwise fixed random unit vectors.
    """
    sig = np.zeros((num_classes + 1, channels))
    if num_classes <= channels:
        sig[1:, :num_classes] = np.eye(num_classes)
    else:
        v = np.random.default_rng(12345).standard_normal((num_classes, channels))
        sig[1:] = v / np.linalg.norm(v, axis=1, keepdims=True)
    return sig


def mask_labels_for_step(full_labels: np.ndarray, current_classes: Iterable[int]) -> np.ndarray:
    """Keep labels in ``current_classes``; everything else becomes background."""
    keep = np.isin(full_labels, np.asarray(list(current_classes), dtype=np.int64))
    return np.where(keep, full_labels, BACKGROUND).astype(np.int64)


def place_rectangles(size: int, classes: list[int], rng: np.random.Generator,
                     grid: int = 1, attempts: int = 1000) -> np.ndarray:
    """Label map with one non-overlapping rectangle per entry of ``classes``.

    Corners snap to multiples of ``grid``; sides span 1..half the image in
    grid cells and never fall below ``MIN_SIDE`` pixels.
    """
    cells = size // grid
    lo = -(-MIN_SIDE // grid)
    hi = max(lo, cells // 2)
    if lo > cells:
        raise ValueError("image too small for a single object")
    labels = np.zeros((size, size), dtype=np.int64)
    for c in classes:
        for _ in range(attempts):
            h = int(rng.integers(lo, hi + 1)) * grid
            w = int(rng.integers(lo, hi + 1)) * grid
            top = int(rng.integers(0, cells - h // grid + 1)) * grid
            left = int(rng.integers(0, cells - w // grid + 1)) * grid
            if not labels[top:top + h, left:left + w].any():
                labels[top:top + h, left:left + w] = c
                break
        else:
            raise RuntimeError(f"could not place a rectangle after {attempts} attempts (scene too crowded)")
    return labels


def render_image(full_labels: np.ndarray, spec: ScenarioSpec, rng: np.random.Generator) -> np.ndarray:
    sig = class_signatures(spec.num_classes, spec.feature_channels)
    image = sig[full_labels]
    if spec.noise_sigma > 0:
        image = image + spec.noise_sigma * rng.standard_normal(image.shape)
    return image


def generate_scene(spec: ScenarioSpec, step: int, rng: np.random.Generator,
                   n_objects: int | None = None, pool: str | None = None) -> Scene:
    """Draw one training scene for ``step`` (0-based).

    The first object always belongs to the step's own classes; the rest come
    from C^{1:t} (disjoint) or from every class (overlapped). ``pool="all"``
    forces the overlapped pool and drops the forced current-class object,
    which is how test scenes are drawn.
    """
    current = spec.classes_at(step)
    pool = pool or spec.setting
    if pool == "all" or pool == "overlapped":
        allowed = list(range(1, spec.num_classes + 1))
    elif pool == "disjoint":
        allowed = spec.classes_through(step)
    else:
        raise ValueError(f"unknown class pool {pool!r}")
    n = int(rng.integers(2, 6)) if n_objects is None else n_objects
    if pool == "all":
        picks = [int(c) for c in rng.choice(allowed, size=n)]
    else:
        picks = [int(rng.choice(current))] + [int(c) for c in rng.choice(allowed, size=n - 1)]
    full = place_rectangles(spec.image_size, picks, rng, grid=spec.patch_size)
    image = render_image(full, spec, rng)
    return Scene(image=image, full_labels=full, step_labels=mask_labels_for_step(full, current))


def scene_rng(seed: int, stream: int, step: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream, step, index])


def training_scenes(spec: ScenarioSpec, step: int) -> list[Scene]:
    return [generate_scene(spec, step, scene_rng(spec.seed, 0, step, i))
            for i in range(spec.scenes_per_step)]


def evaluation_scenes(spec: ScenarioSpec, count: int = 100) -> list[Scene]:
    """Held-out evaluation scenes drawn from all classes, independent of setting."""
    last = spec.num_steps - 1
    scenes = [generate_scene(spec, last, scene_rng(spec.seed, 1, 0, i), pool="all")
              for i in range(count)]
    for s in scenes:
        s.step_labels = s.full_labels.copy()
    return scenes


def stack(scenes: list[Scene]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    return (np.stack([s.image for s in scenes]),
            np.stack([s.full_labels for s in scenes]),
            np.stack([s.step_labels for s in scenes]))


SPEC_FIELDS = {f.name for f in fields(ScenarioSpec)}

"""Continual training driver and ablation grid."""
from __future__ import annotations

import csv
import hashlib
import io
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from . import labeling, losses, metrics
from .numerics import NumericalError, assert_finite, save_tensor
from .scenes import IGNORE, ScenarioSpec, Scene, stack, evaluation_scenes, training_scenes
from .segmenter import ToySegmenter, expand_for_new_classes, forward, save_checkpoint, snapshot

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AblationFlags:
    spl: bool = True
    afd: bool = True
    sep: bool = True

    @property
    def label(self) -> str:
        on = [n for n in ("spl", "afd", "sep") if getattr(self, n)]
        return "+".join(on) if on else "baseline"


# component grid, rows a..h: baseline first, full method last
GRID = {
    "a": AblationFlags(False, False, False),
    "b": AblationFlags(True, False, False),
    "c": AblationFlags(False, True, False),
    "d": AblationFlags(False, False, True),
    "e": AblationFlags(True, True, False),
    "f": AblationFlags(True, False, True),
    "g": AblationFlags(False, True, True),
    "h": AblationFlags(True, True, True),
}

TAU_SWEEP = (0.6, 0.7, 0.8)
LAMBDA_LGKD_SWEEP = (5.0, 10.0, 20.0, 25.0, 50.0)
LAMBDA_ORTHO_SWEEP = (0.5, 0.1, 0.05, 0.01, "adaptive")


@dataclass(frozen=True)
class TrainConfig:
    lr_base: float = 1e-1
    lr_incremental: float = 1e-2
    momentum: float = 0.9
    weight_decay: float = 1e-5
    epochs_base: int = 40
    epochs_incremental: int = 40
    batch_size: int = 16
    tau: float = 0.7
    coefficients: losses.LossCoefficients = field(default_factory=losses.LossCoefficients)
    flags: AblationFlags = field(default_factory=AblationFlags)
    seed: int = 0
    d_embed: int = 16
    d_model: int = 16
    test_scenes: int = 100
    all_includes_background: bool = True

    def __post_init__(self):
        if self.lr_base <= 0 or self.lr_incremental < 0:
            raise ValueError("learning rates must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs_base < 0 or self.epochs_incremental < 0:
            raise ValueError("epoch counts must be >= 0")


class SGD:
    """SGD with momentum and L2 weight decay on decoder and tokens only."""

    def __init__(self, lr: float, momentum: float, weight_decay: float):
        self.lr, self.momentum, self.weight_decay = lr, momentum, weight_decay
        self.buf: dict[str, np.ndarray] = {}

    def step(self, model: ToySegmenter, bundle: losses.LossBundle) -> None:
        for name, grad in (("decoder", bundle.grad_decoder), ("tokens", bundle.grad_tokens)):
            p = getattr(model, name)
            g = np.zeros_like(p) if grad is None else grad
            g = g + self.weight_decay * p
            v = self.buf.get(name)
            v = g if v is None else self.momentum * v + g
            self.buf[name] = v
            p -= self.lr * v


@dataclass
class StepResult:
    step: int  # 1-based
    iou: metrics.IoUReport
    similarity: metrics.SimilarityReport | None = None
    ignored_label_ratio: float = float("nan")
    shift_old: float = float("nan")
    shift_new: float = float("nan")
    loss_curve: list[float] = field(default_factory=list)
    future_exposures: int = 0


@dataclass
class RunRecord:
    spec: ScenarioSpec
    config: TrainConfig
    steps: list[StepResult] = field(default_factory=list)
    wall_clock: float = 0.0
    models: list[ToySegmenter] = field(default_factory=list)

    @property
    def config_hash(self) -> str:
        return config_hash(self.spec, self.config)

    def rows(self) -> list[dict]:
        out = []
        base = {"config_hash": self.config_hash, "setting": self.spec.setting,
                "variant": self.config.flags.label, "seed": self.config.seed}

        def add(step, metric, group, value):
            out.append({**base, "step": step, "metric": metric, "group": group, "value": value})

        for s in self.steps:
            for g, v in s.iou.group_miou.items():
                add(s.step, "miou", g, v)
            for c, v in s.iou.per_class_iou.items():
                add(s.step, "iou", f"c{c}", v)
            if s.similarity is not None:
                for g, v in s.similarity.as_dict().items():
                    add(s.step, "similarity", g, v)
            add(s.step, "ignored_label_ratio", "old", s.ignored_label_ratio)
            add(s.step, "bg_shift", "old", s.shift_old)
            add(s.step, "bg_shift", "new", s.shift_new)
            add(s.step, "final_loss", "total", s.loss_curve[-1] if s.loss_curve else float("nan"))
            add(s.step, "future_exposures", "train", s.future_exposures)
        return out

    def final(self, group: str) -> float:
        return self.steps[-1].iou.group_miou[group]


CSV_FIELDS = ["config_hash", "setting", "variant", "seed", "step", "metric", "group", "value"]


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def write_csv(path: Path, rows: list[dict], fields: list[str]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(fields)
    for r in rows:
        w.writerow([_fmt(r[f]) for f in fields])
    Path(path).write_text(buf.getvalue())


def config_hash(spec: ScenarioSpec, config: TrainConfig) -> str:
    text = repr((asdict(spec), asdict(config)))
    return hashlib.sha256(text.encode()).hexdigest()[:12]


def _check_loss(bundle: losses.LossBundle, where: str) -> None:
    if not math.isfinite(bundle.value):
        raise NumericalError(f"loss diverged ({bundle.value}) during {where}")


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def count_future_exposures(scenes: list[Scene], spec: ScenarioSpec, step: int) -> int:
    """Training scenes at ``step`` (0-based) that contain a future-class pixel."""
    future = spec.classes_after(step)
    if not future:
        return 0
    return sum(bool(np.isin(s.full_labels, future).any()) for s in scenes)


def _protocol_check(scenes, spec, step) -> int:
    trips = count_future_exposures(scenes, spec, step)
    if spec.setting == "disjoint" and trips:
        raise AssertionError(f"disjoint step {step + 1} exposed {trips} scenes with future classes")
    return trips


def init_model(spec: ScenarioSpec, config: TrainConfig) -> ToySegmenter:
    rng = np.random.default_rng([config.seed, 7])
    return ToySegmenter.init(rng, spec.patch_size, spec.feature_channels, spec.schedule[0],
                             config.d_embed, config.d_model)


def train_base_step(spec: ScenarioSpec, config: TrainConfig,
                    scenes: list[Scene] | None = None) -> tuple[ToySegmenter, list[float]]:
    """Cross-entropy training on C^1 from a fresh model."""
    model = init_model(spec, config)
    scenes = training_scenes(spec, 0) if scenes is None else scenes
    images, _, y = stack(scenes)
    rng = np.random.default_rng([config.seed, 11, 0])
    opt = SGD(config.lr_base, config.momentum, config.weight_decay)
    curve = []
    for epoch in range(config.epochs_base):
        total = 0.0
        for idx in _batches(len(scenes), config.batch_size, rng):
            bundle = losses.ce_loss(forward(model, images[idx]), y[idx])
            _check_loss(bundle, f"base step epoch {epoch}")
            opt.step(model, bundle)
            total += bundle.value * len(idx)
        curve.append(total / len(scenes))
        assert_finite(model.decoder, "decoder")
        assert_finite(model.tokens, "tokens")
    return model, curve


@dataclass
class StepTargets:
    """Everything derived from the frozen old model for one incremental step."""
    labels: np.ndarray        # y_bar (or naive y_tilde) at pixel resolution
    naive: np.ndarray         # y_tilde
    teacher: np.ndarray       # refined or zero-extended teacher, pixel resolution
    reliability: np.ndarray   # M at patch resolution
    old_features: np.ndarray  # F^{t-1}


def build_targets(old: ToySegmenter, images: np.ndarray, y_t: np.ndarray, spec: ScenarioSpec,
                  step: int, config: TrainConfig) -> StepTargets:
    old_classes = spec.classes_through(step - 1)
    new_classes = spec.classes_at(step)
    fwd_old = forward(old, images)
    s_old = fwd_old.probs
    naive = labeling.pseudo_label(y_t, s_old, config.tau)
    if config.flags.spl:
        y_bar = labeling.selective_pseudo_label(naive, labeling.object_identifier(s_old))
    else:
        y_bar = naive
    if config.flags.afd:
        y_hat, s_hat = labeling.downsample_labels_and_probs(y_bar, s_old, spec.patch_size)
        m = losses.reliability_map(y_hat, s_hat, old_classes, new_classes)
    else:
        m = np.ones(fwd_old.features.shape[:-1])
    width = 1 + len(old_classes) + len(new_classes)
    if config.flags.sep:
        teacher = losses.refine_teacher(s_old, y_bar, new_classes)
    else:
        teacher = losses.extend_teacher(s_old, width)
    return StepTargets(y_bar, naive, teacher, m, fwd_old.features)


def incremental_objective(model: ToySegmenter, images: np.ndarray, targets: StepTargets,
                          spec: ScenarioSpec, step: int, config: TrainConfig,
                          anchor: np.ndarray | None = None) -> losses.LossBundle:
    """Full objective for one batch: CE + feature distillation + separation (or plain KD)."""
    new_classes = spec.classes_at(step)
    seen = spec.classes_through(step)
    fwd = forward(model, images)
    ce = losses.ce_loss(fwd, targets.labels)
    afd = losses.afd_loss(fwd, targets.old_features, targets.reliability)
    kd = losses.lgkd_loss(targets.teacher, fwd)
    if config.flags.sep:
        ortho = losses.ortho_loss(model.tokens, new_classes, seen, anchor=anchor)
        sep = losses.sep_loss(kd, ortho, config.coefficients, len(new_classes), len(seen))
    else:
        sep = kd.scaled(config.coefficients.lambda_lgkd)
    return losses.total_loss(ce, afd, sep)


def train_incremental_step(model: ToySegmenter, spec: ScenarioSpec, step: int, config: TrainConfig,
                           scenes: list[Scene] | None = None,
                           on_targets: Callable[[StepTargets, list[Scene]], None] | None = None,
                           ) -> tuple[ToySegmenter, list[float]]:
    """One continual step (0-based ``step`` >= 1): snapshot, token transfer, distillation training."""
    if step < 1:
        raise ValueError("incremental steps start at index 1")
    if step >= spec.num_steps:
        raise IndexError(f"schedule has only {spec.num_steps} steps")
    old = snapshot(model)
    live = expand_for_new_classes(model, spec.schedule[step])
    scenes = training_scenes(spec, step) if scenes is None else scenes
    images, _, y_t = stack(scenes)
    targets = build_targets(old, images, y_t, spec, step, config)
    if on_targets is not None:
        on_targets(targets, scenes)
    rng = np.random.default_rng([config.seed, 11, step])
    opt = SGD(config.lr_incremental, config.momentum, config.weight_decay)
    curve = []
    for epoch in range(config.epochs_incremental):
        total = 0.0
        for idx in _batches(len(scenes), config.batch_size, rng):
            batch = StepTargets(targets.labels[idx], targets.naive[idx], targets.teacher[idx],
                                targets.reliability[idx], targets.old_features[idx])
            bundle = incremental_objective(live, images[idx], batch, spec, step, config)
            _check_loss(bundle, f"step {step + 1} epoch {epoch}")
            opt.step(live, bundle)
            total += bundle.value * len(idx)
        curve.append(total / len(scenes))
    assert_finite(live.decoder, "decoder")
    assert_finite(live.tokens, "tokens")
    return live, curve


def evaluate(model: ToySegmenter, spec: ScenarioSpec, step: int, scenes: list[Scene],
             all_includes_background: bool = True) -> tuple[metrics.IoUReport, list[np.ndarray], list[np.ndarray]]:
    """Grouped mIoU on ``scenes``; classes not yet learned are ignored in the ground truth."""
    seen = spec.classes_through(step)
    images, full, _ = stack(scenes)
    preds = metrics.predict_labels(forward(model, images).probs)
    gt = np.where(np.isin(full, [0] + seen), full, IGNORE)
    first = spec.classes_at(0)
    groups = {"initial": [0] + first, "incremented": [c for c in seen if c not in first],
              "all": ([0] if all_includes_background else []) + seen}
    report = metrics.miou(list(preds), list(gt), groups)
    return report, list(preds), list(gt)


def run_scenario(spec: ScenarioSpec, config: TrainConfig, out_dir: str | Path | None = None,
                 keep_models: bool = False) -> RunRecord:
    """Train through every step, evaluating after each one."""
    t0 = time.perf_counter()
    record = RunRecord(spec, config)
    tests = evaluation_scenes(spec, config.test_scenes)
    out = Path(out_dir) if out_dir is not None else None

    model = None
    for step in range(spec.num_steps):
        scenes = training_scenes(spec, step)
        exposures = _protocol_check(scenes, spec, step)
        counter = metrics.IgnoredLabelCounter()

        def audit(targets: StepTargets, sc: list[Scene], step=step):
            _, full, _ = stack(sc)
            counter.update(targets.naive, targets.labels, full, spec.classes_through(step - 1))

        if step == 0:
            model, curve = train_base_step(spec, config, scenes)
        else:
            model, curve = train_incremental_step(model, spec, step, config, scenes, on_targets=audit)
        report, preds, gt = evaluate(model, spec, step, tests, config.all_includes_background)
        res = StepResult(step + 1, report, loss_curve=curve, future_exposures=exposures)
        if step > 0:
            res.similarity = metrics.token_similarity(model.tokens, spec.classes_at(step),
                                                      spec.classes_through(step - 1))
            res.ignored_label_ratio = counter.ratio
            res.shift_old = metrics.background_shift_rate(preds, gt, spec.classes_through(step - 1))
            res.shift_new = metrics.background_shift_rate(preds, gt, spec.classes_at(step))
        record.steps.append(res)
        if keep_models:
            record.models.append(snapshot(model))
        if out is not None:
            save_checkpoint(model, out / "checkpoints" / f"step_{step + 1}", step + 1)
        log.info("step %d: %s", step + 1, report.group_miou)
    record.wall_clock = time.perf_counter() - t0
    if out is not None:
        persist(record, out, scenes)
    return record


def persist(record: RunRecord, out: Path, last_scenes: list[Scene] | None = None) -> None:
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "record.csv", record.rows(), CSV_FIELDS)
    (out / "summary.txt").write_text(summary_text(record))
    if last_scenes:
        sdir = out / "scenes"
        sdir.mkdir(exist_ok=True)
        for i, s in enumerate(last_scenes[:4]):
            save_tensor(sdir / f"scene_{i:03d}.clt", scene_to_tensor(s))


def scene_to_tensor(scene: Scene) -> np.ndarray:
    """Pack a scene as ``[H, W, ch + 2]``: image channels, full labels, step labels."""
    return np.concatenate([scene.image, scene.full_labels[..., None].astype(np.float64),
                           scene.step_labels[..., None].astype(np.float64)], axis=-1)


def tensor_to_scene(x: np.ndarray) -> Scene:
    return Scene(x[..., :-2].copy(), x[..., -2].astype(np.int64), x[..., -1].astype(np.int64))


def summary_text(record: RunRecord) -> str:
    lines = [f"config_hash = {record.config_hash}", f"setting = {record.spec.setting}",
             f"variant = {record.config.flags.label}", f"seed = {record.config.seed}",
             f"wall_clock_s = {record.wall_clock:.3f}"]
    for s in record.steps:
        lines.append(f"[step {s.step}]")
        lines.append(s.iou.to_text())
        if s.similarity is not None:
            lines += [f"similarity.{k} = {_fmt(v)}" for k, v in s.similarity.as_dict().items()]
            lines.append(f"ignored_label_ratio = {_fmt(s.ignored_label_ratio)}")
            lines.append(f"bg_shift.old = {_fmt(s.shift_old)}")
            lines.append(f"bg_shift.new = {_fmt(s.shift_new)}")
        lines.append(f"future_exposures = {s.future_exposures}")
    return "\n".join(lines) + "\n"


ABLATION_FIELDS = ["variant", "spl", "afd", "sep", "tau", "lambda_lgkd", "lambda_ortho",
                   "seed", "step", "group", "miou"]


def _variants(config: TrainConfig, sweeps: bool) -> list[tuple[str, TrainConfig]]:
    out = [(row, replace(config, flags=flags)) for row, flags in GRID.items()]
    if sweeps:
        full = replace(config, flags=GRID["h"])
        out += [(f"tau={v}", replace(full, tau=v)) for v in TAU_SWEEP]
        out += [(f"lambda_lgkd={v}", replace(full, coefficients=replace(full.coefficients, lambda_lgkd=v)))
                for v in LAMBDA_LGKD_SWEEP]
        out += [(f"lambda_ortho={v}", replace(full, coefficients=replace(full.coefficients, lambda_ortho=v)))
                for v in LAMBDA_ORTHO_SWEEP]
    return out


def run_ablation_grid(spec: ScenarioSpec, config: TrainConfig, seeds: Iterable[int],
                      out_dir: str | Path | None = None, sweeps: bool = False
                      ) -> list[tuple[str, RunRecord]]:
    """The 2^3 component grid (plus optional hyperparameter sweeps) over ``seeds``."""
    results = []
    rows = []
    for seed in seeds:
        s_spec = replace(spec, seed=seed)
        for name, cfg in _variants(config, sweeps):
            rec = run_scenario(s_spec, replace(cfg, seed=seed))
            results.append((name, rec))
            for st in rec.steps:
                for g, v in st.iou.group_miou.items():
                    rows.append({"variant": name, "spl": int(cfg.flags.spl), "afd": int(cfg.flags.afd),
                                 "sep": int(cfg.flags.sep), "tau": cfg.tau,
                                 "lambda_lgkd": cfg.coefficients.lambda_lgkd,
                                 "lambda_ortho": cfg.coefficients.lambda_ortho,
                                 "seed": seed, "step": st.step, "group": g, "miou": v})
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_csv(out / "ablation.csv", rows, ABLATION_FIELDS)
        all_rows = [r for _, rec in results for r in rec.rows()]
        write_csv(out / "record.csv", all_rows, CSV_FIELDS)
    return results

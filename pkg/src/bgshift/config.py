"""Plain-text ``key = value`` config files.

Keys are the field names of :class:`ScenarioSpec` and :class:`TrainConfig`,
with the loss coefficients (``lambda_lgkd``, ``lambda_ortho``) and ablation
flags (``spl``, ``afd``, ``sep``) flattened to the top level. ``seed`` sets
both the scene seed and the training seed. Blank lines and ``#`` comments
are skipped.
"""
from __future__ import annotations

from dataclasses import fields, replace
from pathlib import Path

from .losses import LossCoefficients
from .runner import AblationFlags, TrainConfig
from .scenes import ScenarioSpec


class ConfigError(ValueError):
    pass


_BOOL = {"1": True, "true": True, "on": True, "yes": True,
         "0": False, "false": False, "off": False, "no": False}

SPEC_KEYS = {f.name for f in fields(ScenarioSpec)}
TRAIN_KEYS = {f.name for f in fields(TrainConfig)} - {"coefficients", "flags"}
COEF_KEYS = {"lambda_lgkd", "lambda_ortho"}
FLAG_KEYS = {"spl", "afd", "sep"}
ALL_KEYS = SPEC_KEYS | TRAIN_KEYS | COEF_KEYS | FLAG_KEYS


def parse_pairs(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"line {n}: expected 'key = value', got {raw!r}")
        if key not in ALL_KEYS:
            raise ConfigError(f"line {n}: unknown key {key!r}")
        if key in out:
            raise ConfigError(f"line {n}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def _convert(key: str, value: str, default):
    try:
        if key == "schedule":
            return tuple(int(v) for v in value.replace(",", " ").split())
        if key == "lambda_ortho":
            return value if value == "adaptive" else float(value)
        if isinstance(default, bool):
            return _BOOL[value.lower()]
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
        return value
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"bad value for {key!r}: {value!r}") from exc


def from_pairs(pairs: dict[str, str]) -> tuple[ScenarioSpec, TrainConfig]:
    spec_d, train_d = ScenarioSpec(), TrainConfig()
    spec_kw = {k: _convert(k, v, getattr(spec_d, k)) for k, v in pairs.items() if k in SPEC_KEYS}
    train_kw = {k: _convert(k, v, getattr(train_d, k)) for k, v in pairs.items() if k in TRAIN_KEYS}
    coef_kw = {k: _convert(k, v, getattr(train_d.coefficients, k)) for k, v in pairs.items() if k in COEF_KEYS}
    flag_kw = {k: _convert(k, v, True) for k, v in pairs.items() if k in FLAG_KEYS}
    try:
        spec = ScenarioSpec(**spec_kw)
        train = TrainConfig(**train_kw, coefficients=LossCoefficients(**coef_kw),
                            flags=AblationFlags(**flag_kw))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    if "seed" in pairs:
        train = replace(train, seed=spec.seed)
    return spec, train


def load_config(path: str | Path) -> tuple[ScenarioSpec, TrainConfig]:
    return from_pairs(parse_pairs(Path(path).read_text()))


def dump_config(spec: ScenarioSpec, train: TrainConfig) -> str:
    lines = []
    for f in fields(ScenarioSpec):
        v = getattr(spec, f.name)
        lines.append(f"{f.name} = {','.join(map(str, v)) if f.name == 'schedule' else v}")
    for f in fields(TrainConfig):
        if f.name in ("coefficients", "flags", "seed"):
            continue
        lines.append(f"{f.name} = {getattr(train, f.name)}")
    lines += [f"lambda_lgkd = {train.coefficients.lambda_lgkd}",
              f"lambda_ortho = {train.coefficients.lambda_ortho}"]
    lines += [f"{k} = {str(getattr(train.flags, k)).lower()}" for k in ("spl", "afd", "sep")]
    return "\n".join(lines) + "\n"

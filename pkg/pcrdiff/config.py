"""Run configuration loaded from TOML, with environment fallbacks for the seed."""

from __future__ import annotations

import os
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib  # type: ignore[no-redef]
from collections.abc import Mapping
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

from .diffusion import COSINE_OFFSET, NoiseSchedule, cosine_schedule
from .exceptions import ConfigError, IoFailure
from .trainer import TrainConfig

SEED_ENV = "PCRDIFF_SEED"
TOP_LEVEL_KEYS = frozenset({"train", "model", "schedule", "data", "out", "seed", "validation"})


@dataclass(frozen=True)
class ScheduleConfig:
    """Cosine schedule offset; the step count T lives in ``[train]``."""

    offset: float = COSINE_OFFSET

    def __post_init__(self) -> None:
        if self.offset <= 0.0:
            raise ConfigError("schedule.offset", f"must be positive, got {self.offset}")

    def build(self, T: int) -> NoiseSchedule:
        return cosine_schedule(T, self.offset)


@dataclass(frozen=True)
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    model: Mapping[str, Any] = field(default_factory=dict)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    data: Path | None = None
    out: Path | None = None
    seed: int | None = None
    validation: float = 0.0


def _table(raw: Mapping[str, Any], key: str) -> dict[str, Any]:
    value = raw.get(key, {})
    if not isinstance(value, dict):
        raise ConfigError(key, "expected a table")
    return value


def _build(cls: type[Any], prefix: str, values: Mapping[str, Any]) -> Any:
    known = {f.name for f in fields(cls)}
    for key in values:
        if key not in known:
            raise ConfigError(f"{prefix}.{key}", "unknown key")
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError(prefix, str(exc)) from exc


def run_config_from_dict(raw: Mapping[str, Any], *, base_dir: Path | None = None) -> RunConfig:
    for key in raw:
        if key not in TOP_LEVEL_KEYS:
            raise ConfigError(key, "unknown key")
    train = _build(TrainConfig, "train", _table(raw, "train"))
    schedule = _build(ScheduleConfig, "schedule", _table(raw, "schedule"))
    root = base_dir or Path.cwd()

    def as_path(key: str) -> Path | None:
        value = raw.get(key)
        if value is None:
            return None
        if not isinstance(value, str):
            raise ConfigError(key, "expected a path string")
        return (root / value).resolve() if not Path(value).is_absolute() else Path(value)

    seed = raw.get("seed")
    if seed is not None and not isinstance(seed, int):
        raise ConfigError("seed", f"expected an integer, got {seed!r}")
    validation = float(raw.get("validation", 0.0))
    if not 0.0 <= validation < 1.0:
        raise ConfigError("validation", f"fraction must lie in [0, 1), got {validation}")
    return RunConfig(
        train=train,
        model=dict(_table(raw, "model")),
        schedule=schedule,
        data=as_path("data"),
        out=as_path("out"),
        seed=seed,
        validation=validation,
    )


def load_run_config(path: str | Path) -> RunConfig:
    config_path = Path(path)
    try:
        raw = tomllib.loads(config_path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise IoFailure(f"cannot read config {config_path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(str(config_path), f"invalid TOML: {exc}") from exc
    return run_config_from_dict(raw, base_dir=config_path.parent)


def resolve_seed(*candidates: int | None) -> int:
    """First non-None candidate, then ``$PCRDIFF_SEED``, then 0."""
    for candidate in candidates:
        if candidate is not None:
            return candidate
    env = os.environ.get(SEED_ENV)
    if env is None or env.strip() == "":
        return 0
    try:
        return int(env)
    except ValueError as exc:
        raise ConfigError(SEED_ENV, f"expected an integer, got {env!r}") from exc


def require_dataset(path: Path | None, key: str = "data") -> Path:
    if path is None:
        raise ConfigError(key, "no dataset directory given")
    if not (path / "manifest.json").is_file():
        raise IoFailure(f"{path} is not a dataset directory (missing manifest.json)")
    return path


__all__ = [
    "SEED_ENV",
    "ScheduleConfig",
    "RunConfig",
    "run_config_from_dict",
    "load_run_config",
    "resolve_seed",
    "require_dataset",
]

"""Run configuration loaded from a single YAML file.

Relative paths are resolved against the directory containing the config, so a
config and its data can be moved together.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import yaml

from .gateway import ModelProfile
from .promptgrid import GridConfig
from .selector import DEFAULT_BASELINES
from .utils import DataError, canonical_json, sha256_text

MODEL_ROLES = ("cheap", "expensive", "mock", "embedding")


class ConfigError(ValueError):
    pass


def _int(value, where: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{where} must be an explicit integer, got {value!r}")
    return value


@dataclass(frozen=True)
class DatasetConfig:
    name: str
    catalog: Path
    reviews: Path
    genre: str = "item"
    recency_verb: str = "interacted with"
    min_rating: float = 3.0
    min_count: int = 30


@dataclass(frozen=True)
class EvaluationConfig:
    n_pos: int = 2
    n_neg: int = 18
    max_attempts: int = 10
    ndcg_k: int = 10
    n_validation_users: int = 100
    n_test_users: int = 100


@dataclass
class RunConfig:
    datasets: list[DatasetConfig]
    models: dict[str, ModelProfile]
    output_dir: Path
    cache_dir: Path | None = None
    seed: int = 0
    workers: int = 1
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    grid: GridConfig = field(default_factory=GridConfig)
    baselines: tuple[str, ...] = DEFAULT_BASELINES
    rpi_mode: str = "pairwise"
    budget_usd: float | None = None
    templates: Path | None = None
    raw: dict = field(default_factory=dict, repr=False)

    @property
    def config_hash(self) -> str:
        return sha256_text(canonical_json(self.raw))

    def dataset(self, name: str) -> DatasetConfig:
        for d in self.datasets:
            if d.name == name:
                return d
        raise ConfigError(f"unknown dataset {name!r}")

    def model(self, role: str) -> ModelProfile:
        if role not in self.models:
            raise ConfigError(f"config defines no {role!r} model profile")
        return self.models[role]

    def validate_paths(self) -> None:
        for d in self.datasets:
            for p in (d.catalog, d.reviews):
                if not p.exists():
                    raise DataError(f"dataset {d.name}: file not found: {p}")
        if self.templates is not None and not self.templates.exists():
            raise DataError(f"template file not found: {self.templates}")


def _path(base: Path, value) -> Path:
    p = Path(str(value)).expanduser()
    return p if p.is_absolute() else (base / p)


def from_dict(data: Mapping, base_dir: Path | str = ".") -> RunConfig:
    base = Path(base_dir)
    run = dict(data.get("run") or {})
    if "output_dir" not in run:
        raise ConfigError("run.output_dir is required")
    datasets = []
    names = set()
    for i, entry in enumerate(data.get("datasets") or []):
        try:
            name = entry["name"]
            catalog, reviews = entry["catalog"], entry["reviews"]
        except KeyError as exc:
            raise ConfigError(f"datasets[{i}] lacks {exc.args[0]!r}") from None
        if name in names:
            raise ConfigError(f"duplicate dataset name {name!r}")
        names.add(name)
        datasets.append(DatasetConfig(
            name=name, catalog=_path(base, catalog), reviews=_path(base, reviews),
            genre=entry.get("genre", "item"), recency_verb=entry.get("recency_verb", "interacted with"),
            min_rating=float(entry.get("min_rating", 3.0)),
            min_count=_int(entry.get("min_count", 30), f"datasets[{i}].min_count"),
        ))
    if not datasets:
        raise ConfigError("config lists no datasets")

    models = {}
    for role, spec in (data.get("models") or {}).items():
        if role not in MODEL_ROLES:
            raise ConfigError(f"unknown model role {role!r}; expected one of {MODEL_ROLES}")
        spec = dict(spec)
        if role == "embedding":
            spec.setdefault("kind", "embedding")
        if str(spec.get("endpoint_base", "")).startswith("file://"):
            spec["endpoint_base"] = "file://" + str(_path(base, spec["endpoint_base"][len("file://"):]))
        try:
            models[role] = ModelProfile.from_dict(spec)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"models.{role}: {exc}") from None

    ev = dict(data.get("evaluation") or {})
    unknown = set(ev) - set(EvaluationConfig.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"unknown evaluation keys: {sorted(unknown)}")
    evaluation = EvaluationConfig(**{k: _int(v, f"evaluation.{k}") for k, v in ev.items()})

    sel = dict(data.get("selection") or {})
    mode = sel.get("rpi_mode", "pairwise")
    if mode not in ("pairwise", "table"):
        raise ConfigError(f"selection.rpi_mode must be 'pairwise' or 'table', got {mode!r}")
    budget = data.get("budget_usd")
    return RunConfig(
        datasets=datasets,
        models=models,
        output_dir=_path(base, run["output_dir"]),
        cache_dir=_path(base, data["cache_dir"]) if data.get("cache_dir") else None,
        seed=_int(run.get("seed", 0), "run.seed"),
        workers=_int(run.get("workers", 1), "run.workers"),
        evaluation=evaluation,
        grid=GridConfig.from_dict(data.get("grid")),
        baselines=tuple(sel.get("baselines", DEFAULT_BASELINES)),
        rpi_mode=mode,
        budget_usd=float(budget) if budget is not None else None,
        templates=_path(base, data["templates"]) if data.get("templates") else None,
        raw=dict(data),
    )


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise DataError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text("utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return from_dict(data, path.parent)

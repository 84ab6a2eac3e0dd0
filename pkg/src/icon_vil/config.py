"""YAML run configuration: sections, defaults, validation and derived quantities.

Every section is a flat mapping. Unknown sections or keys, wrong value types
and violated ranges raise :class:`~icon_vil.errors.ConfigError` whose
``path`` is the offending ``section.key``.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import BadConfig, ConfigError
from .model import ModelConfig
from .scenario import StreamKind, generate_stream
from .trainer import TrainerConfig

CONFIG_DIRS = (Path.cwd() / "configs", Path(__file__).resolve().parents[2] / "configs")


@dataclass
class DatasetSection:
    source: str = "synth"
    num_classes: int = 10
    num_domains: int = 4
    feature_dim: int = 16
    per_cell: int = 60
    shift_strength: float = 0.6
    noise_sigma: float = 0.5
    test_fraction: float = 0.25
    seed: int = 0
    csv_path: str | None = None


@dataclass
class ModelSection:
    backbone_layers: int = 3
    hidden_dim: int = 16
    adapter_layer_count: int | None = None
    adapter_rank: int = 5
    ema_decay: float = 0.9999


@dataclass
class ScenarioSection:
    kind: str = "vil"
    classes_per_task: int = 2
    seed: int | None = None     # None: the stream follows the run seed


@dataclass
class RunSection:
    seeds: list = field(default_factory=lambda: [0])
    out_dir: str = "runs"
    emit_shift_pool: bool = False
    emit_node_report: bool = True


@dataclass
class RunConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    model: ModelSection = field(default_factory=ModelSection)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    scenario: ScenarioSection = field(default_factory=ScenarioSection)
    run: RunSection = field(default_factory=RunSection)

    def model_config(self, seed: int) -> ModelConfig:
        m = self.model
        layers = None if m.adapter_layer_count is None else tuple(range(m.adapter_layer_count))
        return ModelConfig(input_dim=self.dataset.feature_dim, hidden_dim=m.hidden_dim,
                           backbone_layers=m.backbone_layers, adapter_layers=layers,
                           adapter_rank=m.adapter_rank, ema_decay=m.ema_decay, seed=seed)

    def stream(self, seed: int):
        s = self.scenario
        stream_seed = seed if s.seed is None else s.seed
        return generate_stream(s.kind, self.dataset.num_classes, self.dataset.num_domains,
                               s.classes_per_task, seed=stream_seed)

    def derived(self) -> dict:
        stream = self.stream(self.run.seeds[0])
        ds = self.dataset
        return {"tasks": len(stream),
                "node_upper_bound": ds.num_classes * ds.num_domains,
                "shift_length": self.model_config(0).adapter_size,
                "k_clusters": self.trainer.resolved_k(len(stream))}

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


SECTIONS = {"dataset": DatasetSection, "model": ModelSection, "trainer": TrainerConfig,
            "scenario": ScenarioSection, "run": RunSection}


def _coerce(value, annotation: str, path: str):
    """Check ``value`` against a (string) annotation; ints are accepted as floats."""
    optional = "None" in annotation
    if value is None:
        if optional:
            return None
        raise ConfigError("must not be null", path=path)
    base = annotation.replace("| None", "").strip()
    if base == "bool":
        if not isinstance(value, bool):
            raise ConfigError(f"expected true/false, got {value!r}", path=path)
        return value
    if base == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"expected an integer, got {value!r}", path=path)
        return value
    if base == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"expected a number, got {value!r}", path=path)
        if not math.isfinite(value):
            raise ConfigError("must be finite", path=path)
        return float(value)
    if base == "str":
        if not isinstance(value, str):
            raise ConfigError(f"expected a string, got {value!r}", path=path)
        return value
    if base.startswith("tuple"):
        if not isinstance(value, (list, tuple)) or not all(
                isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
            raise ConfigError(f"expected a list of numbers, got {value!r}", path=path)
        return tuple(float(v) for v in value)
    if base == "list":
        if not isinstance(value, list) or not value or not all(
                isinstance(v, int) and not isinstance(v, bool) for v in value):
            raise ConfigError(f"expected a non-empty list of integers, got {value!r}", path=path)
        return list(value)
    return value


def _build_section(name: str, raw) -> object:
    cls = SECTIONS[name]
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("section must be a mapping", path=name)
    known = {f.name: f for f in dataclasses.fields(cls)}
    values = {}
    for key, value in raw.items():
        path = f"{name}.{key}"
        if key not in known:
            raise ConfigError("unknown key", path=path)
        values[key] = _coerce(value, str(known[key].type), path)
    try:
        return cls(**values)
    except BadConfig as exc:
        if exc.path:
            raise ConfigError(str(exc).split(": ", 1)[-1], path=exc.path) from None
        raise ConfigError(str(exc), path=name) from None


def _check(cfg: RunConfig, ema_given: dict) -> None:
    ds, m, sc, run = cfg.dataset, cfg.model, cfg.scenario, cfg.run
    if ds.source not in ("synth", "csv"):
        raise ConfigError(f"expected 'synth' or 'csv', got {ds.source!r}", path="dataset.source")
    if ds.source == "csv" and not ds.csv_path:
        raise ConfigError("required when source is csv", path="dataset.csv_path")
    for key in ("num_classes", "num_domains", "feature_dim"):
        if getattr(ds, key) < 1:
            raise ConfigError("must be >= 1", path=f"dataset.{key}")
    if ds.per_cell < 4:
        raise ConfigError("must be >= 4", path="dataset.per_cell")
    if ds.shift_strength < 0:
        raise ConfigError("must be >= 0", path="dataset.shift_strength")
    if ds.noise_sigma <= 0:
        raise ConfigError("must be > 0", path="dataset.noise_sigma")
    if not 0 < ds.test_fraction < 1:
        raise ConfigError("must lie in (0, 1)", path="dataset.test_fraction")
    for key in ("backbone_layers", "hidden_dim", "adapter_rank"):
        if getattr(m, key) < 1:
            raise ConfigError("must be >= 1", path=f"model.{key}")
    if m.adapter_layer_count is not None and not 1 <= m.adapter_layer_count <= m.backbone_layers:
        raise ConfigError(f"must lie in [1, {m.backbone_layers}]", path="model.adapter_layer_count")
    if not 0 <= m.ema_decay <= 1:
        raise ConfigError("must lie in [0, 1]", path="model.ema_decay")
    if len(ema_given) == 2 and ema_given["model"] != ema_given["trainer"]:
        raise ConfigError("conflicts with model.ema_decay", path="trainer.ema_decay")
    try:
        StreamKind.parse(sc.kind)
    except BadConfig as exc:
        raise ConfigError(str(exc).split(": ", 1)[-1], path="scenario.kind") from None
    if sc.classes_per_task < 1 or ds.num_classes % sc.classes_per_task:
        raise ConfigError(f"must divide dataset.num_classes={ds.num_classes}",
                          path="scenario.classes_per_task")
    if len(set(run.seeds)) != len(run.seeds):
        raise ConfigError("seeds must be unique", path="run.seeds")


def parse_config(doc) -> RunConfig:
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigError("top level must be a mapping of sections", path="<root>")
    for name in doc:
        if name not in SECTIONS:
            raise ConfigError("unknown section", path=str(name))
    sections = {name: _build_section(name, doc.get(name)) for name in SECTIONS}
    cfg = RunConfig(**sections)
    ema_given = {s: doc[s]["ema_decay"] for s in ("model", "trainer")
                 if isinstance(doc.get(s), dict) and "ema_decay" in doc[s]}
    decay = next(iter(ema_given.values()), cfg.model.ema_decay)
    _check(cfg, ema_given)
    cfg.model.ema_decay = cfg.trainer.ema_decay = float(decay)
    return cfg


def resolve_path(path) -> Path:
    """A file path, or a bare name looked up as ``configs/<name>.yaml``."""
    p = Path(path)
    if p.is_file():
        return p
    for base in CONFIG_DIRS:
        for candidate in (base / p, base / f"{p}.yaml", base / f"{p}.yml"):
            if candidate.is_file():
                return candidate
    raise ConfigError(f"config file {path} not found", path="--config")


def load_config(path) -> RunConfig:
    p = resolve_path(path)
    try:
        doc = yaml.safe_load(p.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML: {exc}", path=str(p)) from None
    cfg = parse_config(doc)
    if cfg.dataset.csv_path and not Path(cfg.dataset.csv_path).is_absolute():
        cfg.dataset.csv_path = str((p.parent / cfg.dataset.csv_path).resolve())
    return cfg


def apply_overrides(cfg: RunConfig, seed=None, out=None, ablate=(), scenario=None) -> RunConfig:
    cfg = dataclasses.replace(cfg, run=dataclasses.replace(cfg.run),
                              scenario=dataclasses.replace(cfg.scenario),
                              trainer=dataclasses.replace(cfg.trainer))
    if seed is not None:
        cfg.run.seeds = [int(seed)]
    if out is not None:
        cfg.run.out_dir = str(out)
    if scenario is not None:
        try:
            cfg.scenario.kind = StreamKind.parse(scenario).value
        except BadConfig as exc:
            raise ConfigError(str(exc).split(": ", 1)[-1], path="--scenario") from None
    flags = {"no-cast": "cast_enabled", "no-ic": "ic_enabled", "no-dt": "dynamic_threshold_enabled"}
    for item in ablate:
        if item not in flags:
            raise ConfigError(f"unknown ablation {item!r}; choose from {sorted(flags)}",
                              path="--ablate")
        setattr(cfg.trainer, flags[item], False)
    return cfg

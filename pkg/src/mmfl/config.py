"""Experiment configuration: YAML file plus dotted ``key=value`` overrides, validated field by field."""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import yaml

from .errors import ConfigError
from .federation import METHODS, FederationConfig
from .masking import MissingStats

# YAML spelling -> dataclass attribute
_ALIASES = {"lambda": "lam"}
_REVERSE = {v: k for k, v in _ALIASES.items()}


@dataclass
class DataConfig:
    path: Optional[str] = None
    n_samples: int = 2000
    n_modalities: int = 4
    feature_len: int = 8
    n_classes: int = 5
    class_separation: float = 1.0
    latent_dim: Optional[int] = None
    test_fraction: float = 0.2
    partition: str = "iid"
    alpha: float = 0.5


@dataclass
class MissingConfig:
    train_pm: float = 0.0
    train_ps: float = 0.0
    test_pm: float = 0.0
    test_ps: float = 0.0

    @property
    def train(self) -> MissingStats:
        return MissingStats(self.train_pm, self.train_ps)

    @property
    def test(self) -> MissingStats:
        return MissingStats(self.test_pm, self.test_ps)


@dataclass
class GridConfig:
    train_stats: list = field(default_factory=lambda: [[0.0, 0.0], [0.8, 0.8]])
    test_stats: list = field(default_factory=lambda: [[0.0, 0.0], [0.2, 0.2], [0.4, 0.4], [0.6, 0.6], [0.8, 0.8],
                                                      [1.0, 0.4], [0.6, 1.0], [0.8, 1.0]])
    train_inline: bool = True
    checkpoint_root: Optional[str] = None


@dataclass
class AblationConfig:
    methods: list = field(default_factory=lambda: list(METHODS))
    stats: list = field(default_factory=lambda: [[0.2, 0.2], [0.8, 0.8]])
    seeds: list = field(default_factory=lambda: [0, 1, 2])


@dataclass
class AnalysisConfig:
    checkpoints: list = field(default_factory=list)
    missing_sizes: list = field(default_factory=lambda: [0, 1, 2, 3])
    n_patterns: int = 4
    lipschitz_pairs: int = 2000
    lipschitz_radius: float = 1.0
    embedding_patterns: list = field(default_factory=lambda: [[0], [0, 3], []])
    max_instances: int = 200


@dataclass
class ExperimentConfig:
    seed: int = 0
    output_dir: str = "runs/default"
    data: DataConfig = field(default_factory=DataConfig)
    missing: MissingConfig = field(default_factory=MissingConfig)
    federation: FederationConfig = field(default_factory=FederationConfig)
    grid: GridConfig = field(default_factory=GridConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)

    def validate(self):
        try:
            self.federation.validate()
        except ValueError as exc:
            raise ConfigError(f"federation.{exc}", key="federation") from None
        for name in ("train", "test"):
            try:
                stats = getattr(self.missing, name)
            except ValueError as exc:
                raise ConfigError(f"missing.{name}: {exc}", key=f"missing.{name}") from None
            if stats.excluded:
                raise ConfigError(f"missing.{name}_pm = missing.{name}_ps = 1 is an excluded configuration",
                                  key=f"missing.{name}_pm")
        d = self.data
        if d.partition not in ("iid", "dirichlet"):
            raise ConfigError(f"data.partition must be 'iid' or 'dirichlet', got {d.partition!r}", key="data.partition")
        if d.n_modalities < 2 or d.n_samples < 1 or d.n_classes < 1 or d.feature_len < 1:
            raise ConfigError("data sizes must be positive with at least 2 modalities", key="data")
        if not 0 < d.test_fraction < 1:
            raise ConfigError("data.test_fraction must lie in (0, 1)", key="data.test_fraction")
        for m in self.ablation.methods:
            if m not in METHODS:
                raise ConfigError(f"ablation.methods: unknown method {m!r}", key="ablation.methods")
        return self


def _sections():
    return {f.name: f for f in dataclasses.fields(ExperimentConfig)}


def _hints(cls):
    return typing.get_type_hints(cls)


def _coerce(value, hint, key):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is typing.Union and type(None) in args:
        if value is None:
            return None
        hint = next(a for a in args if a is not type(None))
        origin = typing.get_origin(hint)
    if hint is bool:
        if isinstance(value, bool):
            return value
        raise ConfigError(f"{key} must be true or false, got {value!r}", key=key)
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key} must be an integer, got {value!r}", key=key)
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} must be a number, got {value!r}", key=key)
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{key} must be a string, got {value!r}", key=key)
        return value
    if hint is list or origin is list:
        if not isinstance(value, list):
            raise ConfigError(f"{key} must be a list, got {value!r}", key=key)
        return value
    return value


def config_keys() -> list:
    """Every dotted key accepted in a config file or override."""
    keys = []
    for name, f in _sections().items():
        if dataclasses.is_dataclass(f.default_factory if f.default_factory is not dataclasses.MISSING else None):
            for sub in dataclasses.fields(f.default_factory):
                keys.append(f"{name}.{_REVERSE.get(sub.name, sub.name)}")
        else:
            keys.append(name)
    return keys


def _set(cfg: ExperimentConfig, dotted: str, value, line=None):
    parts = dotted.split(".")
    sections = _sections()
    try:
        if parts[0] not in sections:
            raise ConfigError(f"unknown config key {dotted!r}", key=dotted)
        if len(parts) == 1:
            f = sections[parts[0]]
            if dataclasses.is_dataclass(f.default_factory) if f.default_factory is not dataclasses.MISSING else False:
                if not isinstance(value, dict):
                    raise ConfigError(f"{dotted} must be a mapping", key=dotted)
                for k, v in value.items():
                    _set(cfg, f"{dotted}.{k}", v, line)
                return
            setattr(cfg, parts[0], _coerce(value, _hints(ExperimentConfig)[parts[0]], dotted))
            return
        if len(parts) != 2:
            raise ConfigError(f"unknown config key {dotted!r}", key=dotted)
        section = getattr(cfg, parts[0])
        if not dataclasses.is_dataclass(section):
            raise ConfigError(f"unknown config key {dotted!r}", key=dotted)
        attr = _ALIASES.get(parts[1], parts[1])
        hints = _hints(type(section))
        if attr not in hints or attr == "workers" and parts[0] != "federation":
            raise ConfigError(f"unknown config key {dotted!r}", key=dotted)
        setattr(section, attr, _coerce(value, hints[attr], dotted))
    except ConfigError as exc:
        if exc.line is None and line is not None:
            raise ConfigError(str(exc), key=exc.key, line=line) from None
        raise


def _walk(node, prefix, out):
    """Map dotted keys to (value node, 1-based line) for nested YAML mappings."""
    for key_node, value_node in node.value:
        key = f"{prefix}{key_node.value}"
        line = key_node.start_mark.line + 1
        if isinstance(value_node, yaml.MappingNode) and not prefix:
            out.append((key, None, line))
            _walk(value_node, key + ".", out)
        else:
            out.append((key, value_node, line))


def load_config(path=None, overrides=()) -> ExperimentConfig:
    """Read a YAML config (optional) and apply ``key=value`` overrides; errors carry line numbers."""
    cfg = ExperimentConfig()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file {str(path)!r} not found", key="config")
        text = path.read_text(encoding="utf-8")
        try:
            root = yaml.compose(text, Loader=yaml.SafeLoader)
        except yaml.YAMLError as exc:
            mark = getattr(exc, "problem_mark", None)
            raise ConfigError(f"invalid YAML: {getattr(exc, 'problem', exc)}",
                              line=None if mark is None else mark.line + 1) from None
        if root is not None:
            if not isinstance(root, yaml.MappingNode):
                raise ConfigError("config file must hold a mapping", line=root.start_mark.line + 1)
            entries = []
            _walk(root, "", entries)
            loader = yaml.SafeLoader("")
            for key, node, line in entries:
                if node is None:
                    if key not in _sections():
                        raise ConfigError(f"unknown config key {key!r}", key=key, line=line)
                    continue
                value = loader.construct_object(node, deep=True)
                _set(cfg, key, value, line)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like key=value", key=item)
        key, raw = item.split("=", 1)
        try:
            value = yaml.safe_load(raw) if raw.strip() else None
        except yaml.YAMLError:
            value = raw
        _set(cfg, key.strip(), value)
    return cfg.validate()


def to_dict(cfg: ExperimentConfig) -> dict:
    out = {}
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if dataclasses.is_dataclass(v):
            out[f.name] = {_REVERSE.get(k, k): val for k, val in dataclasses.asdict(v).items()}
        else:
            out[f.name] = v
    return out


def dump_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(to_dict(cfg), sort_keys=False), encoding="utf-8")


def stats_list(pairs, key) -> list:
    out = []
    for pair in pairs:
        if not isinstance(pair, (list, tuple)) or len(pair) != 2:
            raise ConfigError(f"{key} entries must be [p_m, p_s] pairs, got {pair!r}", key=key)
        try:
            out.append(MissingStats(float(pair[0]), float(pair[1])))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{key}: {exc}", key=key) from None
    return out

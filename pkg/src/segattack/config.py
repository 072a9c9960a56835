"""Run configuration: a flat TOML document with per-attack sub-tables.

Example::

    dataset = "data/eval"
    sources = ["toy-cnn-a"]
    targets = ["toy-cnn-b"]
    seed = 0

    [weights]
    toy-cnn-a = "models/toy-cnn-a.pt"
    toy-cnn-b = "models/toy-cnn-b.pt"

    [attacks.pgd]

    [attacks.fspgd]
    iterations = 20
    tau = 0.5

Every attack table may set ``name`` (the attack kind; defaults to the table
key) plus any AttackConfig field. Relative paths resolve against the config
file's directory. The resolved config is echoed as JSON and can be fed back
with ``--config``.
"""

from __future__ import annotations

import json
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .attacker import ATTACKS, AttackConfig
from .errors import ConfigError
from .evalx import AttackSpec

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


DATASET_FORMATS = ("manifest", "voc", "cityscapes")
METRICS = ("miou", "miou_quantized")


@dataclass
class RunConfig:
    dataset: str | None = None
    dataset_format: str = "manifest"
    split: str = "val"
    max_images: int = 0  # 0: whole split
    sources: list[str] = field(default_factory=lambda: ["toy-cnn-a"])
    targets: list[str] = field(default_factory=lambda: ["toy-cnn-b"])
    weights: dict[str, str] = field(default_factory=dict)
    attacks: dict[str, dict] = field(default_factory=lambda: {"fspgd": {}})
    out: str = "runs/latest"
    seed: int = 0
    workers: int = 1
    quantized: bool = True
    metric: str = "miou"
    sweep: dict = field(default_factory=dict)  # kind, grid, attack
    simmap: dict = field(default_factory=dict)  # image, ref, layer
    synth: dict = field(default_factory=dict)  # SynthSpec fields
    train: dict = field(default_factory=dict)  # epochs, models, lr, batch_size

    def validate(self) -> "RunConfig":
        if self.dataset_format not in DATASET_FORMATS:
            raise ConfigError(f"dataset_format must be one of {DATASET_FORMATS}")
        if self.max_images < 0:
            raise ConfigError("max_images must be >= 0")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.metric not in METRICS:
            raise ConfigError(f"metric must be one of {METRICS}")
        if not isinstance(self.sources, list) or not isinstance(self.targets, list):
            raise ConfigError("sources and targets must be lists of model ids")
        for key, sub in (("sweep", {"kind", "grid", "attack"}),
                         ("simmap", {"image", "ref", "layer"}),
                         ("train", {"epochs", "models", "lr", "batch_size", "train_root"})):
            extra = set(getattr(self, key)) - sub
            if extra:
                raise ConfigError(f"unknown keys in [{key}]: {sorted(extra)}")
        self.attack_specs()
        return self

    def attack_specs(self) -> list[AttackSpec]:
        specs = []
        for label, table in self.attacks.items():
            if not isinstance(table, dict):
                raise ConfigError(f"[attacks.{label}] must be a table")
            table = dict(table)
            name = table.pop("name", label)
            if name not in ATTACKS:
                raise ConfigError(f"[attacks.{label}]: unknown attack {name!r}; choose from {sorted(ATTACKS)}")
            table.setdefault("seed", self.seed)
            cfg = AttackConfig.from_dict(table).validate()
            specs.append(AttackSpec(name, cfg, label))
        return specs

    def resolved(self) -> dict:
        """The full config with every attack table expanded to explicit values."""
        d = asdict(self)
        d["attacks"] = {s.title: {"name": s.name, **s.config.to_dict()} for s in self.attack_specs()}
        return d


def _resolve_paths(d: dict, base: Path) -> dict:
    def fix(p):
        if p is None:
            return None
        path = Path(p)
        return str(path if path.is_absolute() else (base / path))

    if "dataset" in d:
        d["dataset"] = fix(d["dataset"])
    if "out" in d:
        d["out"] = fix(d["out"])
    if "weights" in d:
        d["weights"] = {k: fix(v) for k, v in d["weights"].items()}
    if "train" in d and "train_root" in d["train"]:
        d["train"] = {**d["train"], "train_root": fix(d["train"]["train_root"])}
    return d


def read_config_file(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        d = json.loads(text) if path.suffix == ".json" else tomllib.loads(text)
    except (tomllib.TOMLDecodeError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    return _resolve_paths(d, path.resolve().parent)


def build_config(file_values: dict | None = None, overrides: dict | None = None) -> tuple[RunConfig, list[str]]:
    """Merge file values and CLI overrides over the defaults.

    Returns the validated config and the names of keys left at their defaults.
    Attack overrides (keys of AttackConfig) apply to every attack table; a
    seed override also replaces any per-attack seed.
    """
    file_values = dict(file_values or {})
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    known = {f.name for f in fields(RunConfig)}
    extra = set(file_values) - known
    if extra:
        raise ConfigError(f"unknown config keys: {sorted(extra)}")
    attack_keys = {f.name for f in fields(AttackConfig)}
    attack_over = {k: overrides.pop(k) for k in list(overrides) if k in attack_keys - known}
    if "seed" in overrides:
        attack_over["seed"] = overrides["seed"]
    bad = set(overrides) - known
    if bad:
        raise ConfigError(f"unknown override keys: {sorted(bad)}")
    values = {**file_values, **overrides}
    defaulted = sorted(known - set(values) - {"attacks"})  # attack tables are itemised below
    try:
        cfg = RunConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    if attack_over:
        cfg.attacks = {label: {**table, **attack_over} for label, table in cfg.attacks.items()}
    for label, table in cfg.attacks.items():
        for k in sorted(attack_keys - set(table) - {"seed"}):
            defaulted.append(f"attacks.{label}.{k}")
    return cfg.validate(), defaulted


def describe_defaults(cfg: RunConfig, defaulted: list[str], relevant: set[str] | None = None) -> list[str]:
    """``key = value`` lines for every defaulted parameter (optionally only
    those whose top-level key is in ``relevant``)."""
    resolved = cfg.resolved()
    lines = []
    for key in defaulted:
        if relevant is not None and key.split(".")[0] not in relevant:
            continue
        node = resolved
        for part in key.split("."):
            node = node[part]
        lines.append(f"{key} = {node!r}")
    return lines

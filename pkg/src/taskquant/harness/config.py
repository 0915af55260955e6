"""Flat ``key = value`` experiment configuration.

One setting per line; ``#`` starts a comment; list values are comma
separated. Every key names a field of ``DatasetSpec``, ``TrainConfig`` or
``ExperimentConfig``::

    # dataset
    n_train = 200
    n_val = 50
    H = 64
    W = 64
    m = 5
    master_seed = 7
    # training (shared by every scheme in the experiment)
    r = 4
    K = 64
    lr = 0.002
    epochs = 50
    finetune_epochs = 20
    precision = single
    # experiment
    schemes = VQVAE, GOSVAE_STAR
    rs = 4
    seeds = 1, 2, 3
    segmenter_epochs = 10
    out_dir = runs/default

``TrainConfig.scheme`` and ``TrainConfig.seed`` are set per run from
``schemes`` and ``seeds``; ``seed`` seeds the segmenter.
"""

from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from ..datagen import DatasetSpec
from ..trainer import SCHEME_TABLE, TrainConfig

DEFAULT_LR = 2e-3
DEFAULT_METRICS = ("miou", "accuracy", "mse", "perceptual", "payload_bytes")
PER_RUN = ("scheme", "seed")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(lr=DEFAULT_LR))
    schemes: tuple[str, ...] = ("VQVAE", "GOSVAE_STAR")
    rs: tuple[int, ...] = (4,)
    seeds: tuple[int, ...] = (0,)
    seed: int = 0
    segmenter_epochs: int = 10
    segmenter_lr: float = 3e-3
    metrics: tuple[str, ...] = DEFAULT_METRICS
    out_dir: str = "runs"

    def __post_init__(self):
        bad = [s for s in self.schemes if s not in SCHEME_TABLE]
        if bad:
            raise ConfigError(f"unknown schemes {bad}; known: {sorted(SCHEME_TABLE)}")
        for r in self.rs:
            if r < 1 or self.dataset.H % r or self.dataset.W % r:
                raise ConfigError(f"r={r} does not divide {self.dataset.H}x{self.dataset.W}")
        if not self.seeds:
            raise ConfigError("need at least one seed")
        if self.segmenter_epochs < 1:
            raise ConfigError("segmenter_epochs must be >= 1")

    def run_config(self, scheme: str, r: int, seed: int) -> TrainConfig:
        return replace(self.train, scheme=scheme, r=r, seed=seed)


def _owner_fields():
    owners = {}
    for owner, cls in (("dataset", DatasetSpec), ("train", TrainConfig), ("experiment", ExperimentConfig)):
        hints = typing.get_type_hints(cls)
        for f in fields(cls):
            if owner == "experiment" and f.name in ("dataset", "train"):
                continue
            if owner == "train" and f.name in PER_RUN:
                continue
            owners[f.name] = (owner, hints[f.name])
    return owners


FIELDS = _owner_fields()


def _convert(key: str, raw: str, hint):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    try:
        if origin is tuple:
            return tuple(_convert(key, part.strip(), args[0]) for part in raw.split(",") if part.strip())
        if origin in (typing.Union, types.UnionType):
            if raw.lower() in ("", "none"):
                return None
            return _convert(key, raw, next(a for a in args if a is not type(None)))
        if hint is bool:
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if hint is int:
            return int(raw, 0)
        if hint is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot read {raw!r} as {hint}") from None


def parse_config(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    updates: dict[str, dict] = {"dataset": {}, "train": {}, "experiment": {}}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in FIELDS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        owner, hint = FIELDS[key]
        if key in updates[owner]:
            raise ConfigError(f"line {lineno}: {key!r} set twice")
        updates[owner][key] = _convert(key, value, hint)
    return apply_overrides(base or ExperimentConfig(), updates)


def apply_overrides(cfg: ExperimentConfig, updates: dict[str, dict]) -> ExperimentConfig:
    try:
        dataset = replace(cfg.dataset, **updates.get("dataset", {}))
        train = replace(cfg.train, **updates.get("train", {}))
        return replace(cfg, dataset=dataset, train=train, **updates.get("experiment", {}))
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def load_config(path: str | Path, base: ExperimentConfig | None = None) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, base)


def _render(value) -> str:
    if isinstance(value, tuple):
        return ", ".join(_render(v) for v in value)
    if value is None:
        return "none"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dump_config(cfg: ExperimentConfig) -> str:
    """Inverse of ``parse_config``: every key, one per line, in a stable order."""
    sources = {"dataset": cfg.dataset, "train": cfg.train, "experiment": cfg}
    lines = []
    for key, (owner, _) in FIELDS.items():
        lines.append(f"{key} = {_render(getattr(sources[owner], key))}")
    return "\n".join(lines) + "\n"


def as_dict(cfg: ExperimentConfig) -> dict:
    return dataclasses.asdict(cfg)

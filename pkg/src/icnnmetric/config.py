"""INI-style run configuration with ``--section.key value`` overrides.

Sections mirror the dataclasses: ``[run]`` (TrainConfig scalars),
``[episode]``, ``[loss]``, ``[icnn]``, ``[triplet]``, ``[optimizer]``,
``[encoder]``, ``[dataset]`` and ``[output]``.  A bare ``--key`` override is
accepted when the key name is unique across sections or is a ``[run]`` key
(so ``--seed`` is the run seed, not the dataset seed).
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, fields, replace
from pathlib import Path

from .episodes import EpisodeSpec, LabeledDataset, load_csv, split_classes, synth_gaussian
from .icnn import IcnnConfig
from .prototriplet import TripletConfig
from .trainer import LOSS_TERMS, OptimizerConfig, TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetConfig:
    kind: str = "synth"
    path: str = ""
    seed: int = 0
    n_classes: int = 10
    per_class: int = 100
    dim: int = 32
    center_sep: float = 5.0
    noise_sigma: float = 1.0
    split: bool = False
    n_train: int = 0
    n_val: int = 0
    n_test: int = 0

    def load(self, base_dir: Path | None = None) -> LabeledDataset:
        if self.kind == "synth":
            ds = synth_gaussian(self.seed, self.n_classes, self.per_class, self.dim,
                                self.center_sep, self.noise_sigma)
        elif self.kind == "csv":
            path = Path(self.path)
            if base_dir is not None and not path.is_absolute():
                path = base_dir / path
            ds = load_csv(path)
        else:
            raise ConfigError(f"dataset.kind must be 'synth' or 'csv', got {self.kind!r}")
        if self.split:
            ds = split_classes(ds, self.seed, self.n_train, self.n_val, self.n_test)
        return ds


@dataclass(frozen=True)
class RunConfig:
    train: TrainConfig
    dataset: DatasetConfig
    output_dir: str = "runs/default"
    embedding_points: int = 1000


DEFAULTS: dict[str, dict[str, str]] = {
    "run": {
        "seed": "0",
        "epochs": "30",
        "tasks_per_epoch": "20",
        "val_tasks": "100",
        "eval_tasks": "1000",
        "jobs": "1",
    },
    "episode": {"ways": "5", "shots": "5", "queries": "15"},
    "loss": {
        "combo": "cross_entropy,proto_triplet,icnn",
        "cross_entropy_weight": "1.0",
        "proto_triplet_weight": "1.0",
        "icnn_weight": "1.0",
    },
    "icnn": {f.name: str(f.default) for f in fields(IcnnConfig)},
    "triplet": {f.name: str(f.default) for f in fields(TripletConfig)},
    "optimizer": {f.name: str(f.default) for f in fields(OptimizerConfig)},
    "encoder": {"hidden": "64,64", "embed_dim": "32"},
    "dataset": {f.name: str(f.default) for f in fields(DatasetConfig)},
    "output": {"dir": "runs/default", "embedding_points": "1000"},
}


def _parser() -> configparser.ConfigParser:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
    cp.read_dict(DEFAULTS)
    cp.origins = {}  # (section, key) -> "path:line" or "--flag", for diagnostics
    return cp


def _locate(text: str, path) -> dict[tuple[str, str], str]:
    origins, section = {}, None
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if stripped.startswith("[") and stripped.endswith("]"):
            section = stripped[1:-1].strip()
        elif section and stripped and stripped[0] not in "#;" and ("=" in stripped or ":" in stripped):
            key = stripped.split("=", 1)[0].split(":", 1)[0].strip().lower()
            origins[(section, key)] = f"{path}:{lineno}"
    return origins


def _where(cp, section: str, key: str) -> str:
    return getattr(cp, "origins", {}).get((section, key), "default")


def read_config(path=None, overrides: dict[str, str] | None = None) -> configparser.ConfigParser:
    cp = _parser()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        text = path.read_text()
        try:
            cp.read_string(text, source=str(path))
        except configparser.Error as exc:
            raise ConfigError(" ".join(str(exc).split())) from None
        cp.origins.update(_locate(text, path))
        for section in cp.sections():
            if section not in DEFAULTS:
                raise ConfigError(f"{path}: unknown section [{section}]")
            for key in cp[section]:
                if key not in DEFAULTS[section]:
                    raise ConfigError(f"{_where(cp, section, key)}: unknown key {section}.{key}")
    for key, value in (overrides or {}).items():
        section, name = _resolve(key)
        cp[section][name] = value
        cp.origins[(section, name)] = f"--{key}"
    return cp


def _resolve(key: str) -> tuple[str, str]:
    key = key.replace("-", "_")
    if "." in key:
        section, name = key.split(".", 1)
        if section in DEFAULTS and name in DEFAULTS[section]:
            return section, name
        raise ConfigError(f"unknown override --{key}")
    owners = [s for s, keys in DEFAULTS.items() if key in keys]
    if "run" in owners:  # bare --seed means the run seed
        owners = ["run"]
    if len(owners) != 1:
        what = "unknown" if not owners else f"ambiguous ({', '.join(owners)})"
        raise ConfigError(f"{what} override --{key}; use --section.{key}")
    return owners[0], key


def _get(cp, section: str, key: str, cast):
    raw = cp[section][key]
    try:
        if cast is bool:
            return cp.getboolean(section, key)
        if cast is tuple:
            return tuple(int(v) for v in raw.split(",") if v.strip())
        return cast(raw)
    except ValueError:
        raise ConfigError(
            f"{_where(cp, section, key)}: {section}.{key}: cannot parse {raw!r} as {cast.__name__}"
        ) from None


def _section(cp, section: str, cls):
    kwargs = {}
    for f in fields(cls):
        cast = {"int": int, "float": float, "str": str, "bool": bool}[str(f.type)]
        kwargs[f.name] = _get(cp, section, f.name, cast)
    try:
        return cls(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"[{section}] {exc}") from None


def build_run_config(cp: configparser.ConfigParser) -> RunConfig:
    combo = [c.strip() for c in cp["loss"]["combo"].split(",") if c.strip()]
    unknown = [c for c in combo if c not in LOSS_TERMS]
    if unknown or not combo:
        raise ConfigError(f"loss.combo: expected a subset of {LOSS_TERMS}, got {cp['loss']['combo']!r}")
    weights = {name: _get(cp, "loss", f"{name}_weight", float) for name in combo}
    try:
        episode = EpisodeSpec(
            _get(cp, "episode", "ways", int),
            _get(cp, "episode", "shots", int),
            _get(cp, "episode", "queries", int),
        )
        train = TrainConfig(
            episode=episode,
            epochs=_get(cp, "run", "epochs", int),
            tasks_per_epoch=_get(cp, "run", "tasks_per_epoch", int),
            val_tasks=_get(cp, "run", "val_tasks", int),
            eval_tasks=_get(cp, "run", "eval_tasks", int),
            seed=_get(cp, "run", "seed", int),
            loss_weights=weights,
            icnn=_section(cp, "icnn", IcnnConfig),
            triplet=_section(cp, "triplet", TripletConfig),
            optimizer=_section(cp, "optimizer", OptimizerConfig),
            hidden=_get(cp, "encoder", "hidden", tuple),
            embed_dim=_get(cp, "encoder", "embed_dim", int),
            jobs=_get(cp, "run", "jobs", int),
        )
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None
    return RunConfig(
        train=train,
        dataset=_section(cp, "dataset", DatasetConfig),
        output_dir=cp["output"]["dir"],
        embedding_points=_get(cp, "output", "embedding_points", int),
    )


def resolved_dict(cp: configparser.ConfigParser) -> dict[str, dict[str, str]]:
    """Every section and key with defaults materialised, for the run manifest."""
    return {s: dict(cp[s]) for s in DEFAULTS}


def with_seed(run: RunConfig, seed: int) -> RunConfig:
    return replace(run, train=replace(run.train, seed=seed))

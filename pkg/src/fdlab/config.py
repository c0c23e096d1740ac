"""TOML experiment files: sections map onto the run dataclasses.

```toml
[model]        # LmConfig fields; vocab_size defaults to the corpus vocabulary
[data]         # path, mode
[regularizer]  # kinds, kappa, alpha, beta, gamma
[optimizer]    # lr, lr_decay, lr_patience, weight_decay, clip, nonmono
[run]          # batch_size, bptt, epochs, seed, ...
[grid]         # runs, seed, baseline, dropout_scale, [grid.params]
```

Unknown sections or keys raise :class:`ConfigError`.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import tomli
import tomli_w

from .model import LmConfig
from .regularizers import RegularizerSpec
from .trainer import RunConfig

DATA_ENV = "FDLAB_DATA"
SECTIONS = ("model", "data", "regularizer", "optimizer", "run", "grid")
OPTIMIZER_KEYS = ("lr", "lr_decay", "lr_patience", "weight_decay", "clip", "nonmono")
DROPOUT_KEYS = ("dropout_embedding", "dropout_input", "dropout_hidden", "dropout_output", "dropout_weight")


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    path: str | None = None  # None falls back to $FDLAB_DATA
    mode: str = "word"

    def resolve(self) -> Path:
        p = self.path or os.environ.get(DATA_ENV)
        if not p:
            raise ConfigError(f"no data path: set [data] path or ${DATA_ENV}")
        return Path(p)


@dataclass
class GridSpec:
    runs: int = 1
    seed: int = 0
    baseline: float | None = None  # validation perplexity a run must beat
    dropout_scale: list[float] | None = None  # uniform multiplier on all five rates
    params: dict[str, Any] = field(default_factory=dict)  # "section.key" -> list | {uniform=[lo, hi]}


@dataclass
class ExperimentConfig:
    run: RunConfig
    data: DataConfig = field(default_factory=DataConfig)
    grid: GridSpec | None = None
    vocab_from_corpus: bool = True


def _check_keys(section: str, table: dict, allowed) -> None:
    unknown = sorted(set(table) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {unknown}")


def _names(cls) -> list[str]:
    return [f.name for f in fields(cls)]


def _run_keys() -> list[str]:
    return [n for n in _names(RunConfig) if n not in ("lm", "reg") and n not in OPTIMIZER_KEYS]


def from_dict(raw: dict, base_dir: Path | None = None) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a table")
    _check_keys("top level", raw, SECTIONS)
    model = dict(raw.get("model", {}))
    data = dict(raw.get("data", {}))
    reg = dict(raw.get("regularizer", {}))
    optim = dict(raw.get("optimizer", {}))
    run = dict(raw.get("run", {}))
    _check_keys("model", model, _names(LmConfig))
    _check_keys("data", data, _names(DataConfig))
    _check_keys("regularizer", reg, _names(RegularizerSpec))
    _check_keys("optimizer", optim, OPTIMIZER_KEYS)
    _check_keys("run", run, _run_keys())
    vocab_from_corpus = "vocab_size" not in model
    try:
        lm = LmConfig(**model)
        if "kinds" in reg:
            kinds = reg["kinds"]
            reg["kinds"] = (kinds,) if isinstance(kinds, str) else tuple(kinds)
        spec = RegularizerSpec(**reg)
        rc = RunConfig(lm=lm, reg=spec, **optim, **run)
        dc = DataConfig(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    if dc.path and base_dir is not None and not Path(dc.path).is_absolute():
        dc.path = str((base_dir / dc.path).resolve())
    grid = None
    if "grid" in raw:
        g = dict(raw["grid"])
        _check_keys("grid", g, _names(GridSpec))
        try:
            grid = GridSpec(**g)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        _validate_grid(grid)
    return ExperimentConfig(rc, dc, grid, vocab_from_corpus)


def load(path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = tomli.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except (OSError, UnicodeDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML in {path}: {exc}") from exc
    return from_dict(raw, path.parent)


def _drop_none(d: dict) -> dict:
    return {k: v for k, v in d.items() if v is not None}


def to_dict(exp: ExperimentConfig) -> dict:
    """Fully resolved config; ``from_dict(to_dict(x))`` rebuilds ``x``."""
    rc = exp.run
    run = {k: getattr(rc, k) for k in _run_keys()}
    out = {
        "model": dataclasses.asdict(rc.lm),
        "data": _drop_none(dataclasses.asdict(exp.data)),
        "regularizer": {**dataclasses.asdict(rc.reg), "kinds": list(rc.reg.kinds)},
        "optimizer": {k: getattr(rc, k) for k in OPTIMIZER_KEYS},
        "run": _drop_none(run),
    }
    if exp.grid is not None:
        out["grid"] = _drop_none(dataclasses.asdict(exp.grid))
    return out


def dumps(exp: ExperimentConfig) -> str:
    return tomli_w.dumps(to_dict(exp))


def with_vocab(exp: ExperimentConfig, vocab_size: int) -> ExperimentConfig:
    if not exp.vocab_from_corpus:
        return exp
    lm = dataclasses.replace(exp.run.lm, vocab_size=vocab_size)
    return dataclasses.replace(exp, run=dataclasses.replace(exp.run, lm=lm), vocab_from_corpus=False)


# --- grid ranges -------------------------------------------------------------


def _is_interval(v) -> bool:
    return isinstance(v, dict) and set(v) == {"uniform"} and len(v["uniform"]) == 2


def _validate_grid(grid: GridSpec) -> None:
    if grid.runs < 1:
        raise ConfigError("[grid] runs must be >= 1")
    if grid.dropout_scale is not None and (len(grid.dropout_scale) != 2 or grid.dropout_scale[0] > grid.dropout_scale[1]):
        raise ConfigError("[grid] dropout_scale must be [lo, hi] with lo <= hi")
    sections = {"model": _names(LmConfig), "regularizer": _names(RegularizerSpec), "optimizer": OPTIMIZER_KEYS,
                "run": _run_keys()}
    for key, v in grid.params.items():
        sec, _, name = key.partition(".")
        if sec not in sections or name not in sections[sec]:
            raise ConfigError(f"[grid.params] unknown parameter {key!r}; use section.key")
        if isinstance(v, list):
            if not v:
                raise ConfigError(f"[grid.params] {key}: empty choice set")
        elif _is_interval(v):
            lo, hi = v["uniform"]
            if not lo <= hi:
                raise ConfigError(f"[grid.params] {key}: interval needs lo <= hi")
        else:
            raise ConfigError(f"[grid.params] {key}: expected a list of choices or {{uniform = [lo, hi]}}")


def draw(grid: GridSpec, rng) -> dict[str, Any]:
    """One random assignment: finite sets uniformly, intervals uniformly."""
    out: dict[str, Any] = {}
    for key in sorted(grid.params):
        v = grid.params[key]
        if isinstance(v, list):
            out[key] = v[int(rng.integers(len(v)))]
        else:
            lo, hi = v["uniform"]
            out[key] = float(rng.uniform(lo, hi))
    if grid.dropout_scale is not None:
        out["dropout_scale"] = float(rng.uniform(*grid.dropout_scale))
    return out


def apply_draw(exp: ExperimentConfig, assignment: dict[str, Any], seed: int) -> ExperimentConfig:
    """A single-run config with ``assignment`` applied and the grid removed."""
    raw = to_dict(exp)
    raw.pop("grid", None)
    if exp.vocab_from_corpus:
        raw["model"].pop("vocab_size")
    scale = assignment.get("dropout_scale")
    for key, v in assignment.items():
        if key == "dropout_scale":
            continue
        sec, _, name = key.partition(".")
        raw[sec][name] = v
    if scale is not None:
        for k in DROPOUT_KEYS:
            raw["model"][k] = min(0.95, raw["model"][k] * scale)
    raw["run"]["seed"] = seed
    return from_dict(raw)

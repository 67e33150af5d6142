"""Dataset files, run configuration and result serialisation.

Datasets are CSV with a header naming ``x1..xp``, ``z``, ``r`` and ``y``
(``y`` empty when ``r = 0``).  Run configuration is YAML validated against
:data:`CONFIG_SCHEMA`; unknown keys are rejected.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np
import yaml
from jsonschema import Draft202012Validator

from .data import Dataset
from .errors import ConfigError, DataError, SampleSizeError
from .estimation import MomentBasisSpec, SolverConfig
from .estimators import PipelineConfig
from .inference import BootstrapConfig
from .simulation import ScenarioConfig, acceptance_grid, scenario_from_dict
from .terms import Design

_COVARIATE = re.compile(r"x(\d+)$")

# ---------------------------------------------------------------------------
# datasets


def _parse_float(text: str, line: int, column: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise DataError(f"non-numeric value {text!r} in column {column}", line) from None
    if not math.isfinite(v):
        raise DataError(f"non-finite value {text!r} in column {column}", line)
    return v


def read_dataset(path: str | Path) -> Dataset:
    """Read a dataset CSV, citing the offending line on any violation.

    Covariate columns are taken in ``x1, x2, ...`` order regardless of their
    position in the header.
    """
    path = Path(path)
    try:
        handle = path.open(newline="")
    except OSError as exc:
        raise DataError(f"cannot open {path}: {exc.strerror}") from None
    with handle:
        reader = csv.reader(handle)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SampleSizeError(f"{path} is empty") from None
        cols = {name: i for i, name in enumerate(header)}
        if len(cols) != len(header):
            raise DataError("duplicate column names", 1)
        for need in ("z", "r", "y"):
            if need not in cols:
                raise DataError(f"missing column {need!r}", 1)
        xcols = sorted((int(m.group(1)), name) for name in header if (m := _COVARIATE.match(name)))
        if [k for k, _ in xcols] != list(range(1, len(xcols) + 1)):
            raise DataError("covariate columns must be x1..xp without gaps", 1)
        extra = set(header) - {"z", "r", "y"} - {name for _, name in xcols}
        if extra:
            raise DataError(f"unknown columns {sorted(extra)}", 1)
        xi = [cols[name] for _, name in xcols]
        x, z, r, y = [], [], [], []
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(f"expected {len(header)} fields, found {len(row)}", line)
            rv = row[cols["r"]].strip()
            if rv not in ("0", "1"):
                raise DataError(f"r must be 0 or 1, found {rv!r}", line)
            yv = row[cols["y"]].strip()
            if rv == "0" and yv:
                raise DataError("y present although r = 0", line)
            if rv == "1" and not yv:
                raise DataError("y missing although r = 1", line)
            x.append([_parse_float(row[i].strip(), line, header[i]) for i in xi])
            z.append(_parse_float(row[cols["z"]].strip(), line, "z"))
            r.append(int(rv))
            y.append(_parse_float(yv, line, "y") if yv else np.nan)
    if not z:
        raise SampleSizeError(f"{path} has no data rows")
    xarr = np.array(x, dtype=float).reshape(len(z), len(xcols))
    return Dataset(xarr, z, r, y)


def write_dataset(data: Dataset, path: str | Path) -> None:
    """Write ``data`` so that :func:`read_dataset` returns identical values."""
    names = [f"x{j + 1}" for j in range(data.p)]
    with Path(path).open("w", newline="") as handle:
        w = csv.writer(handle, lineterminator="\n")
        w.writerow([*names, "z", "r", "y"])
        for i in range(data.n):
            yi = repr(float(data.y[i])) if data.r[i] == 1 else ""
            w.writerow([*(repr(float(v)) for v in data.x[i]), repr(float(data.z[i])), int(data.r[i]), yi])


# ---------------------------------------------------------------------------
# run configuration

_TERMS = {"type": "array", "items": {"type": "string"}}
_NUM = {"type": "number"}

_SCENARIO_PROPS: dict[str, Any] = {
    "name": {"type": "string"},
    "n": {"type": "integer", "minimum": 1},
    "p": {"type": "integer", "minimum": 1},
    "a": {"type": "array", "items": _NUM},
    "b": {"type": "array", "items": _NUM},
    "c": {"type": "array", "items": _NUM},
    "extra_covariate": {"type": "integer", "minimum": 1},
    "misspecify_outcome": {"type": "boolean"},
    "misspecify_propensity": {"type": "boolean"},
    "g": {"type": "string"},
    "q": {"type": "string"},
    "seed": {"type": "integer", "minimum": 0},
    **{k: _NUM for k in ("a0", "a_q", "a_extra", "sigma", "b_y", "b_q", "tau", "c0", "c_q", "c_y")},
}

CONFIG_SCHEMA: dict[str, Any] = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "seed": {"type": "integer", "minimum": 0},
        "model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "odds_ratio": _TERMS,
                "shadow": _TERMS,
                "propensity": _TERMS,
                "outcome": _TERMS,
                "g": {"type": "string"},
                "q": {"type": "string"},
                "pin_gamma": {"type": "boolean"},
            },
        },
        "solver": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "tol": {"type": "number", "exclusiveMinimum": 0},
                "max_iter": {"type": "integer", "minimum": 1},
                "max_halvings": {"type": "integer", "minimum": 0},
                "fd_step": {"type": "number", "exclusiveMinimum": 0},
                "max_condition": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "bootstrap": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"B": {"type": "integer", "minimum": 2}},
        },
        "output": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"dir": {"type": "string"}},
        },
        "study": {
            "type": "object",
            "additionalProperties": False,
            "required": ["replications"],
            "properties": {
                "replications": {"type": "integer", "minimum": 2},
                "bootstrap": {"type": "integer", "minimum": 0},
                "check_truth": {"type": "boolean"},
                "grid": {"type": "object", "additionalProperties": False, "properties": _SCENARIO_PROPS},
                "scenarios": {
                    "type": "array",
                    "items": {"type": "object", "additionalProperties": False, "properties": _SCENARIO_PROPS},
                },
            },
        },
    },
}

_VALIDATOR = Draft202012Validator(CONFIG_SCHEMA)


@dataclass(frozen=True)
class RunConfig:
    """Validated run configuration plus its provenance hash."""

    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    bootstrap_B: int = 200
    seed: int = 0
    out_dir: str = "out"
    study: dict | None = None
    raw: dict = field(default_factory=dict)
    config_hash: str = ""

    def bootstrap(self, seed: int | None = None) -> BootstrapConfig:
        return BootstrapConfig(B=self.bootstrap_B, seed=self.seed if seed is None else seed)

    def scenarios(self) -> list[ScenarioConfig]:
        """Scenarios of the ``study`` block: the four-cell grid and/or a list."""
        if not self.study:
            raise ConfigError("the configuration has no 'study' block")
        out: list[ScenarioConfig] = []
        if "grid" in self.study:
            g = dict(self.study["grid"])
            for k in ("a", "b", "c"):
                if k in g:
                    g[k] = tuple(g[k])
            n = g.pop("n", 2000)
            for k in ("name", "misspecify_outcome", "misspecify_propensity"):
                if k in g:
                    raise ConfigError(f"grid key {k!r} is set per cell and cannot be overridden")
            out.extend(acceptance_grid(n, **g))
        out.extend(scenario_from_dict(d) for d in self.study.get("scenarios", ()))
        if not out:
            raise ConfigError("the study block defines no scenarios")
        return out

    def with_seed(self, seed: int | None) -> "RunConfig":
        return self if seed is None else replace(self, seed=seed)


def config_hash(raw: dict) -> str:
    """SHA-256 of the canonical JSON form of the parsed configuration."""
    text = json.dumps(raw, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()


def parse_config(raw: dict | None) -> RunConfig:
    raw = {} if raw is None else raw
    if not isinstance(raw, dict):
        raise ConfigError("configuration must be a mapping")
    errors = sorted(_VALIDATOR.iter_errors(raw), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        where = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigError(f"config {where}: {e.message}")
    model = raw.get("model", {})
    try:
        basis = MomentBasisSpec(
            odds_ratio=tuple(model.get("odds_ratio", ("y",))),
            shadow=tuple(model["shadow"]) if "shadow" in model else None,
            propensity_design=Design.parse(model["propensity"]) if "propensity" in model else None,
            g=model.get("g"),
            q=model.get("q"),
        )
        pipeline = PipelineConfig(
            basis=basis,
            outcome_design=Design.parse(model["outcome"]) if "outcome" in model else None,
            solver=SolverConfig(**raw.get("solver", {})),
            pin_gamma=bool(model.get("pin_gamma", False)),
        )
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"config model: {exc}") from None
    study = raw.get("study")
    cfg = RunConfig(
        pipeline=pipeline,
        bootstrap_B=raw.get("bootstrap", {}).get("B", 200),
        seed=raw.get("seed", 0),
        out_dir=raw.get("output", {}).get("dir", "out"),
        study=study,
        raw=raw,
        config_hash=config_hash(raw),
    )
    if study is not None:
        cfg.scenarios()  # validate scenario parameters up front
    return cfg


def load_config(path: str | Path | None) -> RunConfig:
    """Load and validate a YAML run configuration; ``None`` gives the defaults."""
    if path is None:
        return parse_config({})
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from None
    return parse_config(raw)


# ---------------------------------------------------------------------------
# output documents


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(u) for k, u in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(u) for u in v]
    if isinstance(v, np.ndarray):
        return _jsonable(v.tolist())
    if isinstance(v, (np.bool_, bool)):
        return bool(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return v if math.isfinite(v) else None
    return v


def dump_json(doc: dict, path: str | Path) -> None:
    """Deterministic JSON (sorted keys, non-finite numbers as null)."""
    Path(path).write_text(json.dumps(_jsonable(doc), sort_keys=True, indent=2) + "\n")

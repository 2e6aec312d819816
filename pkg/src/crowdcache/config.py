"""
Run configuration and device-position ingestion.

A config is one JSON object. Every section is optional except ``mode``;
omitted values take the defaults in ``DEFAULTS`` and the fully resolved
document is what :meth:`RunConfig.to_dict` returns. Unknown keys are
rejected at every level.
"""

from __future__ import annotations

import copy
import csv
import json
import math
import os
from dataclasses import dataclass
from typing import Any

import numpy as np

from .errors import ConfigError, IngestionError, InvalidInputError
from .experiments import SENSITIVITY_FACTORS, SWEEP_ALGORITHMS, BaseCaseSpec, GraphConfig
from .game import GameParams
from .graphs import DevicePositions
from .solvers import INIT_MODES, STOP_MODES, SolverConfig

MODES = ("solve", "compare", "scale", "sweep", "diagnose")
SOLVE_ALGORITHMS = ("centralized", "dcrowdcache", "dcrowdcache-m")
EARTH_RADIUS_M = 6_371_008.8

DEFAULTS: dict[str, Any] = {
    "mode": None,
    "description": "",
    "params": None,
    "base_case": {"n_meds": 512, "p_bar": 1.0, "gamma": None},
    "algorithm": "dcrowdcache-m",
    "solver": {
        "alpha": 20.0,
        "beta": 0.5,
        "tol": 1e-6,
        "max_iters": 50_000,
        "init": "zeros",
        "stop": "oracle",
        "clamp_momentum": False,
    },
    "graph": {
        "radius_range": [150.0, 200.0],
        "box_m": 200.0,
        "max_step": 10.0,
        "window_b": 1,
        "export_snapshots": 0,
    },
    "seeds": {"params": 0, "graph": 0, "init": 0},
    "positions": None,
    "out": "out",
    "compare": {"betas": [0.5, 0.8]},
    "scale": {"sizes": [256, 512, 1024, 2048, 4096], "reps": 20, "beta": 0.5},
    "sweep": {
        "factors": list(SENSITIVITY_FACTORS),
        "levels": [0.5, 0.75, 1.0, 1.25, 1.5],
        "reps": 20,
        "n_meds": 128,
        "resample": False,
        "algorithms": list(SWEEP_ALGORITHMS),
    },
    "diagnose": {"snapshots": 20, "c_max": None},
}


def _merge(defaults: dict, given: dict, path: str) -> dict:
    out = copy.deepcopy(defaults)
    for key, value in given.items():
        where = f"{path}{key}"
        if key not in defaults:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(defaults[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where!r} must be an object")
            out[key] = _merge(defaults[key], value, where + ".")
        else:
            out[key] = value
    return out


def _number(doc: dict, key: str, path: str, *, positive=False, nonneg=False, integer=False, optional=False):
    value = doc[key]
    name = f"{path}{key}"
    if value is None and optional:
        return None
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"config key {name!r} must be a number, got {value!r}")
    if integer and value != int(value):
        raise ConfigError(f"config key {name!r} must be an integer, got {value!r}")
    if not math.isfinite(value):
        raise ConfigError(f"config key {name!r} must be finite")
    if positive and value <= 0:
        raise ConfigError(f"config key {name!r} must be > 0, got {value!r}")
    if nonneg and value < 0:
        raise ConfigError(f"config key {name!r} must be >= 0, got {value!r}")
    return int(value) if integer else float(value)


def _choice(value, options, name):
    if value not in options:
        raise ConfigError(f"config key {name!r} must be one of {list(options)}, got {value!r}")
    return value


def _list(doc, key, path, item_check):
    value = doc[key]
    name = f"{path}{key}"
    if not isinstance(value, list) or not value:
        raise ConfigError(f"config key {name!r} must be a nonempty list")
    return [item_check({"v": v}, "v", f"{name}[{i}].") for i, v in enumerate(value)]


@dataclass(frozen=True)
class RunConfig:
    """Validated run configuration; ``raw`` is the resolved JSON document."""

    raw: dict

    @property
    def mode(self) -> str:
        return self.raw["mode"]

    @property
    def out(self) -> str:
        return self.raw["out"]

    def seed(self, name: str) -> int:
        return int(self.raw["seeds"][name])

    @property
    def inline_params(self) -> GameParams | None:
        p = self.raw["params"]
        return None if p is None else GameParams.from_dict(p)

    @property
    def base_case(self) -> BaseCaseSpec:
        b = self.raw["base_case"]
        return BaseCaseSpec(n_meds=b["n_meds"], p_bar=b["p_bar"], gamma=b["gamma"], seed=self.seed("params"))

    @property
    def n_meds(self) -> int:
        p = self.raw["params"]
        return int(p["n_meds"]) if p is not None else int(self.raw["base_case"]["n_meds"])

    @property
    def solver(self) -> SolverConfig:
        s = self.raw["solver"]
        return SolverConfig(alpha=s["alpha"], beta=s["beta"], tol=s["tol"], max_iters=s["max_iters"],
                            init=s["init"], init_seed=self.seed("init"), stop=s["stop"],
                            clamp_momentum=s["clamp_momentum"])

    @property
    def graph(self) -> GraphConfig:
        g = self.raw["graph"]
        return GraphConfig(radius_range=tuple(g["radius_range"]), box_m=g["box_m"], max_step=g["max_step"],
                           window_b=g["window_b"])

    def section(self, name: str) -> dict:
        return self.raw[name]

    def to_dict(self) -> dict:
        return copy.deepcopy(self.raw)

    def to_json(self) -> str:
        return json.dumps(self.raw, indent=2, sort_keys=True) + "\n"

    def with_overrides(self, out: str | None = None, seed: int | None = None) -> "RunConfig":
        """Apply CLI overrides; ``seed`` replaces all three seeds."""
        raw = self.to_dict()
        if out is not None:
            raw["out"] = out
        if seed is not None:
            raw["seeds"] = {"params": seed, "graph": seed, "init": seed}
        return RunConfig(raw)


def _validate(doc: dict) -> None:
    if doc["mode"] is None:
        raise ConfigError("missing required config key 'mode'")
    _choice(doc["mode"], MODES, "mode")
    if not isinstance(doc["description"], str):
        raise ConfigError("config key 'description' must be a string")
    _choice(doc["algorithm"], SOLVE_ALGORITHMS, "algorithm")

    if doc["params"] is not None:
        if not isinstance(doc["params"], dict):
            raise ConfigError("config key 'params' must be an object")
        try:
            GameParams.from_dict(doc["params"])
        except (InvalidInputError, TypeError) as exc:
            raise ConfigError(f"config key 'params': {exc}") from exc

    b = doc["base_case"]
    _number(b, "n_meds", "base_case.", positive=True, integer=True)
    _number(b, "p_bar", "base_case.", nonneg=True)
    gamma = _number(b, "gamma", "base_case.", optional=True)
    if gamma is not None and gamma <= 0:
        raise ConfigError(
            f"config key 'base_case.gamma' must be > 0: strong monotonicity needs mu = 2 min Q + 2 gamma > 0, got {gamma!r}"
        )

    s = doc["solver"]
    _number(s, "alpha", "solver.", positive=True)
    beta = _number(s, "beta", "solver.", nonneg=True)
    if beta >= 1:
        raise ConfigError(f"config key 'solver.beta' must lie in [0, 1), got {beta!r}")
    _number(s, "tol", "solver.", positive=True)
    _number(s, "max_iters", "solver.", positive=True, integer=True)
    _choice(s["init"], INIT_MODES, "solver.init")
    _choice(s["stop"], STOP_MODES, "solver.stop")
    if not isinstance(s["clamp_momentum"], bool):
        raise ConfigError("config key 'solver.clamp_momentum' must be true or false")

    g = doc["graph"]
    rr = g["radius_range"]
    if (not isinstance(rr, list) or len(rr) != 2 or any(isinstance(v, bool) or not isinstance(v, (int, float)) for v in rr)
            or not 0 < rr[0] <= rr[1]):
        raise ConfigError("config key 'graph.radius_range' must be [lo, hi] with 0 < lo <= hi")
    _number(g, "box_m", "graph.", positive=True)
    _number(g, "max_step", "graph.", nonneg=True)
    _number(g, "window_b", "graph.", positive=True, integer=True)
    _number(g, "export_snapshots", "graph.", nonneg=True, integer=True)

    for name in ("params", "graph", "init"):
        _number(doc["seeds"], name, "seeds.", nonneg=True, integer=True)

    pos = doc["positions"]
    if pos is not None:
        if not isinstance(pos, str):
            raise ConfigError("config key 'positions' must be a path string")
        if not os.path.isfile(pos):
            raise ConfigError(f"config key 'positions': file {pos!r} does not exist")
    if not isinstance(doc["out"], str) or not doc["out"]:
        raise ConfigError("config key 'out' must be a nonempty path string")

    _list(doc["compare"], "betas", "compare.", lambda d, k, p: _beta_item(d, k, p))
    sc = doc["scale"]
    _list(sc, "sizes", "scale.", lambda d, k, p: _number(d, k, p, positive=True, integer=True))
    _number(sc, "reps", "scale.", positive=True, integer=True)
    _beta_item(sc, "beta", "scale.")

    sw = doc["sweep"]
    for i, f in enumerate(_list(sw, "factors", "sweep.", lambda d, k, p: d[k])):
        _choice(f, SENSITIVITY_FACTORS, f"sweep.factors[{i}]")
    _list(sw, "levels", "sweep.", lambda d, k, p: _number(d, k, p, positive=True))
    _number(sw, "reps", "sweep.", positive=True, integer=True)
    _number(sw, "n_meds", "sweep.", positive=True, integer=True)
    if not isinstance(sw["resample"], bool):
        raise ConfigError("config key 'sweep.resample' must be true or false")
    for i, a in enumerate(_list(sw, "algorithms", "sweep.", lambda d, k, p: d[k])):
        _choice(a, SWEEP_ALGORITHMS, f"sweep.algorithms[{i}]")

    d = doc["diagnose"]
    _number(d, "snapshots", "diagnose.", positive=True, integer=True)
    c = _number(d, "c_max", "diagnose.", optional=True)
    if c is not None and not 0 < c < 1:
        raise ConfigError(f"config key 'diagnose.c_max' must lie in (0, 1), got {c!r}")


def _beta_item(doc, key, path):
    value = _number(doc, key, path, nonneg=True)
    if value >= 1:
        raise ConfigError(f"config key {path + key!r} must lie in [0, 1), got {value!r}")
    return value


def parse_config(text: str) -> RunConfig:
    """Parse and validate a JSON config document, filling in defaults."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed JSON config: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    resolved = _merge(DEFAULTS, doc, "")
    _validate(resolved)
    return RunConfig(resolved)


def load_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path!r}: {exc}") from exc
    return parse_config(text)


# --------------------------------------------------------------------------
# positions

_HEADERS = {("id", "lat", "lon"): "geo", ("id", "x_m", "y_m"): "planar"}


def project_equirectangular(lat_deg, lon_deg) -> np.ndarray:
    """Planar metres about the centroid (equirectangular approximation)."""
    lat = np.radians(np.asarray(lat_deg, dtype=float))
    lon = np.radians(np.asarray(lon_deg, dtype=float))
    lat0, lon0 = lat.mean(), lon.mean()
    x = EARTH_RADIUS_M * (lon - lon0) * math.cos(lat0)
    y = EARTH_RADIUS_M * (lat - lat0)
    return np.column_stack([x, y])


def ingest_positions(path, radius_range=(150.0, 200.0), rng: np.random.Generator | None = None,
                     n_expected: int | None = None) -> DevicePositions:
    """
    Read device positions from ``id,lat,lon`` or ``id,x_m,y_m`` CSV.

    Geographic coordinates are projected to metres; planar ones are used
    as given. Radii are drawn from ``radius_range`` with ``rng``.
    """
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise IngestionError(f"{path}: cannot open positions file: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise IngestionError(f"{path}: empty positions file")
        kind = _HEADERS.get(tuple(h.strip() for h in header))
        if kind is None:
            raise IngestionError(f"{path}:1: header must be 'id,lat,lon' or 'id,x_m,y_m', got {','.join(header)!r}")
        seen: dict[str, int] = {}
        a, b = [], []
        for line, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 3:
                raise IngestionError(f"{path}:{line}: expected 3 fields, got {len(row)}")
            ident = row[0].strip()
            if ident in seen:
                raise IngestionError(f"{path}:{line}: duplicate id {ident!r} (first seen on line {seen[ident]})")
            seen[ident] = line
            try:
                u, v = float(row[1]), float(row[2])
            except ValueError:
                raise IngestionError(f"{path}:{line}: non-numeric coordinate in {row!r}") from None
            if not (math.isfinite(u) and math.isfinite(v)):
                raise IngestionError(f"{path}:{line}: non-finite coordinate in {row!r}")
            a.append(u)
            b.append(v)
    if not a:
        raise IngestionError(f"{path}: no positions found")
    if n_expected is not None and len(a) != n_expected:
        raise IngestionError(f"{path}: {len(a)} positions but n_meds={n_expected}")
    coords = project_equirectangular(a, b) if kind == "geo" else np.column_stack([a, b])
    if rng is None:
        rng = np.random.Generator(np.random.PCG64(0))
    return DevicePositions.with_random_radii(coords, rng, tuple(radius_range))

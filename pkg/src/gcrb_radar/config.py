"""TOML scenario/experiment configuration.

Physical quantities carry their unit in the key name (``*_m``, ``*_km``,
``*_mps``, ``*_hz``, ``*_s``, ``*_db``).  Kilometer keys are converted to
meters at parse time, so the normalized document only uses SI keys.
"""

from __future__ import annotations

import hashlib
from decimal import Decimal
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import tomli
import tomli_w

from .estimator import SearchSpec
from .geometry import StationLayout, TargetState
from .montecarlo import SERIES_VARS, ExperimentPlan
from .signal_model import NoiseCorrelation, ReflectionCorrelation, Scenario
from .waveform import GmskParams


class ConfigError(ValueError):
    pass


REQUIRED = object()

# section -> key -> (kind, default)
SCHEMA = {
    "stations": {
        "layout": ("str", "ring"),
        "num_tx": ("int", None),
        "num_rx": ("int", None),
        "reference_m": ("point", [15000.0, 10000.0]),
        "radius_m": ("float", 7000.0),
        "tx_positions_m": ("points", None),
        "rx_positions_m": ("points", None),
    },
    "target": {
        "position_m": ("point", REQUIRED),
        "velocity_mps": ("point", REQUIRED),
    },
    "waveform": {
        "bit_duration_s": ("float", 577e-6),
        "bt_product": ("float", 0.3),
        "num_bits": ("int", 16),
        "freq_offset_hz": ("float", 300.0),
        "carrier_hz": ("float", 900e6),
        "oversampling": ("int", 4),
        "tx_energy": ("floats", None),
        "p0": ("float", 1.0),
    },
    "reflection": {
        "decay_per_rad": ("float", float("inf")),
        "variance": ("floats", [1.0]),
    },
    "noise": {
        "decay_per_m": ("float", float("inf")),
    },
    "scnr": {
        "scnr_db": ("float", 20.0),
        "sweep_db": ("floats", [0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0]),
    },
    "experiment": {
        "trials": ("int", 200),
        "bit_draws": ("int", 50),
        "series_var": ("str", "none"),
        "series_values": ("floats", []),
        "mismatch_variance": ("float", 0.1),
        "mismatch_mc_samples": ("int", 5000),
        "validation_scenarios": ("int", 20),
    },
    "search": {
        "x_range_m": ("point", None),
        "y_range_m": ("point", None),
        "vx_range_mps": ("point", [-60.0, 60.0]),
        "vy_range_mps": ("point", [-60.0, 60.0]),
        "grid": ("ints", [21, 21, 11, 11]),
        "max_iter": ("int", 500),
        "simplex_scale": ("float", 1.0),
        "ll_rtol": ("float", 1e-6),
        "x_tol": ("float", 1e-3),
        "restarts": ("int", 5),
        "starts": ("int", 3),
    },
    "seeds": {
        "seed": ("int", 0),
    },
}

KM_ALIASES = {
    ("stations", "reference_km"): "reference_m",
    ("stations", "radius_km"): "radius_m",
    ("stations", "tx_positions_km"): "tx_positions_m",
    ("stations", "rx_positions_km"): "rx_positions_m",
    ("target", "position_km"): "position_m",
    ("search", "x_range_km"): "x_range_m",
    ("search", "y_range_km"): "y_range_m",
}

SEARCH_HALF_WIDTH_M = 500.0

_HEADER = re.compile(r"^\s*\[\s*([A-Za-z0-9_.\-]+)\s*\]")
_KEY = re.compile(r"^\s*([A-Za-z0-9_\-]+)\s*=")


def _key_lines(text: str) -> dict:
    """(section, key) -> 1-based line number; (section, None) for headers."""
    out, section = {}, None
    for lineno, line in enumerate(text.splitlines(), start=1):
        m = _HEADER.match(line)
        if m:
            section = m.group(1)
            out.setdefault((section, None), lineno)
            continue
        m = _KEY.match(line)
        if m:
            out.setdefault((section, m.group(1)), lineno)
    return out


def _where(lines: dict, section, key=None) -> str:
    n = lines.get((section, key))
    return f" (line {n})" if n else ""


def _coerce(kind: str, value, name: str):
    def num(v):
        if isinstance(v, bool) or not isinstance(v, (int, float, str)):
            raise ConfigError(f"{name}: expected a number, got {v!r}")
        try:
            return float(v)
        except ValueError:
            raise ConfigError(f"{name}: expected a number, got {v!r}") from None

    def integer(v):
        if isinstance(v, bool) or not isinstance(v, int):
            raise ConfigError(f"{name}: expected an integer, got {v!r}")
        return int(v)

    if kind == "str":
        if not isinstance(value, str):
            raise ConfigError(f"{name}: expected a string, got {value!r}")
        return value
    if kind == "int":
        return integer(value)
    if kind == "float":
        return num(value)
    if kind == "floats":
        if not isinstance(value, list):
            value = [value]
        return [num(v) for v in value]
    if kind == "ints":
        if not isinstance(value, list):
            raise ConfigError(f"{name}: expected a list of integers")
        return [integer(v) for v in value]
    if kind == "point":
        if not isinstance(value, list) or len(value) != 2:
            raise ConfigError(f"{name}: expected a two-element list")
        return [num(v) for v in value]
    if kind == "points":
        if not isinstance(value, list) or not value:
            raise ConfigError(f"{name}: expected a non-empty list of [x, y] pairs")
        return [_coerce("point", p, name) for p in value]
    raise AssertionError(kind)


def _scale(kind, value, factor):
    if factor == 1.0:
        return value

    def one(v):
        # decimal scaling so that 10.1275 km becomes exactly 10127.5 m
        return float(Decimal(repr(v)) * Decimal(repr(factor))) if np.isfinite(v) else v

    if kind == "points":
        return [[one(v) for v in p] for p in value]
    if kind == "point":
        return [one(v) for v in value]
    return one(value)


@dataclass(frozen=True)
class ConfigDocument:
    """Normalized configuration: every section present, defaults filled, SI keys only."""

    data: dict

    # construction -------------------------------------------------------
    @classmethod
    def parse(cls, text: str) -> "ConfigDocument":
        try:
            raw = tomli.loads(text)
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"invalid TOML: {exc}") from None
        lines = _key_lines(text)
        data = {}
        for section, value in raw.items():
            if section not in SCHEMA:
                raise ConfigError(f"unknown section [{section}]{_where(lines, section)}")
            if not isinstance(value, dict):
                raise ConfigError(f"'{section}' must be a table{_where(lines, None, section)}")
        for section, keys in SCHEMA.items():
            given = dict(raw.get(section, {}))
            out = {}
            for key, value in given.items():
                target_key, factor = key, 1.0
                if (section, key) in KM_ALIASES:
                    target_key, factor = KM_ALIASES[(section, key)], 1e3
                if target_key not in keys:
                    raise ConfigError(f"unknown key '{section}.{key}'{_where(lines, section, key)}")
                if target_key in out:
                    raise ConfigError(f"'{section}.{target_key}' given twice (in meters and kilometers){_where(lines, section, key)}")
                kind = keys[target_key][0]
                try:
                    out[target_key] = _scale(kind, _coerce(kind, value, f"{section}.{key}"), factor)
                except ConfigError as exc:
                    raise ConfigError(f"{exc}{_where(lines, section, key)}") from None
            for key, (kind, default) in keys.items():
                if key not in out:
                    if default is REQUIRED:
                        raise ConfigError(f"missing required key '{section}.{key}'")
                    if default is not None:
                        out[key] = default
            data[section] = out
        doc = cls(data)
        doc._validate()
        return doc

    @classmethod
    def load(cls, path) -> "ConfigDocument":
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.parse(text)

    def to_toml(self) -> str:
        return tomli_w.dumps(self.data)

    def sha256(self) -> str:
        return hashlib.sha256(self.to_toml().encode()).hexdigest()

    def with_seed(self, seed: int) -> "ConfigDocument":
        data = {k: dict(v) for k, v in self.data.items()}
        data["seeds"]["seed"] = int(seed)
        return ConfigDocument(data)

    # validation ---------------------------------------------------------
    def _validate(self):
        st = self.data["stations"]
        if st["layout"] == "ring":
            for key in ("num_tx", "num_rx"):
                if key not in st:
                    raise ConfigError(f"missing required key 'stations.{key}' for the ring layout")
                if st[key] < 1:
                    raise ConfigError(f"stations.{key} must be >= 1")
        elif st["layout"] == "explicit":
            for key in ("tx_positions_m", "rx_positions_m"):
                if key not in st:
                    raise ConfigError(f"missing required key 'stations.{key}' for the explicit layout")
        else:
            raise ConfigError("stations.layout must be 'ring' or 'explicit'")
        exp = self.data["experiment"]
        if exp["series_var"] not in SERIES_VARS:
            raise ConfigError(f"experiment.series_var must be one of {', '.join(SERIES_VARS)}")
        if len(self.data["search"]["grid"]) != 4:
            raise ConfigError("search.grid needs four counts (x, y, vx, vy)")
        try:
            self.scenario()
            self.search()
        except (ValueError, TypeError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from None

    # domain objects -----------------------------------------------------
    @property
    def seed(self) -> int:
        return int(self.data["seeds"]["seed"])

    def layout(self) -> StationLayout:
        st = self.data["stations"]
        if st["layout"] == "ring":
            return StationLayout.ring(st["num_tx"], st["num_rx"], tuple(st["reference_m"]), st["radius_m"])
        return StationLayout(np.array(st["tx_positions_m"]), np.array(st["rx_positions_m"]))

    def scenario(self, scnr_db: float | None = None) -> Scenario:
        layout = self.layout()
        tg = self.data["target"]
        wf = self.data["waveform"]
        gmsk = GmskParams(
            bit_duration=wf["bit_duration_s"],
            bt_product=wf["bt_product"],
            num_bits=wf["num_bits"],
            freq_offset=wf["freq_offset_hz"],
            carrier_hz=wf["carrier_hz"],
            oversampling=wf["oversampling"],
        )
        energies = wf.get("tx_energy")
        if energies is not None and len(energies) not in (1, layout.num_tx):
            raise ConfigError(f"waveform.tx_energy needs 1 or {layout.num_tx} values")
        var = self.data["reflection"]["variance"]
        nm = layout.num_tx * layout.num_rx
        if len(var) not in (1, nm):
            raise ConfigError(f"reflection.variance needs 1 or {nm} values")
        refl = ReflectionCorrelation(self.data["reflection"]["decay_per_rad"], tuple(var) if len(var) > 1 else var[0])
        return Scenario(
            layout,
            TargetState(*tg["position_m"], *tg["velocity_mps"]),
            gmsk,
            energies=None if energies is None else tuple(np.broadcast_to(energies, (layout.num_tx,))),
            p0=wf["p0"],
            reflection=refl,
            noise=NoiseCorrelation(self.data["noise"]["decay_per_m"]),
            scnr_db=self.data["scnr"]["scnr_db"] if scnr_db is None else scnr_db,
            seed=self.seed,
        )

    def search(self) -> SearchSpec:
        s = self.data["search"]
        ref = self.data["stations"]["reference_m"]
        x = s.get("x_range_m", [ref[0] - SEARCH_HALF_WIDTH_M, ref[0] + SEARCH_HALF_WIDTH_M])
        y = s.get("y_range_m", [ref[1] - SEARCH_HALF_WIDTH_M, ref[1] + SEARCH_HALF_WIDTH_M])
        return SearchSpec(
            tuple(x), tuple(y), tuple(s["vx_range_mps"]), tuple(s["vy_range_mps"]),
            grid=tuple(s["grid"]), max_iter=s["max_iter"], simplex_scale=s["simplex_scale"],
            ll_rtol=s["ll_rtol"], x_tol=s["x_tol"], restarts=s["restarts"], starts=s["starts"],
        )

    def plan(self, workers: int = 1, mismatch: bool = False) -> ExperimentPlan:
        exp = self.data["experiment"]
        return ExperimentPlan(
            scenario=self.scenario(),
            search=self.search(),
            scnr_db=tuple(self.data["scnr"]["sweep_db"]),
            series_var=exp["series_var"],
            series_values=tuple(exp["series_values"]),
            trials=exp["trials"],
            bit_draws=exp["bit_draws"],
            seed=self.seed,
            mismatch_variance=exp["mismatch_variance"] if mismatch else 0.0,
            mismatch_mc_samples=exp["mismatch_mc_samples"],
            workers=workers,
        )

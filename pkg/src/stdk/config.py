"""Run configuration: a TOML file with per-command sections.

Everything except ``[paths]`` feeds the provenance hash, so artifacts built
in different output directories from the same settings stay comparable.
"""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .basis import BasisConfig
from .errors import MissingInputError, ParseError, ProvenanceError
from .forecast import ForecastConfig
from .net import StdkConfig

DEFAULTS = {
    "seed": 0,
    "paths": {"stations": "", "grid": "", "water_mask": "", "out": "out"},
    "ingest": {"window": 10, "holdout_fraction": 0.2},
    "basis": {
        "spatial_sides": [9, 17, 35, 73],
        "temporal_counts": [50, 350, 1000],
        "support_factor": 2.5,
        "bandwidth_factor": 2.0,
    },
    "interp": {
        "hidden_layout": [100, 100, 100, 100, 100, 50, 50, 50, 50],
        "quantiles": [0.025, 0.5, 0.975],
        "epochs": 100,
        "batch_size": 256,
        "lr": 0.001,
    },
    "forecast": {
        "model": "convlstm",
        "basis_level": 0,
        "hidden_channels": 16,
        "kernel": 3,
        "epochs": 200,
        "batch_size": 16,
        "lr": 0.01,
    },
}


def _merge(base: dict, override: dict, where="") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in base:
            raise ParseError(f"unknown config key {where}{key}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ParseError(f"config key {where}{key} must be a section")
            out[key] = _merge(base[key], value, f"{where}{key}.")
        else:
            out[key] = value
    return out


def config_hash(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def verify_hash(data: bytes, expected: str) -> None:
    actual = config_hash(data)
    if actual != expected:
        raise ProvenanceError(f"config hash mismatch: artifact built with {expected[:12]}, current {actual[:12]}")


def _toml_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, str):
        return json.dumps(value)
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    raise TypeError(f"cannot write {value!r} as TOML")


def dump_toml(data: dict) -> str:
    lines = [f"{k} = {_toml_value(v)}" for k, v in data.items() if not isinstance(v, dict)]
    for section, body in data.items():
        if isinstance(body, dict):
            lines.append(f"\n[{section}]")
            lines += [f"{k} = {_toml_value(v)}" for k, v in body.items()]
    return "\n".join(lines) + "\n"


@dataclass
class RunConfig:
    data: dict
    base_dir: Path

    @classmethod
    def load(cls, path=None, seed=None, out=None) -> "RunConfig":
        raw, base_dir = {}, Path.cwd()
        if path is not None:
            path = Path(path)
            if not path.exists():
                raise MissingInputError(f"config file not found: {path}")
            try:
                raw = tomllib.loads(path.read_text(encoding="utf-8"))
            except tomllib.TOMLDecodeError as exc:
                raise ParseError(f"{path}: {exc}") from None
            base_dir = path.parent
        data = _merge(DEFAULTS, raw)
        if seed is not None:
            data["seed"] = int(seed)
        if out is not None:
            data["paths"]["out"] = str(Path(out).resolve())
        return cls(data, base_dir)

    @property
    def seed(self) -> int:
        return int(self.data["seed"])

    def path(self, key: str) -> Path | None:
        value = self.data["paths"][key]
        if not value:
            return None
        p = Path(value)
        return p if p.is_absolute() else self.base_dir / p

    def require(self, key: str) -> Path:
        p = self.path(key)
        if p is None:
            raise MissingInputError(f"config paths.{key} is not set")
        if not p.exists():
            raise MissingInputError(f"input file not found: {p}")
        return p

    @property
    def out_dir(self) -> Path:
        return self.path("out") or Path("out")

    def canonical_bytes(self) -> bytes:
        body = {k: v for k, v in self.data.items() if k != "paths"}
        return json.dumps(body, sort_keys=True, separators=(",", ":")).encode()

    @property
    def hash(self) -> str:
        return config_hash(self.canonical_bytes())

    def basis_config(self) -> BasisConfig:
        b = self.data["basis"]
        return BasisConfig(b["spatial_sides"], b["temporal_counts"], float(b["support_factor"]), float(b["bandwidth_factor"]))

    def stdk_config(self) -> StdkConfig:
        i = self.data["interp"]
        return StdkConfig(i["hidden_layout"], i["quantiles"], int(i["epochs"]), int(i["batch_size"]), float(i["lr"]))

    def forecast_config(self) -> ForecastConfig:
        f = self.data["forecast"]
        return ForecastConfig(
            int(f["hidden_channels"]),
            int(f["kernel"]),
            tuple(self.data["interp"]["quantiles"]),
            int(f["epochs"]),
            int(f["batch_size"]),
            float(f["lr"]),
        )

    def to_toml(self) -> str:
        return dump_toml(self.data)

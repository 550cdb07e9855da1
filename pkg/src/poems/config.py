"""Flat ``section.key=value`` run configuration.

A config file holds one assignment per line; ``#`` starts a comment. Command
line overrides use the same syntax and win over the file. The resolved
configuration is written back in the same format so a run can be replayed
from its snapshot.
"""
from __future__ import annotations

from dataclasses import fields
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple

from .errors import ContractError, IngestionError
from .evaluation import DEFAULT_SEEDS
from .objective import TrainConfig

# non-training keys with their defaults
DEFAULTS: Dict[str, str] = {
    "data.omics": "",          # comma separated omic names
    "data.paths": "",          # comma separated CSV paths, same order
    "data.labels": "",
    "data.split_seed": "21",
    "eval.seeds": ",".join(str(s) for s in DEFAULT_SEEDS),
    "eval.knn_k": "5",
    "interpret.top_k": "10",
    "synth.n_samples": "500",
    "synth.feature_dims": "200,150",
    "synth.latent_dim": "8",
    "synth.n_classes": "4",
    "synth.active_per_feature": "1",
    "synth.separation": "3.0",
    "synth.noise_scale": "0.1",
    "synth.seed": "0",
    "bench.n": "256",
    "bench.d": "1000",
    "bench.k": "32",
    "bench.hidden": "64",
    "bench.repeats": "5",
    "bench.seed": "0",
}


def _train_defaults() -> Dict[str, str]:
    out = {}
    for f in fields(TrainConfig):
        val = f.default
        out[f"train.{f.name}"] = ",".join(str(v) for v in val) if isinstance(val, tuple) else str(val)
    return out


def parse_lines(lines: Iterable[str], source: str = "<config>") -> Dict[str, str]:
    out = {}
    for no, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise IngestionError(f"{source}:{no}: expected key=value, got {raw.strip()!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if not key:
            raise IngestionError(f"{source}:{no}: empty key")
        out[key] = val
    return out


class RunConfig:
    """Resolved key/value store with typed accessors."""

    def __init__(self, values: Optional[Dict[str, str]] = None):
        self.values: Dict[str, str] = {**_train_defaults(), **DEFAULTS}
        if values:
            self.update(values)

    @classmethod
    def load(cls, path=None, overrides: Iterable[str] = ()) -> "RunConfig":
        vals: Dict[str, str] = {}
        if path is not None:
            p = Path(path)
            if not p.exists():
                raise IngestionError(f"no such config file: {p}")
            vals.update(parse_lines(p.read_text(encoding="utf-8").splitlines(), str(p)))
        vals.update(parse_lines(overrides, "<command line>"))
        return cls(vals)

    def update(self, values: Dict[str, str]) -> None:
        unknown = sorted(k for k in values if k not in self.values)
        if unknown:
            raise ContractError(f"unknown config key(s): {', '.join(unknown)}")
        self.values.update({k: str(v) for k, v in values.items()})

    def set(self, key: str, value) -> None:
        self.update({key: str(value)})

    def get(self, key: str) -> str:
        return self.values[key]

    def get_int(self, key: str) -> int:
        try:
            return int(self.values[key])
        except ValueError as exc:
            raise ContractError(f"{key} must be an integer, got {self.values[key]!r}") from exc

    def get_float(self, key: str) -> float:
        try:
            return float(self.values[key])
        except ValueError as exc:
            raise ContractError(f"{key} must be a number, got {self.values[key]!r}") from exc

    def get_list(self, key: str) -> List[str]:
        raw = self.values[key]
        return [s.strip() for s in raw.split(",") if s.strip()]

    def get_int_list(self, key: str) -> Tuple[int, ...]:
        try:
            return tuple(int(s) for s in self.get_list(key))
        except ValueError as exc:
            raise ContractError(f"{key} must be a list of integers, got {self.values[key]!r}") from exc

    def train_config(self) -> TrainConfig:
        kw = {}
        for f in fields(TrainConfig):
            key = f"train.{f.name}"
            if isinstance(f.default, tuple):
                kw[f.name] = self.get_int_list(key)
            elif isinstance(f.default, bool):
                kw[f.name] = self.get(key).lower() in ("1", "true", "yes")
            elif isinstance(f.default, int):
                kw[f.name] = self.get_int(key)
            elif isinstance(f.default, float):
                kw[f.name] = self.get_float(key)
            else:
                kw[f.name] = self.get(key)
        return TrainConfig(**kw)

    def dump(self) -> str:
        return "".join(f"{k}={self.values[k]}\n" for k in sorted(self.values))

    def write(self, path) -> None:
        Path(path).write_text(self.dump(), encoding="utf-8")

"""Flat ``key = value`` run configuration with per-key provenance.

Values are layered defaults ← config file ← ``TOPOSTAIN_SEED`` ← command-line
flags. Every key is declared in :data:`SCHEMA`; an undeclared key in a file
or override is an error.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields
from typing import Any, Callable

from .gan.train import TrainConfig
from .synth import SynthConfig

SEED_ENV = "TOPOSTAIN_SEED"


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(",") if v.strip())


def _threshold(text: str) -> float | str:
    return "otsu" if text.strip().lower() == "otsu" else float(text)


def _render(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_render(v) for v in value)
    return str(value)


@dataclass(frozen=True)
class Key:
    name: str
    default: Any
    parse: Callable[[str], Any]
    section: str
    help: str = ""


_PARSERS = {bool: _bool, int: int, float: float, str: str}


def _from_dataclass(cls, section: str, skip=(), help_text=None) -> list[Key]:
    help_text = help_text or {}
    keys = []
    for f in fields(cls):
        if f.name in skip:
            continue
        default = f.default
        parse = _floats if isinstance(default, tuple) else _PARSERS[type(default)]
        keys.append(Key(f.name, default, parse, section, help_text.get(f.name, "")))
    return keys


_TRAIN_HELP = {
    "lambda1": "weight of the structural consistency loss",
    "lambda2": "weight of the correlation matching loss",
    "mask_ratio": "edge masking ratio m of the perturbed graphs",
    "hops": "graph convolution hops n",
    "thresholds": "per-tap adjacency thresholds",
    "tau": "InfoNCE temperature",
    "num_patches": "sampled nodes per encoder tap",
    "gnn_mode": "'sum' polynomial filter or 'power' single-hop-power filter",
    "cm_norm": "'fro' or 'l1' distance between correlation matrices",
}

SCHEMA: dict[str, Key] = {}
for _k in (
    [Key("seed", 0, int, "common", "random seed for synthesis and training")]
    + _from_dataclass(TrainConfig, "train", skip=("seed",), help_text=_TRAIN_HELP)
    + [Key("count", 200, int, "synth", "number of pairs")]
    + _from_dataclass(SynthConfig, "synth", skip=("seed",))
    + [
        Key("dab_threshold", 0.15, _threshold, "eval", "DAB positivity threshold or 'otsu'"),
        Key("icc_variant", "2,1", str, "eval", "ICC form: 2,1 | 3,1 | 1,1"),
        Key("ssim_window", "gaussian", str, "eval", "'gaussian' or 'global'"),
        Key("extractor_seed", 1234, int, "eval", "seed of the frozen toy feature encoder"),
        Key("graph_threshold", 0.5, float, "graph", "cosine threshold for graph commands"),
    ]
):
    SCHEMA[_k.name] = _k


@dataclass
class RunConfig:
    values: dict[str, Any] = field(default_factory=lambda: {k: v.default for k, v in SCHEMA.items()})
    provenance: dict[str, str] = field(default_factory=lambda: {k: "default" for k in SCHEMA})

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def set(self, key: str, raw: str | Any, source: str) -> None:
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r} ({source})")
        value = raw
        if isinstance(raw, str):
            try:
                value = SCHEMA[key].parse(raw)
            except ValueError as exc:
                raise ConfigError(f"{key}: {exc} ({source})") from exc
        self.values[key] = value
        self.provenance[key] = source

    def load_file(self, path: str | os.PathLike) -> None:
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                text = line.split("#", 1)[0].strip()
                if not text:
                    continue
                if "=" not in text:
                    raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
                key, raw = (s.strip() for s in text.split("=", 1))
                self.set(key, raw, f"file:{path}:{lineno}")

    def section(self, *names: str) -> dict[str, Any]:
        return {k: self.values[k] for k, key in SCHEMA.items() if key.section in names}

    def train_config(self) -> TrainConfig:
        return TrainConfig(seed=self["seed"], **self.section("train"))

    def synth_config(self) -> SynthConfig:
        kw = {k: v for k, v in self.section("synth").items() if k != "count"}
        return SynthConfig(seed=self["seed"], **kw)

    def dump(self, sections=None, with_source: bool = False) -> str:
        lines = []
        for k, key in SCHEMA.items():
            if sections is not None and key.section not in sections:
                continue
            line = f"{k} = {_render(self.values[k])}"
            if with_source:
                line = f"{line:<40}# {self.provenance[k]}"
            lines.append(line)
        return "\n".join(lines) + "\n"


def resolve(config_file=None, overrides: dict[str, Any] | None = None, environ=None) -> RunConfig:
    """Layer defaults, an optional file, the seed variable and explicit overrides."""
    cfg = RunConfig()
    if config_file is not None:
        cfg.load_file(config_file)
    env = os.environ if environ is None else environ
    if env.get(SEED_ENV):
        cfg.set("seed", env[SEED_ENV], f"env:{SEED_ENV}")
    for key, value in (overrides or {}).items():
        cfg.set(key, value, "flag")
    return cfg

"""Run-configuration file: schema validation and assembly.

The config is a JSON document with four sections (``models``,
``generation``, ``costs``, ``output``).  Unknown sections or keys are
rejected with a message naming the offender, so typos fail loudly instead
of silently running defaults.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Optional

from .construct import CostParams
from .engine import GenConfig
from .lm import ModelPairSpec


class ConfigError(ValueError):
    """Invalid run configuration; message carries the diagnostics."""


_SECTIONS = {"models", "generation", "costs", "output"}

_MODEL_KEYS = {
    "vocab_size": int,
    "markov_order": int,
    "target_seed": int,
    "noise_sigma": (int, float),
    "concentration": (int, float),
    "entropy_spread": (int, float),
    "draft_temp": (int, float),
    "target_temp": (int, float),
}

_GENERATION_KEYS = {
    "prefix_len": int,
    "gen_len": int,
    "budget": int,
    "threshold": (int, float),
    "size_cap": int,
    "draft_temp": (int, float),
    "target_temp": (int, float),
    "seed": int,
    "structure": str,
    "k": int,
    "branching": list,
}

_COST_KEYS = {
    "draft_cost": (int, float),
    "target_cost": (int, float),
    "per_node_overhead": (int, float),
}

_OUTPUT_KEYS = {
    "dir": str,
    "format": str,
}


def _check_keys(section: str, data: Dict[str, Any], allowed: Dict[str, Any]) -> None:
    if not isinstance(data, dict):
        raise ConfigError(f"section {section!r} must be an object")
    for key, value in data.items():
        if key not in allowed:
            raise ConfigError(
                f"unknown key {key!r} in section {section!r} "
                f"(allowed: {', '.join(sorted(allowed))})"
            )
        expected = allowed[key]
        if not isinstance(value, expected) or isinstance(value, bool):
            raise ConfigError(
                f"key {section}.{key} has wrong type {type(value).__name__}"
            )


@dataclass
class RunConfig:
    """Validated configuration bundle for one command invocation."""

    models: ModelPairSpec
    generation: GenConfig
    costs: CostParams
    output_dir: Optional[str]
    output_format: str

    @classmethod
    def from_dict(cls, raw: Dict[str, Any], overrides: Optional[Dict[str, Any]] = None) -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config root must be a JSON object")
        unknown = set(raw) - _SECTIONS
        if unknown:
            raise ConfigError(f"unknown config sections: {', '.join(sorted(unknown))}")
        if "models" not in raw:
            raise ConfigError("missing required section 'models'")

        models_raw = dict(raw.get("models", {}))
        gen_raw = dict(raw.get("generation", {}))
        costs_raw = dict(raw.get("costs", {}))
        out_raw = dict(raw.get("output", {}))
        _check_keys("models", models_raw, _MODEL_KEYS)
        _check_keys("generation", gen_raw, _GENERATION_KEYS)
        _check_keys("costs", costs_raw, _COST_KEYS)
        _check_keys("output", out_raw, _OUTPUT_KEYS)

        # Command-line flags take precedence over file values.
        for key, value in (overrides or {}).items():
            if value is None:
                continue
            if key in _GENERATION_KEYS:
                gen_raw[key] = value
            elif key in _MODEL_KEYS:
                models_raw[key] = value
            elif key in _COST_KEYS:
                costs_raw[key] = value
            elif key in _OUTPUT_KEYS:
                out_raw[key] = value

        # Temperatures live with the models but the generation loop applies
        # them; mirror model temps into generation unless set explicitly.
        gen_raw.setdefault("draft_temp", models_raw.get("draft_temp", 0.6))
        gen_raw.setdefault("target_temp", models_raw.get("target_temp", 0.6))
        models_raw["draft_temp"] = gen_raw["draft_temp"]
        models_raw["target_temp"] = gen_raw["target_temp"]

        if "budget" not in gen_raw and "threshold" not in gen_raw:
            gen_raw["budget"] = 64
        if "branching" in gen_raw:
            gen_raw["branching"] = tuple(int(b) for b in gen_raw["branching"])

        fmt = out_raw.get("format", "csv")
        if fmt not in ("csv", "json"):
            raise ConfigError(f"output.format must be 'csv' or 'json', got {fmt!r}")

        try:
            models = ModelPairSpec(**models_raw)
            generation = GenConfig(**gen_raw)
            costs = CostParams(**costs_raw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        return cls(
            models=models,
            generation=generation,
            costs=costs,
            output_dir=out_raw.get("dir"),
            output_format=fmt,
        )

    @classmethod
    def load(cls, path: str | Path, overrides: Optional[Dict[str, Any]] = None) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        return cls.from_dict(raw, overrides)

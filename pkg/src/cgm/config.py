"""Experiment configuration: JSON schema, profiles and presets.

A config is a flat JSON object. Unknown keys are rejected; missing keys take
profile defaults. ``resolve`` fills in every key so that the written
``config-resolved.json`` alone reproduces a run.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Any

import numpy as np

from .constraints import ConstraintSpec
from .diffusion import DiffusionModel, GmmSpec, SdeSchedule, rare_preset, symmetric_preset
from .mlp import MlpSpec
from .trainer import ALGORITHMS, TrainConfig

PRESETS = ("gmm-1d", "gmm-rare", "gmm-product", "custom")

PROFILES = {
    "desk": {"batch_size": 512, "steps": 64, "hidden_dims": [64, 64], "iterations": 500,
             "lr0": 1e-3},
    "paper": {"batch_size": 10_000, "steps": 128, "hidden_dims": [256, 256],
              "iterations": 2000, "lr0": 1e-4},
}

# key -> (default, kind); profile keys have default None and are filled per profile
SCHEMA: dict[str, tuple[Any, str]] = {
    "preset": ("gmm-1d", "str"),
    "profile": ("desk", "str"),
    "out": ("runs/latest", "str"),
    "pi": (0.01, "prob"),
    "k": (None, "posint"),
    "target": (0.8, "vector"),
    "thresholds": (0.0, "vector"),
    "mixture": (None, "mixture"),
    "conditions": (None, "conditions"),
    "algorithm": ("relax", "str"),
    "lambda": (None, "optposreal"),
    "lambda_grid": ([1.0, 1e-3, 10], "grid"),
    "batch_size": (None, "posint"),
    "dual_samples": (100_000, "posint"),
    "iterations": (None, "posint"),
    "lr0": (None, "posreal"),
    "betas": ([0.9, 0.999], "betas"),
    "seed": (0, "seed"),
    "eval_every": (50, "posint"),
    "eval_batch": (4096, "posint"),
    "final_eval_batch": (None, "posint"),
    "sub_batch": (128, "posint"),
    "chunk_size": (8, "posint"),
    "steps": (None, "posint"),
    "hidden_dims": (None, "dims"),
    "embed_dim": (32, "posint"),
}


class ConfigError(ValueError):
    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


def _number(field, value):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(field, f"expected a number, got {value!r}")
    if not math.isfinite(value):
        raise ConfigError(field, "must be finite")
    return value


def _check(field: str, kind: str, value):
    if kind == "str":
        if not isinstance(value, str):
            raise ConfigError(field, f"expected a string, got {value!r}")
        return value
    if kind == "posint" or kind == "seed":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(field, f"expected an integer, got {value!r}")
        if kind == "seed" and not 0 <= value < 2**64:
            raise ConfigError(field, "must be an unsigned 64-bit integer")
        if kind == "posint" and value < 1:
            raise ConfigError(field, "must be at least 1")
        return value
    if kind in ("posreal", "optposreal"):
        if value is None and kind == "optposreal":
            return None
        if _number(field, value) <= 0:
            raise ConfigError(field, "must be positive")
        return float(value)
    if kind == "prob":
        if not 0 < _number(field, value) < 1:
            raise ConfigError(field, "must lie strictly between 0 and 1")
        return float(value)
    if kind == "vector":
        vals = value if isinstance(value, list) else [value]
        if not vals:
            raise ConfigError(field, "must not be empty")
        return [float(_number(f"{field}[{i}]", v)) for i, v in enumerate(vals)]
    if kind == "betas":
        if not isinstance(value, list) or len(value) != 2:
            raise ConfigError(field, "expected two numbers")
        out = [float(_number(f"{field}[{i}]", v)) for i, v in enumerate(value)]
        if not all(0 <= b < 1 for b in out):
            raise ConfigError(field, "must lie in [0, 1)")
        return out
    if kind == "dims":
        if not isinstance(value, list) or not value:
            raise ConfigError(field, "expected a non-empty list of layer widths")
        return [_check(f"{field}[{i}]", "posint", v) for i, v in enumerate(value)]
    if kind == "grid":
        if not isinstance(value, list) or len(value) != 3:
            raise ConfigError(field, "expected [high, low, count]")
        hi = _check(f"{field}[0]", "posreal", value[0])
        lo = _check(f"{field}[1]", "posreal", value[1])
        n = _check(f"{field}[2]", "posint", value[2])
        return [hi, lo, n]
    if kind == "mixture":
        if value is None:
            return None
        if not isinstance(value, dict):
            raise ConfigError(field, "expected an object with weights, means, variances")
        extra = set(value) - {"weights", "means", "variances"}
        if extra:
            raise ConfigError(f"{field}.{sorted(extra)[0]}", "unknown key")
        out = {}
        for key in ("weights", "means", "variances"):
            if key not in value:
                raise ConfigError(f"{field}.{key}", "missing")
            out[key] = _check(f"{field}.{key}", "vector", value[key])
        if not len(out["weights"]) == len(out["means"]) == len(out["variances"]):
            raise ConfigError(field, "weights, means and variances differ in length")
        return out
    if kind == "conditions":
        if value is None:
            return None
        if not isinstance(value, list) or not value:
            raise ConfigError(field, "expected a non-empty list of condition objects")
        out = []
        for i, cond in enumerate(value):
            path = f"{field}[{i}]"
            if not isinstance(cond, dict):
                raise ConfigError(path, "expected an object")
            extra = set(cond) - {"target", "thresholds"}
            if extra:
                raise ConfigError(f"{path}.{sorted(extra)[0]}", "unknown key")
            if "target" not in cond:
                raise ConfigError(f"{path}.target", "missing")
            out.append({"target": _check(f"{path}.target", "vector", cond["target"]),
                        "thresholds": _check(f"{path}.thresholds", "vector",
                                             cond.get("thresholds", 0.0))})
        return out
    raise AssertionError(kind)


@dataclass
class ExperimentConfig:
    values: dict

    def __getitem__(self, key):
        return self.values[key]

    @property
    def k(self) -> int:
        return self.values["k"]

    def to_json(self) -> str:
        return json.dumps(self.values, indent=2, sort_keys=True) + "\n"

    # -- builders -------------------------------------------------------------

    def gmm(self) -> GmmSpec:
        v = self.values
        if v["preset"] == "gmm-1d":
            return symmetric_preset(1)
        if v["preset"] == "gmm-rare":
            return rare_preset(v["pi"], v["k"])
        if v["preset"] == "gmm-product":
            return symmetric_preset(v["k"])
        mix = v["mixture"]
        return GmmSpec.product(v["k"], mix["weights"], mix["means"], mix["variances"])

    def constraints(self) -> list[ConstraintSpec]:
        v = self.values
        conds = v["conditions"] or [{"target": v["target"], "thresholds": v["thresholds"]}]
        k = v["k"]
        return [ConstraintSpec(target=np.broadcast_to(c["target"], (k,)).copy(),
                               thresholds=np.broadcast_to(c["thresholds"], (k,)).copy())
                for c in conds]

    def mlp(self) -> MlpSpec:
        v = self.values
        n = len(v["conditions"] or [None])
        return MlpSpec(v["k"], tuple(v["hidden_dims"]), v["embed_dim"], 0 if n == 1 else n)

    def model(self) -> DiffusionModel:
        """The model for the first condition; multi-condition training swaps the vector per condition."""
        mlp = self.mlp()
        cond = np.eye(mlp.cond_dim)[0] if mlp.cond_dim else None
        return DiffusionModel(self.gmm(), SdeSchedule(self.values["steps"]), mlp, cond)

    def train_config(self) -> TrainConfig:
        v = self.values
        return TrainConfig(
            algorithm=v["algorithm"], lam=v["lambda"], batch_size=v["batch_size"],
            dual_samples=v["dual_samples"], iterations=v["iterations"], lr0=v["lr0"],
            betas=tuple(v["betas"]), seed=v["seed"], eval_every=v["eval_every"],
            eval_batch=v["eval_batch"], final_eval_batch=v["final_eval_batch"],
            sub_batch=v["sub_batch"], chunk_size=v["chunk_size"])

    def grid(self) -> np.ndarray:
        hi, lo, n = self.values["lambda_grid"]
        return np.logspace(np.log10(hi), np.log10(lo), n)


def resolve(raw: dict) -> ExperimentConfig:
    """Validate a raw mapping and fill every default."""
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    unknown = sorted(set(raw) - set(SCHEMA))
    if unknown:
        raise ConfigError(unknown[0], "unknown key")
    v = {}
    for key, (default, kind) in SCHEMA.items():
        value = raw[key] if raw.get(key) is not None else default
        v[key] = None if value is None else _check(key, kind, value)
    if v["preset"] not in PRESETS:
        raise ConfigError("preset", f"must be one of {', '.join(PRESETS)}")
    if v["profile"] not in PROFILES:
        raise ConfigError("profile", f"must be one of {', '.join(PROFILES)}")
    if v["algorithm"] not in ALGORITHMS:
        raise ConfigError("algorithm", f"must be one of {', '.join(ALGORITHMS)}")
    for key, value in PROFILES[v["profile"]].items():
        if v[key] is None:
            v[key] = list(value) if isinstance(value, list) else value

    if v["k"] is None:
        v["k"] = 32 if v["preset"] == "gmm-product" else 1
    if v["preset"] == "gmm-1d" and v["k"] != 1:
        raise ConfigError("k", "the gmm-1d preset is one-dimensional")
    if v["preset"] == "custom":
        if v["mixture"] is None:
            raise ConfigError("mixture", "required for the custom preset")
        if abs(sum(v["mixture"]["weights"]) - 1.0) > 1e-12 or min(v["mixture"]["weights"]) <= 0:
            raise ConfigError("mixture.weights", "must be positive and sum to one")
        if min(v["mixture"]["variances"]) <= 0:
            raise ConfigError("mixture.variances", "must be positive")
    elif v["mixture"] is not None:
        raise ConfigError("mixture", "only used by the custom preset")

    conds = v["conditions"] or [{"target": v["target"], "thresholds": v["thresholds"]}]
    for i, c in enumerate(conds):
        path = f"conditions[{i}]" if v["conditions"] else ""
        for key in ("target", "thresholds"):
            if len(c[key]) not in (1, v["k"]):
                raise ConfigError(f"{path}.{key}".lstrip("."), f"needs 1 or {v['k']} entries")
        if not all(0 < t < 1 for t in c["target"]):
            raise ConfigError(f"{path}.target".lstrip("."),
                              "indicator targets must lie strictly between 0 and 1")
    if v["final_eval_batch"] is None:
        v["final_eval_batch"] = 10_000 if v["k"] >= 16 else 100_000
    if v["batch_size"] < 2:
        raise ConfigError("batch_size", "must be at least 2")
    return ExperimentConfig(v)


def parse_config(text: str, overrides: dict | None = None) -> ExperimentConfig:
    """Parse a UTF-8 JSON document into a validated, fully resolved config.

    Non-``None`` entries of ``overrides`` (command-line flags) replace document
    values before defaults are filled.
    """
    try:
        raw = json.loads(text) if text.strip() else {}
    except json.JSONDecodeError as exc:
        raise ConfigError("<document>", f"malformed JSON: {exc}") from None
    if isinstance(raw, dict) and overrides:
        raw = {**raw, **{k: v for k, v in overrides.items() if v is not None}}
    return resolve(raw)

"""Configuration loading, schema validation, and report envelopes.

One JSON config drives every CLI subcommand; flags override keys with
dotted paths. Reports share an envelope that embeds the effective config,
so any report can be regenerated from itself.
"""

from __future__ import annotations

import datetime as _dt
import json
from importlib import resources
from pathlib import Path

import jsonschema

from .. import __version__
from ..errors import ConfigError
from ..fingerprint import ForestConfig
from ..stream import MitigationPolicy
from .experiments import EngineSpec

DEFAULT_CONFIG: dict = {
    "data_dir": None,
    "output_dir": "specleak-out",
    "model": {"order": 4, "alpha": 0.005},
    "engine": {"type": "lookahead", "ngram_size": 5, "guess_set_size": 3,
               "max_match_len": 4, "top_k": 3, "draft_len": 3,
               "draft_order": 2, "draft_burst": 4,
               "fallback_threshold": 0.2, "rollback_threshold": 4.0},
    "sampler": {"temperature": 0.0, "seed": 0},
    "session": {"max_tokens": 48},
    "mitigation": {"variant": "none"},
    "scenario": {"type": "exact", "tpq": 5, "test_traces": 5,
                 "criterion": "gini"},
    "sweep": {"tpq_values": [5, 10, 20, 30],
              "temperatures": [0.3, 0.6, 0.8, 1.0],
              "seeds": [0, 1, 2, 3, 4]},
    "extraction": {"strategy": "feedback-reuse", "budget": 2000,
                   "tokens_per_query": 8, "seeds": [0, 1, 2],
                   "wordlist": None},
    "probe": {"n_upper_bound": 10, "g_upper_bound": 6, "key_token": "run"},
}


def _schema(name: str) -> dict:
    with resources.files("specleak.schemas").joinpath(name).open("rb") as fh:
        return json.load(fh)


def _merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def apply_overrides(config: dict, overrides: list[str]) -> dict:
    """Apply 'a.b.c=json-value' CLI overrides onto a config dict."""
    out = json.loads(json.dumps(config))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of form key=value")
        path, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = out
        keys = path.split(".")
        for key in keys[:-1]:
            node = node.setdefault(key, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot descend into {path!r}")
        node[keys[-1]] = value
    return out


def load_config(path: str | Path | None = None,
                overrides: list[str] | None = None) -> dict:
    """Defaults, optionally merged with a JSON file, then CLI overrides."""
    config = json.loads(json.dumps(DEFAULT_CONFIG))
    if path is not None:
        try:
            user = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        config = _merge(config, user)
    if overrides:
        config = apply_overrides(config, overrides)
    validate_config(config)
    return config


def validate_config(config: dict) -> None:
    try:
        jsonschema.validate(config, _schema("config.schema.json"))
    except jsonschema.ValidationError as exc:
        raise ConfigError(f"invalid config: {exc.message} "
                          f"(at {'/'.join(map(str, exc.absolute_path))})") from exc


def engine_spec(config: dict) -> EngineSpec:
    return EngineSpec(**config["engine"])


def mitigation_policy(config: dict) -> MitigationPolicy:
    m = config["mitigation"]
    variant = m.get("variant", "none")
    if variant == "none":
        return MitigationPolicy.none()
    if variant == "constant_pad":
        return MitigationPolicy.constant_pad(m.get("target_size", 1024))
    if variant == "variable_pad":
        return MitigationPolicy.variable_pad(m.get("max_pad", 6),
                                             m.get("pad_seed", 0))
    if variant == "aggregate":
        return MitigationPolicy.aggregate(m.get("aggregate_k", 3))
    if variant == "aggregate+constant_pad":
        return MitigationPolicy.aggregate_then_pad(
            m.get("aggregate_k", 3),
            MitigationPolicy.constant_pad(m.get("target_size", 1024)))
    if variant == "aggregate+variable_pad":
        return MitigationPolicy.aggregate_then_pad(
            m.get("aggregate_k", 3),
            MitigationPolicy.variable_pad(m.get("max_pad", 6),
                                          m.get("pad_seed", 0)))
    raise ConfigError(f"unknown mitigation variant {variant!r}")


def forest_config(config: dict, seed: int) -> ForestConfig:
    return ForestConfig(criterion=config["scenario"].get("criterion", "gini"),
                        seed=seed)


def make_report(kind: str, config: dict, results: dict,
                timestamp: bool = True) -> dict:
    report = {"report_version": 1, "kind": kind, "tool_version": __version__,
              "config": config, "results": results}
    if timestamp:
        report["created_at"] = _dt.datetime.now(
            _dt.timezone.utc).isoformat(timespec="seconds")
    return report


def validate_report(report: dict) -> None:
    jsonschema.validate(report, _schema("report.schema.json"))


def write_report(report: dict, path: str | Path) -> None:
    validate_report(report)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")


def strip_volatile(report: dict) -> dict:
    """Drop wall-clock fields for byte-stable comparisons."""
    return {k: v for k, v in report.items() if k != "created_at"}

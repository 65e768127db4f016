"""Sectioned JSON run configuration with strict key checking and overrides."""
from __future__ import annotations

import dataclasses
import json
import os
from pathlib import Path

from . import graphdata as gd
from .errors import StageError
from .fedsim import RunConfig


class ConfigError(StageError):
    """Schema violation; ``path`` names the offending key (``section.key``)."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path
        self.message = message


# section -> {config key: (target, field name)}; target "run" or "synth"
SCHEMA = {
    "data": {
        "node_count": ("synth", "node_count"),
        "class_count": ("synth", "class_count"),
        "p_in": ("synth", "p_in"),
        "p_out": ("synth", "p_out"),
        "modality_dims": ("synth", "modality_dims"),
        "dim_jitter": ("synth", "dim_jitter"),
        "client_dims": ("synth", "client_dims"),
        "prototype_scale": ("synth", "prototype_scale"),
        "noise_std": ("synth", "noise_std"),
        "mask_drop": ("synth", "mask_drop"),
        "seed": ("synth", "seed"),
        "alpha": ("run", "alpha"),
        "noise_ratio": ("run", "noise_ratio"),
        "split": ("run", "split"),
        "edge_split": ("run", "edge_split"),
    },
    "partition": {
        "clients": ("run", "clients"),
        "strategy": ("run", "partition"),
    },
    "model": {
        "anchors": ("run", "anchors"),
        "d_p": ("run", "d_p"),
        "layers": ("run", "layers"),
        "gnn_input": ("run", "gnn_input"),
        "model_init": ("run", "model_init"),
        "bank_seed": ("run", "bank_seed"),
    },
    "stage": {
        "lam": ("run", "lam"),
        "beta": ("run", "beta"),
        "tau_s": ("run", "tau_s"),
        "tau_c": ("run", "tau_c"),
        "n_min": ("run", "n_min"),
    },
    "server": {
        "m_ema": ("run", "m_ema"),
        "eta_pi": ("run", "eta_pi"),
        "tau_min": ("run", "tau_min"),
        "tau_init": ("run", "tau_init"),
        "g_max": ("run", "g_max"),
    },
    "run": {
        "method": ("run", "method"),
        "task": ("run", "task"),
        "rounds": ("run", "rounds"),
        "local_epochs": ("run", "local_epochs"),
        "lr": ("run", "lr"),
        "seeds": ("run", "seeds"),
    },
    "diagnostics": {
        "top_n": ("diag", "top_n"),
        "n_cent": ("diag", "n_cent"),
    },
}

DIAG_DEFAULTS = {"top_n": 10, "n_cent": 5}


@dataclasses.dataclass
class Settings:
    run: RunConfig
    diag: dict

    @property
    def config_hash(self) -> str:
        return self.run.config_hash()


def _coerce(path: str, default, value):
    """Match ``value`` to the type of the field default."""
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        raise ConfigError(path, f"expected a boolean, got {value!r}")
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return int(value)
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    if isinstance(default, tuple) or default is None:
        if value is None:
            return None
        if not isinstance(value, (list, tuple)):
            raise ConfigError(path, f"expected a list, got {value!r}")
        return tuple(tuple(v) if isinstance(v, list) else v for v in value)
    return value


def from_dict(doc: dict, env=None) -> Settings:
    """Schema-check a sectioned document and build the run settings."""
    env = os.environ if env is None else env
    if not isinstance(doc, dict):
        raise ConfigError("<root>", "config must be an object of sections")
    run_kw, synth_kw, diag = {}, {}, dict(DIAG_DEFAULTS)
    base_run, base_synth = RunConfig(), gd.SynthConfig()
    for section, body in doc.items():
        if section not in SCHEMA:
            raise ConfigError(section, "unknown section")
        if not isinstance(body, dict):
            raise ConfigError(section, "section must be an object")
        for key, value in body.items():
            path = f"{section}.{key}"
            if key not in SCHEMA[section]:
                raise ConfigError(path, "unknown key")
            target, name = SCHEMA[section][key]
            if target == "run":
                run_kw[name] = _coerce(path, getattr(base_run, name), value)
            elif target == "synth":
                synth_kw[name] = _coerce(path, getattr(base_synth, name), value)
            else:
                diag[name] = _coerce(path, DIAG_DEFAULTS[name], value)
    if "seeds" not in run_kw and env.get("STAGE_SEED"):
        try:
            run_kw["seeds"] = (int(env["STAGE_SEED"]),)
        except ValueError:
            raise ConfigError("STAGE_SEED", "must be an integer") from None
    try:
        synth = gd.SynthConfig(**synth_kw).validate()
        cfg = RunConfig(synth=synth, **run_kw).validate()
    except (ValueError, TypeError) as exc:
        raise ConfigError(_guess_path(str(exc)), str(exc)) from None
    if diag["top_n"] < 1 or diag["top_n"] > cfg.anchors:
        raise ConfigError("diagnostics.top_n", "must be in [1, anchors]")
    if diag["n_cent"] < 1:
        raise ConfigError("diagnostics.n_cent", "must be positive")
    return Settings(cfg, diag)


def _guess_path(message: str) -> str:
    for section, keys in SCHEMA.items():
        for key, (_, name) in keys.items():
            if name in message:
                return f"{section}.{key}"
    return "<config>"


def parse_override(text: str):
    """``section.key=value`` with a JSON value (bare words are taken as strings)."""
    if "=" not in text or "." not in text.split("=", 1)[0]:
        raise ConfigError(text, "override must look like section.key=value")
    lhs, raw = text.split("=", 1)
    section, key = lhs.split(".", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return section, key, value


def load(path=None, overrides=(), env=None) -> Settings:
    doc = {}
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError:
            raise
        try:
            doc = json.loads(text) if text.strip() else {}
        except json.JSONDecodeError as exc:
            raise ConfigError(str(path), f"invalid JSON: {exc}") from None
    for item in overrides:
        section, key, value = parse_override(item)
        doc.setdefault(section, {})
        if not isinstance(doc[section], dict):
            raise ConfigError(section, "section must be an object")
        doc[section][key] = value
    return from_dict(doc, env)


def to_document(settings: Settings) -> dict:
    """Sectioned document that reproduces ``settings`` when loaded."""
    out = {}
    cfg = settings.run
    for section, keys in SCHEMA.items():
        out[section] = {}
        for key, (target, name) in keys.items():
            if target == "run":
                v = getattr(cfg, name)
            elif target == "synth":
                v = getattr(cfg.synth, name)
            else:
                v = settings.diag[name]
            out[section][key] = list(v) if isinstance(v, tuple) else v
    return out

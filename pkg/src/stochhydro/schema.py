"""Documented configuration keys, their defaults and validation.

The key list lives in ``schema.json`` next to this module.  ``fill_defaults``
turns partially specified sections into a complete, validated set where every
effective value is explicit, so a run can be reproduced from its echo alone.
"""

from __future__ import annotations

import copy
import json
import math
from importlib import resources

SECTIONS = ("model", "space", "noise", "sigma", "sigma_tilde", "G", "R", "control", "experiment")


class ConfigError(ValueError):
    """Invalid configuration; names the offending key and, when known, its line."""

    def __init__(self, key: str, message: str, line: int | None = None):
        self.key = key
        self.line = line
        where = f" (line {line})" if line is not None else ""
        super().__init__(f"{key}{where}: {message}")


def load_schema() -> dict:
    text = resources.files(__package__).joinpath("schema.json").read_text(encoding="utf-8")
    return json.loads(text)


SCHEMA = load_schema()


def _coerce(kind: str, value, key: str, line):
    if value is None:
        return None
    try:
        if kind == "int":
            if isinstance(value, bool) or float(value) != int(value):
                raise ValueError
            return int(value)
        if kind == "float":
            if isinstance(value, bool):
                raise ValueError
            out = float(value)
            if not math.isfinite(out):
                raise ValueError
            return out
        if kind == "bool":
            if not isinstance(value, bool):
                raise ValueError
            return value
        if kind == "str":
            if not isinstance(value, str):
                raise ValueError
            return value
        if kind == "list[int]":
            return [_coerce("int", v, key, line) for v in value]
        if kind == "list[float]":
            return [_coerce("float", v, key, line) for v in value]
        if kind == "matrix":
            return json.loads(json.dumps(value))
    except (TypeError, ValueError):
        pass
    raise ConfigError(key, f"expected {kind}, got {value!r}", line)


def fill_defaults(sections: dict, lines: dict | None = None) -> dict:
    """Validate ``sections`` against the schema and fill every default.

    ``lines`` optionally maps "section.key" to a source line for messages.
    """
    lines = lines or {}
    unknown = set(sections) - set(SECTIONS)
    if unknown:
        name = sorted(unknown)[0]
        raise ConfigError(name, "unknown section", lines.get(name))
    out = {}
    for sec in SECTIONS:
        given = dict(sections.get(sec) or {})
        spec = SCHEMA[sec]
        for key in given:
            if key not in spec:
                raise ConfigError(f"{sec}.{key}", "unknown key", lines.get(f"{sec}.{key}"))
        filled = {}
        for key, meta in spec.items():
            full = f"{sec}.{key}"
            if key in given:
                val = _coerce(meta["type"], given[key], full, lines.get(full))
            elif meta.get("required"):
                raise ConfigError(full, "missing required key", lines.get(sec))
            else:
                val = copy.deepcopy(meta.get("default"))
            if val is not None and "choices" in meta and val not in meta["choices"]:
                raise ConfigError(full, f"must be one of {meta['choices']}", lines.get(full))
            if val is not None and "min" in meta and val < meta["min"]:
                raise ConfigError(full, f"must be at least {meta['min']}", lines.get(full))
            filled[key] = val
        out[sec] = filled
    _derived(out, lines)
    _validate(out, lines)
    return out


def _derived(cfg: dict, lines: dict):
    if cfg["space"]["interp_exponent"] is None:
        cfg["space"]["interp_exponent"] = 0.25 if cfg["model"]["kind"] == "ns2d" else 0.0
    exp = cfg["experiment"]
    if exp["reference_level"] is None and exp["levels"]:
        exp["reference_level"] = max(exp["levels"]) + exp["kappa"]
    if exp["alpha"] is None:
        exp["alpha"] = 2.0 * math.sqrt(2.0 * math.log(2.0) / cfg["noise"]["T"])


def _validate(cfg: dict, lines: dict):
    def fail(key, msg):
        raise ConfigError(key, msg, lines.get(key))

    exp = cfg["experiment"]
    levels = exp["levels"]
    if not levels:
        fail("experiment.levels", "at least one level is required")
    if any(n < 1 for n in levels) or any(b <= a for a, b in zip(levels, levels[1:])):
        fail("experiment.levels", "levels must be positive and strictly increasing")
    if exp["reference_level"] < max(levels) + exp["kappa"]:
        fail("experiment.reference_level", "must be at least max(levels) + kappa")
    if any(lam <= 0 for lam in exp["lambdas"]):
        fail("experiment.lambdas", "thresholds must be positive")
    if any(e <= 0 for e in exp["eps"]):
        fail("experiment.eps", "radii must be positive")
    if exp["alpha"] <= 0:
        fail("experiment.alpha", "must be positive")
    if any(n < 1 for n in exp["tail_levels"]):
        fail("experiment.tail_levels", "levels must be positive")
    if not 0 <= exp["max_diverged_fraction"] <= 1:
        fail("experiment.max_diverged_fraction", "must lie in [0, 1]")
    if cfg["noise"]["T"] <= 0:
        fail("noise.T", "must be positive")
    if cfg["model"]["nu"] <= 0:
        fail("model.nu", "must be positive")
    if not 0 <= cfg["space"]["interp_exponent"] <= 0.5:
        fail("space.interp_exponent", "must lie in [0, 1/2]")
    ctrl = cfg["control"]
    if ctrl["budget"] < 0:
        fail("control.budget", "must be nonnegative")
    energy = control_energy(ctrl, cfg["noise"]["modes"], cfg["noise"]["T"])
    if energy > ctrl["budget"] * (1 + 1e-12):
        fail("control.budget", f"control energy {energy:.6g} exceeds the budget {ctrl['budget']:.6g}")


def control_energy(ctrl: dict, modes: int, T: float) -> float:
    """∫|h|² dt of the control described by a filled control section."""
    from .coefficients import smooth_control
    if ctrl["kind"] == "zero":
        return 0.0
    if ctrl["kind"] == "constant":
        return ctrl["amplitude"] ** 2 * modes * T
    return smooth_control(modes, T, ctrl["cells"], ctrl["amplitude"]).energy()


def describe() -> str:
    """Human-readable key list."""
    rows = []
    for sec in SECTIONS:
        rows.append(f"[{sec}]")
        for key, meta in SCHEMA[sec].items():
            dflt = "required" if meta.get("required") else f"default {json.dumps(meta.get('default'))}"
            rows.append(f"  {key} ({meta['type']}, {dflt}): {meta['doc']}")
    return "\n".join(rows)

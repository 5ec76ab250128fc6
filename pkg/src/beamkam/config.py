"""Run configuration: one YAML file with a section per stage.

Values are resolved in the order defaults < file < environment < command
line.  Environment overrides use ``BEAMKAM_<SECTION>__<KEY>`` (for example
``BEAMKAM_MODEL__EPS=0``); their values are parsed as YAML scalars.  Every
key is validated before any computation starts, and an error names the
offending ``section.key``.
"""
from __future__ import annotations

import copy
import math
import os
from typing import Any, Mapping

import yaml

ENV_PREFIX = "BEAMKAM_"

DEFAULTS: dict = {
    "model": {
        "d": 2,
        "J_max": 3.0,
        "S": [[1, 0], [0, 1]],
        "eps": 1e-4,
        "f_power": 3,
        "degree_cap": 5,
        "fourier_cap": 6,
        "param_box": [0.0, 1.0],
        "N_cut": 1.0,
        "torus_actions": 0.05,
        "xi": None,                 # explicit parameter vector; sampled from the seed when null
    },
    "resonance": {"eta": 1e-3, "M": 2, "tau": None, "K_max": None},
    "normal_form": {
        "eta": 1e-3,
        "M": 2,
        "tau": None,                # default 2n + 6
        "sweeps": 3,
        "chop_rel": 1e-14,
        "floor": 1e-12,
    },
    "measure": {"etas": [1e-1, 1e-2, 1e-3, 1e-4], "samples": 2000, "M": 2, "K_max": None},
    "norms": {"s": 0.5, "r": 0.1, "p": 3, "dbase": None, "samples": 32},
    "simulate": {
        "delta": 0.05,
        "M": 2,
        "p": 3,
        "dbase": None,              # default: spatial dimension
        "s": 0.5,
        "rho": 0.1,
        "horizon": None,            # default delta^-M
        "dt": None,
        "samples": 400,
        "mode": "transformed",
        "sim_chop_rel": 1e-5,
        "energy_guard": 1e-6,
        "control": "disabled",      # "disabled" runs the original Hamiltonian as a control; "none" skips it
        "ensemble": 1,
    },
    "run": {"seed": 1, "workers": 1, "out_dir": "out", "format": "json"},
}


class ConfigError(ValueError):
    """Invalid configuration; the message starts with the offending key."""


def _is_int(v):
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v):
    return (isinstance(v, (int, float)) and not isinstance(v, bool)) and math.isfinite(v)


def _pos(v):
    return _is_num(v) and v > 0


def _nonneg(v):
    return _is_num(v) and v >= 0


def _int_at_least(lo):
    return lambda v: _is_int(v) and v >= lo


def _optional(check):
    return lambda v: v is None or check(v)


def _site_list(v):
    return isinstance(v, list) and len(v) > 0 and all(isinstance(s, list) and all(_is_int(c) for c in s) for s in v)


def _box(v):
    return isinstance(v, list) and len(v) == 2 and all(_is_num(c) for c in v) and v[0] < v[1]


def _actions(v):
    return _nonneg(v) or (isinstance(v, list) and all(_nonneg(c) for c in v))


def _etas(v):
    return isinstance(v, list) and len(v) > 0 and all(_pos(e) for e in v)


def _xi(v):
    return v is None or (isinstance(v, list) and all(_is_num(c) for c in v))


CHECKS: dict = {
    "model": {
        "d": (_int_at_least(1), "an integer >= 1"),
        "J_max": (_pos, "a positive number"),
        "S": (_site_list, "a nonempty list of integer sites"),
        "eps": (_nonneg, "a nonnegative number"),
        "f_power": (_int_at_least(2), "an integer >= 2"),
        "degree_cap": (_int_at_least(2), "an integer >= 2"),
        "fourier_cap": (_int_at_least(0), "an integer >= 0"),
        "param_box": (_box, "a pair [lo, hi] with lo < hi"),
        "N_cut": (_nonneg, "a nonnegative number"),
        "torus_actions": (_actions, "a nonnegative number or list"),
        "xi": (_xi, "null or a list of numbers"),
    },
    "resonance": {
        "eta": (_pos, "a positive number"),
        "M": (_int_at_least(0), "an integer >= 0"),
        "tau": (_optional(_pos), "null or a positive number"),
        "K_max": (_optional(_int_at_least(0)), "null or an integer >= 0"),
    },
    "normal_form": {
        "eta": (_pos, "a positive number"),
        "M": (_int_at_least(0), "an integer >= 0"),
        "tau": (_optional(_pos), "null or a positive number"),
        "sweeps": (_int_at_least(1), "an integer >= 1"),
        "chop_rel": (_nonneg, "a nonnegative number"),
        "floor": (_nonneg, "a nonnegative number"),
    },
    "measure": {
        "etas": (_etas, "a nonempty list of positive numbers"),
        "samples": (_int_at_least(100), "an integer >= 100"),
        "M": (_int_at_least(0), "an integer >= 0"),
        "K_max": (_optional(_int_at_least(0)), "null or an integer >= 0"),
    },
    "norms": {
        "s": (_pos, "a positive number"),
        "r": (lambda v: _pos(v) and v <= 1, "a number in (0, 1]"),
        "p": (_int_at_least(2), "an integer >= 2"),
        "dbase": (_optional(_int_at_least(1)), "null or an integer >= 1"),
        "samples": (_int_at_least(1), "an integer >= 1"),
    },
    "simulate": {
        "delta": (_pos, "a positive number"),
        "M": (_int_at_least(0), "an integer >= 0"),
        "p": (_int_at_least(2), "an integer >= 2"),
        "dbase": (_optional(_int_at_least(1)), "null or an integer >= 1"),
        "s": (_pos, "a positive number"),
        "rho": (lambda v: _pos(v) and v <= 1, "a number in (0, 1]"),
        "horizon": (_optional(_pos), "null or a positive number"),
        "dt": (_optional(_pos), "null or a positive number"),
        "samples": (_int_at_least(1), "an integer >= 1"),
        "mode": (lambda v: v in ("transformed", "original", "disabled"), "transformed, original or disabled"),
        "sim_chop_rel": (_nonneg, "a nonnegative number"),
        "energy_guard": (_pos, "a positive number"),
        "control": (lambda v: v in ("disabled", "none"), "disabled or none"),
        "ensemble": (_int_at_least(1), "an integer >= 1"),
    },
    "run": {
        "seed": (_int_at_least(0), "an integer >= 0"),
        "workers": (_int_at_least(1), "an integer >= 1"),
        "out_dir": (lambda v: isinstance(v, str) and v != "", "a nonempty path"),
        "format": (lambda v: v in ("json", "csv"), "json or csv"),
    },
}


def _merge(base: dict, update: Mapping, origin: str) -> None:
    if not isinstance(update, Mapping):
        raise ConfigError(f"{origin}: expected a mapping of sections")
    for sec, vals in update.items():
        if sec not in base:
            raise ConfigError(f"{sec}: unknown section")
        if vals is None:
            continue
        if not isinstance(vals, Mapping):
            raise ConfigError(f"{sec}: expected a mapping")
        for key, v in vals.items():
            if key not in base[sec]:
                raise ConfigError(f"{sec}.{key}: unknown key")
            base[sec][key] = v


def _parse_scalar(text: str) -> Any:
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError:
        return text


def env_overrides(environ: Mapping[str, str] | None = None) -> dict:
    environ = os.environ if environ is None else environ
    out: dict = {}
    for name, text in environ.items():
        if not name.startswith(ENV_PREFIX):
            continue
        rest = name[len(ENV_PREFIX):]
        if "__" not in rest:
            raise ConfigError(f"{name}: expected {ENV_PREFIX}<SECTION>__<KEY>")
        sec, key = rest.split("__", 1)
        sec, key = sec.lower(), _match_key(sec.lower(), key)
        out.setdefault(sec, {})[key] = _parse_scalar(text)
    return out


def _match_key(sec: str, key: str) -> str:
    # environment names are upper case; map back to the schema spelling
    for k in DEFAULTS.get(sec, {}):
        if k.lower() == key.lower():
            return k
    return key


def parse_assignment(text: str) -> dict:
    """``section.key=value`` into a nested override mapping."""
    if "=" not in text or "." not in text.split("=", 1)[0]:
        raise ConfigError(f"{text}: expected section.key=value")
    path, value = text.split("=", 1)
    sec, key = path.split(".", 1)
    return {sec: {key: _parse_scalar(value)}}


def validate(cfg: dict) -> None:
    for sec, keys in CHECKS.items():
        for key, (check, what) in keys.items():
            v = cfg[sec][key]
            # YAML reads 1e-3 as a string; accept numeric strings for numeric keys
            if isinstance(v, str) and key not in ("mode", "control", "out_dir", "format"):
                try:
                    v = float(v)
                    cfg[sec][key] = v
                except ValueError:
                    pass
            if not check(v):
                raise ConfigError(f"{sec}.{key}: must be {what}, got {v!r}")
    m = cfg["model"]
    if any(len(s) != m["d"] for s in m["S"]):
        raise ConfigError(f"model.S: every site needs {m['d']} coordinates")
    if m["J_max"] <= m["N_cut"]:
        raise ConfigError("model.J_max: must exceed model.N_cut")
    if m["f_power"] + 1 > m["degree_cap"]:
        raise ConfigError("model.degree_cap: must be at least f_power + 1")
    sim = cfg["simulate"]
    if not sim["delta"] < sim["rho"]:
        raise ConfigError("simulate.delta: must be below simulate.rho")
    for sec in ("norms", "simulate"):
        dbase = cfg[sec]["dbase"] if cfg[sec]["dbase"] is not None else m["d"]
        if not cfg[sec]["p"] > dbase:
            raise ConfigError(f"{sec}.p: must exceed dbase = {dbase}")
    for sec in ("resonance", "normal_form"):
        tau = cfg[sec]["tau"]
        if tau is not None and not tau > 2 * len(m["S"]) + 5:
            raise ConfigError(f"{sec}.tau: must exceed 2n+5 = {2 * len(m['S']) + 5}")
    acts = m["torus_actions"]
    if isinstance(acts, list) and len(acts) != len(m["S"]):
        raise ConfigError("model.torus_actions: need one action per tangential site")


def load_config(path: str | None = None, overrides: list | None = None,
                environ: Mapping[str, str] | None = None) -> dict:
    """Resolved and validated configuration (defaults < file < env < overrides)."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        with open(path) as fh:
            data = yaml.safe_load(fh)
        if data is not None:
            _merge(cfg, data, path)
    _merge(cfg, env_overrides(environ), "environment")
    for ov in overrides or []:
        _merge(cfg, ov, "command line")
    validate(cfg)
    return cfg

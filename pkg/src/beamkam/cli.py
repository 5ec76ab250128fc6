"""Batch front-end.

Subcommands ``build``, ``normal-form``, ``resonance``, ``measure``, ``norms``,
``simulate`` and ``pipeline`` read one YAML configuration (see
:mod:`beamkam.config`), write their artifacts below ``--out-dir`` and record a
run manifest with SHA-256 hashes of every file written.

Exit codes: 0 on success, 2 when a run completes but a checked property fails
(uncertified parameter, stickiness violation, failed momentum audit), 1 on
errors such as invalid configuration or missing inputs.
"""
from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import io
import json
import logging
import math
import os
import sys
import time
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .beam_model import ModelConfig, assemble_hamiltonian, build_sites
from .config import ConfigError, load_config, parse_assignment
from .dynamics import (
    IntegrationError,
    NormalFormRun,
    StickinessConfig,
    split_normal,
    stickiness_ensemble,
)
from .normal_form import DivisorCollapse, DivisorPolicy, order2_step, partial_normal_form
from .norms import DomainParams, vector_field_tame_norm
from .resonance import ResonanceSettings, certify, measure_estimate
from .series import Series, dumps_json, loads_json, momentum_residual

log = logging.getLogger("beamkam")

EXIT_OK, EXIT_ERROR, EXIT_PROPERTY = 0, 1, 2

MODEL_N, MODEL_P, BUILD_REPORT = "model/N.json", "model/P.json", "model/build_report.json"
NF_H, NF_GENERATORS = "normal_form/H.json", "normal_form/generators.json"


class InputError(RuntimeError):
    """A required input file is missing or inconsistent with the configuration."""


def plain(v):
    """JSON-ready copy with numpy scalars/arrays and complex numbers converted."""
    if isinstance(v, dict):
        return {str(k): plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [plain(x) for x in v]
    if isinstance(v, np.ndarray):
        return plain(v.tolist())
    if isinstance(v, (np.floating, np.integer, np.bool_)):
        return v.item()
    if isinstance(v, complex):
        return {"re": v.real, "im": v.imag}
    return v


def dumps(obj) -> str:
    return json.dumps(plain(obj), indent=2, sort_keys=True) + "\n"


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    version: str
    started: str
    finished: str = ""
    outputs: list = field(default_factory=list)     # [{"path", "sha256"}]
    exit_code: int = 0

    def to_dict(self) -> dict:
        return {"command": self.command, "config": self.config, "seed": self.seed, "version": self.version,
                "started": self.started, "finished": self.finished, "exit_code": self.exit_code,
                "outputs": sorted(self.outputs, key=lambda o: o["path"])}

    def payload_hashes(self) -> dict:
        return {o["path"]: o["sha256"] for o in self.outputs}


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


class RunContext:
    """Output directory plus manifest bookkeeping for one invocation."""

    def __init__(self, cfg: dict, command: str):
        self.cfg = cfg
        self.out = cfg["run"]["out_dir"]
        self.manifest = RunManifest(command, cfg, cfg["run"]["seed"], __version__, _now())
        os.makedirs(self.out, exist_ok=True)

    def path(self, rel: str) -> str:
        return os.path.join(self.out, rel)

    def write(self, rel: str, text: str) -> None:
        full = self.path(rel)
        os.makedirs(os.path.dirname(full) or ".", exist_ok=True)
        data = text.encode()
        with open(full, "wb") as fh:
            fh.write(data)
        self.manifest.outputs = [o for o in self.manifest.outputs if o["path"] != rel]
        self.manifest.outputs.append({"path": rel, "sha256": hashlib.sha256(data).hexdigest()})

    def read(self, rel: str) -> str:
        full = self.path(rel)
        if not os.path.exists(full):
            raise InputError(f"missing input {full}; run the producing subcommand first")
        with open(full) as fh:
            return fh.read()

    def finish(self, code: int) -> None:
        self.manifest.finished = _now()
        self.manifest.exit_code = code
        name = f"manifest_{self.manifest.command}.json"
        with open(self.path(name), "w") as fh:
            fh.write(dumps(self.manifest.to_dict()))


# ---------------------------------------------------------------------------
# configuration to domain objects

def model_config(cfg: dict) -> ModelConfig:
    m = cfg["model"]
    acts = m["torus_actions"]
    return ModelConfig(d=m["d"], J_max=float(m["J_max"]), S=tuple(tuple(s) for s in m["S"]), eps=float(m["eps"]),
                       f_power=m["f_power"], degree_cap=m["degree_cap"], fourier_cap=m["fourier_cap"],
                       param_box=tuple(float(v) for v in m["param_box"]), N_cut=float(m["N_cut"]),
                       torus_actions=tuple(acts) if isinstance(acts, list) else float(acts))


def parameters(cfg: dict, lattice) -> np.ndarray:
    """The parameter vector xi: explicit from the config or drawn from the run seed."""
    m = cfg["model"]
    P = len(lattice.sites)
    if m["xi"] is not None:
        xi = np.asarray(m["xi"], float)
        if xi.shape != (P,):
            raise ConfigError(f"model.xi: need {P} values, one per lattice site")
        return xi
    lo, hi = m["param_box"]
    return np.random.default_rng(cfg["run"]["seed"]).uniform(lo, hi, P)


def _tau(section: dict, n: int) -> float:
    return float(section["tau"]) if section["tau"] is not None else 2.0 * n + 6.0


def divisor_policy(cfg: dict, mc: ModelConfig, lattice) -> DivisorPolicy:
    nf = cfg["normal_form"]
    return DivisorPolicy.for_lattice(lattice, mc.N_cut, float(nf["eta"]), nf["M"], _tau(nf, mc.n), float(nf["floor"]))


def norm_params(cfg: dict) -> DomainParams:
    s = cfg["norms"]
    dbase = s["dbase"] if s["dbase"] is not None else cfg["model"]["d"]
    return DomainParams(float(s["s"]), float(s["r"]), s["p"], dbase)


def stickiness_config(cfg: dict, mode: str | None = None, seed: int | None = None) -> StickinessConfig:
    s = cfg["simulate"]
    dbase = s["dbase"] if s["dbase"] is not None else cfg["model"]["d"]
    return StickinessConfig(delta=float(s["delta"]), M=s["M"], p=s["p"], dbase=dbase, s=float(s["s"]),
                            rho=float(s["rho"]), horizon=None if s["horizon"] is None else float(s["horizon"]),
                            dt=None if s["dt"] is None else float(s["dt"]), samples=s["samples"],
                            seed=cfg["run"]["seed"] if seed is None else seed, mode=mode or s["mode"],
                            sim_chop_rel=float(s["sim_chop_rel"]), energy_guard=float(s["energy_guard"]))


def check_all(cfg: dict) -> None:
    """Construct every domain object once so bad values fail before any computation."""
    try:
        mc = model_config(cfg)
        lat = build_sites(mc)
    except ValueError as exc:
        raise ConfigError(f"model: {exc}") from exc
    parameters(cfg, lat)
    try:
        r = cfg["resonance"]
        ResonanceSettings(float(r["eta"]), r["M"], r["tau"], r["K_max"]).resolve(mc)
    except ValueError as exc:
        raise ConfigError(f"resonance: {exc}") from exc
    try:
        norm_params(cfg)
    except ValueError as exc:
        raise ConfigError(f"norms: {exc}") from exc
    try:
        stickiness_config(cfg)
    except ValueError as exc:
        raise ConfigError(f"simulate: {exc}") from exc


def momentum_audit(*series: Series) -> int:
    """Number of terms violating the momentum selection rule."""
    return sum(int(np.any(momentum_residual(W) != 0, axis=1).sum()) for W in series if len(W))


# ---------------------------------------------------------------------------
# stages

@dataclass
class BuildResult:
    N: Series
    P: Series
    xi: np.ndarray
    code: int


def stage_build(ctx: RunContext) -> BuildResult:
    cfg = ctx.cfg
    mc = model_config(cfg)
    lat = build_sites(mc)
    xi = parameters(cfg, lat)
    A = assemble_hamiltonian(mc, xi, lat)
    violations = momentum_audit(A.N, A.P)
    rep = vector_field_tame_norm(A.P, norm_params(cfg), samples=cfg["norms"]["samples"])
    report = {
        "terms": {"N": len(A.N), "P": len(A.P), **A.info},
        "remainder_mass": A.remainder_mass,
        "momentum_violations": violations,
        "momentum_audit_passed": violations == 0,
        "tame_norm_P": rep.to_dict(),
        "xi": xi,
        "omega": A.omega,
        "Omega": A.Omega,
        "sites": {"tangential": lat.tangential, "normal": lat.normal, "low": lat.low, "high": lat.high},
    }
    ctx.write(MODEL_N, dumps_json(A.N))
    ctx.write(MODEL_P, dumps_json(A.P))
    ctx.write(BUILD_REPORT, dumps(report))
    log.info("build: %d P terms, momentum violations %d", len(A.P), violations)
    return BuildResult(A.N, A.P, xi, EXIT_OK if violations == 0 else EXIT_PROPERTY)


def _load_model(ctx: RunContext):
    N = loads_json(ctx.read(MODEL_N))
    P = loads_json(ctx.read(MODEL_P))
    mc = model_config(ctx.cfg)
    lat = build_sites(mc)
    if tuple(N.meta.sites) != tuple(lat.normal) or tuple(N.meta.tangential) != tuple(lat.tangential):
        raise InputError("model files do not match the configured lattice; rebuild")
    return N, P


@dataclass
class NormalFormResult:
    run: NormalFormRun
    code: int


def _shifts_csv(o2, lat) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["kind", "site", "before", "after", "shift"])
    sh = o2.log.frequency_shifts
    for kind, sites, after, delta in (("omega", lat.tangential, o2.omega, sh["omega"]),
                                      ("Omega", lat.normal, o2.Omega, sh["Omega"])):
        for s, a, dv in zip(sites, after, delta):
            w.writerow([kind, " ".join(str(c) for c in s), repr(float(a - dv)), repr(float(a)), repr(float(dv))])
    return buf.getvalue()


def _generators_json(gens) -> str:
    return '{"generators": [' + ", ".join(dumps_json(F) for F in gens) + "]}\n"


def load_generators(text: str) -> list:
    obj = json.loads(text)
    return [loads_json(json.dumps(g)) for g in obj["generators"]]


def stage_normal_form(ctx: RunContext, model: tuple | None = None) -> NormalFormResult | None:
    cfg = ctx.cfg
    N, P = model if model is not None else _load_model(ctx)
    mc = model_config(cfg)
    lat = build_sites(mc)
    omega, Omega, _ = split_normal(N)
    policy = divisor_policy(cfg, mc, lat)
    nf = cfg["normal_form"]
    t0 = time.perf_counter()
    try:
        o2 = order2_step(N, P, omega, Omega, policy, sweeps=nf["sweeps"], chop_rel=float(nf["chop_rel"]))
    except DivisorCollapse as exc:
        ctx.write("normal_form/summary.json", dumps({"failure": str(exc)}))
        log.error("normal-form: %s", exc)
        return None
    log.info("order-2 step done in %.1fs", time.perf_counter() - t0)
    pn = partial_normal_form(o2.N_breve, o2.R_breve, o2.omega, o2.Omega, policy, o2.constant,
                             chop_rel=float(nf["chop_rel"]))
    log.info("partial normal form done in %.1fs", time.perf_counter() - t0)
    gens = list(o2.generators) + list(pn.generators)
    violations = momentum_audit(pn.Z, pn.P, pn.Q, pn.remainder, *gens)
    summary = {
        "terms": {"Z": len(pn.Z), "P": len(pn.P), "Q": len(pn.Q), "remainder": len(pn.remainder),
                  "generators": [len(F) for F in gens]},
        "constant": complex(pn.constant),
        "remainder_l1": pn.remainder.l1(),
        "momentum_violations": violations,
        "order2": o2.log.to_dict(),
        "partial": pn.log.to_dict(),
    }
    ctx.write("normal_form/summary.json", dumps(summary))
    ctx.write("normal_form/shifts.csv", _shifts_csv(o2, lat))
    ctx.write("normal_form/Z.json", dumps_json(pn.Z))
    ctx.write(NF_H, dumps_json(pn.H))
    ctx.write(NF_GENERATORS, _generators_json(gens))
    run = NormalFormRun(N + P, pn.H, gens)
    return NormalFormResult(run, EXIT_OK if violations == 0 else EXIT_PROPERTY)


def stage_resonance(ctx: RunContext, xi=None) -> int:
    cfg = ctx.cfg
    mc = model_config(cfg)
    lat = build_sites(mc)
    if xi is None:
        xi = np.asarray(json.loads(ctx.read(BUILD_REPORT))["xi"], float)
    r = cfg["resonance"]
    rep = certify(xi, mc, ResonanceSettings(float(r["eta"]), r["M"], r["tau"], r["K_max"]), lat)
    ctx.write("resonance.json", dumps(rep.to_dict()))
    log.info("resonance: certified=%s, %d queries, min ratio %.3g", rep.certified, rep.checked_count, rep.min_ratio)
    return EXIT_OK if rep.certified else EXIT_PROPERTY


def stage_measure(ctx: RunContext) -> int:
    cfg = ctx.cfg
    mc = model_config(cfg)
    m = cfg["measure"]
    table = measure_estimate(mc, [float(e) for e in m["etas"]], m["samples"], cfg["run"]["seed"], M=m["M"],
                             tau=cfg["resonance"]["tau"], K_max=m["K_max"], lattice=build_sites(mc))
    if cfg["run"]["format"] == "csv":
        ctx.write("measure.csv", table.to_csv())
    else:
        ctx.write("measure.json", dumps(table.to_dict()))
    log.info("measure: fractions %s", table.fractions)
    return EXIT_OK


def norms_table(rep) -> str:
    lines = [f"{'degree':>6} {'terms':>8} {'upper':>14} {'lower':>14}"]
    for h, b in sorted(rep.breakdown.items()):
        lines.append(f"{h:>6} {b['terms']:>8} {b['upper']:>14.6e} {b['lower']:>14.6e}")
    lines.append(f"{'total':>6} {'':>8} {rep.value_upper:>14.6e} {rep.value_lower:>14.6e}")
    return "\n".join(lines) + "\n"


def stage_norms(ctx: RunContext) -> int:
    cfg = ctx.cfg
    P = loads_json(ctx.read(MODEL_P))
    rep = vector_field_tame_norm(P, norm_params(cfg), samples=cfg["norms"]["samples"])
    if cfg["run"]["format"] == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["degree", "terms", "upper", "lower"])
        for h, b in sorted(rep.breakdown.items()):
            w.writerow([h, b["terms"], repr(b["upper"]), repr(b["lower"])])
        ctx.write("norms.csv", buf.getvalue())
    else:
        ctx.write("norms.json", dumps(rep.to_dict()))
    sys.stdout.write(norms_table(rep))
    return EXIT_OK


def _load_run(ctx: RunContext, need_generators: bool) -> NormalFormRun:
    N, P = _load_model(ctx)
    H = loads_json(ctx.read(NF_H))
    gens = load_generators(ctx.read(NF_GENERATORS)) if need_generators else []
    return NormalFormRun(N + P, H, gens)


def stage_simulate(ctx: RunContext, run: NormalFormRun | None = None) -> int:
    cfg = ctx.cfg
    sim = cfg["simulate"]
    base = stickiness_config(cfg)
    if run is None:
        run = _load_run(ctx, need_generators=base.mode == "original")
    seed0 = cfg["run"]["seed"]
    seeds = [seed0 + i for i in range(sim["ensemble"])]
    workers = cfg["run"]["workers"]
    reports = stickiness_ensemble(base, run, seeds, workers)
    controls = []
    if sim["control"] == "disabled":
        controls = stickiness_ensemble(stickiness_config(cfg, mode="disabled"), run, seeds, workers)
    rate = max(r.drift_rate for r in reports)
    ctrl_rate = max((r.drift_rate for r in controls), default=math.nan)
    summary = {
        "max_distance": max(r.max_distance for r in reports),
        "violated": any(r.violated for r in reports),
        "failures": [r.failure for r in reports if r.failure],
        "energy_drift": max(r.energy_drift for r in reports),
        "drift_rate": rate,
        "control_drift_rate": ctrl_rate if controls else None,
        "drift_ratio": (ctrl_rate / rate if rate > 0 else None) if controls else None,
        "seeds": seeds,
    }
    if cfg["run"]["format"] == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["seed", "mode", "t", "distance", "energy"])
        for group in (reports, controls):
            for sd, r in zip(seeds, group):
                for t, d, e in r.samples:
                    w.writerow([sd, r.mode, repr(t), repr(d), repr(e)])
        ctx.write("stickiness.csv", buf.getvalue())
        ctx.write("stickiness_summary.json", dumps(summary))
    else:
        ctx.write("stickiness.json", dumps({"summary": summary, "runs": [r.to_dict() for r in reports],
                                             "controls": [r.to_dict() for r in controls]}))
    log.info("simulate: max distance %.6g (2 delta = %.3g), drift rate %.3g, control %.3g",
             summary["max_distance"], 2 * base.delta, rate, ctrl_rate)
    bad = summary["violated"] or summary["failures"]
    return EXIT_PROPERTY if bad else EXIT_OK


def stage_pipeline(ctx: RunContext) -> int:
    b = stage_build(ctx)
    nf = stage_normal_form(ctx, (b.N, b.P))
    if nf is None:
        return EXIT_PROPERTY
    codes = [b.code, nf.code, stage_resonance(ctx, b.xi), stage_simulate(ctx, nf.run)]
    return max(codes)


def _cmd_normal_form(ctx):
    res = stage_normal_form(ctx)
    return EXIT_PROPERTY if res is None else res.code


COMMANDS = {
    "build": lambda ctx: stage_build(ctx).code,
    "normal-form": _cmd_normal_form,
    "resonance": stage_resonance,
    "measure": stage_measure,
    "norms": stage_norms,
    "simulate": stage_simulate,
    "pipeline": stage_pipeline,
}


def make_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML configuration file")
    common.add_argument("--seed", type=int, help="overrides run.seed")
    common.add_argument("--workers", type=int, help="overrides run.workers")
    common.add_argument("--out-dir", help="overrides run.out_dir")
    common.add_argument("--format", choices=("json", "csv"), help="overrides run.format")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override any configuration key (repeatable)")
    common.add_argument("-q", "--quiet", action="store_true", help="only log warnings and errors")
    parser = argparse.ArgumentParser(prog="beamkam", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return parser


def resolve_config(args) -> dict:
    overrides = [parse_assignment(a) for a in args.set]
    run = {}
    for key, attr in (("seed", "seed"), ("workers", "workers"), ("out_dir", "out_dir"), ("format", "format")):
        v = getattr(args, attr)
        if v is not None:
            run[key] = v
    if run:
        overrides.append({"run": run})
    cfg = load_config(args.config, overrides)
    check_all(cfg)
    return cfg


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s",
                        stream=sys.stderr)
    try:
        cfg = resolve_config(args)
    except (ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    ctx = RunContext(cfg, args.command)
    try:
        code = COMMANDS[args.command](ctx)
    except (InputError, ConfigError, IntegrationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        code = EXIT_ERROR
    ctx.finish(code)
    return code


if __name__ == "__main__":
    sys.exit(main())

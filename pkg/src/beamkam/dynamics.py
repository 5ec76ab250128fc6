"""Symmetric splitting integration and the stickiness experiment.

The Hamiltonian is split as ``N + R`` where ``N = <omega, y> + sum Omega_j q_j qbar_j``
collects the normal terms of order two.  One step is an exact half-step of
``N`` (``x += omega dt/2``, ``q_j <- exp(i Omega_j dt/2) q_j``), an implicit
midpoint step for ``R`` and another exact half-step of ``N``.  The method is
symplectic, symmetric and of second order.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass

import numpy as np

from ._kernels import Evaluator, strang_run
from .norms import DomainParams, lp_norm, site_weights
from .phase import PhasePoint, as_state
from .series import Series, SeriesMeta


class IntegrationError(RuntimeError):
    """Raised when a step cannot be accepted; ``partial`` holds the trajectory so far."""

    def __init__(self, msg, partial=None):
        super().__init__(msg)
        self.partial = partial


# ---------------------------------------------------------------------------
# splitting

def split_normal(H: Series):
    """Return ``(omega, Omega, R)`` with ``H = N(omega, Omega) + R``.

    ``N`` takes the coefficients of ``y_i`` and ``q_j qbar_j`` (no Fourier
    dependence); everything else, the constant included, goes to ``R``.
    """
    meta = H.meta
    n, m = meta.n, meta.m
    e = H.exps
    k0 = ~np.any(e[:, :n], axis=1) if n else np.ones(len(e), bool)
    alpha, beta, gamma = e[:, n : 2 * n], e[:, 2 * n : 2 * n + m], e[:, 2 * n + m :]
    z0 = ~np.any(beta, axis=1) & ~np.any(gamma, axis=1)
    omega = np.zeros(n)
    Omega = np.zeros(m)
    take = np.zeros(len(e), bool)
    lin_y = k0 & z0 & (alpha.sum(axis=1) == 1)
    for t in np.nonzero(lin_y)[0]:
        omega[int(np.argmax(alpha[t]))] += H.coeffs[t].real
        take[t] = True
    a0 = ~np.any(alpha, axis=1)
    diag = k0 & a0 & (beta.sum(axis=1) == 1) & (gamma.sum(axis=1) == 1) & np.all(beta == gamma, axis=1)
    for t in np.nonzero(diag)[0]:
        Omega[int(np.argmax(beta[t]))] += H.coeffs[t].real
        take[t] = True
    R = H.select(~take)
    # imaginary parts of the normal coefficients would be dropped above; keep them in R
    imag = np.zeros(len(e), complex)
    imag[take] = 1j * H.coeffs[take].imag
    if np.any(imag):
        R = R + Series(meta, e[take], imag[take])
    return omega, Omega, R


def default_dt(Omega) -> float:
    """min(0.01, 2 pi / (50 max Omega)) so the fastest rotation is resolved."""
    top = float(np.abs(Omega).max()) if len(Omega) else 0.0
    return 0.01 if top == 0 else min(0.01, 2 * math.pi / (50 * top))


# ---------------------------------------------------------------------------
# trajectories

@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray         # rows [x | y | q | qbar], angles unwrapped
    energy: np.ndarray
    meta: SeriesMeta
    max_iterations: int = 0
    rejected_chunks: int = 0

    def __len__(self):
        return len(self.times)

    def point(self, i) -> PhasePoint:
        p = PhasePoint.from_state(self.states[i], self.meta.n, self.meta.m)
        p.x = np.mod(p.x.real, 2 * math.pi) + 1j * p.x.imag
        return p

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]

    def reality_defect(self) -> float:
        n, m = self.meta.n, self.meta.m
        s = self.states
        parts = [np.abs(s[:, : 2 * n].imag), np.abs(s[:, 2 * n + m :] - np.conj(s[:, 2 * n : 2 * n + m]))]
        return float(max((p.max() for p in parts if p.size), default=0.0))

    def to_csv(self, distances=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        if distances is None:
            w.writerow(["t", "energy"])
            for t, e in zip(self.times, self.energy):
                w.writerow([repr(float(t)), repr(float(e.real))])
        else:
            w.writerow(["t", "distance", "energy"])
            for t, d, e in zip(self.times, distances, self.energy):
                w.writerow([repr(float(t)), repr(float(d)), repr(float(e.real))])
        return buf.getvalue()


def energy_drift(traj: Trajectory) -> float:
    """max_t |H(w(t)) - H(w(0))| / |H(w(0))|."""
    if len(traj) == 0:
        raise ValueError("empty trajectory")
    e0 = traj.energy[0]
    dev = float(np.abs(traj.energy - e0).max())
    scale = abs(e0)
    if scale == 0:
        return dev
    return dev / scale


def integrate(H: Series, w0, T: float, dt: float | None = None, stride: int = 1, tol: float = 1e-15,
              maxit: int = 60, energy_guard: float = 1e-6, max_halvings: int = 4) -> Trajectory:
    """Integrate ``dw/dt = X_H(w)`` from ``w0`` over time ``T`` (negative ``T`` runs backward).

    ``dt > 0`` is rounded down so that ``|T|`` is an integer number of steps;
    the trajectory is sampled every ``stride`` steps.  A chunk of ``stride``
    steps whose relative energy jump exceeds ``energy_guard`` is rejected and
    redone with half the step, at most ``max_halvings`` times.
    """
    meta = H.meta
    st0 = as_state(w0, meta)
    omega, Omega, R = split_normal(H)
    dt = default_dt(Omega) if dt is None else float(dt)
    if dt <= 0:
        raise ValueError("dt must be positive")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    ev_H = H.evaluator()
    e_start = ev_H.value(st0)
    if abs(e_start.imag) > 1e-8 * max(1.0, abs(e_start)):
        raise ValueError("H is not real at the initial point")
    nsteps = int(math.ceil(abs(T) / dt - 1e-9)) if T != 0 else 0
    h = (T / nsteps) if nsteps else 0.0
    ev = Evaluator(R)
    n, m = meta.n, meta.m

    def run(state, step, count):
        out, worst = strang_run(ev.coeffs, ev.kx, ev.slot_var, ev.slot_pow, n, m, ev.kmax,
                                omega, Omega, state, step, count, count, tol, maxit)
        return out[-1], worst

    times = [0.0]
    states = [st0]
    energy = [e_start]
    worst = 0
    rejected = 0
    st = st0.copy()
    done = 0
    while done < nsteps:
        count = min(stride, nsteps - done)
        e_prev = energy[-1]
        for halving in range(max_halvings + 1):
            k = 2 ** halving
            new, used = run(st, h / k, count * k)
            e_new = ev_H.value(new)
            jump = abs(e_new - e_prev) / max(abs(e_prev), 1e-300)
            if used <= maxit and jump <= energy_guard and np.all(np.isfinite(new)):
                break
            rejected += 1
        else:
            partial = Trajectory(np.array(times), np.array(states), np.array(energy), meta, worst, rejected)
            raise IntegrationError(f"step rejected at t={times[-1]:.6g} (energy jump {jump:.3g})", partial)
        worst = max(worst, used)
        st = new
        done += count
        times.append(done * h)
        states.append(st)
        energy.append(e_new)
    return Trajectory(np.array(times), np.array(states), np.array(energy), meta, worst, rejected)


# ---------------------------------------------------------------------------
# distance to the torus {y = 0, z = 0}

def torus_distance(w, dp: DomainParams, meta: SeriesMeta | None = None) -> float:
    """||y||^(1/2) + ||q||_p with the sup norm on y; independent of the angles."""
    if isinstance(w, PhasePoint):
        y, q = w.y, w.q
        weights = site_weights(meta) if meta is not None else None
    else:
        s = as_state(w, meta)
        n, m = meta.n, meta.m
        y, q = s[n : 2 * n], s[2 * n : 2 * n + m]
        weights = site_weights(meta)
    if weights is None:
        raise ValueError("site weights need the series meta")
    ynorm = float(np.abs(y).max()) if len(y) else 0.0
    return math.sqrt(ynorm) + lp_norm(q, weights, dp.p)


def _distances(states, dp, meta):
    n, m = meta.n, meta.m
    w = site_weights(meta) ** (2 * dp.p)
    y = np.abs(states[:, n : 2 * n])
    q = states[:, 2 * n : 2 * n + m]
    ysup = y.max(axis=1) if n else np.zeros(len(states))
    return np.sqrt(ysup) + np.sqrt((np.abs(q) ** 2 * w).sum(axis=1))


def sample_initial(meta: SeriesMeta, delta: float, dp: DomainParams, rng) -> PhasePoint:
    """A real point at torus distance ``delta`` with random angles and a random (y, z) direction.

    A fraction ``theta ~ U(0, 1)`` of the distance goes to ``||y||^(1/2)``, the
    rest to ``||q||_p``.
    """
    n, m = meta.n, meta.m
    theta = rng.uniform(0.0, 1.0) if m else 1.0
    x = rng.uniform(0.0, 2 * math.pi, n)
    v = rng.standard_normal(n)
    y = (theta * delta) ** 2 * v / np.abs(v).max() if n else v
    g = rng.standard_normal(m) + 1j * rng.standard_normal(m)
    q = (1 - theta) * delta * g / lp_norm(g, site_weights(meta), dp.p) if m else g
    return PhasePoint(x, y, q)


# ---------------------------------------------------------------------------
# stickiness experiment

@dataclass
class StickinessConfig:
    delta: float = 0.05
    M: int = 2
    p: int = 3
    dbase: int = 2
    s: float = 0.5
    rho: float = 0.1
    horizon: float | None = None       # default delta^(-M)
    dt: float | None = None
    samples: int = 400                 # per direction
    seed: int = 0
    mode: str = "transformed"          # transformed | original | disabled
    sim_chop_rel: float = 1e-5
    energy_guard: float = 1e-6

    def __post_init__(self):
        if self.mode not in ("transformed", "original", "disabled"):
            raise ValueError("mode must be transformed, original or disabled")
        if not (0 < self.delta < self.rho):
            raise ValueError("need 0 < delta < rho")

    @property
    def T(self) -> float:
        return self.horizon if self.horizon is not None else self.delta ** (-self.M)

    @property
    def dp(self) -> DomainParams:
        return DomainParams(self.s, self.rho, self.p, self.dbase)


@dataclass
class NormalFormRun:
    """What the experiment needs from a completed run: the original Hamiltonian,
    the transformed one and the generators in the order they were applied."""

    H_original: Series
    H_transformed: Series
    generators: list

    @classmethod
    def from_outputs(cls, H_original: Series, order2, partial):
        return cls(H_original, partial.H, list(order2.generators) + list(partial.generators))


@dataclass
class StickinessReport:
    delta: float
    M: int
    horizon: float
    max_distance: float
    first_violation_time: float | None
    energy_drift: float
    samples: list                       # (t, distance, energy), backward times negative
    mode: str = "transformed"
    distance0: float = 0.0
    drift_rate: float = 0.0             # max |d(t) - d(0)| / horizon
    chopped_mass: float = 0.0
    failure: str | None = None

    def __post_init__(self):
        if self.samples:
            assert abs(self.max_distance - max(d for _, d, _ in self.samples)) <= 1e-15 * max(1.0, self.max_distance)

    @property
    def violated(self) -> bool:
        return self.max_distance > 2 * self.delta

    def to_dict(self) -> dict:
        return {"delta": self.delta, "M": self.M, "horizon": self.horizon, "mode": self.mode,
                "max_distance": self.max_distance, "violated": self.violated,
                "first_violation_time": self.first_violation_time, "energy_drift": self.energy_drift,
                "distance0": self.distance0, "drift_rate": self.drift_rate,
                "chopped_mass": self.chopped_mass, "failure": self.failure,
                "samples": [[t, d, e] for t, d, e in self.samples]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "distance", "energy"])
        for t, d, e in self.samples:
            w.writerow([repr(t), repr(d), repr(e)])
        return buf.getvalue()


def simulation_hamiltonian(H: Series, chop_rel: float):
    """Drop non-normal terms with ``|c| < chop_rel * max|c|`` (over non-normal terms);
    returns the trimmed series and the l1 mass removed."""
    omega, Omega, R = split_normal(H)
    if len(R) == 0 or chop_rel <= 0:
        return H, 0.0
    a = np.abs(R.coeffs)
    keep = a >= chop_rel * a.max()
    N = H - R
    return N + R.select(keep), float(a[~keep].sum())


def stickiness_experiment(cfg: StickinessConfig, run: NormalFormRun) -> StickinessReport:
    """Start at torus distance delta and record the distance up to |t| <= horizon.

    ``transformed`` integrates the transformed Hamiltonian in normal-form
    coordinates; ``original`` integrates the original Hamiltonian from the
    mapped initial point and maps every sample back before measuring;
    ``disabled`` integrates the original Hamiltonian and measures in the
    original coordinates (control run without normal form).
    """
    from .normal_form import compose_transform

    dp = cfg.dp
    meta = run.H_transformed.meta
    rng = np.random.default_rng(cfg.seed)
    w0 = sample_initial(meta, cfg.delta, dp, rng).to_state()
    if cfg.mode == "transformed":
        H, chopped = simulation_hamiltonian(run.H_transformed, cfg.sim_chop_rel)
        start = w0
    else:
        H, chopped = simulation_hamiltonian(run.H_original, cfg.sim_chop_rel)
        start = w0
        if cfg.mode == "original":
            start = compose_transform(run.generators, w0, "forward").point.to_state()
    T = cfg.T
    _, Omega, _ = split_normal(H)
    dt = cfg.dt or default_dt(Omega)
    nsteps = int(math.ceil(T / dt - 1e-9))
    stride = max(1, nsteps // max(cfg.samples, 1))

    rows = []
    failure = None
    drifts = []
    for sign in (1.0, -1.0):
        try:
            traj = integrate(H, start, sign * T, dt, stride=stride, energy_guard=cfg.energy_guard)
        except IntegrationError as exc:
            traj = exc.partial
            failure = str(exc)
        states = traj.states
        if cfg.mode == "original":
            states = np.array([compose_transform(run.generators, s, "inverse").point.to_state() for s in states])
        d = _distances(states, dp, meta)
        drifts.append(energy_drift(traj))
        idx = range(len(traj)) if sign > 0 else range(1, len(traj))
        for i in idx:
            rows.append((float(traj.times[i]), float(d[i]), float(traj.energy[i].real)))
        if failure:
            break
    rows.sort(key=lambda r: r[0])
    dist = np.array([r[1] for r in rows])
    times = np.array([r[0] for r in rows])
    d0 = float(dist[np.argmin(np.abs(times))])
    over = np.nonzero(dist > 2 * cfg.delta)[0]
    first = float(times[over[np.argmin(np.abs(times[over]))]]) if len(over) else None
    return StickinessReport(cfg.delta, cfg.M, T, float(dist.max()), first, float(max(drifts)), rows, cfg.mode,
                            d0, float(np.abs(dist - d0).max() / T), chopped, failure)


def stickiness_ensemble(cfg: StickinessConfig, run: NormalFormRun, seeds, workers: int = 1) -> list:
    """Independent experiments per seed; results are returned in seed order."""
    from dataclasses import replace

    cfgs = [replace(cfg, seed=int(s)) for s in seeds]
    if workers <= 1 or len(cfgs) <= 1:
        return [stickiness_experiment(c, run) for c in cfgs]
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(stickiness_experiment, cfgs, [run] * len(cfgs)))

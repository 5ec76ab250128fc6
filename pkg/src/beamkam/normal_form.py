"""Homological equation, Lie transforms and the two normal-form drivers.

Conventions: the transformed Hamiltonian is ``H o Phi_F`` with ``Phi_F`` the
time-one flow of ``X_F`` and is computed by the Lie series
``sum_i H^(i) / i!`` with ``H^(i) = {H^(i-1), F}``.  For a monomial ``R`` with
divisor ``D = <k, omega> + sum_j (beta_j - gamma_j) Omega_j`` one has
``{R, N} = i D R``, so ``F = R / (i D)`` solves ``{N, F} + R = 0``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .beam_model import SiteLattice, normal_part
from .norms import DomainParams, NormReport, vector_field_tame_norm, weighted_phase_norm
from .phase import PhasePoint
from .resonance import log_threshold
from .series import Series, SeriesMeta, poisson_bracket


class NonTerminatingGenerator(ValueError):
    pass


class DivisorCollapse(RuntimeError):
    def __init__(self, msg, offending):
        super().__init__(msg)
        self.offending = offending


# ---------------------------------------------------------------------------
# term classification

def term_divisors(W: Series, omega, Omega) -> np.ndarray:
    return W.k @ np.asarray(omega, float) + (W.beta - W.gamma) @ np.asarray(Omega, float)


def is_normal_low(W: Series) -> np.ndarray:
    """Terms of order <= 2 with k = 0 and beta = gamma: constants, y_i and q_j qbar_j."""
    return (W.orders <= 2) & (W.k_abs == 0) & (W.beta == W.gamma).all(axis=1)


def high_counts(W: Series, high_mask) -> np.ndarray:
    """|mu| + |nu|: total power of the high normal variables per term."""
    return (W.beta[:, high_mask] + W.gamma[:, high_mask]).sum(axis=1)


def is_z_form(W: Series, high_mask, M: int) -> np.ndarray:
    """y^a qt^b qtbar^b qh^mu qhbar^mu with |mu| <= 1 and 4 <= order <= M + 2."""
    o = W.orders
    return ((W.k_abs == 0) & (W.beta == W.gamma).all(axis=1) & (W.beta[:, high_mask].sum(axis=1) <= 1)
            & (o >= 4) & (o <= M + 2))


@dataclass
class DivisorPolicy:
    """Per-term thresholds: the non-resonance thresholds plus an absolute floor."""

    eta: float
    N: float
    M: int
    tau: float
    low_mask: np.ndarray
    floor: float = 1e-12

    @classmethod
    def for_lattice(cls, lattice: SiteLattice, N: float, eta: float, M: int, tau: float, floor: float = 1e-12):
        sq = np.array([sum(c * c for c in s) for s in lattice.normal], float)
        return cls(eta, N, M, tau, sq <= N ** 2 + 1e-9, floor)

    @property
    def high_mask(self):
        return ~self.low_mask

    def thresholds(self, W: Series) -> np.ndarray:
        l = W.beta - W.gamma
        t = np.exp(log_threshold(W.k_abs, np.abs(l[:, self.low_mask]).sum(axis=1),
                                 self.eta, self.N, self.M, self.tau))
        return np.maximum(t, self.floor)


# ---------------------------------------------------------------------------
# homological equation and Lie transforms

@dataclass
class GeneratorSolveResult:
    F: Series
    unresolved: Series
    divisor_stats: dict
    residual: float


def solve_homological(R_kill: Series, omega, Omega, policy: DivisorPolicy | None = None,
                      floor: float = 1e-12, check: bool = True) -> GeneratorSolveResult:
    """F = R / (i D) term-wise for divisors above threshold; the rest is returned unresolved.

    ``residual`` is the relative l1 size of ``{N, F} + (R_kill - unresolved)``.
    """
    meta = R_kill.meta
    D = term_divisors(R_kill, omega, Omega)
    thr = policy.thresholds(R_kill) if policy is not None else np.full(len(D), floor)
    ok = np.abs(D) >= thr
    solved, unresolved = R_kill.split(ok)
    F = Series(meta, solved.exps, solved.coeffs / (1j * D[ok]), _canonical=True)
    stats = {
        "min_abs_divisor": float(np.abs(D[ok]).min()) if ok.any() else math.nan,
        "max_abs_divisor": float(np.abs(D[ok]).max()) if ok.any() else math.nan,
        "solved": int(ok.sum()),
        "unresolved": int((~ok).sum()),
    }
    residual = 0.0
    if check and len(F):
        N = normal_part(meta, omega, Omega)
        res = poisson_bracket(N, F) + solved
        residual = res.l1() / max(solved.l1(), 1e-300)
        if residual > 1e-10:
            raise ArithmeticError(f"homological residual {residual:.3e} exceeds 1e-10")
    return GeneratorSolveResult(F, unresolved, stats, residual)


@dataclass
class LieTransformResult:
    H: Series
    iterations: int
    dropped_mass: float


def lie_transform(H: Series, F: Series, tol: float | None = None, max_iter: int = 200,
                  chop: float = 0.0) -> LieTransformResult:
    """H o Phi_F = sum_i H^(i)/i! with H^(i) = {H^(i-1), F}, truncated to the caps.

    If every term of F has order >= 3 each bracket raises the order and the sum
    terminates under the degree cap.  Lower-order generators need ``tol``: the
    sum stops once an increment has relative l1 size below it.  ``chop`` is
    passed to the brackets; skipped products count towards ``dropped_mass``.
    """
    if len(F) == 0:
        return LieTransformResult(H, 0, 0.0)
    if F.orders.min() <= 2 and tol is None:
        raise NonTerminatingGenerator("generator has terms of order <= 2; pass tol")
    total = H
    term = H
    dropped = 0.0
    for i in range(1, max_iter + 1):
        term = poisson_bracket(term, F, chop)
        dropped += term.dropped_mass / i
        term = term * (1.0 / i)
        if len(term) == 0:
            return LieTransformResult(total, i - 1, dropped)
        total = total + term
        if tol is not None and term.l1() <= tol * max(total.l1(), 1e-300):
            return LieTransformResult(total, i, dropped)
    raise NonTerminatingGenerator(f"Lie series did not converge in {max_iter} brackets")


# ---------------------------------------------------------------------------
# order-2 normal form

@dataclass
class NormalFormLog:
    stage: str
    frequency_shifts: dict | None
    norms_before: dict
    norms_after: dict
    transform_displacement: float
    dropped_mass: float
    details: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.transform_displacement < 0:
            raise ValueError("displacement must be nonnegative")
        if self.stage == "partial" and self.frequency_shifts:
            raise ValueError("frequency shifts belong to the order-2 stage")

    def to_dict(self) -> dict:
        def conv(v):
            if isinstance(v, NormReport):
                return v.to_dict()
            if isinstance(v, np.ndarray):
                return [conv(x) for x in v.tolist()]
            if isinstance(v, dict):
                return {str(k): conv(x) for k, x in v.items()}
            if isinstance(v, (list, tuple)):
                return [conv(x) for x in v]
            if isinstance(v, (np.floating, np.integer)):
                return v.item()
            if isinstance(v, complex):
                return [v.real, v.imag]
            return v

        return conv({
            "stage": self.stage,
            "frequency_shifts": self.frequency_shifts,
            "norms_before": self.norms_before,
            "norms_after": self.norms_after,
            "transform_displacement": self.transform_displacement,
            "dropped_mass": self.dropped_mass,
            "details": self.details,
        })


def _absorb_normal(R: Series, omega, Omega):
    """Move constant, y_i and q_j qbar_j terms (real parts) into the frequencies."""
    meta = R.meta
    n, m = meta.n, meta.m
    mask = is_normal_low(R)
    normal, rest = R.split(mask)
    omega = np.array(omega, float)
    Omega = np.array(Omega, float)
    const = 0j
    leftover = []
    for e, c in zip(normal.exps, normal.coeffs):
        a = e[n : 2 * n]
        b = e[2 * n : 2 * n + m]
        if a.sum() == 1:
            omega[int(np.argmax(a))] += c.real
        elif b.sum() == 1:
            Omega[int(np.argmax(b))] += c.real
        else:
            const += c
            continue
        if c.imag != 0:
            leftover.append((e, 1j * c.imag))
    if leftover:
        rest = rest + Series(meta, np.array([e for e, _ in leftover]), np.array([c for _, c in leftover]))
    return omega, Omega, const, rest


def _norm_summary(W: Series, dp: DomainParams | None, samples: int = 8):
    if dp is None or len(W) == 0:
        return {"upper": 0.0, "lower": 0.0, "terms": len(W)} if dp is not None else {"terms": len(W)}
    rep = vector_field_tame_norm(W, dp, samples=samples)
    return {"upper": rep.value_upper, "lower": rep.value_lower, "terms": len(W)}


@dataclass
class Order2Result:
    N_breve: Series
    R_breve: Series
    omega: np.ndarray
    Omega: np.ndarray
    constant: complex
    generators: list
    log: NormalFormLog

    @property
    def H(self) -> Series:
        return self.N_breve + self.R_breve + Series.constant(self.N_breve.meta, self.constant)


def order2_step(N: Series, P: Series, omega, Omega, policy: DivisorPolicy | None = None, sweeps: int = 3,
                dp: DomainParams | None = None, lie_tol: float = 1e-17, chop_rel: float = 1e-14,
                fail_on_collapse: bool = True) -> Order2Result:
    """Remove the non-normal part of order <= 2 by finitely many KAM-style sweeps.

    Each sweep absorbs the normal terms of order <= 2 into the frequencies,
    solves the homological equation for the remaining order <= 2 terms against
    the current frequencies and applies the Lie transform.  Elementary
    products below ``chop_rel * max|P|`` are skipped (and accounted as dropped).
    """
    meta = N.meta
    omega0, Omega0 = np.array(omega, float), np.array(Omega, float)
    om, Om = omega0.copy(), Omega0.copy()
    R = P
    chop = chop_rel * (float(np.abs(P.coeffs).max()) if len(P) else 0.0)
    const = 0j
    gens = []
    dropped = 0.0
    disp = 0.0
    sweep_info = []
    before = _norm_summary(P, dp)
    for sw in range(sweeps):
        om, Om, c, R = _absorb_normal(R, om, Om)
        const += c
        low = R.orders <= 2
        if not low.any():
            break
        kill = R.select(low)
        sol = solve_homological(kill, om, Om, policy)
        if len(sol.F) == 0:
            if fail_on_collapse:
                raise DivisorCollapse("every order <= 2 term is resonant", sol.unresolved)
            break
        Ncur = normal_part(meta, om, Om)
        res = lie_transform(Ncur + R, sol.F, tol=lie_tol, chop=chop)
        gens.append(sol.F)
        dropped += res.dropped_mass
        if dp is not None:
            disp += vector_field_tame_norm(sol.F, dp, samples=4).value_upper
        R = res.H - Ncur
        sweep_info.append({"sweep": sw, "killed_l1": kill.l1(), "generator_terms": len(sol.F),
                           "unresolved": sol.divisor_stats["unresolved"], "residual": sol.residual,
                           "iterations": res.iterations, "min_divisor": sol.divisor_stats["min_abs_divisor"]})
    om, Om, c, R = _absorb_normal(R, om, Om)
    const += c
    low = R.orders <= 2
    residual_low = R.select(low)
    N_breve = normal_part(meta, om, Om)
    shifts = {"omega": om - omega0, "Omega": Om - Omega0,
              "max_abs_omega": float(np.abs(om - omega0).max()) if len(om) else 0.0,
              "max_weighted_Omega": float(np.max(np.abs(Om - Omega0) * np.maximum(
                  np.sum(meta.site_array.astype(float) ** 2, axis=1), 1.0))) if len(Om) else 0.0}
    log = NormalFormLog("order2", shifts, before, _norm_summary(R, dp), disp, dropped, {
        "sweeps": sweep_info,
        "residual_low_l1": residual_low.l1(),
        "residual_low_max": float(np.abs(residual_low.coeffs).max()) if len(residual_low) else 0.0,
    })
    return Order2Result(N_breve, R, om, Om, const, gens, log)


# ---------------------------------------------------------------------------
# partial normal form of order M + 2

@dataclass
class PartialNormalFormOutput:
    N_breve: Series
    Z: Series
    P: Series
    Q: Series
    remainder: Series      # order <= M+2 non-Z terms left in place (resonant or order <= 2 residue)
    constant: complex
    generators: list
    log: NormalFormLog

    @property
    def H(self) -> Series:
        return self.N_breve + self.Z + self.P + self.Q + self.remainder + Series.constant(self.N_breve.meta,
                                                                                          self.constant)

    def check_invariants(self, high_mask, M: int):
        hc = lambda W: high_counts(W, high_mask)
        assert is_z_form(self.Z, high_mask, M).all()
        assert (self.P.orders >= M + 3).all() and (hc(self.P) <= 2).all()
        assert (hc(self.Q) >= 3).all()


def classify(R: Series, high_mask, M: int):
    """Split into (Z, P, Q, remainder) by the partial-normal-form rules."""
    hc = high_counts(R, high_mask)
    q = hc >= 3
    z = ~q & is_z_form(R, high_mask, M)
    p = ~q & ~z & (R.orders >= M + 3)
    rest = ~(q | z | p)
    return R.select(z), R.select(p), R.select(q), R.select(rest)


def partial_normal_form(N_breve: Series, R_breve: Series, omega, Omega, policy: DivisorPolicy,
                        constant: complex = 0j, dp: DomainParams | None = None,
                        rhos=(0.1, 0.05, 0.025), chop_rel: float = 1e-14) -> PartialNormalFormOutput:
    """Kill, order by order from 3 to M+2, every term with at most two high factors
    that is not of Z-form; terms with three or more high factors stay in Q."""
    M = policy.M
    high = policy.high_mask
    R = R_breve
    chop = chop_rel * (float(np.abs(R.coeffs).max()) if len(R) else 0.0)
    gens = []
    dropped = 0.0
    disp = 0.0
    steps = []
    for h in range(3, M + 3):
        o = R.orders
        target = (o == h) & (high_counts(R, high) <= 2) & ~is_z_form(R, high, M)
        if not target.any():
            steps.append({"order": h, "killed": 0})
            continue
        kill = R.select(target)
        sol = solve_homological(kill, omega, Omega, policy)
        if len(sol.F):
            res = lie_transform(N_breve + R, sol.F, chop=chop)
            R = res.H - N_breve
            gens.append(sol.F)
            dropped += res.dropped_mass
            if dp is not None:
                disp += vector_field_tame_norm(sol.F, dp, samples=4).value_upper
        steps.append({"order": h, "killed": sol.divisor_stats["solved"],
                      "unresolved": sol.divisor_stats["unresolved"], "residual": sol.residual,
                      "generator_terms": len(sol.F), "min_divisor": sol.divisor_stats["min_abs_divisor"]})
    Z, P, Q, rest = classify(R, high, M)
    norms = {}
    if dp is not None:
        for rho in rhos:
            dpr = DomainParams(dp.s, rho, dp.p, dp.dbase)
            norms[rho] = {name: _norm_summary(W, dpr, samples=4) for name, W in
                          (("Z", Z), ("P", P), ("Q", Q), ("R_breve", R_breve))}
    log = NormalFormLog("partial", None, {"R_breve_terms": len(R_breve)}, norms, disp, dropped, {
        "steps": steps,
        "terms": {"Z": len(Z), "P": len(P), "Q": len(Q), "remainder": len(rest)},
        "remainder_l1": rest.l1(),
    })
    return PartialNormalFormOutput(N_breve, Z, P, Q, rest, constant, gens, log)


# ---------------------------------------------------------------------------
# flows of generators

def hamiltonian_rhs(F: Series, sign: float = 1.0):
    """Right-hand side of dw/dt = sign * X_F(w) on the flat state [x | y | q | qbar]."""
    meta = F.meta
    n, m = meta.n, meta.m
    ev = F.evaluator()

    def rhs(t, state):
        _, g = ev.gradient(state)
        out = np.empty_like(g)
        out[:n] = g[n : 2 * n]
        out[n : 2 * n] = -g[:n]
        out[2 * n : 2 * n + m] = 1j * g[2 * n + m :]
        out[2 * n + m :] = -1j * g[2 * n : 2 * n + m]
        return sign * out

    return rhs


def flow(F: Series, state, t: float = 1.0, rtol: float = 1e-12, atol: float = 1e-14):
    """Time-t flow of X_F by DOP853."""
    from scipy.integrate import solve_ivp

    state = np.asarray(state, complex)
    if len(F) == 0 or t == 0:
        return state.copy()
    sol = solve_ivp(hamiltonian_rhs(F, np.sign(t)), (0.0, abs(t)), state, method="DOP853",
                    rtol=rtol, atol=atol)
    if not sol.success:
        raise RuntimeError(sol.message)
    return sol.y[:, -1]


@dataclass
class TransformResult:
    point: PhasePoint
    displacement: float | None
    inside_domain: bool


def _inside(state, meta: SeriesMeta, dp: DomainParams) -> bool:
    from .norms import site_weights, znorm

    n, m = meta.n, meta.m
    w = site_weights(meta)
    x, y = state[:n], state[n : 2 * n]
    q, qb = state[2 * n : 2 * n + m], state[2 * n + m :]
    return bool(np.all(np.abs(x.imag) < dp.s) and np.all(np.abs(y) < dp.r ** 2)
                and znorm(q, qb, w, dp.p) < dp.r)


def compose_transform(generators, w, direction: str = "forward", dp: DomainParams | None = None,
                      rtol: float = 1e-12, atol: float = 1e-14) -> TransformResult:
    """Apply the generator flows to a point.

    ``generators`` are in the order they were applied during the normal form,
    so ``H_final = H o Phi_1 o ... o Phi_k``.  ``forward`` maps normal-form
    coordinates to the original ones (``Phi_k`` first); ``inverse`` undoes it.
    """
    if direction not in ("forward", "inverse"):
        raise ValueError("direction must be 'forward' or 'inverse'")
    if not generators:
        return TransformResult(w, 0.0, True)
    meta = generators[0].meta
    st0 = w.to_state() if isinstance(w, PhasePoint) else np.asarray(w, complex)
    st = st0.copy()
    seq = list(reversed(generators)) if direction == "forward" else list(generators)
    t = 1.0 if direction == "forward" else -1.0
    inside = True
    for F in seq:
        st = flow(F, st, t, rtol, atol)
        if dp is not None:
            inside &= _inside(st, meta, dp)
    disp = None
    if dp is not None:
        diff = PhasePoint.from_state(st - st0, meta.n, meta.m)
        disp = weighted_phase_norm(diff, dp, meta)
    return TransformResult(PhasePoint.from_state(st, meta.n, meta.m), disp, inside)

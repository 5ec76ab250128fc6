"""Small divisors, (eta, N, M)-non-resonance certification and resonant-set measure.

A query ``(k, l_low, l_high)`` stands for the divisor

    D = <k, omega> + <l_low, Omega_low> + <l_high, Omega_high>

with low sites ``|j| <= N`` and high sites ``|j| > N``.  It must stay above

    eta / (4^{3M} (|k|+1)^tau N^{3(|l_low|+4)^2})

whenever ``|k|+|l| != 0``, ``|l_low|+|l_high| <= M+2`` and ``|l_high| <= 2``.
Queries are stored up to an overall sign (``D`` and ``-D`` have the same size).
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .beam_model import FrequencyMap, ModelConfig, SiteLattice, build_sites


class ResonanceConfigError(ValueError):
    pass


CLASSES = ("L0", "L1", "L2plus", "L2minus")


@dataclass
class ResonanceSettings:
    eta: float = 1e-3
    M: int = 2
    tau: float | None = None       # default 2n + 6
    K_max: int | None = None       # default: the model's Fourier cap

    def resolve(self, cfg: ModelConfig) -> "ResonanceSettings":
        tau = 2 * cfg.n + 6 if self.tau is None else self.tau
        K = cfg.fourier_cap if self.K_max is None else self.K_max
        out = ResonanceSettings(self.eta, self.M, tau, K)
        out.validate(cfg.n)
        return out

    def validate(self, n: int):
        if not self.eta > 0:
            raise ResonanceConfigError("eta must be positive")
        if self.M < 0:
            raise ResonanceConfigError("M must be >= 0")
        if self.tau is not None and not self.tau > 2 * n + 5:
            raise ResonanceConfigError(f"tau must exceed 2n+5 = {2 * n + 5}")
        if self.K_max is not None and self.K_max < 0:
            raise ResonanceConfigError("K_max must be >= 0")


def _high_class(l_high) -> str:
    vals = sorted(v for _, v in l_high)
    tot = sum(abs(v) for v in vals)
    if tot == 0:
        return "L0"
    if tot == 1:
        return "L1"
    if len(vals) == 2 and vals[0] * vals[1] < 0:
        return "L2minus"
    return "L2plus"


@dataclass(frozen=True)
class ResonanceQuery:
    k: tuple
    l_low: tuple = ()      # ((site, coeff), ...) sorted by site, coeff != 0
    l_high: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "k", tuple(int(v) for v in self.k))
        for name in ("l_low", "l_high"):
            items = dict(getattr(self, name))
            clean = tuple(sorted((tuple(s), int(v)) for s, v in items.items() if v != 0))
            object.__setattr__(self, name, clean)
        if self.k_norm + self.low_norm + self.high_norm == 0:
            raise ValueError("query must be nonzero")
        if self.high_norm > 2:
            raise ValueError("|l_high| must be <= 2")

    @property
    def k_norm(self) -> int:
        return sum(abs(v) for v in self.k)

    @property
    def low_norm(self) -> int:
        return sum(abs(v) for _, v in self.l_low)

    @property
    def high_norm(self) -> int:
        return sum(abs(v) for _, v in self.l_high)

    @property
    def cls(self) -> str:
        return _high_class(self.l_high)

    def canonical(self) -> "ResonanceQuery":
        flat = list(self.k) + [v for _, v in self.l_low] + [v for _, v in self.l_high]
        first = next(v for v in flat if v != 0)
        if first > 0:
            return self
        return ResonanceQuery(tuple(-v for v in self.k), tuple((s, -v) for s, v in self.l_low),
                              tuple((s, -v) for s, v in self.l_high))


@dataclass
class ResonanceReport:
    xi: np.ndarray
    violations: list
    certified: bool
    pruned_count: int
    checked_count: int
    min_ratio: float
    tail_threshold: float

    def __post_init__(self):
        assert self.certified == (len(self.violations) == 0)

    def to_dict(self) -> dict:
        return {
            "xi": [float(v) for v in self.xi],
            "certified": bool(self.certified),
            "checked": int(self.checked_count),
            "pruned": int(self.pruned_count),
            "min_ratio": float(self.min_ratio),
            "tail_threshold": float(self.tail_threshold),
            "violations": [
                {"k": list(q.k), "l_low": [[list(s), v] for s, v in q.l_low],
                 "l_high": [[list(s), v] for s, v in q.l_high], "class": q.cls,
                 "divisor": float(D), "threshold": float(t)}
                for q, D, t in self.violations
            ],
        }


def divisor(q: ResonanceQuery, omega, Omega, lattice: SiteLattice) -> float:
    """<k, omega> + sum_j l_j Omega_j over the sites named by the query."""
    omega = np.asarray(omega, float)
    if len(q.k) != len(omega):
        raise ValueError("k and omega lengths differ")
    pos = {s: i for i, s in enumerate(lattice.normal)}
    val = float(np.dot(q.k, omega))
    for s, v in q.l_low + q.l_high:
        if s not in pos:
            raise KeyError(f"site {s} has no normal frequency")
        val += v * Omega[pos[s]]
    return val


def log_threshold(k_norm, low_norm, eta, N, M, tau):
    """Natural log of eta / (4^{3M} (|k|+1)^tau N^{3(|l_low|+4)^2}); vectorized."""
    k_norm = np.asarray(k_norm, float)
    low_norm = np.asarray(low_norm, float)
    logN = math.log(N) if N > 0 else 0.0
    return (math.log(eta) - 3 * M * math.log(4.0) - tau * np.log1p(k_norm)
            - 3 * (low_norm + 4) ** 2 * logN)


def threshold(q: ResonanceQuery, eta: float, N: float, M: int, tau: float, n: int | None = None) -> float:
    n = len(q.k) if n is None else n
    if not tau > 2 * n + 5:
        raise ResonanceConfigError(f"tau must exceed 2n+5 = {2 * n + 5}")
    return float(np.exp(log_threshold(q.k_norm, q.low_norm, eta, N, M, tau)))


def _lattice_vectors(dim: int, max_norm: int):
    """All integer vectors of given length with l1 norm <= max_norm, grouped by norm."""
    if dim == 0:
        return np.zeros((1, 0), np.int64)
    rng = range(-max_norm, max_norm + 1)
    pts = np.array(list(itertools.product(rng, repeat=dim)), dtype=np.int64).reshape(-1, dim)
    pts = pts[np.abs(pts).sum(axis=1) <= max_norm]
    order = np.lexsort(pts.T[::-1])
    pts = pts[order]
    return pts[np.argsort(np.abs(pts).sum(axis=1), kind="stable")]


def _high_patterns(mh: int):
    """Rows of Z^{mh} with l1 norm <= 2 and their class labels."""
    rows, cls = [np.zeros(mh, np.int64)], ["L0"]
    for i in range(mh):
        for s in (1, -1):
            r = np.zeros(mh, np.int64)
            r[i] = s
            rows.append(r)
            cls.append("L1")
    for i in range(mh):
        for j in range(i, mh):
            for s in (1, -1):
                r = np.zeros(mh, np.int64)
                r[i] += s
                r[j] += s
                rows.append(r)
                cls.append("L2plus")
    for i in range(mh):
        for j in range(mh):
            if i != j:
                r = np.zeros(mh, np.int64)
                r[i] = 1
                r[j] = -1
                rows.append(r)
                cls.append("L2minus")
    return np.array(rows).reshape(-1, mh), np.array(cls)


@dataclass
class QuerySet:
    """Sign-canonical queries as dense integer arrays.

    ``K`` is (Q, n); ``L`` is (Q, m) over ``lattice.normal``.  ``pruned`` holds
    the queries removed because the divisor cannot drop below 1 on the box.
    """

    lattice: SiteLattice
    K: np.ndarray
    L: np.ndarray
    cls: np.ndarray
    low_mask: np.ndarray
    pruned: "QuerySet | None" = None
    a_priori_large_pairs: int = 0
    counts: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.K)

    @property
    def k_norm(self):
        return np.abs(self.K).sum(axis=1)

    @property
    def low_norm(self):
        return np.abs(self.L[:, self.low_mask]).sum(axis=1)

    @property
    def high_norm(self):
        return np.abs(self.L[:, ~self.low_mask]).sum(axis=1)

    def query(self, i: int) -> ResonanceQuery:
        lat = self.lattice
        low = {lat.normal[j]: int(v) for j, v in enumerate(self.L[i]) if v and self.low_mask[j]}
        high = {lat.normal[j]: int(v) for j, v in enumerate(self.L[i]) if v and not self.low_mask[j]}
        return ResonanceQuery(tuple(self.K[i]), low, high)

    def __iter__(self):
        for i in range(len(self)):
            yield self.query(i)

    def divisors(self, omega, Omega) -> np.ndarray:
        """Divisors for one frequency vector (1-D) or a batch (2-D, one row per sample)."""
        om = np.atleast_2d(np.asarray(omega, float))
        Om = np.atleast_2d(np.asarray(Omega, float))
        D = self.K @ om.T + self.L @ Om.T
        return D[:, 0] if np.ndim(omega) == 1 else D

    def log_thresholds(self, eta, N, M, tau):
        return log_threshold(self.k_norm, self.low_norm, eta, N, M, tau)


def _affine_range(c, V, lo, hi):
    """Range of c + V @ xi over the box [lo, hi]^P, row-wise."""
    pos = np.where(V > 0, V * hi, V * lo).sum(axis=1)
    neg = np.where(V > 0, V * lo, V * hi).sum(axis=1)
    return c + neg, c + pos


def enumerate_queries(n: int, N: float, M: int, K_max: int, lattice: SiteLattice,
                      param_box=(0.0, 1.0), prune: bool = True) -> QuerySet:
    """Every sign-canonical query with |k| <= K_max, |l_low|+|l_high| <= M+2, |l_high| <= 2.

    A query is pruned when its divisor, an affine function of xi before
    corrections, stays at least 1 in absolute value over the whole box: no
    threshold (all are below 1 for eta < 1) can be violated there.
    """
    if K_max < 0 or M < 0:
        raise ValueError("caps must be nonnegative")
    lo, hi = param_box
    normal = lattice.normal
    m = len(normal)
    sq = np.array([sum(c * c for c in s) for s in normal], float)
    low_mask = sq <= N ** 2 + 1e-9
    low_idx = np.nonzero(low_mask)[0]
    high_idx = np.nonzero(~low_mask)[0]
    tsq = np.array([sum(c * c for c in s) for s in lattice.tangential], float)
    budget = M + 2
    Ks = _lattice_vectors(n, K_max)
    Ls = _lattice_vectors(len(low_idx), budget)
    Hs, Hcls = _high_patterns(len(high_idx))
    hnorm = np.abs(Hs).sum(axis=1)
    lnorm = np.abs(Ls).sum(axis=1)
    # base = (k, l_low); divisor = c_b + V_b xi + c_h + V_h xi (disjoint sites)
    kb = np.repeat(np.arange(len(Ks)), len(Ls))
    lb = np.tile(np.arange(len(Ls)), len(Ks))
    B_K, B_L = Ks[kb], Ls[lb]
    c_b = B_K @ tsq + B_L @ sq[low_idx]
    Vb = np.concatenate([B_K, B_L], axis=1).astype(float)
    blo, bhi = _affine_range(c_b, Vb, lo, hi)
    c_h = Hs @ sq[high_idx]
    hlo, hhi = _affine_range(c_h, Hs.astype(float), lo, hi)
    b_zero = (np.abs(B_K).sum(axis=1) + lnorm[lb]) == 0
    # sign of the first nonzero entry of the base part (0 if base is zero)
    flatb = np.concatenate([B_K, B_L], axis=1)
    nzb = flatb != 0
    first_b = np.where(nzb.any(axis=1), flatb[np.arange(len(flatb)), nzb.argmax(axis=1)], 0)
    nzh = Hs != 0
    first_h = np.where(nzh.any(axis=1), Hs[np.arange(len(Hs)), nzh.argmax(axis=1)], 0)

    keep_K, keep_L, keep_cls = [], [], []
    pr_K, pr_L, pr_cls = [], [], []
    rule_count = 0
    counts = {c: 0 for c in CLASSES}
    om_sup = float((tsq + max(abs(lo), abs(hi))).max()) if len(tsq) else 0.0
    for b in range(len(B_K)):
        allowed = hnorm <= min(2, budget - lnorm[lb[b]])
        if b_zero[b]:
            allowed &= (hnorm > 0) & (first_h > 0)
        elif first_b[b] < 0:
            continue
        idx = np.nonzero(allowed)[0]
        if len(idx) == 0:
            continue
        for c in CLASSES:
            counts[c] += int((Hcls[idx] == c).sum())
        dlo = blo[b] + hlo[idx]
        dhi = bhi[b] + hhi[idx]
        away = (dlo >= 1) | (dhi <= -1)
        if not prune:
            away[:] = False
        # a-priori largeness of Omega_i + Omega_j for high pairs
        kn = int(np.abs(B_K[b]).sum())
        bound = kn * om_sup + 2 * (M + 2) * N ** 2 + 1
        plus = Hcls[idx] == "L2plus"
        if plus.any():
            hi_sq = sq[high_idx]
            minsq = np.array([hi_sq[np.nonzero(Hs[i])[0]].min() for i in idx[plus]])
            rule_count += int((minsq >= bound).sum())
        for arr_K, arr_L, arr_c, sel in ((keep_K, keep_L, keep_cls, ~away), (pr_K, pr_L, pr_cls, away)):
            ii = idx[sel]
            if len(ii) == 0:
                continue
            L = np.zeros((len(ii), m), np.int64)
            L[:, low_idx] = B_L[b]
            L[:, high_idx] = Hs[ii]
            arr_K.append(np.repeat(B_K[b][None, :], len(ii), axis=0))
            arr_L.append(L)
            arr_c.append(Hcls[ii])

    def build(Kl, Ll, cl, pruned=None):
        if Kl:
            return QuerySet(lattice, np.concatenate(Kl), np.concatenate(Ll), np.concatenate(cl), low_mask, pruned)
        return QuerySet(lattice, np.zeros((0, n), np.int64), np.zeros((0, m), np.int64),
                        np.zeros(0, dtype="<U7"), low_mask, pruned)

    pruned = build(pr_K, pr_L, pr_cls)
    out = build(keep_K, keep_L, keep_cls, pruned)
    out.a_priori_large_pairs = rule_count
    out.counts = counts
    return out


def tail_threshold(settings: ResonanceSettings, N: float) -> float:
    """Largest threshold of any query with |k| > K_max (the enumeration tail)."""
    return float(np.exp(log_threshold(settings.K_max + 1, 0, settings.eta, N, settings.M, settings.tau)))


def certify(xi, cfg: ModelConfig, settings: ResonanceSettings, lattice: SiteLattice | None = None,
            freq=None, queries: QuerySet | None = None) -> ResonanceReport:
    """Check every enumerated query at xi; ``freq`` overrides the affine frequencies."""
    lattice = lattice or build_sites(cfg)
    s = settings.resolve(cfg)
    if queries is None:
        queries = enumerate_queries(cfg.n, cfg.N_cut, s.M, s.K_max, lattice, cfg.param_box)
    xi = np.asarray(xi, float)
    omega, Omega = (freq or FrequencyMap(lattice))(xi)
    D = queries.divisors(omega, Omega)
    logt = queries.log_thresholds(s.eta, cfg.N_cut, s.M, s.tau)
    with np.errstate(divide="ignore"):
        logr = np.log(np.abs(D)) - logt
    bad = np.nonzero(logr < 0)[0]
    viol = [(queries.query(i), float(D[i]), float(np.exp(logt[i]))) for i in bad]
    min_ratio = float(np.exp(logr.min())) if len(logr) else math.inf
    return ResonanceReport(xi, viol, not viol, len(queries.pruned) if queries.pruned is not None else 0,
                           len(queries), min_ratio, tail_threshold(s, cfg.N_cut))


def min_log_ratios(queries: QuerySet, xis, lattice: SiteLattice, N, M, tau, batch: int = 16,
                   freq=None) -> np.ndarray:
    """Per sample, min over queries of log(|D| / threshold at eta = 1).

    The sample is resonant at eta exactly when this value is below log(eta).
    """
    fmap = freq or FrequencyMap(lattice)
    logt = queries.log_thresholds(1.0, N, M, tau)
    out = np.empty(len(xis))
    for a in range(0, len(xis), batch):
        chunk = xis[a : a + batch]
        om, Om = zip(*(fmap(x) for x in chunk))
        D = queries.divisors(np.array(om), np.array(Om))
        with np.errstate(divide="ignore"):
            out[a : a + batch] = (np.log(np.abs(D)) - logt[:, None]).min(axis=0) if len(D) else np.inf
    return out


@dataclass
class MeasureTable:
    etas: list
    fractions: list
    ci_low: list
    ci_high: list
    samples: int
    slope: float
    c_fit: float
    c_halves: tuple
    bound_holds: bool

    def rows(self):
        return [
            {"eta_tilde": e, "fraction": f, "ci_low": lo, "ci_high": hi, "samples": self.samples}
            for e, f, lo, hi in zip(self.etas, self.fractions, self.ci_low, self.ci_high)
        ]

    def to_csv(self) -> str:
        lines = ["eta_tilde,fraction,ci_low,ci_high,samples"]
        for r in self.rows():
            lines.append(f"{r['eta_tilde']!r},{r['fraction']!r},{r['ci_low']!r},{r['ci_high']!r},{r['samples']}")
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {"rows": self.rows(), "slope": self.slope, "c_fit": self.c_fit,
                "c_halves": list(self.c_halves), "bound_holds": self.bound_holds}


def _binomial_ci(hits: int, total: int):
    from scipy.stats import binomtest

    ci = binomtest(hits, total).proportion_ci(0.95, method="exact")
    return float(ci.low), float(ci.high)


def measure_estimate(cfg: ModelConfig, etas, sample_count: int, seed: int, M: int = 2,
                     tau: float | None = None, K_max: int | None = None,
                     lattice: SiteLattice | None = None, queries: QuerySet | None = None) -> MeasureTable:
    """Monte-Carlo fraction of the parameter box that fails certification, per eta.

    Samples are drawn once and shared by all eta values, so fractions are
    nested.  The slope is a least-squares fit of log fraction on log eta over
    the nonzero fractions.  ``c_fit`` is read off the largest eta as
    fraction / eta^{1/2}; the bound fraction <= c eta^{1/2} is called stable
    when no smaller eta contradicts it, i.e. the lower end of its 95% interval
    stays below ``c_fit * eta^{1/2}``.  ``c_halves`` repeats the fit on each
    half of the sample.
    """
    if sample_count < 100:
        raise ValueError("sample_count must be >= 100")
    lattice = lattice or build_sites(cfg)
    s = ResonanceSettings(1.0, M, tau, K_max).resolve(cfg)
    if queries is None:
        queries = enumerate_queries(cfg.n, cfg.N_cut, s.M, s.K_max, lattice, cfg.param_box)
    rng = np.random.default_rng(seed)
    lo, hi = cfg.param_box
    xis = rng.uniform(lo, hi, size=(sample_count, len(lattice.sites)))
    lr = min_log_ratios(queries, xis, lattice, cfg.N_cut, s.M, s.tau)
    etas = [float(e) for e in etas]
    fracs, cil, cih = [], [], []
    for e in etas:
        hits = int((lr < math.log(e)).sum())
        fracs.append(hits / sample_count)
        a, b = _binomial_ci(hits, sample_count)
        cil.append(a)
        cih.append(b)
    nz = [(e, f) for e, f in zip(etas, fracs) if f > 0]
    if len(nz) >= 2:
        slope = float(np.polyfit(np.log([e for e, _ in nz]), np.log([f for _, f in nz]), 1)[0])
    else:
        slope = math.nan
    top = int(np.argmax(etas))
    c_fit = fracs[top] / math.sqrt(etas[top])
    half = sample_count // 2
    c_halves = tuple(float((part < math.log(etas[top])).mean()) / math.sqrt(etas[top])
                     for part in (lr[:half], lr[half:]))
    holds = all(a <= c_fit * math.sqrt(e) for a, e in zip(cil, etas))
    return MeasureTable(etas, fracs, cil, cih, sample_count, slope, c_fit, c_halves, holds)


@dataclass
class DerivativeBoundsReport:
    checked: int
    min_case1: float
    min_case2: float
    passed: bool
    failures: list


def derivative_bounds_check(xi, queries: QuerySet, freq, lattice: SiteLattice, step: float = 1e-5,
                            bound: float = 0.25, tol: float = 0.0) -> DerivativeBoundsReport:
    """Finite-difference derivative of each divisor along its distinguished parameter.

    Case 1 (k != 0): the parameter of the tangential site with the largest
    |k_i|.  Case 2 (k = 0, l_low != 0): the low site with the largest |l_j|.
    Queries with k = 0 and l_low = 0 are bounded away from zero and skipped.
    """
    xi = np.asarray(xi, float)
    idx = lattice.index
    tang_par = np.array([idx[s] for s in lattice.tangential])
    norm_par = np.array([idx[s] for s in lattice.normal])
    K, L = queries.K, queries.L
    low = queries.low_mask
    case1 = np.abs(K).sum(axis=1) > 0
    case2 = ~case1 & (np.abs(L[:, low]).sum(axis=1) > 0)
    direction = np.full(len(K), -1)
    if case1.any():
        direction[case1] = tang_par[np.abs(K[case1]).argmax(axis=1)]
    if case2.any():
        Ll = np.where(low[None, :], np.abs(L), -1)
        direction[case2] = norm_par[Ll[case2].argmax(axis=1)]
    dvals = np.zeros(len(K))
    for par in np.unique(direction[direction >= 0]):
        e = np.zeros_like(xi)
        e[par] = step
        op, Op = freq(xi + e)
        om, Om = freq(xi - e)
        sel = direction == par
        dvals[sel] = (K[sel] @ (op - om) + L[sel] @ (Op - Om)) / (2 * step)
    a1 = np.abs(dvals[case1])
    a2 = np.abs(dvals[case2])
    fails = np.nonzero((direction >= 0) & (np.abs(dvals) < bound - tol))[0]
    return DerivativeBoundsReport(int((direction >= 0).sum()), float(a1.min()) if len(a1) else math.inf,
                                  float(a2.min()) if len(a2) else math.inf, len(fails) == 0,
                                  [(queries.query(i), float(dvals[i])) for i in fails[:20]])

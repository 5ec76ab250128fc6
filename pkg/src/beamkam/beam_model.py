"""Truncated lattice Hamiltonian of the beam equation on the d-torus.

The operator ``A = -Laplace + M_xi`` acts on the Fourier mode ``j`` by
``lambda_j = |j|^2 + xi_j``.  With ``u = sum (q_j phi_j + qbar_j conj(phi_j)) /
sqrt(2 lambda_j)`` and ``phi_j = e^{i<j,x>} / (2 pi)^{d/2}`` the nonlinearity
``f(u) = u^m1`` gives the lattice Hamiltonian

    H = sum_j lambda_j q_j qbar_j + eps * G,   G = int_{T^d} u^(m1+1) / (m1+1) dx.

Tangential modes are then written in action-angle form
``q_{j_i} = sqrt(I_i + y_i) e^{i x_i}``.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .series import Series, SeriesMeta, momentum_residual


@dataclass
class ModelConfig:
    d: int = 2
    J_max: float = 3.0
    S: tuple = ((1, 0), (0, 1))
    eps: float = 1e-4
    f_power: int = 3
    degree_cap: int = 5
    fourier_cap: int = 6
    param_box: tuple = (0.0, 1.0)
    N_cut: float = 1.0
    torus_actions: tuple | float = 0.0

    def __post_init__(self):
        self.S = tuple(tuple(int(c) for c in s) for s in self.S)
        if self.d < 1:
            raise ValueError("d must be >= 1")
        if len(self.S) < 1:
            raise ValueError("need at least one tangential site")
        if len(set(self.S)) != len(self.S):
            raise ValueError("tangential sites must be distinct")
        if any(len(s) != self.d for s in self.S):
            raise ValueError("tangential site of wrong dimension")
        if self.eps < 0:
            raise ValueError("eps must be nonnegative")
        if self.f_power < 2:
            raise ValueError("f_power must be >= 2")
        lo, hi = self.param_box
        if not lo < hi:
            raise ValueError("param_box must be an interval lo < hi")
        acts = np.broadcast_to(np.asarray(self.torus_actions, float), (self.n,))
        if (acts < 0).any():
            raise ValueError("torus_actions must be nonnegative")

    @property
    def n(self) -> int:
        return len(self.S)

    @property
    def actions(self) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.torus_actions, float), (self.n,)).copy()


@dataclass(frozen=True)
class SiteLattice:
    sites: tuple          # all retained sites, ordered by (|j|^2, coords)
    tangential: tuple
    normal: tuple
    low: tuple            # normal sites with |j| <= N_cut
    high: tuple

    @property
    def index(self) -> dict:
        return {s: i for i, s in enumerate(self.sites)}

    def norm2_sq(self, s) -> int:
        return sum(c * c for c in s)


def build_sites(cfg: ModelConfig) -> SiteLattice:
    """Retain every j with |j|_2 <= J_max; split into tangential, low and high normal sites."""
    R = int(math.floor(cfg.J_max))
    if cfg.J_max <= cfg.N_cut:
        raise ValueError("J_max must exceed the low/high cutoff N_cut")
    pts = [p for p in itertools.product(range(-R, R + 1), repeat=cfg.d)
           if sum(c * c for c in p) <= cfg.J_max ** 2 + 1e-9]
    pts.sort(key=lambda p: (sum(c * c for c in p), p))
    missing = [s for s in cfg.S if s not in set(pts)]
    if missing:
        raise ValueError(f"tangential sites outside the lattice: {missing}")
    tang = set(cfg.S)
    normal = tuple(p for p in pts if p not in tang)
    low = tuple(p for p in normal if sum(c * c for c in p) <= cfg.N_cut ** 2 + 1e-9)
    high = tuple(p for p in normal if sum(c * c for c in p) > cfg.N_cut ** 2 + 1e-9)
    return SiteLattice(tuple(pts), cfg.S, normal, low, high)


@dataclass
class FrequencyMap:
    """omega_i = |j_i|^2 + xi_{j_i}, Omega_j = |j|^2 + xi_j, plus optional shifts."""

    lattice: SiteLattice
    shift_omega: np.ndarray | None = None
    shift_Omega: np.ndarray | None = None
    shift_xi: np.ndarray | None = None

    def base(self, xi):
        xi = np.asarray(xi, float)
        lat = self.lattice
        if xi.shape != (len(lat.sites),):
            raise ValueError(f"xi must have length {len(lat.sites)}")
        idx = lat.index
        om = np.array([lat.norm2_sq(s) + xi[idx[s]] for s in lat.tangential])
        Om = np.array([lat.norm2_sq(s) + xi[idx[s]] for s in lat.normal])
        return om, Om

    def __call__(self, xi):
        om, Om = self.base(xi)
        if self.shift_omega is not None:
            om = om + self.shift_omega
        if self.shift_Omega is not None:
            Om = Om + self.shift_Omega
        return om, Om

    def affine(self):
        """(c_omega, V_omega, c_Omega, V_Omega) with omega = c + V xi before shifts."""
        lat = self.lattice
        idx = lat.index
        P = len(lat.sites)
        Vo = np.zeros((len(lat.tangential), P))
        VO = np.zeros((len(lat.normal), P))
        for i, s in enumerate(lat.tangential):
            Vo[i, idx[s]] = 1.0
        for i, s in enumerate(lat.normal):
            VO[i, idx[s]] = 1.0
        co = np.array([lat.norm2_sq(s) for s in lat.tangential], float)
        cO = np.array([lat.norm2_sq(s) for s in lat.normal], float)
        return co, Vo, cO, VO


def frequencies(cfg: ModelConfig, xi) -> tuple:
    return FrequencyMap(build_sites(cfg)).base(xi)


def eigenvalues(lattice: SiteLattice, xi) -> np.ndarray:
    xi = np.asarray(xi, float)
    lam = np.array([lattice.norm2_sq(s) for s in lattice.sites], float) + xi
    if (lam <= 0).any():
        bad = [lattice.sites[i] for i in np.nonzero(lam <= 0)[0]]
        raise ValueError(f"lambda_j must be positive; fails at {bad}")
    return lam


def full_meta(cfg: ModelConfig, lattice: SiteLattice) -> SeriesMeta:
    """Meta for series in the original (q, qbar) over all retained sites."""
    return SeriesMeta(0, (), lattice.sites, max(cfg.f_power + 1, 2), 0)


def action_angle_meta(cfg: ModelConfig, lattice: SiteLattice) -> SeriesMeta:
    return SeriesMeta(cfg.n, lattice.tangential, lattice.normal, cfg.degree_cap, cfg.fourier_cap)


def _multisets(nvar, size, momenta, chunk=200_000):
    """All sorted index tuples of length ``size`` whose momenta sum to zero."""
    out = []
    it = itertools.combinations_with_replacement(range(nvar), size)
    while True:
        block = np.array(list(itertools.islice(it, chunk)), dtype=np.int64)
        if block.size == 0:
            break
        tot = momenta[block].sum(axis=1)
        out.append(block[(tot == 0).all(axis=1)])
    return np.concatenate(out) if out else np.zeros((0, size), np.int64)


def build_nonlinearity(cfg: ModelConfig, xi, lattice: SiteLattice | None = None) -> Series:
    """G = int u^m/m dx expanded in (q, qbar), m = f_power + 1, momentum-conserving terms only."""
    lattice = lattice or build_sites(cfg)
    lam = eigenvalues(lattice, xi)
    m = cfg.f_power + 1
    meta = full_meta(cfg, lattice)
    if m > meta.degree_cap:
        raise ValueError("degree cap too small for the nonlinearity")
    P = len(lattice.sites)
    sites = np.array(lattice.sites, dtype=np.int64)
    # variables 0..P-1 are q_j (momentum +j), P..2P-1 are qbar_j (momentum -j)
    momenta = np.concatenate([sites, -sites])
    combos = _multisets(2 * P, m, momenta)
    if len(combos) == 0:
        return Series(meta)
    counts = np.zeros((len(combos), 2 * P), np.int64)
    rows = np.repeat(np.arange(len(combos)), m)
    np.add.at(counts, (rows, combos.ravel()), 1)
    logfact = np.array([math.lgamma(k + 1) for k in range(m + 1)])
    multinom = np.exp(math.lgamma(m + 1) - logfact[counts].sum(axis=1))
    lam2 = np.concatenate([lam, lam])
    scale = np.exp(-0.5 * (counts * np.log(2 * lam2)[None, :]).sum(axis=1))
    quad = (2 * math.pi) ** (cfg.d * (1 - m / 2))
    coeffs = multinom * scale * quad / m
    return Series(meta, counts, coeffs.astype(complex))


def _binomial_series(power: float, I: float, max_a: int):
    """Coefficients of (I + y)^power = sum_a c_a y^a for a <= max_a."""
    out = []
    c = 1.0
    for a in range(max_a + 1):
        if a > 0:
            c *= (power - a + 1) / a
        if c == 0:
            break
        out.append((a, c * I ** (power - a)))
    return out


@dataclass
class ActionAngleResult:
    P: Series
    remainder: Series       # terms of G that could not be substituted (original variables)
    discarded_mass: float


def to_action_angle(G: Series, cfg: ModelConfig, lattice: SiteLattice | None = None) -> ActionAngleResult:
    """Substitute q_{j_i} = sqrt(I_i + y_i) e^{i x_i} on the tangential sites.

    With ``I_i = 0`` a tangential factor of odd total power has no polynomial
    form; such terms are moved to ``remainder``.  With ``I_i > 0`` the factor
    ``(I_i + y_i)^{c/2}`` is expanded in y up to the degree cap.
    """
    lattice = lattice or build_sites(cfg)
    meta = action_angle_meta(cfg, lattice)
    n, mN = meta.n, meta.m
    P = len(lattice.sites)
    idx = lattice.index
    tcols = [idx[s] for s in lattice.tangential]
    ncols = [idx[s] for s in lattice.normal]
    E = G.exps.astype(np.int64)
    a = E[:, tcols]
    b = E[:, [P + c for c in tcols]]
    zq = E[:, ncols]
    zb = E[:, [P + c for c in ncols]]
    zdeg = zq.sum(axis=1) + zb.sum(axis=1)
    I = cfg.actions
    pattern = np.concatenate([a, b], axis=1)
    keys, inv = np.unique(pattern, axis=0, return_inverse=True)
    inv = inv.ravel()
    out_rows, out_c = [], []
    bad = np.zeros(len(E), bool)
    for gi, key in enumerate(keys):
        sel = inv == gi
        ka, kb = key[:n], key[n:]
        k = ka - kb
        csum = ka + kb
        budget = int(meta.degree_cap - zdeg[sel].min())
        if budget < 0:
            continue
        ok = True
        per_site = []
        for i in range(n):
            if I[i] == 0:
                if csum[i] % 2:
                    ok = False
                    break
                per_site.append([(csum[i] // 2, 1.0)])
            else:
                per_site.append(_binomial_series(csum[i] / 2, I[i], budget // 2))
        if not ok:
            bad |= sel
            continue
        rows_sel = np.nonzero(sel)[0]
        for combo in itertools.product(*per_site):
            alpha = np.array([c[0] for c in combo])
            fac = math.prod(c[1] for c in combo)
            order = 2 * alpha.sum() + zdeg[rows_sel]
            keep = rows_sel[order <= meta.degree_cap]
            if len(keep) == 0:
                continue
            r = np.zeros((len(keep), meta.width), np.int64)
            r[:, :n] = k
            r[:, n : 2 * n] = alpha
            r[:, 2 * n : 2 * n + mN] = zq[keep]
            r[:, 2 * n + mN :] = zb[keep]
            out_rows.append(r)
            out_c.append(G.coeffs[keep] * fac)
    if out_rows:
        Pser = Series(meta, np.concatenate(out_rows), np.concatenate(out_c))
    else:
        Pser = Series(meta)
    rem = G.select(bad)
    return ActionAngleResult(Pser, rem, rem.l1())


def substitute_point(cfg: ModelConfig, lattice: SiteLattice, x, y, q_normal, qbar_normal=None):
    """Original-variable state (q over all sites, then qbar) for an action-angle point."""
    idx = lattice.index
    P = len(lattice.sites)
    I = cfg.actions
    qn = np.asarray(q_normal, complex)
    qbn = np.conj(qn) if qbar_normal is None else np.asarray(qbar_normal, complex)
    st = np.zeros(2 * P, complex)
    for i, s in enumerate(lattice.tangential):
        amp = np.sqrt(complex(I[i] + y[i]))
        st[idx[s]] = amp * np.exp(1j * x[i])
        st[P + idx[s]] = amp * np.exp(-1j * x[i])
    for i, s in enumerate(lattice.normal):
        st[idx[s]] = qn[i]
        st[P + idx[s]] = qbn[i]
    return st


def normal_part(meta: SeriesMeta, omega, Omega) -> Series:
    """N = <omega, y> + sum_j Omega_j q_j qbar_j."""
    n, m = meta.n, meta.m
    rows = np.zeros((n + m, meta.width), np.int64)
    for i in range(n):
        rows[i, n + i] = 1
    for j in range(m):
        rows[n + j, 2 * n + j] = 1
        rows[n + j, 2 * n + m + j] = 1
    return Series(meta, rows, np.concatenate([omega, Omega]).astype(complex))


@dataclass
class AssembledHamiltonian:
    N: Series
    P: Series
    omega: np.ndarray
    Omega: np.ndarray
    lattice: SiteLattice
    remainder_mass: float
    momentum_violations: int = 0
    info: dict = field(default_factory=dict)

    @property
    def H(self) -> Series:
        return self.N + self.P


def assemble_hamiltonian(cfg: ModelConfig, xi, lattice: SiteLattice | None = None) -> AssembledHamiltonian:
    """H = N + P with N the affine normal form and P = eps * G in action-angle variables."""
    lattice = lattice or build_sites(cfg)
    fmap = FrequencyMap(lattice)
    omega, Omega = fmap.base(xi)
    meta = action_angle_meta(cfg, lattice)
    N = normal_part(meta, omega, Omega)
    if cfg.eps == 0:
        return AssembledHamiltonian(N, Series(meta), omega, Omega, lattice, 0.0)
    G = build_nonlinearity(cfg, xi, lattice)
    aa = to_action_angle(G, cfg, lattice)
    P = aa.P * cfg.eps
    viol = int(np.any(momentum_residual(P) != 0, axis=1).sum()) if len(P) else 0
    return AssembledHamiltonian(N, P, omega, Omega, lattice, aa.discarded_mass * cfg.eps, viol,
                                {"G_terms": len(G), "P_terms": len(P)})

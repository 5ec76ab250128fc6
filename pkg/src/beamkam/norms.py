"""Weighted norms of truncated Hamiltonians and their vector fields.

Normal sites carry the weight ``w_j = max(|j|_2, 1)``; the l2_p norm of a
half-vector is ``sqrt(sum |q_j|^2 w_j^(2p))`` and a phase vector ``z = (q, qbar)``
is measured by ``||q||_p + ||qbar||_p``.

Operator norms of the symmetric multilinear maps attached to a homogeneous
part are not computed exactly.  :func:`tame_operator_norm` returns a certified
majorant (one input slot kept linear and handled by weighted spectral norms,
the remaining slots bounded entrywise; exact for a single monomial) together
with a sampled lower bound.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .phase import PhasePoint, as_state
from .series import Series, SeriesMeta, _aggregate


@dataclass(frozen=True)
class DomainParams:
    s: float
    r: float
    p: int
    dbase: int

    def __post_init__(self):
        if self.s <= 0 or not (0 < self.r <= 1):
            raise ValueError("need s > 0 and 0 < r <= 1")
        if not (self.p > self.dbase >= 1):
            raise ValueError("need p > dbase >= 1")

    def shrink(self, sigma: float, sigma_r: float) -> "DomainParams":
        return DomainParams(self.s - sigma, self.r - sigma_r, self.p, self.dbase)


@dataclass
class ParameterGrid:
    """Finite stand-in for the parameter set: sample points and a finite-difference step."""

    sites: tuple
    samples: np.ndarray
    step: float = 1e-4

    def __post_init__(self):
        self.sites = tuple(tuple(s) for s in self.sites)
        self.samples = np.atleast_2d(np.asarray(self.samples, dtype=float))
        if self.samples.shape[1] != len(self.sites):
            raise ValueError("sample width does not match site count")
        if self.step <= 0:
            raise ValueError("step must be positive")


class GriddedSeries:
    """A series whose coefficients are tabulated on a parameter grid.

    ``values[g, t]`` is the coefficient of term ``t`` at sample ``g`` and
    ``dvalues[g, j, t]`` its central-difference derivative along parameter ``j``.
    """

    def __init__(self, meta, exps, values, dvalues=None, grid=None):
        self.meta = meta
        self.exps = exps
        self.values = np.atleast_2d(values)
        self.dvalues = dvalues
        self.grid = grid

    @classmethod
    def from_series(cls, W: Series):
        return cls(W.meta, W.exps, W.coeffs[None, :])

    @classmethod
    def from_builder(cls, builder, grid: ParameterGrid, derivatives: bool = True):
        """Tabulate ``builder(xi) -> Series`` on the grid (and at +-step for derivatives)."""
        G, J = grid.samples.shape
        evals = [builder(xi) for xi in grid.samples]
        shifted = []
        if derivatives:
            for xi in grid.samples:
                row = []
                for j in range(J):
                    e = np.zeros(J)
                    e[j] = grid.step
                    row.append((builder(xi + e), builder(xi - e)))
                shifted.append(row)
        all_series = evals + [s for row in shifted for pair in row for s in pair]
        meta = evals[0].meta
        exps = _union_rows([s.exps for s in all_series], meta.width)
        lookup = _row_lookup(exps)

        def table(W):
            out = np.zeros(len(exps), complex)
            if len(W):
                out[lookup(W.exps)] = W.coeffs
            return out

        values = np.array([table(W) for W in evals])
        dvalues = None
        if derivatives:
            dvalues = np.array([[(table(a) - table(b)) / (2 * grid.step) for a, b in row] for row in shifted])
        return cls(meta, exps, values, dvalues, grid)

    def derivative(self, var, index) -> "GriddedSeries":
        meta = self.meta
        n, m = meta.n, meta.m
        if var == "x":
            mask = self.exps[:, index] != 0
            fac = 1j * self.exps[mask, index].astype(float)
            e = self.exps[mask]
        else:
            col = {"y": n + index, "q": 2 * n + index, "qbar": 2 * n + m + index}[var]
            mask = self.exps[:, col] > 0
            e = self.exps[mask].copy()
            fac = e[:, col].astype(float)
            e[:, col] -= 1
        dv = None if self.dvalues is None else self.dvalues[:, :, mask] * fac
        return GriddedSeries(meta, e, self.values[:, mask] * fac, dv, self.grid)

    def select(self, mask):
        dv = None if self.dvalues is None else self.dvalues[:, :, mask]
        return GriddedSeries(self.meta, self.exps[mask], self.values[:, mask], dv, self.grid)

    @property
    def z_degrees(self):
        return self.exps[:, 2 * self.meta.n :].astype(np.int64).sum(axis=1)

    def __len__(self):
        return self.exps.shape[0]


def _union_rows(tables, width):
    rows = np.concatenate(tables) if tables else np.zeros((0, width), np.int8)
    e, _ = _aggregate(rows, np.ones(len(rows), complex))
    return e


def _row_keys(exps):
    width = exps.shape[1]
    return np.ascontiguousarray(exps).view(np.dtype((np.void, width))).ravel()


def _row_lookup(exps):
    index = {k.tobytes(): i for i, k in enumerate(_row_keys(exps))}

    def lookup(rows):
        return np.array([index[k.tobytes()] for k in _row_keys(rows)], dtype=np.int64)

    return lookup


def _as_gridded(W):
    if isinstance(W, GriddedSeries):
        return W
    return GriddedSeries.from_series(W)


# --------------------------------------------------------------------------
# vector norms


def site_weights(meta: SeriesMeta) -> np.ndarray:
    """w_j = max(|j|_2, 1) for the normal sites (the zero mode gets weight 1)."""
    if meta.m == 0:
        return np.zeros(0)
    return np.maximum(np.sqrt((meta.site_array.astype(float) ** 2).sum(axis=1)), 1.0)


def lp_norm(q, weights, p) -> float:
    q = np.asarray(q)
    return float(np.sqrt(np.sum(np.abs(q) ** 2 * weights ** (2 * p))))


def znorm(q, qbar, weights, p) -> float:
    """||z||_p = ||q||_p + ||qbar||_p."""
    return lp_norm(q, weights, p) + lp_norm(qbar, weights, p)


def znorm_mixed(zs, p, dbase, weights) -> float:
    """(1/h) sum_i ||z^(1)||_d ... ||z^(i)||_p ... ||z^(h)||_d for z^(i) = (q, qbar) pairs."""
    if len(zs) == 0:
        raise ValueError("need at least one vector")
    h = len(zs)
    np_ = [znorm(q, qb, weights, p) for q, qb in zs]
    nd = [znorm(q, qb, weights, dbase) for q, qb in zs]
    total = 0.0
    for i in range(h):
        total += np_[i] * math.prod(nd[:i] + nd[i + 1 :])
    return total / h


def weighted_phase_norm(v, dp: DomainParams, meta: SeriesMeta) -> float:
    """||x|| + ||y||/r^2 + ||z||_p/r with sup norms on x and y."""
    s = as_state(v, meta)
    n, m = meta.n, meta.m
    w = site_weights(meta)
    sup = lambda a: float(np.abs(a).max()) if a.size else 0.0
    return (sup(s[:n]) + sup(s[n : 2 * n]) / dp.r ** 2
            + znorm(s[2 * n : 2 * n + m], s[2 * n + m :], w, dp.p) / dp.r)


# --------------------------------------------------------------------------
# coefficient norms


def _fourier_mass(G: GriddedSeries, s: float, group_inverse, n_groups):
    """sup over samples and parameter directions of sum_k (|W| + |dW|) e^{|k|s}, per group."""
    kabs = np.abs(G.exps[:, : G.meta.n].astype(np.int64)).sum(axis=1)
    wk = np.exp(kabs * s)
    base = np.zeros((G.values.shape[0], n_groups))
    for g in range(G.values.shape[0]):
        base[g] = np.bincount(group_inverse, weights=np.abs(G.values[g]) * wk, minlength=n_groups)
    if G.dvalues is None or G.dvalues.shape[1] == 0:
        return base.max(axis=0) if len(base) else np.zeros(n_groups)
    best = np.zeros(n_groups)
    for g in range(G.values.shape[0]):
        for j in range(G.dvalues.shape[1]):
            d = np.bincount(group_inverse, weights=np.abs(G.dvalues[g, j]) * wk, minlength=n_groups)
            best = np.maximum(best, base[g] + d)
    return best


def analytic_x_norm(W, s: float, grid: ParameterGrid | None = None) -> float:
    """Weighted l1 norm of the Fourier coefficients of a pure-x series."""
    G = _as_gridded(W)
    n = G.meta.n
    if len(G) and (G.exps[:, n:] != 0).any():
        raise ValueError("analytic_x_norm needs a series depending on x only")
    if len(G) == 0:
        return 0.0
    return float(_fourier_mass(G, s, np.zeros(len(G), np.int64), 1)[0])


def modulus(W, s: float, r: float) -> Series:
    """z-only series whose coefficients are the norms of the (x, y) blocks of ``W``."""
    G = _as_gridded(W)
    meta = G.meta
    n = meta.n
    if len(G) == 0:
        return Series(meta)
    groups, inv = _unique_rows(G.exps[:, n:])
    mass = _fourier_mass(G, s, inv, len(groups))
    alpha = groups[:, :n].astype(np.int64).sum(axis=1)
    coef = mass * r ** (2.0 * alpha)
    rows = np.zeros((len(groups), meta.width), np.int8)
    rows[:, 2 * n :] = groups[:, n:]
    return Series(meta, rows, coef.astype(complex))


def _unique_rows(a):
    if a.shape[1] == 0:
        return a[:1], np.zeros(a.shape[0], np.int64)
    keys = np.ascontiguousarray(a.view(np.uint8) ^ np.uint8(0x80)).view(np.dtype((np.void, a.shape[1]))).ravel()
    uniq, inv = np.unique(keys, return_inverse=True)
    rows = (uniq.view(np.uint8).reshape(-1, a.shape[1]) ^ np.uint8(0x80)).view(np.int8)
    return rows, inv.ravel()


# --------------------------------------------------------------------------
# operator norms


@dataclass
class NormReport:
    value_upper: float
    value_lower: float
    breakdown: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.value_lower > self.value_upper * (1 + 1e-9) + 1e-300:
            raise AssertionError(f"lower bound {self.value_lower} exceeds upper bound {self.value_upper}")

    def to_dict(self):
        return {"value_upper": self.value_upper, "value_lower": self.value_lower,
                "breakdown": {str(k): v for k, v in self.breakdown.items()}}


def _slots(B):
    """Per row: list of nonzero (variable, power) pairs, padded with -1."""
    S = max(int((B > 0).sum(axis=1).max()) if len(B) else 1, 1)
    var = -np.ones((len(B), S), np.int64)
    pw = np.zeros((len(B), S), np.int64)
    nz_r, nz_c = np.nonzero(B)
    order = np.argsort(nz_r, kind="stable")
    nz_r, nz_c = nz_r[order], nz_c[order]
    starts = np.searchsorted(nz_r, np.arange(len(B)))
    pos = np.arange(len(nz_r)) - starts[nz_r]
    var[nz_r, pos] = nz_c
    pw[nz_r, pos] = B[nz_r, nz_c]
    return var, pw


def _half_block_norm(A, m):
    """sup ||A z|| over ||z_q|| + ||z_qbar|| = 1 with the output measured the same way (majorant)."""
    best = 0.0
    for cols in (slice(0, m), slice(m, 2 * m)):
        tot = 0.0
        for rows in (slice(0, m), slice(m, 2 * m)):
            blk = A[rows, cols]
            if blk.any():
                tot += float(np.linalg.norm(blk, 2))
        best = max(best, tot)
    return best


def _z_operator_upper(M: Series, h: int, w_in_first: float, w_in_rest: float, w_out: float) -> float:
    """Majorant of sup ||grad M(z1..z_{h-1})||_out / ||(z^{h-1})||_{first,rest}.

    ``M`` is a nonnegative modulus, homogeneous of degree ``h`` in z.  One
    input slot is kept linear and measured in the ``first`` index; the other
    slots are bounded entrywise through the ``rest`` index.  The q/qbar
    split of those slots is tracked, and the linear slot is handled by
    weighted spectral norms per half, so single monomials and diagonal
    quadratic forms are bounded exactly.
    """
    meta = M.meta
    m = meta.m
    if len(M) == 0 or h == 0:
        return 0.0
    w = np.tile(site_weights(meta), 2)
    logw = np.log(w)
    B = M.exps[:, 2 * meta.n :].astype(np.int64)
    c = M.coeffs.real
    var, pw = _slots(B)
    S = var.shape[1]
    base = -w_in_rest * (B * logw[None, :]).sum(axis=1)
    nq_full = B[:, :m].sum(axis=1)
    mats = np.zeros((max(h - 1, 1), 2 * m, 2 * m))
    fact = math.factorial
    table = np.array([fact(k) * fact(h - 2 - k) / fact(h - 1) for k in range(h - 1)]) if h >= 2 else None
    for su in range(S):
        u = var[:, su]
        ok_u = u >= 0
        if not ok_u.any():
            continue
        uu = np.where(ok_u, u, 0)
        bu = pw[:, su]
        o = (uu + m) % (2 * m)
        log_pi_L = base + w_in_rest * logw[uu]
        nq_L = nq_full - (uu < m)
        if h == 1:
            val = np.where(ok_u, c * bu, 0.0) * np.exp(w_out * logw[uu])
            g = np.zeros(2 * m)
            np.add.at(g, o[ok_u], val[ok_u])
            return float(np.sqrt(np.sum(g[:m] ** 2)) + np.sqrt(np.sum(g[m:] ** 2)))
        for sa in range(S):
            a = var[:, sa]
            aa = np.where(a >= 0, a, 0)
            ma = pw[:, sa] - (sa == su)
            ok = ok_u & (a >= 0) & (ma > 0)
            if not ok.any():
                continue
            cnt = nq_L - (aa < m)
            comb = table[np.clip(cnt, 0, h - 2)]
            logv = (np.log(np.where(ok, c * bu * ma * comb, 1.0)) + w_out * logw[uu] + log_pi_L
                    + w_in_rest * logw[aa] - w_in_first * logw[aa])
            val = np.exp(logv)
            np.add.at(mats, (cnt[ok], o[ok], aa[ok]), val[ok])
    return max(_half_block_norm(mats[i], m) for i in range(mats.shape[0]))


def _v_operator_upper(M: Series, h: int, w_idx: float) -> float:
    """Majorant of sup |M(z1..zh)| / prod ||z_l||_idx for a nonnegative homogeneous modulus."""
    if len(M) == 0:
        return 0.0
    meta = M.meta
    m = meta.m
    c = M.coeffs.real
    if h == 0:
        return float(c.sum())
    w = np.tile(site_weights(meta), 2)
    logw = np.log(w)
    B = M.exps[:, 2 * meta.n :].astype(np.int64)
    var, pw = _slots(B)
    base = -w_idx * (B * logw[None, :]).sum(axis=1)
    nq_full = B[:, :m].sum(axis=1)
    vecs = np.zeros((h, 2 * m))
    fact = math.factorial
    table = np.array([fact(k) * fact(h - 1 - k) / fact(h) for k in range(h)])
    for sa in range(var.shape[1]):
        a = var[:, sa]
        ok = a >= 0
        aa = np.where(ok, a, 0)
        cnt = nq_full - (aa < m)
        comb = table[np.clip(cnt, 0, h - 1)]
        val = np.where(ok, c * pw[:, sa] * comb, 0.0) * np.exp(base)
        np.add.at(vecs, (cnt[ok], aa[ok]), val[ok])
    return float(max(max(np.linalg.norm(v[:m]), np.linalg.norm(v[m:])) for v in vecs))


def _polarized(evalfn, zs):
    """Value of the symmetric multilinear form of a homogeneous map at distinct vectors."""
    k = len(zs)
    if k == 0:
        return evalfn(None)
    total = 0
    for signs in np.ndindex(*([2] * k)):
        eps = 1 - 2 * np.array(signs)
        z = sum(e * v for e, v in zip(eps, zs))
        total = total + np.prod(eps) * evalfn(z)
    return total / (math.factorial(k) * 2 ** k)


def _test_vectors(rng, m, count):
    """Nonnegative test vectors over 2m variables: dense, single-site and two-site."""
    out = []
    for i in range(count):
        kind = i % 3
        v = np.zeros(2 * m)
        if kind == 0:
            v = rng.random(2 * m) ** 3
        elif kind == 1:
            v[rng.integers(2 * m)] = 1.0
        else:
            v[rng.choice(2 * m, size=min(2, 2 * m), replace=False)] = rng.random(min(2, 2 * m))
        out.append(v)
    return out


def _grad_eval(M: Series):
    """Gradient of a z-only modulus w.r.t. the 2m z-variables."""
    meta = M.meta
    ev = M.evaluator()
    n = meta.n

    def f(z):
        st = np.zeros(meta.width, complex)
        if z is not None:
            st[2 * n :] = z
        return ev.gradient(st)[1][2 * n :].real

    return f


def _value_eval(M: Series):
    meta = M.meta
    ev = M.evaluator()
    n = meta.n

    def f(z):
        st = np.zeros(meta.width, complex)
        if z is not None:
            st[2 * n :] = z
        return ev.value(st).real

    return f


def _half_norm(v, w, idx, m):
    return lp_norm(v[:m], w, idx) + lp_norm(v[m:], w, idx)


def _z_operator_lower(M, h, pf, pr, po, rng, samples):
    meta = M.meta
    m = meta.m
    if len(M) == 0 or m == 0:
        return 0.0
    w = site_weights(meta)
    grad = _grad_eval(M)
    best = 0.0
    vecs = _test_vectors(rng, m, samples * max(h - 1, 1))
    for i in range(samples):
        zs = vecs[i * max(h - 1, 1) : (i + 1) * max(h - 1, 1)][: h - 1]
        if h >= 3 and i % 2 == 0:
            zs = [zs[0]] * (h - 1)  # diagonal tuples
        out = _polarized(grad, zs)
        num = _half_norm(out, w, po, m)
        if h <= 1:
            den = 1.0
        else:
            den = znorm_mixed([(z[:m], z[m:]) for z in zs], pf, pr, w)
        if den > 0:
            best = max(best, num / den)
    return best


def _v_operator_lower(M, h, idx, rng, samples):
    meta = M.meta
    m = meta.m
    if len(M) == 0:
        return 0.0
    val = _value_eval(M)
    if h == 0:
        return abs(val(None))
    w = site_weights(meta)
    best = 0.0
    vecs = _test_vectors(rng, m, samples * h)
    for i in range(samples):
        zs = vecs[i * h : (i + 1) * h]
        if i % 2 == 0:
            zs = [zs[0]] * h
        den = math.prod(_half_norm(z, w, idx, m) for z in zs)
        if den > 0:
            best = max(best, abs(_polarized(val, zs)) / den)
    return best


def _check_homogeneous(G, h=None):
    deg = G.z_degrees
    if len(deg) == 0:
        return 0 if h is None else h
    if (deg != deg[0]).any():
        raise ValueError("series is not homogeneous in z")
    return int(deg[0])


def tame_operator_norm(W_h, dp: DomainParams, grid: ParameterGrid | None = None,
                       samples: int = 64, seed: int = 0) -> NormReport:
    """p-tame operator norm of the z-gradient of a z-homogeneous part.

    The breakdown holds the p-tame value (``p``), the d-operator value (``d``)
    and the x/y operator norms (``x``, ``y``), each as (upper, lower).
    """
    G = _as_gridded(W_h)
    h = _check_homogeneous(G)
    meta = G.meta
    rng = np.random.default_rng(seed)
    Mz = modulus(G, dp.s, dp.r)
    p, d = dp.p, dp.dbase
    up_p = _z_operator_upper(Mz, h, p, d, p + 2) if h >= 1 else 0.0
    up_d = _z_operator_upper(Mz, h, d, d, d) if h >= 1 else 0.0
    lo_p = _z_operator_lower(Mz, h, p, d, p + 2, rng, samples) if h >= 1 else 0.0
    lo_d = _z_operator_lower(Mz, h, d, d, d, rng, samples) if h >= 1 else 0.0
    out = {"h": h, "p": (up_p, lo_p), "d": (up_d, lo_d)}
    for var in ("x", "y"):
        ups, los = [0.0], [0.0]
        for i in range(meta.n):
            D = G.derivative(var, i)
            if len(D) == 0:
                continue
            Mv = modulus(D, dp.s, dp.r)
            ups.append(_v_operator_upper(Mv, h, d))
            los.append(_v_operator_lower(Mv, h, d, rng, samples))
        out[var] = (max(ups), max(los))
    return NormReport(up_p, lo_p, out)


def vector_field_tame_norm(W, dp: DomainParams, grid: ParameterGrid | None = None,
                           samples: int = 32, seed: int = 0) -> NormReport:
    """|||X_W|||^T: per z-degree h, |||W_y||| r^h + |||W_x||| r^{h-2} + max(T_p, T_d) r^{h-2}."""
    G = _as_gridded(W)
    deg = G.z_degrees
    r = dp.r
    up_total, lo_total = 0.0, 0.0
    breakdown = {}
    for h in sorted(set(deg.tolist())):
        part = G.select(deg == h)
        rep = tame_operator_norm(part, dp, grid, samples, seed + h)
        b = rep.breakdown
        up = b["y"][0] * r ** h + b["x"][0] * r ** (h - 2) + max(b["p"][0], b["d"][0]) * r ** (h - 2)
        lo = b["y"][1] * r ** h + b["x"][1] * r ** (h - 2) + max(b["p"][1], b["d"][1]) * r ** (h - 2)
        breakdown[h] = {"upper": up, "lower": lo, "terms": int(len(part))}
        up_total += up
        lo_total += lo
    return NormReport(up_total, lo_total, breakdown)


def sampled_field_norm(W: Series, dp: DomainParams, rng, count: int = 50) -> float:
    """Largest weighted_phase_norm(X_W(w)) over sampled points of the domain."""
    from .series import vector_field

    meta = W.meta
    n, m = meta.n, meta.m
    w = site_weights(meta)
    best = 0.0
    for _ in range(count):
        x = rng.uniform(0, 2 * np.pi, n) + 1j * rng.uniform(-1, 1, n) * dp.s * 0.999
        y = (rng.uniform(-1, 1, n) + 1j * rng.uniform(-1, 1, n)) / math.sqrt(2) * dp.r ** 2 * 0.999
        q = rng.normal(size=m) + 1j * rng.normal(size=m)
        qb = rng.normal(size=m) + 1j * rng.normal(size=m)
        if rng.random() < 0.5 and m:
            # concentrate on one site
            keep = rng.integers(m)
            mask = np.zeros(m)
            mask[keep] = 1
            q, qb = q * mask, qb * mask
        nz = znorm(q, qb, w, dp.p)
        if nz > 0:
            scale = rng.uniform(0.5, 1.0) * dp.r / nz
            q, qb = q * scale, qb * scale
        v = vector_field(W, PhasePoint(x, y, q, qb))
        best = max(best, weighted_phase_norm(v, dp, meta))
    return best

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from beamkam.norms import (
    DomainParams,
    ParameterGrid,
    analytic_x_norm,
    lp_norm,
    modulus,
    sampled_field_norm,
    site_weights,
    tame_operator_norm,
    vector_field_tame_norm,
    weighted_phase_norm,
    znorm,
    znorm_mixed,
)
from beamkam.norms import GriddedSeries
from beamkam.phase import PhasePoint
from beamkam.series import Series, SeriesMeta

from conftest import random_series

DP = DomainParams(0.3, 0.5, 3, 2)


def test_domain_params_validation():
    with pytest.raises(ValueError):
        DomainParams(0.3, 1.5, 3, 2)
    with pytest.raises(ValueError):
        DomainParams(0.3, 0.5, 2, 2)
    assert DP.shrink(0.1, 0.1) == DomainParams(0.3 - 0.1, 0.5 - 0.1, 3, 2)


def test_x_norm_single_fourier_mode(meta2):
    W = Series.fourier(meta2, (2,), 0.7 - 0.1j)
    assert analytic_x_norm(W, 0.4) == pytest.approx(abs(0.7 - 0.1j) * math.exp(0.8))
    assert analytic_x_norm(Series.zero(meta2), 0.4) == 0.0


def test_x_norm_rejects_non_pure_x(meta2):
    with pytest.raises(ValueError):
        analytic_x_norm(Series.y(meta2, 0), 0.4)


def test_x_norm_affine_coefficients(meta2):
    sites = ((1, 0), (0, 0))
    grid = ParameterGrid(sites, [[0.2, 0.5], [0.8, 0.1]], step=1e-3)
    a, b = 0.3, -1.5

    def build(xi):
        return Series.fourier(meta2, (1,), a + b * xi[0]) + Series.constant(meta2, 2.0 * xi[1])

    G = GriddedSeries.from_builder(build, grid)
    s = 0.25
    # sup over samples and parameter directions of sum_k (|W_k| + |d W_k|) e^{|k| s}
    expect = 0.0
    for xi in grid.samples:
        base = abs(a + b * xi[0]) * math.exp(s) + abs(2 * xi[1])
        expect = max(expect, base + abs(b) * math.exp(s), base + 2.0)
    assert analytic_x_norm(G, s) == pytest.approx(expect, rel=1e-9)


def test_modulus_single_monomial(meta2):
    W = Series.monomial(meta2, -2.0 + 1j, k=(1,), alpha=(1,), beta={(0, 1): 2})
    Mo = modulus(W, 0.3, 0.5)
    assert len(Mo) == 1
    c = Mo.coeffs[0]
    assert c.imag == 0 and c.real == pytest.approx(abs(-2 + 1j) * math.exp(0.3) * 0.25)
    assert Mo.alpha.sum() == 0 and Mo.k_abs.sum() == 0


def _zmap(Mo):
    n = Mo.meta.n
    return {tuple(r[2 * n :]): c.real for r, c in zip(Mo.exps, Mo.coeffs)}


def test_modulus_monotone_under_adding_terms(meta2, rng):
    W = random_series(meta2, rng, 10)
    V = random_series(meta2, rng, 10)
    rows = {tuple(r) for r in W.exps}
    V = V.select(np.array([tuple(r) not in rows for r in V.exps]))
    before = _zmap(modulus(W, 0.3, 0.5))
    after = _zmap(modulus(W + V, 0.3, 0.5))
    for key, c in before.items():
        assert after[key] >= c * (1 - 1e-14)
    assert all(c >= 0 for c in after.values())


def test_modulus_dominates_values(meta2, rng):
    W = random_series(meta2, rng, 15)
    s, r = 0.3, 0.5
    Mo = modulus(W, s, r)
    n, m = meta2.n, meta2.m
    for _ in range(20):
        x = rng.uniform(0, 2 * np.pi, n) + 1j * rng.uniform(-s, s, n)
        y = r ** 2 * rng.uniform(-1, 1, n) * np.exp(1j * rng.uniform(0, 2 * np.pi, n))
        q = rng.normal(size=m) + 1j * rng.normal(size=m)
        qb = rng.normal(size=m) + 1j * rng.normal(size=m)
        val = abs(W(PhasePoint(x, y, q, qb)))
        bound = Mo(PhasePoint(np.zeros(n), np.zeros(n), np.abs(q), np.abs(qb))).real
        assert val <= bound * (1 + 1e-12)


def test_znorm_mixed_examples(meta2):
    w = site_weights(meta2)
    rng = np.random.default_rng(0)
    q, qb = rng.normal(size=5) + 1j * rng.normal(size=5), rng.normal(size=5) + 0j
    assert znorm_mixed([(q, qb)], 3, 2, w) == pytest.approx(znorm(q, qb, w, 3))
    j = 4  # site (1, 1), |j| = sqrt 2
    e = np.zeros(5, complex)
    e[j] = 1.0
    h = 3
    val = znorm_mixed([(e, np.zeros(5))] * h, 3, 2, w)
    assert val == pytest.approx(math.sqrt(2) ** 3 * math.sqrt(2) ** ((h - 1) * 2))
    with pytest.raises(ValueError):
        znorm_mixed([], 3, 2, w)


def test_znorm_mixed_permutation_invariant(meta2):
    w = site_weights(meta2)
    rng = np.random.default_rng(1)
    zs = [(rng.normal(size=5) + 0j, rng.normal(size=5) + 0j) for _ in range(4)]
    ref = znorm_mixed(zs, 3, 2, w)
    for perm in ([3, 1, 0, 2], [1, 2, 3, 0]):
        assert znorm_mixed([zs[i] for i in perm], 3, 2, w) == pytest.approx(ref, rel=1e-14)


def test_tame_norm_diagonal_quadratic(meta2):
    j = 4
    Om = 2.7
    W = Series.monomial(meta2, Om, beta={meta2.sites[j]: 1}, gamma={meta2.sites[j]: 1})
    rep = tame_operator_norm(W, DP)
    wj = math.sqrt(2)
    assert rep.value_upper == pytest.approx(Om * wj ** 2, rel=1e-12)
    assert rep.value_lower == pytest.approx(Om * wj ** 2, rel=1e-9)


def test_tame_norm_zero(meta2):
    rep = tame_operator_norm(Series.zero(meta2), DP)
    assert rep.value_upper == 0.0 and rep.value_lower == 0.0
    assert vector_field_tame_norm(Series.zero(meta2), DP).value_upper == 0.0


def test_tame_norm_rejects_inhomogeneous(meta2):
    W = Series.q(meta2, (0, 0)) + Series.monomial(meta2, 1.0, beta={(0, 0): 2})
    with pytest.raises(ValueError):
        tame_operator_norm(W, DP)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 4))
def test_tame_norm_bounds_ordered(seed, h):
    meta = SeriesMeta(1, ((1, 0),), ((0, 0), (-1, 0), (0, 1), (0, -1), (1, 1)), 5, 4)
    rng = np.random.default_rng(seed)
    W = random_series(meta, rng, 12)
    W = W.select(W.z_degrees == h)
    rep = tame_operator_norm(W, DP, samples=16)
    assert rep.value_lower <= rep.value_upper * (1 + 1e-9)


def test_tame_norm_pointwise_bound(meta2, rng):
    # ||(W_h)_z(w)||_{p+2} <= upper * ||z||_p * ||z||_d^(h-2) at sampled points
    w = site_weights(meta2)
    for h in (2, 3, 4):
        W = random_series(meta2, rng, 20)
        W = W.select(W.z_degrees == h)
        if len(W) == 0:
            continue
        up = tame_operator_norm(W, DP).value_upper
        n, m = meta2.n, meta2.m
        for _ in range(10):
            x = rng.uniform(0, 2 * np.pi, n)
            y = DP.r ** 2 * rng.uniform(-1, 1, n)
            q = rng.normal(size=m) + 1j * rng.normal(size=m)
            qb = rng.normal(size=m) + 1j * rng.normal(size=m)
            g = W.gradient(PhasePoint(x, y, q, qb))
            gq, gqb = g[2 * n : 2 * n + m], g[2 * n + m :]
            lhs = lp_norm(gq, w, DP.p + 2) + lp_norm(gqb, w, DP.p + 2)
            rhs = up * znorm(q, qb, w, DP.p) * znorm(q, qb, w, DP.dbase) ** max(h - 2, 0)
            assert lhs <= rhs * (1 + 1e-9)


def test_vector_field_norm_linear_actions(meta2):
    N = Series.y(meta2, 0, 1.7)
    rep = vector_field_tame_norm(N, DP)
    assert rep.value_upper == pytest.approx(1.7)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 10.0))
def test_vector_field_norm_homogeneous(seed, lam):
    meta = SeriesMeta(1, ((1, 0),), ((0, 0), (-1, 0), (0, 1), (0, -1), (1, 1)), 5, 4)
    W = random_series(meta, np.random.default_rng(seed), 10)
    a = vector_field_tame_norm(W, DP, samples=8)
    b = vector_field_tame_norm(W * lam, DP, samples=8)
    assert b.value_upper == pytest.approx(lam * a.value_upper, rel=1e-12)


def test_vector_field_norm_triangle(meta2, rng):
    U = random_series(meta2, rng, 10)
    V = random_series(meta2, rng, 10)
    up = lambda W: vector_field_tame_norm(W, DP, samples=4).value_upper
    assert up(U + V) <= (up(U) + up(V)) * (1 + 1e-12)


def test_weighted_phase_norm_examples(meta2):
    n, m = meta2.n, meta2.m
    zero = PhasePoint(np.zeros(n), np.zeros(n), np.zeros(m))
    assert weighted_phase_norm(zero, DP, meta2) == 0.0
    ypure = PhasePoint(np.zeros(n), np.full(n, DP.r ** 2), np.zeros(m))
    assert weighted_phase_norm(ypure, DP, meta2) == pytest.approx(1.0)


def test_sampled_field_below_tame_bound(meta2, rng):
    for _ in range(5):
        W = random_series(meta2, rng, 12)
        up = vector_field_tame_norm(W, DP, samples=4).value_upper
        assert sampled_field_norm(W, DP, rng, 30) <= up * (1 + 1e-9)

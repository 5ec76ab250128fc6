import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from beamkam.phase import PhasePoint
from beamkam.series import (
    MetaMismatch,
    Series,
    SeriesMeta,
    Term,
    add,
    dumps_json,
    dumps_text,
    loads_json,
    loads_text,
    momentum_residual,
    multiply,
    poisson_bracket,
    truncate,
    vector_field,
)
from conftest import random_series


def brute_multiply(a, b):
    """Term-by-term double loop with dict accumulation."""
    meta = a.meta
    acc = {}
    for ea, ca in zip(a.exps.astype(int), a.coeffs):
        for eb, cb in zip(b.exps.astype(int), b.coeffs):
            e = ea + eb
            order = 2 * e[meta.n : 2 * meta.n].sum() + e[2 * meta.n :].sum()
            if order > meta.degree_cap or np.abs(e[: meta.n]).sum() > meta.fourier_cap:
                continue
            acc[tuple(e)] = acc.get(tuple(e), 0) + ca * cb
    if not acc:
        return Series(meta)
    return Series(meta, np.array(list(acc.keys())), np.array(list(acc.values())))


def assert_close(a, b, tol=1e-12):
    diff = (a - b).l1()
    assert diff <= tol * max(1.0, a.l1(), b.l1()), diff


def test_exact_cancellation(meta2):
    q = Series.q(meta2, (0, 1))
    assert len(q + (-q)) == 0
    y = Series.y(meta2, 0)
    assert y + y == Series.y(meta2, 0, 2.0)


def test_add_commutes(meta2, rng):
    a, b = random_series(meta2, rng), random_series(meta2, rng)
    assert add(a, b) == add(b, a)


def test_meta_mismatch(meta2):
    other = meta2.with_caps(degree_cap=4)
    with pytest.raises(MetaMismatch):
        Series.y(meta2, 0) + Series.y(other, 0)


def test_square_of_q_plus_qbar(meta2):
    s = (0, 1)
    u = Series.q(meta2, s) + Series.qbar(meta2, s)
    expected = Series.from_terms(meta2, [
        (None, None, {s: 2}, None, 1.0),
        (None, None, {s: 1}, {s: 1}, 2.0),
        (None, None, None, {s: 2}, 1.0),
    ])
    assert u * u == expected


def test_fourier_product(meta2):
    assert Series.fourier(meta2, [1]) * Series.fourier(meta2, [2]) == Series.fourier(meta2, [3])
    assert Series.fourier(meta2, [3]) * Series.fourier(meta2, [-3]) == Series.constant(meta2, 1.0)


def test_multiply_matches_brute_force(meta2, rng):
    for _ in range(20):
        a, b = random_series(meta2, rng, 15), random_series(meta2, rng, 15)
        assert_close(multiply(a, b), brute_multiply(a, b), 1e-14)


def test_multiply_reports_dropped_mass(meta2, rng):
    a, b = random_series(meta2, rng, 15), random_series(meta2, rng, 15)
    big = meta2.with_caps(degree_cap=meta2.degree_cap * 2, fourier_cap=meta2.fourier_cap * 2)
    full = multiply(a.with_meta(big), b.with_meta(big))
    kept = multiply(a, b)
    lost_terms = truncate(full, meta2.degree_cap, meta2.fourier_cap)
    assert kept.dropped_mass >= lost_terms.dropped_mass - 1e-12
    # the dropped mass is the l1 mass of the raw discarded products
    raw = sum(abs(ca * cb) for ea, ca in zip(a.exps.astype(int), a.coeffs)
              for eb, cb in zip(b.exps.astype(int), b.coeffs)
              if (2 * (ea + eb)[1:2].sum() + (ea + eb)[2:].sum() > meta2.degree_cap)
              or abs((ea + eb)[0]) > meta2.fourier_cap)
    assert kept.dropped_mass == pytest.approx(raw, rel=1e-12, abs=1e-14)


def test_bracket_convention(meta2):
    y1 = Series.y(meta2, 0)
    x1 = Series.fourier(meta2, [1])  # e^{ix}: {y, e^{ix}} = -i e^{ix}, i.e. {y, x} = -1
    assert poisson_bracket(y1, x1) == Series.fourier(meta2, [1], -1j)
    s = (0, 1)
    qq = Series.monomial(meta2, 1.0, beta={s: 1}, gamma={s: 1})
    assert poisson_bracket(qq, Series.q(meta2, s)) == Series.q(meta2, s, -1j)


def test_antisymmetry_exact(meta2, rng):
    for _ in range(20):
        U, V = random_series(meta2, rng), random_series(meta2, rng)
        assert poisson_bracket(U, V) == -poisson_bracket(V, U)


def test_jacobi(meta2, rng):
    big = meta2.with_caps(degree_cap=12, fourier_cap=12)
    for _ in range(10):
        U, V, W = (random_series(big, rng, 8, max_order=4) for _ in range(3))
        j = (poisson_bracket(U, poisson_bracket(V, W)) + poisson_bracket(V, poisson_bracket(W, U))
             + poisson_bracket(W, poisson_bracket(U, V)))
        scale = max(poisson_bracket(U, poisson_bracket(V, W)).l1(), 1.0)
        assert j.l1() <= 1e-12 * scale


def test_leibniz_exact_under_cap(meta2, rng):
    big = meta2.with_caps(degree_cap=14, fourier_cap=14)
    U, V, W = (random_series(big, rng, 6, max_order=4) for _ in range(3))
    lhs = poisson_bracket(U * V, W)
    rhs = U * poisson_bracket(V, W) + poisson_bracket(U, W) * V
    assert_close(lhs, rhs)


def test_degree_bookkeeping(meta2, rng):
    # pure z series: bracket of z-degrees h1, h2 has z-degree h1 + h2 - 2
    big = meta2.with_caps(degree_cap=10)
    for h1, h2 in [(2, 3), (3, 3), (1, 4)]:
        U = random_series(big, rng, 10, max_order=h1, kmax=0)
        V = random_series(big, rng, 10, max_order=h2, kmax=0)
        U = U.select((U.z_degrees == h1) & (U.alpha.sum(1) == 0))
        V = V.select((V.z_degrees == h2) & (V.alpha.sum(1) == 0))
        B = poisson_bracket(U, V)
        assert (B.z_degrees == h1 + h2 - 2).all()


def test_momentum_residual_examples():
    meta = SeriesMeta(1, ((1, 0),), ((-1, 0), (0, 0)), 4, 2)
    t = Term((1,), (0,), {(-1, 0): 1}, {}, 1.0)
    assert momentum_residual(t, meta).tolist() == [0, 0]
    t = Term((0,), (1,), {(0, 0): 1, (-1, 0): 1}, {(0, 0): 1, (-1, 0): 1}, 1.0)
    assert momentum_residual(t, meta).tolist() == [0, 0]


def test_momentum_closure(meta2, rng):
    for _ in range(10):
        U = random_series(meta2, rng, 60, momentum=True)
        V = random_series(meta2, rng, 60, momentum=True)
        for W in (U * V, poisson_bracket(U, V)):
            assert not momentum_residual(W).any()


def test_vector_field_linear(meta2):
    omega = np.array([1.7])
    N = Series.y(meta2, 0, omega[0])
    w = PhasePoint([0.3], [0.1], np.arange(5) * 0.1 + 0.2j)
    v = vector_field(N, w)
    assert np.allclose(v.dx, omega) and np.allclose(v.dy, 0) and np.allclose(v.dq, 0)


def test_vector_field_rotation(meta2):
    s = (0, 1)
    j = meta2.site_index[s]
    W = Series.monomial(meta2, 2.5, beta={s: 1}, gamma={s: 1})
    q = np.arange(5) * 0.1 + 0.05j
    v = vector_field(W, PhasePoint([0.0], [0.0], q))
    # dq = {q, W} = +i Omega q under the bracket above
    assert v.dq[j] == pytest.approx(2.5j * q[j])
    assert v.dqbar[j] == pytest.approx(-2.5j * np.conj(q[j]))


def test_vector_field_finite_difference(meta2, rng):
    for _ in range(5):
        W = random_series(meta2, rng, 20)
        state = rng.normal(size=meta2.width) + 1j * rng.normal(size=meta2.width) * 0.3
        g = W.gradient(state)
        h = 1e-6
        for c in range(meta2.width):
            e = np.zeros(meta2.width)
            e[c] = h
            fd = (W(state + e) - W(state - e)) / (2 * h)
            assert abs(fd - g[c]) <= 1e-6 * max(1.0, abs(g[c]))


def test_evaluation_matches_direct_sum(meta2, rng):
    W = random_series(meta2, rng, 20)
    state = rng.normal(size=meta2.width) + 0.1j
    direct = 0
    for t in W.terms():
        val = t.coeff * np.exp(1j * np.dot(t.k, state[:1])) * np.prod(state[1:2] ** np.array(t.alpha))
        for s, p in t.beta.items():
            val *= state[2 + meta2.site_index[s]] ** p
        for s, p in t.gamma.items():
            val *= state[2 + meta2.m + meta2.site_index[s]] ** p
        direct += val
    assert W(state) == pytest.approx(direct, rel=1e-13)


def test_truncate(meta2, rng):
    W = random_series(meta2, rng, 30)
    assert truncate(W, 99, 99) == W
    ys = Series.y(meta2, 0) + Series.constant(meta2, 3.0)
    t = truncate(ys, 0, 0)
    assert t == Series.constant(meta2, 3.0) and t.dropped_mass == 1.0
    t = truncate(W, 3, 1)
    assert t.dropped_mass == pytest.approx((W - t).l1(), rel=1e-14)


def test_conj_partner_reality(meta2, rng):
    W = random_series(meta2, rng, 20, real=True)
    assert W.is_real()
    q = rng.normal(size=meta2.m) + 1j * rng.normal(size=meta2.m)
    val = W(PhasePoint(rng.normal(size=1), rng.normal(size=1), q))
    assert abs(val.imag) <= 1e-12 * max(1, abs(val))


def test_text_and_json_roundtrip_bit_exact(meta2, rng):
    W = random_series(meta2, rng, 40) * (1 / 3)
    for dump, load in ((dumps_text, loads_text), (dumps_json, loads_json)):
        back = load(dump(W))
        assert back == W
        assert back.coeffs.tobytes() == W.coeffs.tobytes()
    assert loads_text(dumps_text(Series(meta2))) == Series(meta2)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.integers(-2, 2), st.integers(0, 2), st.integers(0, 4),
                          st.integers(0, 4), st.floats(-5, 5, allow_nan=False)), min_size=1, max_size=8))
def test_series_equality_is_term_map_equality(entries):
    meta = SeriesMeta(1, ((1,),), ((0,), (2,), (-1,), (-2,), (3,)), 9, 4)
    terms = [((k,), (a,), {(0,): b, (2,): 1} if b else {}, {(-1,): g} if g else {}, c)
             for k, a, b, g, c in entries]
    A = Series.from_terms(meta, terms)
    B = Series.from_terms(meta, list(reversed(terms)))
    assert A == B
    assert np.all(np.abs(A.coeffs) > 0)


def test_canonical_order_sorted(meta2, rng):
    W = random_series(meta2, rng, 40)
    rows = [tuple(r) for r in W.exps.astype(int)]
    assert rows == sorted(rows) and len(set(rows)) == len(rows)


def test_chopped_products_are_accounted(meta2, rng):
    a, b = random_series(meta2, rng, 15), random_series(meta2, rng, 15)
    big = meta2.with_caps(degree_cap=meta2.degree_cap * 2, fourier_cap=meta2.fourier_cap * 2)
    a, b = a.with_meta(big), b.with_meta(big)
    chop = float(np.median(np.abs(np.outer(a.coeffs, b.coeffs))))
    full = multiply(a, b)
    kept = multiply(a, b, chop=chop)
    small = sum(abs(ca * cb) for ca in a.coeffs for cb in b.coeffs if abs(ca * cb) < chop)
    assert full.dropped_mass == 0.0
    assert kept.dropped_mass == pytest.approx(small, rel=1e-12)
    assert (full - kept).l1() <= kept.dropped_mass * (1 + 1e-12)

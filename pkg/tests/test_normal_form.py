import numpy as np
import pytest

from beamkam.beam_model import ModelConfig, assemble_hamiltonian, build_sites, normal_part
from beamkam.normal_form import (
    DivisorPolicy,
    NonTerminatingGenerator,
    classify,
    compose_transform,
    flow,
    high_counts,
    is_z_form,
    lie_transform,
    order2_step,
    partial_normal_form,
    solve_homological,
    term_divisors,
)
from beamkam.phase import PhasePoint
from beamkam.series import Series, SeriesMeta, momentum_residual, poisson_bracket

from conftest import random_series


@pytest.fixture(scope="module")
def small_run():
    cfg = ModelConfig(d=1, J_max=3, S=((1,),), N_cut=1, degree_cap=5, fourier_cap=4, torus_actions=0.05,
                      eps=1e-3)
    lat = build_sites(cfg)
    xi = np.random.default_rng(0).uniform(0, 1, len(lat.sites))
    A = assemble_hamiltonian(cfg, xi, lat)
    pol = DivisorPolicy.for_lattice(lat, 1, 1e-3, 2, 8)
    o2 = order2_step(A.N, A.P, A.omega, A.Omega, pol)
    pn = partial_normal_form(o2.N_breve, o2.R_breve, o2.omega, o2.Omega, pol, o2.constant)
    return cfg, lat, A, pol, o2, pn


def _real_point(meta, rng, scale):
    x = rng.uniform(0, 2 * np.pi, meta.n)
    y = scale ** 2 * rng.uniform(-1, 1, meta.n)
    q = scale * (rng.standard_normal(meta.m) + 1j * rng.standard_normal(meta.m)) / np.sqrt(2 * meta.m)
    return PhasePoint(x, y, q).to_state()


@pytest.fixture
def meta_big():
    return SeriesMeta(1, ((1, 0),), ((0, 0), (-1, 0), (0, 1)), 9, 12)


def test_single_term_generator(meta2):
    omega, Omega = np.array([1.3]), np.array([0.7, 1.9, 2.2, 2.6, 3.1])
    R = Series.monomial(meta2, 0.5 - 0.25j, k=(1,), beta={(-1, 0): 1})
    sol = solve_homological(R, omega, Omega)
    D = 1.3 + 1.9
    assert sol.F.coefficient(k=(1,), beta={(-1, 0): 1}) == pytest.approx((0.5 - 0.25j) / (1j * D))
    N = normal_part(meta2, omega, Omega)
    assert (poisson_bracket(N, sol.F) + R).l1() < 1e-15
    assert sol.residual < 1e-15


def test_zero_divisor_left_unresolved(meta2):
    omega, Omega = np.array([1.0]), np.array([0.7, 1.9, 1.9, 2.6, 3.1])
    R = Series.monomial(meta2, 1.0, beta={(-1, 0): 1}, gamma={(0, 1): 1})
    sol = solve_homological(R, omega, Omega)
    assert len(sol.F) == 0
    assert sol.unresolved == R
    assert sol.divisor_stats["unresolved"] == 1


def test_homological_residual_random(meta2, rng):
    R = random_series(meta2, rng, 30, max_order=4)
    omega, Omega = np.array([1.37]), np.array([0.71, 1.93, 2.29, 2.61, 3.17])
    sol = solve_homological(R, omega, Omega)
    N = normal_part(meta2, omega, Omega)
    solved = R - sol.unresolved
    assert (poisson_bracket(N, sol.F) + solved).l1() <= 1e-10 * solved.l1()


def test_lie_transform_zero_generator(meta2, rng):
    H = random_series(meta2, rng, 10)
    res = lie_transform(H, Series.zero(meta2))
    assert res.H == H and res.iterations == 0


def test_lie_transform_low_order_needs_tol(meta2):
    F = Series.y(meta2, 0)
    with pytest.raises(NonTerminatingGenerator):
        lie_transform(Series.q(meta2, (0, 0)), F)


def test_lie_transform_matches_manual_expansion(meta2, rng):
    H = random_series(meta2, rng, 8, max_order=3)
    F = random_series(meta2, rng, 6, max_order=3)
    F = F.select(F.orders == 3)
    b1 = poisson_bracket(H, F)
    b2 = poisson_bracket(b1, F)
    b3 = poisson_bracket(b2, F)
    b4 = poisson_bracket(b3, F)
    expect = H + b1 + b2 * 0.5 + b3 * (1 / 6) + b4 * (1 / 24)
    got = lie_transform(H, F).H
    assert (got - expect).l1() < 1e-12 * max(expect.l1(), 1.0)


def test_lie_transform_equals_flow(meta_big):
    rng = np.random.default_rng(3)
    H = random_series(meta_big, rng, 12, max_order=3, kmax=1, real=True)
    F = random_series(meta_big, rng, 8, max_order=3, kmax=1, real=True) * 0.3
    F = F.select(F.orders == 3)
    G = lie_transform(H, F).H
    for _ in range(5):
        w = _real_point(meta_big, rng, 0.05)
        exact = H(flow(F, w))
        assert abs(G(w) - exact) <= 1e-8 * max(abs(exact), 1e-12)


def test_lie_transform_order2_generator_equals_flow(meta_big):
    rng = np.random.default_rng(4)
    H = random_series(meta_big, rng, 10, max_order=3, kmax=1, real=True)
    F = Series.monomial(meta_big, 0.2, k=(1,), beta={(0, 0): 1}) + Series.monomial(meta_big, 0.2, k=(-1,),
                                                                                   gamma={(0, 0): 1})
    G = lie_transform(H, F, tol=1e-16).H
    w = _real_point(meta_big, rng, 0.05)
    exact = H(flow(F, w))
    # the transformed series is truncated at the degree cap
    assert abs(G(w) - exact) <= 1e-8 * max(abs(exact), 1e-12)


def test_order2_removes_low_order_terms(small_run):
    cfg, lat, A, pol, o2, pn = small_run
    R = o2.R_breve
    low = R.select(R.orders <= 2)
    assert low.l1() < 1e-10 * A.P.l1()
    assert o2.log.details["residual_low_l1"] < 1e-10
    assert np.abs(o2.omega - A.omega).max() < 10 * cfg.eps


def test_conjugacy_against_flows(small_run):
    cfg, lat, A, pol, o2, pn = small_run
    rng = np.random.default_rng(8)
    H0 = A.H
    H1 = pn.H
    gens = list(o2.generators) + list(pn.generators)
    for _ in range(5):
        w = _real_point(H0.meta, rng, 0.05)
        mapped = compose_transform(gens, w, "forward").point.to_state()
        a, b = H1(w), H0(mapped)
        assert abs(a - b) <= 1e-8 * abs(b)


def test_transform_round_trip(small_run):
    cfg, lat, A, pol, o2, pn = small_run
    gens = list(o2.generators) + list(pn.generators)
    w = _real_point(A.H.meta, np.random.default_rng(9), 0.05)
    fwd = compose_transform(gens, w, "forward").point.to_state()
    back = compose_transform(gens, fwd, "inverse").point.to_state()
    assert np.abs(back - w).max() < 1e-10
    assert np.abs(fwd - w).max() > 0


def test_partial_classification_invariants(small_run):
    cfg, lat, A, pol, o2, pn = small_run
    pn.check_invariants(pol.high_mask, 2)
    killed = pn.remainder
    assert killed.l1() < 1e-12
    assert len(pn.Z) > 0


def test_z_terms_depend_on_actions_only(small_run):
    cfg, lat, A, pol, o2, pn = small_run
    meta = pn.Z.meta
    for i in range(meta.n):
        assert poisson_bracket(pn.Z, Series.y(meta, i)).l1() == 0
    for s in meta.sites:
        action = Series.monomial(meta, 1.0, beta={s: 1}, gamma={s: 1})
        assert poisson_bracket(pn.Z, action).l1() == 0


def test_momentum_preserved(small_run):
    cfg, lat, A, pol, o2, pn = small_run
    for W in [A.P, o2.R_breve, pn.Z, pn.P, pn.Q, *o2.generators, *pn.generators]:
        if len(W):
            assert not np.any(momentum_residual(W))


def test_classify_rules(meta2):
    high = np.array([False, False, True, True, True])
    y2 = Series.monomial(meta2, 1.0, alpha=(2,))
    Z, P, Q, rest = classify(y2, high, 2)
    assert Z == y2 and len(P) == len(Q) == len(rest) == 0
    Z0, *_ = classify(y2, high, 0)
    assert len(Z0) == 0
    cubic_high = Series.monomial(meta2, 1.0, beta={(0, 1): 1, (0, -1): 1}, gamma={(1, 1): 1})
    assert high_counts(cubic_high, high)[0] == 3
    assert classify(cubic_high, high, 2)[2] == cubic_high
    assert not is_z_form(Series.monomial(meta2, 1.0, beta={(0, 1): 2}, gamma={(0, 1): 2}), high, 2)[0]


def test_partial_with_m_zero_has_empty_z(small_run):
    cfg, lat, A, pol, o2, pn = small_run
    pol0 = DivisorPolicy.for_lattice(lat, 1, 1e-3, 0, 8)
    out = partial_normal_form(o2.N_breve, o2.R_breve, o2.omega, o2.Omega, pol0, o2.constant)
    assert len(out.Z) == 0
    assert (out.P.orders >= 3).all()


def test_divisors_are_nonresonant_for_generators(small_run):
    cfg, lat, A, pol, o2, pn = small_run
    for F in pn.generators:
        D = term_divisors(F, o2.omega, o2.Omega)
        assert (np.abs(D) >= pol.thresholds(F)).all()

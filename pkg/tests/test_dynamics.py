import json
import math

import numpy as np
import pytest
from scipy.stats import linregress

from beamkam.beam_model import ModelConfig, assemble_hamiltonian, build_sites, normal_part
from beamkam.dynamics import (
    IntegrationError,
    NormalFormRun,
    StickinessConfig,
    StickinessReport,
    default_dt,
    energy_drift,
    integrate,
    sample_initial,
    simulation_hamiltonian,
    split_normal,
    stickiness_experiment,
    torus_distance,
)
from beamkam.normal_form import DivisorPolicy, flow, order2_step, partial_normal_form
from beamkam.norms import DomainParams
from beamkam.phase import PhasePoint
from beamkam.series import SeriesMeta

from conftest import random_series

OMEGA = np.array([1.1])
BIG_OMEGA = np.array([1.3, 2.2, 2.7, 3.1, 4.3])
DP = DomainParams(0.5, 0.1, 3, 2)


@pytest.fixture(scope="module")
def toy():
    meta = SeriesMeta(1, ((1, 0),), ((0, 0), (-1, 0), (0, 1), (0, -1), (1, 1)), 5, 4)
    rng = np.random.default_rng(0)
    P = random_series(meta, rng, 20, real=True, kmax=1)
    P = P.select(P.orders >= 3) * 0.2
    N = normal_part(meta, OMEGA, BIG_OMEGA)
    q = 0.1 * (rng.standard_normal(5) + 1j * rng.standard_normal(5))
    w0 = PhasePoint([0.3], [0.02], q).to_state()
    return meta, N, P, w0


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
    return NormalFormRun.from_outputs(A.H, o2, pn)


def test_split_normal_recovers_frequencies(toy):
    meta, N, P, _ = toy
    om, Om, R = split_normal(N + P)
    assert np.array_equal(om, OMEGA) and np.array_equal(Om, BIG_OMEGA)
    assert R == P


def test_default_dt_resolves_fastest_rotation():
    assert default_dt(np.array([1.0, 2.0])) == 0.01
    assert default_dt(np.array([100.0])) == pytest.approx(2 * math.pi / 5000)


def test_unperturbed_flow_is_exact(toy):
    meta, N, _, w0 = toy
    T = 7.3
    tr = integrate(N, w0, T, 0.01, stride=73)
    fin = tr.final
    assert fin[0].real == pytest.approx(w0[0].real + OMEGA[0] * T, abs=1e-12)
    assert fin[1] == w0[1]
    assert np.allclose(np.abs(fin[2:7]), np.abs(w0[2:7]), rtol=0, atol=1e-13)
    assert np.allclose(fin[2:7], w0[2:7] * np.exp(1j * BIG_OMEGA * T), atol=1e-13)
    d = [torus_distance(s, DP, meta) for s in tr.states]
    assert max(d) - min(d) <= 1e-12
    assert energy_drift(tr) <= 1e-14


def test_integrator_matches_accurate_flow(toy):
    meta, N, P, w0 = toy
    H = N + P
    exact = flow(H, w0, 5.0)
    errs = [np.abs(integrate(H, w0, 5.0, dt, energy_guard=1.0).final - exact).max() for dt in (0.02, 0.01)]
    assert errs[1] < 1e-5
    assert 3.0 < errs[0] / errs[1] < 5.0


def test_time_reversal(toy):
    meta, N, P, w0 = toy
    H = N + P
    fwd = integrate(H, w0, 20.0, 0.05, energy_guard=1.0)
    back = integrate(H, fwd.final, -20.0, 0.05, energy_guard=1.0)
    assert np.abs(back.final - w0).max() < 1e-8


def test_energy_error_second_order(toy):
    meta, N, P, w0 = toy
    H = N + P
    dts = [0.02, 0.01, 0.005]
    drifts = [energy_drift(integrate(H, w0, 10.0, dt, energy_guard=1.0)) for dt in dts]
    slope = np.polyfit(np.log(dts), np.log(drifts), 1)[0]
    assert 1.7 <= slope <= 2.3
    assert 3.0 < drifts[0] / drifts[1] < 5.0


def test_energy_error_not_secular(toy):
    meta, N, P, w0 = toy
    H = N + P
    tr = integrate(H, w0, 500.0, 0.05, energy_guard=1.0)   # 10^4 steps
    err = tr.energy.real - tr.energy[0].real
    fit = linregress(tr.times, err)
    # a linear trend stays inside the oscillation band and the error does not grow with the horizon
    assert abs(fit.slope) * 500.0 <= np.abs(err).max()
    short = np.abs(err[tr.times <= 50.0]).max()
    assert np.abs(err).max() < 3.0 * short


def test_single_step_local_error(toy):
    meta, N, P, w0 = toy
    H = N + P
    dt = 0.01
    tr = integrate(H, w0, dt, dt)
    assert abs(tr.energy[1] - tr.energy[0]) <= 10 * dt ** 3 * abs(tr.energy[0])


def test_reality_preserved(toy):
    meta, N, P, w0 = toy
    tr = integrate(N + P, w0, 50.0, 0.05, stride=10, energy_guard=1.0)
    assert tr.reality_defect() <= 1e-12
    assert 0 <= tr.point(len(tr) - 1).x.real[0] < 2 * math.pi


def test_energy_guard_rejection_reports_partial(toy):
    meta, N, P, w0 = toy
    with pytest.raises(IntegrationError) as exc:
        integrate(N + P, w0, 1.0, 0.1, energy_guard=1e-30, max_halvings=1)
    assert exc.value.partial is not None and len(exc.value.partial) == 1


def test_torus_distance_examples():
    meta = SeriesMeta(1, ((1, 0),), ((0, 0), (2, 1)), 4, 2)
    zero = PhasePoint([1.0], [0.0], [0.0, 0.0])
    assert torus_distance(zero, DP, meta) == 0.0
    delta = 0.01
    single = PhasePoint([0.0], [0.0], [0.0, delta])
    assert torus_distance(single, DP, meta) == pytest.approx(delta * math.sqrt(5) ** 3)
    a = PhasePoint([0.1], [1e-4], [0.01, 0.002])
    b = PhasePoint([2.9], [1e-4], [0.01, 0.002])
    assert torus_distance(a, DP, meta) == torus_distance(b, DP, meta)


def test_initial_sample_on_delta_sphere(small_run):
    meta = small_run.H_transformed.meta
    rng = np.random.default_rng(1)
    for _ in range(5):
        w = sample_initial(meta, 0.05, DP, rng)
        assert torus_distance(w, DP, meta) == pytest.approx(0.05, rel=1e-12)
        assert w.reality_defect() == 0


def test_stickiness_unperturbed_distance_constant(small_run):
    meta = small_run.H_transformed.meta
    om, Om, _ = split_normal(small_run.H_transformed)
    N = normal_part(meta, om, Om)
    run = NormalFormRun(N, N, [])
    rep = stickiness_experiment(StickinessConfig(horizon=20.0, samples=20, dbase=1), run)
    d = [s[1] for s in rep.samples]
    assert rep.distance0 == pytest.approx(0.05, rel=1e-12)
    assert max(d) - min(d) <= 1e-12
    assert rep.energy_drift <= 1e-13


def test_stickiness_small_model(small_run):
    rep = stickiness_experiment(StickinessConfig(horizon=50.0, samples=50, dbase=1), small_run)
    assert rep.max_distance == max(s[1] for s in rep.samples)
    assert not rep.violated and rep.first_violation_time is None
    assert rep.energy_drift <= 1e-6
    times = [s[0] for s in rep.samples]
    assert min(times) == pytest.approx(-50.0) and max(times) == pytest.approx(50.0)


def test_transformed_and_original_paths_agree(small_run):
    a = stickiness_experiment(StickinessConfig(horizon=5.0, samples=10, dbase=1), small_run)
    b = stickiness_experiment(StickinessConfig(horizon=5.0, samples=10, dbase=1, mode="original"), small_run)
    assert len(a.samples) == len(b.samples)
    for (ta, da, _), (tb, db, _) in zip(a.samples, b.samples):
        assert ta == tb
        assert abs(da - db) <= 1e-6


def test_normal_form_reduces_drift(small_run):
    cfg = StickinessConfig(horizon=50.0, samples=50, dbase=1)
    nf = stickiness_experiment(cfg, small_run)
    ctrl = stickiness_experiment(StickinessConfig(horizon=50.0, samples=50, dbase=1, mode="disabled"), small_run)
    assert ctrl.drift_rate >= 10 * nf.drift_rate


def test_simulation_trim_accounting(small_run):
    H = small_run.H_transformed
    trimmed, mass = simulation_hamiltonian(H, 1e-3)
    assert len(trimmed) < len(H)
    assert (H - trimmed).l1() == pytest.approx(mass, rel=1e-9)
    same, zero = simulation_hamiltonian(H, 0.0)
    assert same is H and zero == 0.0


def test_report_serialization_and_flags():
    rows = [(-1.0, 0.05, 1.0), (0.0, 0.05, 1.0), (1.0, 0.11, 1.0)]
    rep = StickinessReport(0.05, 2, 400.0, 0.11, 1.0, 0.0, rows)
    assert rep.violated
    d = json.loads(rep.to_json())
    assert d["violated"] and d["samples"][2] == [1.0, 0.11, 1.0]
    lines = rep.to_csv().splitlines()
    assert lines[0] == "t,distance,energy" and len(lines) == 4
    with pytest.raises(AssertionError):
        StickinessReport(0.05, 2, 400.0, 0.2, None, 0.0, rows)


def test_config_checks():
    with pytest.raises(ValueError):
        StickinessConfig(delta=0.2, rho=0.1)
    with pytest.raises(ValueError):
        StickinessConfig(mode="sideways")
    assert StickinessConfig(delta=0.05, M=2).T == pytest.approx(400.0)

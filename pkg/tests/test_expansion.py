import math

import numpy as np
import pytest

from spfnls.errors import CouplingError
from spfnls.expansion import (ExpansionState, compute_residuals, evolve_v1, evolve_v2,
                              first_crossing, initial_state, mild_solution, phase_decompose,
                              reconstruction_errors, reset_frame, run_coupled, stopping_times)
from spfnls.experiments import basis_diffusion_rate
from scipy.sparse.linalg import expm_multiply

from spfnls.linearization import semigroup_array, to_complex, to_real
from spfnls.model import solitary_wave
from spfnls.noise import IncrementSource, make_noise, path_stream
from spfnls.spectral_core import Field, l2_inner, lp_norms

DT = 1 / 640


@pytest.fixture(scope="module")
def nm(grid_mc):
    return make_noise(grid_mc)


def _v10(pack):
    return 0.5 * pack.wave.u_star_xx.values + 0.3j * pack.wave.u_star.values


def test_v1_sigma_independent(pack_mc, grid_mc):
    a = initial_state(pack_mc)
    b = initial_state(pack_mc)
    n1, n2 = make_noise(grid_mc, sigma=0.1), make_noise(grid_mc, sigma=0.2)
    g1, g2 = path_stream(5), path_stream(5)
    for _ in range(20):
        a = evolve_v1(a, pack_mc, n1, DT, g1)
        b = evolve_v1(b, pack_mc, n2, DT, g2)
    assert np.array_equal(a.v1, b.v1) and a.crc == b.crc and a.steps_v1 == 20


def test_v1_noise_off_is_semigroup(pack_mc, nm):
    st = initial_state(pack_mc, _v10(pack_mc))
    for _ in range(320):
        st = evolve_v1(st, pack_mc, nm, DT, None)
    ref = semigroup_array(_v10(pack_mc), 0.5, pack_mc)
    assert lp_norms(st.v1 - ref, pack_mc.grid.dx, 2) < 1e-6


def test_v1_mean_is_semigroup(pack_mc, nm):
    P = 500
    lin = pack_mc.linear_stepper(DT, "strang_exact_noise", nm.beta ** 2)
    src = IncrementSource(nm, [path_stream(11, 0, i) for i in range(P)], DT)
    v = np.repeat(_v10(pack_mc)[None], P, axis=0)
    v = lin.advance_v1(v, 320, source=src)
    ref = semigroup_array(_v10(pack_mc), 0.5, pack_mc)
    dx = pack_mc.grid.dx
    for g in (pack_mc.wave.u_star.values, pack_mc.wave.u_star_x.values, np.ones(pack_mc.grid.n_points)):
        s = l2_inner(v, g, dx)
        se = s.std(ddof=1) / math.sqrt(P)
        assert abs(s.mean() - l2_inner(ref, g, dx)) < 3 * se


def test_v2_noise_off_quadrature(pack_mc, nm):
    t = 0.5
    st = initial_state(pack_mc)
    for _ in range(320):
        st = evolve_v2(st, pack_mc, nm, DT, None, ito=True)
    # -1/2 beta^2 int_0^t P(s) u* ds from the augmented system x' = A x + y, y' = 0
    A = pack_mc.matrix
    n2 = A.shape[0]
    B = np.zeros((2 * n2, 2 * n2))
    B[:n2, :n2] = A
    B[:n2, n2:] = np.eye(n2)
    x0 = np.concatenate([np.zeros(n2), to_real(pack_mc.wave.u_star.values)])
    ref = -0.5 * nm.beta ** 2 * to_complex(expm_multiply(t * B, x0)[:n2])
    assert lp_norms(st.v2 - ref, pack_mc.grid.dx, 2) < 1e-6
    assert np.all(st.v1 == 0)


def test_v2_zero_everything(pack_mc, grid_mc):
    nm0 = make_noise(grid_mc).scaled(0.0)
    st = initial_state(pack_mc)
    for _ in range(10):
        st = evolve_v2(st, pack_mc, nm0, DT, None, ito=True)
    assert np.all(st.v2 == 0)


def _mild_gap(pack, nm, dt, t=0.25, P=4, fine_dt=None, scheme="strang_exact_noise"):
    fine_dt = fine_dt or dt
    m = int(round(dt / fine_dt))
    n = int(round(t / dt))
    src = IncrementSource(nm, [path_stream(3, 0, i) for i in range(P)], fine_dt)
    etas = [sum(src.next() for _ in range(m)) for _ in range(n)]
    lin = pack.linear_stepper(dt, scheme, nm.beta ** 2, ito=True)
    z = np.zeros((P, pack.grid.n_points), complex)
    v1, v2 = lin.advance_pair(z, z, n, etas=etas)
    m1, m2 = mild_solution(pack, etas, dt, nm.beta ** 2)
    dx = pack.grid.dx
    return (lp_norms(v1 - m1, dx, 2) / lp_norms(m1, dx, 2)).max(), (lp_norms(v2 - m2, dx, 2) / lp_norms(m2, dx, 2)).max()


def test_mild_form_cross_check(pack_mc, nm):
    g1, g2 = _mild_gap(pack_mc, nm, 1e-3, t=0.25)
    assert g1 < 1e-3
    assert g2 < 1e-3


def test_mild_form_gap_first_order(pack_mc, nm):
    gaps = [_mild_gap(pack_mc, nm, 1 / 640 / k, fine_dt=1 / 2560)[1] for k in (1, 2, 4)]
    order = np.polyfit(np.log([1, 1 / 2, 1 / 4]), np.log(gaps), 1)[0]
    assert order > 0.8


def test_coupling_detected(pack_mc, nm, wave_mc):
    st = initial_state(pack_mc)
    st = evolve_v1(st, pack_mc, nm, DT, path_stream(1))
    with pytest.raises(CouplingError):
        evolve_v2(st, pack_mc, nm, DT, path_stream(1))
    with pytest.raises(CouplingError):
        compute_residuals(wave_mc.u_star, st, wave_mc, 0.1, u_crc=st.crc + 1)


def test_residuals_at_start_and_noise_off(pack_mc, wave_mc, grid_mc):
    st = initial_state(pack_mc)
    z, zp = compute_residuals(wave_mc.u_star, st, wave_mc, 0.1, u_crc=st.crc)
    assert np.all(z == 0) and np.all(zp == 0)
    nm0 = make_noise(grid_mc)
    d = run_coupled(pack_mc, nm0, 0.0, 1.0, DT, [path_stream(0)], record_stride=64)
    assert d.z[0, 0] == 0.0
    assert d.z.max() < 1e-6 and np.array_equal(d.z, d.zp)


def test_phase_decompose_examples(pack_mc, wave_mc, rng):
    st = phase_decompose(ExpansionState(wave_mc.u_star_x.values.copy(), np.zeros(wave_mc.grid.n_points, complex)),
                         pack_mc)
    assert st.a1 == pytest.approx(1.0, abs=1e-12)
    assert lp_norms(st.w1, wave_mc.grid.dx, 2) < 1e-10
    n = wave_mc.grid.n_points
    v1 = rng.standard_normal((3, n)) + 1j * rng.standard_normal((3, n))
    v2 = rng.standard_normal((3, n)) + 1j * rng.standard_normal((3, n))
    assert max(reconstruction_errors(phase_decompose(ExpansionState(v1, v2), pack_mc), pack_mc)) < 1e-8


def test_run_coupled_invariants(pack_mc, nm):
    d = run_coupled(pack_mc, nm, 0.05, 0.5, DT, [path_stream(2, 0, i) for i in range(4)], record_stride=32)
    assert max(d.recon) < 1e-8
    assert d.times.shape == (11,) and d.a1.shape == (11, 4)
    assert np.all(d.a1[0] == 0)
    rows = list(d.rows(1))
    assert len(rows) == 11 and len(rows[0]) == 9
    assert np.all(d.v1_mixed >= d.v1 - 1e-15)


def test_a1_variance_matches_basis_sum(pack_mc, nm):
    P = 1000
    lin = pack_mc.linear_stepper(DT, "strang_exact_noise", nm.beta ** 2)
    src = IncrementSource(nm, [path_stream(20240611, 0, i) for i in range(P)], DT)
    v = lin.advance_v1(np.zeros((P, pack_mc.grid.n_points), complex), 640, source=src)
    a1 = pack_mc.phase(v)
    D = basis_diffusion_rate(pack_mc, nm)
    assert abs(a1.var() / D - 1) < 0.05


def test_reset_frame(pack_mc, params, grid_mc):
    c = 4 * grid_mc.dx
    u = solitary_wave(params, grid_mc, c).u_star
    wave, pack2, st = reset_frame(u, c, pack_mc, 0.1)
    assert wave.shift == c
    assert lp_norms(st.v1, grid_mc.dx, 2) < 1e-12 and np.all(st.v2 == 0)
    with pytest.raises(ValueError):
        reset_frame(u, grid_mc.domain_length / 4, pack_mc, 0.1)
    _, rebuilt, _ = reset_frame(u, c, pack_mc, 0.1, rebuild=True)
    d = np.abs(rebuilt.spectrum[:, None] - pack_mc.spectrum[None, :]).min(axis=1).max()
    assert d < 1e-8 * pack_mc.matrix_norm


def test_reset_chaining_matches_first_window(pack_mc, nm):
    # window two, started from the end of window one in a re-centred frame,
    # has the same a1 increment statistics as window one
    P, n = 300, 320
    sigma = 0.05
    lin = pack_mc.linear_stepper(DT, "strang_exact_noise", nm.beta ** 2)
    src = IncrementSource(nm, [path_stream(8, 0, i) for i in range(P)], DT)
    v = lin.advance_v1(np.zeros((P, pack_mc.grid.n_points), complex), n, source=src)
    a_first = pack_mc.phase(v)
    inc = []
    for p in range(P):
        u = pack_mc.wave.u_star.values + sigma * v[p]
        _, pk, st = reset_frame(u, sigma * a_first[p], pack_mc, sigma)
        inc.append(st)
    v0 = np.stack([s.v1 for s in inc])
    a0 = np.array([s.a1 for s in inc])
    v2 = lin.advance_v1(v0, n, source=src)
    a_second = pack_mc.phase(v2) - a0
    ratio = a_second.var() / a_first.var()
    assert abs(ratio - 1) < 4 * math.sqrt(4 / P)


def test_stopping_times(pack_mc, nm):
    d = run_coupled(pack_mc, nm, 0.05, 0.25, DT, [path_stream(1, 0, i) for i in range(3)], record_stride=16)
    st = stopping_times(d, math.inf, 0.05, math.inf)
    for tau in (st.tau_v1, st.tau_v2, st.tau_z, st.tau_z_prime):
        assert np.all(tau == d.times[-1])
    t = np.linspace(0, 1, 11)
    vals = np.outer(t, [1.0, 2.0])
    assert np.allclose(first_crossing(t, vals, 0.45), [0.5, 0.3])
    st0 = stopping_times(d, 0.1, 0.0, 1.0)
    assert np.all(st0.tau_v1 == d.times[-1])

import math

import numpy as np
import pytest

from spfnls.errors import DegenerateSpectrumError
from spfnls.linearization import (RealField2, linear_operator_spectrum, apply_operator, apply_semigroup, build_linearization,
                                  cached_linearization, empirical_strichartz, phase_functional,
                                  project_pi, project_pi0, random_unit_fields, semigroup_array)
from spfnls.model import make_params, solitary_wave
from spfnls.spectral_core import AdmissiblePair, Field, Grid, lp_norm, lp_norms

from conftest import random_field


def _rand(rng, grid, n=1):
    return random_unit_fields(grid, n, rng)


def test_realfield_roundtrip(rng, grid_mc):
    f = Field(random_field(rng, grid_mc.n_points), grid_mc)
    r = RealField2.from_field(f)
    assert np.array_equal(r.to_field(grid_mc).values, f.values)
    assert np.array_equal(RealField2.from_vector(r.vector()).re, r.re)


def test_zero_mode(pack_mc, wave_mc):
    assert abs(pack_mc.zero_eigenvalue) <= 1e-8 * pack_mc.matrix_norm
    near = np.abs(pack_mc.spectrum) <= 1e-8 * pack_mc.matrix_norm
    assert near.sum() == 1
    r = pack_mc.right_null.vector()
    ux = RealField2.from_field(wave_mc.u_star_x).vector()
    assert abs(r @ ux) / (np.linalg.norm(r) * np.linalg.norm(ux)) > 0.9999
    assert np.linalg.norm(pack_mc.matrix @ r) <= 1e-8 * np.linalg.norm(r) * pack_mc.matrix_norm
    assert pack_mc.gap_b > 0
    assert np.all(pack_mc.nonzero_spectrum.real <= -pack_mc.gap_b + 1e-12)


def test_gap_scales_with_eps(params, grid_mc, pack_mc):
    half = build_linearization(solitary_wave(params.replace(eps=params.eps / 2), grid_mc))
    ratio = half.gap_b / pack_mc.gap_b
    assert 0.4 <= ratio <= 0.6


def test_eps_to_zero_imaginary_axis(params, grid_mc):
    p = make_params(params.nu, 1e-12, params.gamma, params.mu, params.kappa)
    wave = solitary_wave(p, grid_mc)
    # the NLS limit has a four-fold generalized kernel, so the pack builder refuses it
    with pytest.raises(DegenerateSpectrumError):
        build_linearization(wave)
    lam = linear_operator_spectrum(wave)
    assert np.max(np.abs(lam.real)) < 1e-4


def _set_distance(a, b):
    return max(np.abs(a[:, None] - b[None, :]).min(axis=1).max(),
               np.abs(b[:, None] - a[None, :]).min(axis=1).max())


def test_conjugate_pairs(pack_mc):
    lam = pack_mc.spectrum
    assert _set_distance(lam, np.conj(lam)) < 1e-8 * pack_mc.matrix_norm


def test_projections(pack_mc, wave_mc, rng):
    ux = wave_mc.u_star_x
    assert lp_norm(project_pi0(ux, pack_mc) - ux, 2) < 1e-8
    assert lp_norm(project_pi(ux, pack_mc), 2) < 1e-8
    assert phase_functional(ux, pack_mc) == pytest.approx(1.0, abs=1e-12)
    for _ in range(5):
        f = Field(random_field(rng, wave_mc.grid.n_points), wave_mc.grid)
        p0 = project_pi0(f, pack_mc)
        assert lp_norm(project_pi0(p0, pack_mc) - p0, 2) < 1e-10
        assert np.array_equal((project_pi(f, pack_mc) + p0).values, f.values) or \
            lp_norm(project_pi(f, pack_mc) + p0 - f, 2) < 1e-14
        assert abs(phase_functional(project_pi(f, pack_mc), pack_mc)) < 1e-10
        rec = project_pi(f, pack_mc) + ux * phase_functional(f, pack_mc)
        assert lp_norm(rec - f, 2) < 1e-10


def test_real_linearity(pack_mc, rng, grid_mc):
    f = random_field(rng, grid_mc.n_points)
    Lf = apply_operator(pack_mc.wave, f)
    assert np.max(np.abs(apply_operator(pack_mc.wave, 2.5 * f) - 2.5 * Lf)) < 1e-12 * np.max(np.abs(Lf))
    assert np.max(np.abs(apply_operator(pack_mc.wave, 1j * f) - 1j * Lf)) > 1e-3 * np.max(np.abs(Lf))


def test_semigroup_basic(pack_mc, wave_mc, rng):
    f = Field(_rand(rng, wave_mc.grid)[0], wave_mc.grid)
    assert np.array_equal(apply_semigroup(f, 0.0, pack_mc).values, f.values)
    with pytest.raises(ValueError):
        apply_semigroup(f, -1.0, pack_mc)
    ux = wave_mc.u_star_x
    for t in (1.0, 5.0):
        assert lp_norm(apply_semigroup(ux, t, pack_mc) - ux, 2) < 1e-6 * lp_norm(ux, 2)
    a = apply_semigroup(apply_semigroup(f, 0.7, pack_mc), 1.3, pack_mc)
    b = apply_semigroup(f, 2.0, pack_mc)
    assert lp_norm(a - b, 2) < 1e-8


def test_semigroup_modes_agree(pack_mc, wave_mc, rng):
    f = _rand(rng, wave_mc.grid, 3)
    a = semigroup_array(f, 1.0, pack_mc, "matrix_exp")
    b = semigroup_array(f, 1.0, pack_mc, "timestep", dt=1 / 640)
    assert lp_norms(a - b, wave_mc.grid.dx, 2).max() < 1e-6


def test_pi_commutes_and_pi0_fixed(pack_mc, wave_mc, rng):
    f = _rand(rng, wave_mc.grid, 2)
    for t in (0.5, 1.5):
        a = semigroup_array(pack_mc.pi(f), t, pack_mc)
        b = pack_mc.pi(semigroup_array(f, t, pack_mc))
        assert lp_norms(a - b, wave_mc.grid.dx, 2).max() < 1e-8
    h = pack_mc.pi0(f)
    for t in (1.0, 5.0):
        assert lp_norms(semigroup_array(h, t, pack_mc) - h, wave_mc.grid.dx, 2).max() < 1e-6


def test_decay_bound(pack_mc, wave_mc, rng):
    fit = pack_mc.decay_fit
    assert fit.a == pytest.approx(pack_mc.gap_b, rel=1e-12)
    assert fit.M >= 1.0
    f = _rand(rng, wave_mc.grid, 10)
    g = pack_mc.pi(f)
    st = pack_mc.linear_stepper(1 / 640)
    for k in range(1, 41):
        g = st.advance_v1(g, 160)
        n = lp_norms(g, wave_mc.grid.dx, 2)
        assert np.all(n <= 1.01 * fit.M * math.exp(-fit.a * 0.25 * k))
    assert pack_mc.reset_window == pytest.approx(math.log(6 * fit.M) / fit.a)


def test_strichartz(pack_mc):
    e = empirical_strichartz(pack_mc, AdmissiblePair(6, 6), n_samples=4, T=10.0)
    e2 = empirical_strichartz(pack_mc, AdmissiblePair(6, 6), n_samples=4, T=20.0)
    assert np.isfinite(e.constant) and abs(e2.constant / e.constant - 1) < 0.05
    assert e.pi0_constant == pytest.approx(e.pi0_bound, rel=1e-8)
    w = empirical_strichartz(pack_mc, AdmissiblePair(math.inf, 2), n_samples=4, T=10.0)
    assert abs(w.weighted_sup / pack_mc.decay_fit.M - 1) < 0.1
    with pytest.raises(ValueError):
        empirical_strichartz(pack_mc, AdmissiblePair(4, math.inf))


def test_cache_roundtrip(wave_mc, pack_mc, tmp_path, caplog):
    a = cached_linearization(wave_mc, str(tmp_path))
    with caplog.at_level("INFO", logger="spfnls.linearization"):
        b = cached_linearization(wave_mc, str(tmp_path))
    assert "cache hit" in caplog.text
    assert np.array_equal(a.spectrum, b.spectrum)
    assert b.decay_fit.M == a.decay_fit.M
    f = wave_mc.u_star.values
    assert a.phase(f) == b.phase(f)


def test_translated_pack(pack_mc, params, grid_mc):
    k = 8
    c = k * grid_mc.dx
    t = pack_mc.translated(c)
    fresh = build_linearization(solitary_wave(params, grid_mc, c))
    assert _set_distance(t.spectrum, fresh.spectrum) < 1e-8 * fresh.matrix_norm
    ux = t.wave.u_star_x.values
    assert t.phase(ux) == pytest.approx(1.0, abs=1e-10)
    rng = np.random.default_rng(0)
    f = random_field(rng, grid_mc.n_points)
    assert t.phase(f) == pytest.approx(fresh.phase(f), rel=1e-7, abs=1e-10)

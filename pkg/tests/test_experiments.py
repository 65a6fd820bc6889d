import math

import numpy as np
import pytest

from spfnls.experiments import (EnsembleSpec, basis_diffusion_rate, chunk_ranges, default_spec,
                                linear_fit, loglog_slope, orbital_distance, relaxation_rate,
                                run_escape_study, run_phase_diffusion_study, wilson_interval)
from spfnls.model import wave_profile
from spfnls.noise import make_noise


def test_wilson_edges():
    lo, hi = wilson_interval(np.array([0, 5, 20]), 20)
    assert lo[0] == 0.0 and hi[2] == 1.0
    assert np.all(lo <= np.array([0, 5, 20]) / 20) and np.all(hi >= np.array([0, 5, 20]) / 20)
    assert np.all(lo <= hi) and np.all((lo >= 0) & (hi <= 1))


def test_wilson_coverage():
    rng = np.random.default_rng(0)
    for p in (0.05, 0.3, 0.7):
        k = rng.binomial(200, p, size=4000)
        lo, hi = wilson_interval(k, 200)
        cover = np.mean((lo <= p) & (p <= hi))
        assert 0.93 <= cover <= 0.975


def test_fits():
    x = np.linspace(1, 5, 9)
    s, c, r2 = linear_fit(x, 3 * x + 2)
    assert s == pytest.approx(3) and c == pytest.approx(2) and r2 == pytest.approx(1)
    s, c, _ = linear_fit(x, 3 * x, through_origin=True)
    assert s == pytest.approx(3) and c == 0
    assert loglog_slope(x, 0.5 * x ** 2.5) == pytest.approx(2.5)


def test_spec_validation():
    with pytest.raises(ValueError):
        EnsembleSpec(n_paths=1)
    with pytest.raises(ValueError):
        EnsembleSpec(sigma_sweep=())
    with pytest.raises(ValueError):
        default_spec("nonsense")
    s = default_spec("order", n_paths=None, dt=1 / 1280)
    assert s.n_paths == 200 and s.dt == 1 / 1280 and s.scheme == "yoshida_exact_noise"
    assert default_spec("escape").sigma_sweep == (0.1, 0.08, 0.06)
    assert "workers" not in s.describe()
    assert chunk_ranges(7, 3) == [(0, 3), (3, 6), (6, 7)]


def test_orbital_distance(params, grid_mc, rng):
    c = 0.3137
    u = wave_profile(params, grid_mc.x + c)
    d, a = orbital_distance(u, params, grid_mc, 0.0)
    assert d[0] < 1e-6 and a[0] == pytest.approx(c, abs=1e-4 * grid_mc.dx)
    noise = 0.05 * (rng.standard_normal((3, grid_mc.n_points)) + 1j * rng.standard_normal((3, grid_mc.n_points)))
    v = wave_profile(params, grid_mc.x + c)[None] + noise
    d, a = orbital_distance(v, params, grid_mc, np.full(3, 0.25))
    shifts = c + np.linspace(-0.2, 0.2, 4001)
    brute = np.array([[np.sqrt(np.sum(np.abs(r - wave_profile(params, grid_mc.x + s)) ** 2) * grid_mc.dx)
                       for s in shifts] for r in v]).min(axis=1)
    assert np.all(d <= brute + 1e-10)
    assert np.allclose(d, brute, rtol=1e-6)


def test_basis_rate_positive(pack_mc, grid_mc):
    nm = make_noise(grid_mc)
    D = basis_diffusion_rate(pack_mc, nm)
    assert D > 0
    assert basis_diffusion_rate(pack_mc, nm.scaled(2.0)) == pytest.approx(4 * D, rel=1e-12)


def test_relaxation_rate(pack_mc):
    r = relaxation_rate(pack_mc, 10 / pack_mc.decay_fit.a)
    assert 0.5 * pack_mc.decay_fit.a <= r <= 2 * pack_mc.decay_fit.a


def _tiny(study, **kw):
    base = dict(n_paths=12, chunk_size=4)
    base.update(kw)
    return default_spec(study, **base)


def test_diffusion_worker_independent(pack_mc):
    spec = _tiny("diffusion", t_end=1.0, record_dt=0.1)
    a = run_phase_diffusion_study(spec, pack_mc, window=(0.2, 1.0), slices=(0.5, 1.0), check_beta=False)
    spec.workers = 3
    b = run_phase_diffusion_study(spec, pack_mc, window=(0.2, 1.0), slices=(0.5, 1.0), check_beta=False)
    assert a.summary == b.summary
    for k in a.tables:
        assert np.array_equal(a.tables[k][1], b.tables[k][1])


def test_escape_tiny(pack_mc):
    spec = _tiny("escape", sigma_sweep=(0.1, 0.0), eps_sweep=(0.2, 0.4), window=0.5)
    rep = run_escape_study(spec, pack_mc)
    header, tab = rep.tables["escape"]
    assert header[:7] == ["sigma", "eps", "count", "n", "p", "ci_lo", "ci_hi"]
    assert np.all((tab[:, 4] >= 0) & (tab[:, 4] <= 1))
    assert np.all(tab[:, 5] <= tab[:, 6])
    zero = tab[tab[:, 0] == 0]
    assert np.all(zero[:, 2] == 0)
    assert rep.checks["pathwise_monotone_in_eps"]
    spec.workers = 2
    rep2 = run_escape_study(spec, pack_mc)
    assert np.array_equal(rep2.tables["escape"][1], tab)

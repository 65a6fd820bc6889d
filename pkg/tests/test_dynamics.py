import warnings

import numpy as np
import pytest

from spfnls.dynamics import (StepperConfig, conservation_balance, make_stepper, noise_checksum,
                             simulate, simulate_batch, step_spfnls)
from spfnls.errors import BlowupError, UnsupportedError
from spfnls.model import ModelParams
from spfnls.noise import IncrementSource, make_noise, path_stream
from spfnls.spectral_core import Field, lp_norms

DT = 1 / 640


def _batch(wave, n):
    return np.repeat(wave.u_star.values[None], n, axis=0)


def _source(nm, n, dt=DT, seed=1):
    return IncrementSource(nm, [path_stream(seed, 0, i) for i in range(n)], dt)


class _Scaled:
    def __init__(self, src, c):
        self.src, self.c = src, c

    def next(self):
        return self.c * self.src.next()


def test_stepper_config_validation():
    cfg = StepperConfig(0.01, "strang_exact_noise", 1.0, 10)
    assert cfg.n_records == 10 and cfg.n_steps == 100 and cfg.record_dt == pytest.approx(0.1)
    with pytest.raises(ValueError):
        StepperConfig(0.01, "strang_exact_noise", 1.0, 7)
    with pytest.raises(ValueError):
        StepperConfig(-0.01)
    with pytest.raises(ValueError):
        StepperConfig(0.01, "rk4", 1.0, 10)
    with pytest.raises(ValueError):
        StepperConfig(0.01, "strang_exact_noise", 1.0, 0)


def test_stationary_noise_off(params, wave_mc, grid_mc):
    cfg = StepperConfig(DT, "yoshida_exact_noise", 1.0, 64)
    traj = simulate(wave_mc.u_star, params, make_noise(grid_mc), cfg)
    d = lp_norms(traj.states[:, 0] - wave_mc.u_star.values, grid_mc.dx, 2)
    assert d.max() < 1e-6
    assert np.all(np.diff(traj.times) > 0)
    assert np.allclose(np.diff(traj.times), cfg.record_dt)


def test_eps0_conservation_every_step(params, wave_mc, grid_mc):
    p0 = ModelParams(params.nu, 0.0, params.gamma, params.mu, params.kappa)
    nm = make_noise(grid_mc, sigma=0.1)
    u0 = wave_mc.u_star + 0.3 * wave_mc.u_star_x
    for scheme in ("strang_exact_noise", "yoshida_exact_noise"):
        cfg = StepperConfig(DT, scheme, 0.5, 1)
        traj = simulate(u0, p0, nm, cfg, path_stream(3))
        rel = np.abs(traj.l2[:, 0] - traj.l2[0, 0]) / traj.l2[0, 0]
        assert rel.max() < 1e-10
        assert np.abs(conservation_balance(traj, p0)).max() < 1e-10


def test_a_priori_bound(params, wave_mc, grid_mc):
    nm = make_noise(grid_mc, sigma=0.1)
    cfg = StepperConfig(DT, "strang_exact_noise", 2.0, 16)
    u0 = _batch(wave_mc, 20) * 1.2
    traj = simulate_batch(u0, grid_mc, params, nm, cfg, _source(nm, 20), keep_states=False)
    bound = np.exp(-params.eps * (params.gamma - params.mu) * traj.times)[:, None] * traj.l2[0]
    assert np.all(traj.l2 <= bound * (1 + 1e-6))


def test_zero_data_stays_zero(params, grid_mc):
    cfg = StepperConfig(DT, "strang_exact_noise", 0.5, 32)
    traj = simulate(grid_mc.zeros(), params, make_noise(grid_mc), cfg)
    assert np.all(traj.states == 0)


def test_euler_maruyama_cross_check(params, wave_mc, grid_mc):
    nm = make_noise(grid_mc, sigma=0.1)
    u0 = _batch(wave_mc, 8)
    errs = []
    dts = [1 / 640, 1 / 1280, 1 / 2560]
    for dt in dts:
        n = int(round(1 / dt))
        em = make_stepper(params, grid_mc, dt, "euler_maruyama", nm.beta ** 2)
        st = make_stepper(params, grid_mc, dt, "strang_exact_noise")
        a = em.advance(u0, n, _source(nm, 8, dt), nm.sigma)
        b = st.advance(u0, n, _source(nm, 8, dt), nm.sigma)
        errs.append(np.sqrt(np.mean(lp_norms(a - b, grid_mc.dx, 2) ** 2)))
    order = np.polyfit(np.log(dts), np.log(errs), 1)[0]
    # diagonal noise commutes, so the observed order is 1; O(sqrt dt) is the guaranteed floor
    assert order > 0.45
    assert errs[-1] < 0.02


def test_balance_deterministic_second_order(params, wave_mc, grid_mc):
    u0 = wave_mc.u_star + 0.1 * wave_mc.u_star_x
    r = []
    for dt in (1 / 320, 1 / 640, 1 / 1280):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            traj = simulate(u0, params, make_noise(grid_mc), StepperConfig(dt, "strang_exact_noise", 0.5, 1))
        r.append(np.abs(conservation_balance(traj, params)).max())
    assert 3.5 < r[0] / r[1] < 4.5 and 3.5 < r[1] / r[2] < 4.5


def test_balance_stochastic_mean_zero(params, wave_mc, grid_mc):
    nm = make_noise(grid_mc, sigma=0.1)
    cfg = StepperConfig(DT, "yoshida_exact_noise", 0.5, 1)
    traj = simulate_batch(_batch(wave_mc, 200), grid_mc, params, nm, cfg, _source(nm, 200, seed=2))
    r = np.array([conservation_balance(traj, params, i) for i in range(200)])
    mean = r.mean(axis=0)
    se = r.std(axis=0) / np.sqrt(200)
    assert np.all(np.abs(mean[1:]) <= 3 * se[1:] + 1e-12)


def test_balance_needs_states(params, wave_mc, grid_mc):
    cfg = StepperConfig(DT, "strang_exact_noise", 0.1, 8)
    traj = simulate(wave_mc.u_star, params, make_noise(grid_mc), cfg, keep_states=False)
    with pytest.raises(UnsupportedError):
        conservation_balance(traj, params)


def test_gauge_covariance(params, wave_mc, grid_mc):
    nm = make_noise(grid_mc, sigma=0.1)
    u0 = _batch(wave_mc, 3)
    for scheme in ("strang_exact_noise", "yoshida_exact_noise"):
        st = make_stepper(params, grid_mc, DT, scheme)
        a = st.advance(u0, 50, _source(nm, 3), 0.1)
        b = st.advance(u0, 50, _Scaled(_source(nm, 3), 4.0), 0.1 / 4.0)
        assert np.array_equal(a, b)


def test_translation_equivariance(params, wave_mc, grid_mc):
    nm = make_noise(grid_mc, sigma=0.1)
    k = 7
    st = make_stepper(params, grid_mc, DT, "strang_exact_noise")
    u0 = (wave_mc.u_star + 0.2 * wave_mc.u_star_x).values[None]
    a = st.advance(u0, 100, _source(nm, 1), 0.1)
    src = _source(nm, 1)
    shifted = type("S", (), {"next": lambda self: np.roll(src.next(), k, axis=-1)})()
    b = st.advance(np.roll(u0, k, axis=-1), 100, shifted, 0.1)
    assert np.max(np.abs(np.roll(a, k, axis=-1) - b)) < 1e-12


def test_strang_second_order(params, wave_mc, grid_mc):
    u0 = (wave_mc.u_star + 0.3 * wave_mc.u_star_x).values[None]
    ref = make_stepper(params, grid_mc, 1 / 2560, "yoshida_exact_noise").advance(u0, 1280, None)
    errs = []
    for n in (160, 320, 640):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            out = make_stepper(params, grid_mc, 0.5 / n, "strang_exact_noise").advance(u0, n, None)
        errs.append(lp_norms(out - ref, grid_mc.dx, 2)[0])
    order = np.polyfit(np.log([1 / 160, 1 / 320, 1 / 640]), np.log(errs), 1)[0]
    assert 1.9 < order < 2.1


def test_blowup_flagged(params, wave_mc, grid_mc):
    bad = wave_mc.u_star.values.copy()
    bad[5] = np.nan
    nm = make_noise(grid_mc)
    with pytest.raises(BlowupError) as e:
        simulate(Field(bad, grid_mc), params, nm, StepperConfig(DT, "strang_exact_noise", 0.1, 8))
    assert e.value.time == 0.0
    u0 = np.stack([wave_mc.u_star.values, bad])
    traj = simulate_batch(u0, grid_mc, params, nm, StepperConfig(DT, "strang_exact_noise", 0.1, 8), None)
    assert np.isnan(traj.blowup_time[0]) and traj.blowup_time[1] == 0.0
    assert np.all(traj.states[-1, 1] == 0)
    with pytest.raises(BlowupError):
        step_spfnls(Field(bad, grid_mc), params, nm, DT, None)


def test_cfl_warning(params, wave_mc, grid_mc):
    with pytest.warns(RuntimeWarning, match="exceeds"):
        step_spfnls(wave_mc.u_star, params, make_noise(grid_mc), 0.01, None)


def test_step_matches_batch(params, wave_mc, grid_mc):
    nm = make_noise(grid_mc, sigma=0.1)
    one = step_spfnls(wave_mc.u_star, params, nm, DT, path_stream(9), "strang_exact_noise")
    st = make_stepper(params, grid_mc, DT, "strang_exact_noise")
    src = IncrementSource(nm, [path_stream(9)], DT, block=1)
    two = st.advance(wave_mc.u_star.values[None], 1, src, 0.1)[0]
    assert np.array_equal(one.values, two)
    assert src.crc == noise_checksum([src_eta for src_eta in _replay(nm)])


def _replay(nm):
    src = IncrementSource(nm, [path_stream(9)], DT, block=1)
    return [src.next()]


def test_h2_persistence(params, wave_mc, grid_mc):
    nm = make_noise(grid_mc, sigma=0.05)
    cfg = StepperConfig(DT, "strang_exact_noise", 5.0, 64)
    traj = simulate(wave_mc.u_star, params, nm, cfg, path_stream(4), keep_states=False)
    assert traj.h2.max() < 10 * traj.h2[0, 0]
    assert traj.provenance["sigma"] == 0.05 and traj.provenance["noise_crc"] != 0

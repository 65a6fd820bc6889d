"""Monte Carlo studies: phase diffusion, expansion orders, fluctuations, escape tails.

Paths are processed in fixed-size chunks; every path owns the stream
path_stream(base_seed, sweep_index, path_index), so results do not depend on the
number of worker processes (SPFNLS_WORKERS).
"""
from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats

from .dynamics import SplitStepper
from .expansion import run_coupled
from .linearization import LinearizationPack, build_linearization, cached_linearization
from .model import ModelParams, make_params, solitary_wave, wave_profile
from .noise import IncrementSource, NoiseModel, make_noise, path_stream
from .spectral_core import Grid, l2_inner, lp_norms

WORKERS_ENV = "SPFNLS_WORKERS"


def default_params() -> ModelParams:
    return make_params(nu=4.0, eps=0.1, gamma=8.0, mu=8.16, kappa=4.0)


@dataclass
class EnsembleSpec:
    n_paths: int = 200
    base_seed: int = 20240611
    params: ModelParams = field(default_factory=default_params)
    n_points: int = 256
    domain_length: float = 20.0
    kernel: str = "gaussian"
    length_scale: float = 0.25
    normalize_beta: bool = False
    kernel_path: str | None = None
    beta_scale: float = 1.0
    dt: float = 1.0 / 640
    scheme: str = "strang_exact_noise"
    record_dt: float = 0.05
    t_end: float = 5.0
    sigma_sweep: tuple = (0.05, 0.1)
    eps_sweep: tuple = (0.3,)
    n_windows: int = 2
    window: float | None = None
    chunk_size: int = 50
    workers: int | None = None
    cache_dir: str | None = None

    def __post_init__(self):
        if self.n_paths < 2:
            raise ValueError("n_paths >= 2 required")
        if not len(self.sigma_sweep) or not len(self.eps_sweep):
            raise ValueError("sweeps must be nonempty")
        self.sigma_sweep = tuple(float(s) for s in self.sigma_sweep)
        self.eps_sweep = tuple(float(e) for e in self.eps_sweep)

    @property
    def grid(self) -> Grid:
        return Grid(self.n_points, self.domain_length)

    def noise(self, sigma=0.0) -> NoiseModel:
        nm = make_noise(self.grid, self.kernel, self.length_scale, sigma, self.normalize_beta,
                        self.kernel_path, self.base_seed)
        return nm.scaled(self.beta_scale) if self.beta_scale != 1.0 else nm

    def stride(self, dt=None):
        dt = self.dt if dt is None else dt
        k = int(round(self.record_dt / dt))
        if k < 1 or abs(k * dt - self.record_dt) > 1e-9 * self.record_dt:
            raise ValueError("record_dt must be a multiple of dt")
        return k

    def describe(self) -> dict:
        d = asdict(self)
        d["params"] = self.params.as_dict()
        d.pop("workers")
        d.pop("cache_dir")
        return d


STUDIES = ("diffusion", "order", "fluctuation", "escape")

STUDY_DEFAULTS = {
    "diffusion": dict(n_paths=1000, sigma_sweep=(0.05, 0.1), t_end=5.0, record_dt=0.05,
                      scheme="strang_exact_noise"),
    # Strang's O(dt^2) drift off u* would put a sigma-independent floor under ||z||
    "order": dict(n_paths=200, sigma_sweep=(0.02, 0.04, 0.08), t_end=1.0, record_dt=0.05,
                  scheme="yoshida_exact_noise"),
    "fluctuation": dict(n_paths=400, sigma_sweep=(1.0,), record_dt=0.05, scheme="strang_exact_noise"),
    "escape": dict(n_paths=2000, sigma_sweep=(0.1, 0.08, 0.06), eps_sweep=(0.3,), n_windows=2,
                   record_dt=0.0625, beta_scale=1.25, scheme="strang_exact_noise"),
}


def default_spec(study: str, **overrides) -> EnsembleSpec:
    if study not in STUDY_DEFAULTS:
        raise ValueError(f"unknown study {study!r}; expected one of {STUDIES}")
    kw = dict(STUDY_DEFAULTS[study])
    kw.update({k: v for k, v in overrides.items() if v is not None})
    return EnsembleSpec(**kw)


def run_study(study: str, spec: EnsembleSpec, pack: LinearizationPack | None = None) -> StudyReport:
    fn = {"diffusion": run_phase_diffusion_study, "order": run_order_study,
          "fluctuation": run_fluctuation_study, "escape": run_escape_study}[study]
    return fn(spec, pack)


@dataclass
class StudyReport:
    name: str
    summary: dict
    tables: dict            # name -> (header list, 2D array)
    checks: dict            # name -> bool
    spec: dict

    def passed(self) -> bool:
        return all(self.checks.values())


# --- execution helpers -----------------------------------------------------------

def worker_count(spec: EnsembleSpec | None = None) -> int:
    if spec is not None and spec.workers:
        return int(spec.workers)
    return max(1, int(os.environ.get(WORKERS_ENV, "1")))


def run_chunks(fn, tasks, workers: int):
    """Apply fn to tasks, returning results in task order."""
    if workers <= 1 or len(tasks) <= 1:
        return [fn(*t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, *zip(*tasks)))


def chunk_ranges(n, size):
    return [(i, min(n, i + size)) for i in range(0, n, size)]


def build_pack(spec: EnsembleSpec, fit=True) -> LinearizationPack:
    wave = solitary_wave(spec.params, spec.grid)
    return cached_linearization(wave, spec.cache_dir, fit=fit)


def basis_diffusion_rate(pack: LinearizationPack, nm: NoiseModel) -> float:
    """sum_k P(i u* Phi e_k)^2 with e_k the node basis."""
    from .noise import basis_images
    B = basis_images(nm)          # columns Phi e_k
    us = pack.wave.u_star.values
    cols = 1j * us[None, :] * B.T
    return float(np.sum(pack.phase(cols) ** 2))


def wilson_interval(k, n, z=1.959963984540054):
    k = np.asarray(k, float)
    p = k / n
    den = 1 + z * z / n
    centre = (p + z * z / (2 * n)) / den
    half = z * np.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / den
    lo = np.where(k == 0, 0.0, np.clip(centre - half, 0, 1))
    hi = np.where(k == n, 1.0, np.clip(centre + half, 0, 1))
    return lo, hi


def linear_fit(x, y, through_origin=False):
    x = np.asarray(x, float); y = np.asarray(y, float)
    if through_origin:
        slope = float(np.sum(x * y) / np.sum(x * x))
        intercept = 0.0
    else:
        slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = np.sum((y - y.mean()) ** 2)
    r2 = 1.0 - np.sum(resid ** 2) / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(intercept), float(r2)


def loglog_slope(x, y):
    return linear_fit(np.log(x), np.log(y))[0]


# --- phase diffusion ----------------------------------------------------------------

def _diffusion_chunk(spec, pack, sigma_idx, beta_scale, lo, hi):
    nm = spec.noise()
    if beta_scale != 1.0:
        nm = nm.scaled(beta_scale)
    streams = [path_stream(spec.base_seed, sigma_idx, i) for i in range(lo, hi)]
    src = IncrementSource(nm, streams, spec.dt)
    lin = pack.linear_stepper(spec.dt, spec.scheme)
    k = spec.stride()
    n_rec = int(round(spec.t_end / spec.record_dt))
    v1 = np.zeros((hi - lo, spec.n_points), complex)
    a1 = np.zeros((n_rec + 1, hi - lo))
    for r in range(1, n_rec + 1):
        v1 = lin.advance_v1(v1, k, src)
        a1[r] = pack.phase(v1)
    return a1


def run_phase_diffusion_study(spec: EnsembleSpec, pack: LinearizationPack | None = None,
                              window=(0.5, 5.0), slices=(1.0, 2.5, 5.0),
                              check_beta: bool = True) -> StudyReport:
    """Var[s a1(t)] across paths for each s in the sweep (independent streams per s)."""
    pack = pack or build_pack(spec, fit=False)
    nm = spec.noise()
    W = worker_count(spec)
    chunks = chunk_ranges(spec.n_paths, spec.chunk_size)
    times = spec.record_dt * np.arange(int(round(spec.t_end / spec.record_dt)) + 1)
    D0 = basis_diffusion_rate(pack, nm)
    runs = [(i, s, 1.0) for i, s in enumerate(spec.sigma_sweep)]
    if check_beta:
        runs.append((len(spec.sigma_sweep), spec.sigma_sweep[0], 2.0))
    sel = (times >= window[0] - 1e-12) & (times <= window[1] + 1e-12)
    summary = {"oracle_rate_a1": D0, "n_paths": spec.n_paths}
    cols, header = [times], ["t"]
    slopes = {}
    checks = {}
    for idx, sigma, bscale in runs:
        parts = run_chunks(_diffusion_chunk, [(spec, pack, idx, bscale, lo, hi) for lo, hi in chunks], W)
        a1 = np.concatenate(parts, axis=1)
        x = sigma * a1
        var = x.var(axis=1, ddof=1)
        slope, icpt, r2 = linear_fit(times[sel], var[sel])
        inc = np.diff(x[sel], axis=0)
        rate_qv = float(np.sum(inc ** 2) / (x.shape[1] * (times[sel][-1] - times[sel][0])))
        oracle = sigma ** 2 * bscale ** 2 * D0
        tag = f"sigma={sigma:g}" + ("" if bscale == 1.0 else f",beta_x{bscale:g}")
        slopes[tag] = rate_qv
        summary[f"{tag}:ols_slope"] = slope
        summary[f"{tag}:ols_r2"] = r2
        summary[f"{tag}:qv_rate"] = rate_qv
        summary[f"{tag}:oracle_rate"] = oracle
        summary[f"{tag}:rel_err_qv"] = rate_qv / oracle - 1
        summary[f"{tag}:rel_err_ols"] = slope / oracle - 1
        if bscale == 1.0:
            checks[f"{tag}:linear_r2>=0.98"] = r2 >= 0.98
            checks[f"{tag}:rate_within_5pct"] = abs(rate_qv / oracle - 1) < 0.05
            se = x.std(axis=1, ddof=1) / math.sqrt(x.shape[1])
            zmax = float(np.max(np.abs(x.mean(axis=1)[1:] / se[1:])))
            summary[f"{tag}:max_mean_z"] = zmax
            for ts in slices:
                j = int(np.argmin(np.abs(times - ts)))
                pval = float(stats.kstest(x[j] / math.sqrt(oracle * times[j]), "norm").pvalue)
                summary[f"{tag}:ks_p(t={times[j]:g})"] = pval
                checks[f"{tag}:ks(t={times[j]:g})>0.01"] = pval > 0.01
        cols.append(var)
        header.append(f"var[{tag}]")
    base = [k for k in slopes if "beta" not in k]
    if len(base) >= 2:
        ratio = slopes[base[1]] / slopes[base[0]]
        expect = (spec.sigma_sweep[1] / spec.sigma_sweep[0]) ** 2
        summary["sigma_slope_ratio"] = ratio
        summary["sigma_slope_ratio_ols"] = summary[f"{base[1]}:ols_slope"] / summary[f"{base[0]}:ols_slope"]
        checks["sigma_ratio_within_15pct"] = abs(ratio / expect - 1) < 0.15
    if check_beta:
        bt = [k for k in slopes if "beta" in k][0]
        ratio_b = slopes[bt] / slopes[base[0]]
        summary["beta_doubling_ratio"] = ratio_b
        checks["beta_doubling_within_15pct"] = abs(ratio_b / 4 - 1) < 0.15
    return StudyReport("diffusion", summary, {"variance": (header, np.column_stack(cols))},
                       checks, spec.describe())


# --- expansion orders ---------------------------------------------------------------

def _order_chunk(spec, pack, sigma, dt, group, lo, hi):
    nm = spec.noise()
    streams = [path_stream(spec.base_seed, 0, i) for i in range(lo, hi)]
    k = spec.stride(dt)
    d = run_coupled(pack, nm, sigma, spec.t_end, dt, streams, record_stride=k,
                    scheme=spec.scheme, group=group)
    return d.sup("z"), d.sup("zp"), d.sup("taylor"), np.array(d.recon)


def run_order_study(spec: EnsembleSpec, pack: LinearizationPack | None = None,
                    halve_dt: bool = True) -> StudyReport:
    """Median sup_{t<=T} ||z||, ||z'|| over a sigma sweep on common random numbers.

    With halve_dt the sweep is repeated at dt/2 on the same Brownian paths.
    """
    pack = pack or build_pack(spec, fit=False)
    W = worker_count(spec)
    chunks = chunk_ranges(spec.n_paths, spec.chunk_size)
    sig = np.array(spec.sigma_sweep)
    summary, checks, tables = {}, {}, {}
    levels = [("dt", spec.dt, 2)] + ([("dt/2", spec.dt / 2, 1)] if halve_dt else [])
    slopes = {}
    recon = np.zeros(3)
    for tag, dt, group in levels:
        # the coarse level sums pairs of the fine level's white draws
        g = group if halve_dt else 1
        rows = []
        for s in sig:
            parts = run_chunks(_order_chunk, [(spec, pack, s, dt, g, lo, hi) for lo, hi in chunks], W)
            z = np.concatenate([p[0] for p in parts])
            zp = np.concatenate([p[1] for p in parts])
            ty = np.concatenate([p[2] for p in parts])
            recon = np.maximum(recon, np.max([p[3] for p in parts], axis=0))
            rows.append((s, np.median(z), np.median(zp), np.median(ty)))
        rows = np.array(rows)
        sz, szp, sty = (loglog_slope(rows[:, 0], rows[:, j]) for j in (1, 2, 3))
        slopes[tag] = (sz, szp, sty)
        summary[f"{tag}:slope_z"] = sz
        summary[f"{tag}:slope_zprime"] = szp
        summary[f"{tag}:slope_taylor"] = sty
        tables[f"order[{tag}]"] = (["sigma", "median_sup_z", "median_sup_zprime", "median_sup_taylor"], rows)
    sz, szp, sty = slopes["dt"]
    checks["slope_zprime_in_[1.7,2.3]"] = 1.7 <= szp <= 2.3
    checks["slope_z_in_[2.7,3.3]"] = 2.7 <= sz <= 3.3
    checks["slope_taylor>=2.7"] = sty >= 2.7
    if halve_dt:
        checks["dt_halving_shift<0.1"] = (abs(slopes["dt"][0] - slopes["dt/2"][0]) < 0.1
                                           and abs(slopes["dt"][1] - slopes["dt/2"][1]) < 0.1)
        summary["dt_halving_shift_z"] = slopes["dt"][0] - slopes["dt/2"][0]
        summary["dt_halving_shift_zprime"] = slopes["dt"][1] - slopes["dt/2"][1]
    summary["max_reconstruction_error"] = float(recon.max())
    return StudyReport("order", summary, tables, checks, spec.describe())


# --- fluctuation decomposition ------------------------------------------------------------

def _fluct_chunk(spec, pack, t_end, lo, hi):
    nm = spec.noise()
    streams = [path_stream(spec.base_seed, 0, i) for i in range(lo, hi)]
    k = spec.stride()
    d = run_coupled(pack, nm, 1.0, t_end, spec.dt, streams, record_stride=k, scheme=spec.scheme,
                    track_u=False, ito=True)
    return d.w1 ** 2, d.w2 ** 2, d.v2 ** 2, d.v1 ** 2, np.array(d.recon)


def run_fluctuation_study(spec: EnsembleSpec, pack: LinearizationPack | None = None) -> StudyReport:
    """Second moments of ||w1||, ||w2||, ||v2|| for v1(0) = v2(0) = 0 on t in [0, 10/a]."""
    pack = pack or build_pack(spec, fit=True)
    a = pack.decay_fit.a
    t_end = spec.record_dt * math.ceil(10.0 / a / spec.record_dt - 1e-9)
    W = worker_count(spec)
    parts = run_chunks(_fluct_chunk, [(spec, pack, t_end, lo, hi)
                                      for lo, hi in chunk_ranges(spec.n_paths, spec.chunk_size)], W)
    Ew1 = np.concatenate([p[0] for p in parts], axis=1).mean(axis=1)
    Ew2 = np.concatenate([p[1] for p in parts], axis=1).mean(axis=1)
    Ev2 = np.concatenate([p[2] for p in parts], axis=1).mean(axis=1)
    Ev1 = np.concatenate([p[3] for p in parts], axis=1).mean(axis=1)
    recon = np.max([p[4] for p in parts], axis=0)
    times = spec.record_dt * np.arange(Ew1.size)
    late = (times >= 5 / a - 1e-9) & (times <= 10 / a + 1e-9)
    mid = (times >= 1 / a - 1e-9) & (times <= 10 / a + 1e-9)
    early = (times > 0) & (times <= 5 / a + 1e-9)
    beta = spec.noise().beta
    summary = {"a": a, "t_end": t_end}
    s_w1 = loglog_slope(times[late], Ew1[late])
    s_w2 = loglog_slope(times[late], Ew2[late])
    s_v2 = loglog_slope(times[late], Ev2[late])
    summary.update(slope_Ew1sq_late=s_w1, slope_Ew2sq_late=s_w2, slope_Ev2sq_late=s_v2)
    # rms-level shapes
    rms_w1 = np.sqrt(Ew1)
    shape = beta * np.minimum(np.sqrt(times[early]), 1.0)
    C = float(np.sum(rms_w1[early] * shape) / np.sum(shape ** 2))
    rel = np.abs(rms_w1[early] - C * shape) / (C * shape)
    summary.update(w1_fit_C=C, w1_fit_max_rel_err=float(rel.max()),
                   w1_fit_rms_rel_err=float(np.sqrt(np.mean(rel ** 2))))
    s_w2_rms = loglog_slope(times[mid], np.sqrt(Ew2[mid]))
    summary["slope_rms_w2_[1/a,10/a]"] = s_w2_rms
    summary["max_reconstruction_error"] = float(recon.max())
    checks = {"Ew1sq_flat(slope<0.1)": abs(s_w1) < 0.1,
              "Ew2sq_exponent<=1.2": s_w2 <= 1.2,
              "Ev2sq_exponent>=1.5": s_v2 >= 1.5,
              "rms_w2_exponent<=1.2": s_w2_rms <= 1.2,
              "w1_shape_fit_rel_err<0.2": float(np.sqrt(np.mean(rel ** 2))) < 0.2}
    # forgetting of initial data: P(t) Pi v10 for a smooth v10, noise off
    rate = relaxation_rate(pack, t_end)
    summary["relaxation_rate"] = rate
    checks["relaxation_rate_within_x2_of_a"] = 0.5 * a <= rate <= 2 * a
    table = np.column_stack([times, Ew1, Ew2, Ev2, Ev1])
    return StudyReport("fluctuation", summary,
                       {"moments": (["t", "E|w1|^2", "E|w2|^2", "E|v2|^2", "E|v1|^2"], table)},
                       checks, spec.describe())


def relaxation_rate(pack: LinearizationPack, t_end: float, dt: float = None) -> float:
    grid = pack.grid
    x = grid.x
    s = pack.params.wave_scale
    v10 = (1 + 0.5j) * np.exp(-(s * x) ** 2) * np.cos(3 * s * x)
    dt = dt or min(grid.dx ** 2 / math.pi, 0.01)
    n = int(math.ceil(t_end / dt))
    dt = t_end / n
    lin = pack.linear_stepper(dt)
    w = pack.pi(v10)
    ts, ns = [0.0], [lp_norms(w, grid.dx, 2)]
    m = max(1, n // 100)
    for k in range(m, n + 1, m):
        w = lin.advance_v1(w, m)
        ts.append(k * dt)
        ns.append(lp_norms(w, grid.dx, 2))
    ts, ns = np.array(ts), np.array(ns)
    sel = ts >= 0.2 * t_end
    return -linear_fit(ts[sel], np.log(ns[sel]))[0]


# --- escape tails ---------------------------------------------------------------------

GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


def orbital_distance(u, params: ModelParams, grid: Grid, seed, tol=None, scan=8):
    """inf_a ||u - u*(. + a)|| per row of u: coarse scan around seed then golden section."""
    u = np.atleast_2d(u)
    seed = np.broadcast_to(np.asarray(seed, float), (u.shape[0],))
    dx = grid.dx
    tol = 1e-4 * dx if tol is None else tol
    x = grid.x[None, :]

    def f(a):
        d = u - wave_profile(params, x + a[:, None])
        return np.sqrt(np.sum(d.real ** 2 + d.imag ** 2, axis=1) * dx)

    offs = dx * np.arange(-scan, scan + 1)
    vals = np.stack([f(seed + o) for o in offs], axis=1)
    j = np.clip(np.argmin(vals, axis=1), 1, 2 * scan - 1)
    lo = seed + offs[j - 1]
    hi = seed + offs[j + 1]
    c = hi - GOLDEN * (hi - lo)
    d = lo + GOLDEN * (hi - lo)
    fc, fd = f(c), f(d)
    n_iter = int(math.ceil(math.log(tol / (2 * dx)) / math.log(GOLDEN)))
    for _ in range(max(n_iter, 0)):
        left = fc < fd
        hi = np.where(left, d, hi)
        lo = np.where(left, lo, c)
        # one of the two interior points is inherited from the previous bracket
        nc = np.where(left, hi - GOLDEN * (hi - lo), d)
        nd = np.where(left, c, lo + GOLDEN * (hi - lo))
        fe = f(np.where(left, nc, nd))
        fc, fd = np.where(left, fe, fd), np.where(left, fc, fe)
        c, d = nc, nd
    a = 0.5 * (lo + hi)
    return f(a), a


class _PhaseTap:
    """Wraps an increment source and accumulates the first-order phase a1 per path."""

    def __init__(self, src, weights):
        self.src = src
        self.weights = weights
        self.a1 = np.zeros(weights.shape[0])

    def next(self):
        eta = self.src.next()
        self.a1 += np.einsum("pn,pn->p", eta, self.weights)
        return eta


class _Frame:
    """Per-path frame shift c and the matching phase weights."""

    def __init__(self, pack, n):
        self.pack = pack
        self.c = np.zeros(n)
        self._update()

    def _update(self):
        pk, g = self.pack, self.pack.grid
        self.psi = self._shift_rows(pk._psi)
        self.us = wave_profile(pk.params, g.x[None, :] + self.c[:, None])
        # P(-i u* eta) = sum_x eta(x) Re(-i u* conj psi) dx / den
        self.weights = np.real(-1j * self.us * np.conj(self.psi)) * g.dx / pk._pair_den

    def _shift_rows(self, f):
        g = self.pack.grid
        ph = np.exp(2j * np.pi * np.multiply.outer(self.c, g.freqs))
        return np.fft.ifft(np.fft.fft(f)[None, :] * ph, axis=-1)

    def phase(self, v):
        return l2_inner(v, self.psi, self.pack.grid.dx) / self.pack._pair_den

    def move(self, delta, mask):
        self.c = np.where(mask, self.c + delta, self.c)
        self._update()


def _escape_chunk(spec, pack, sigma_idx, sigma, n_window_steps, lo, hi):
    grid, params = spec.grid, spec.params
    nm = spec.noise()
    n = hi - lo
    streams = [path_stream(spec.base_seed, sigma_idx, i) for i in range(lo, hi)]
    src = IncrementSource(nm, streams, spec.dt)
    stepper = SplitStepper(params, grid, spec.dt, spec.scheme)
    stride = max(1, int(round(spec.record_dt / spec.dt)))
    u = np.tile(pack.wave.u_star.values, (n, 1))
    frame = _Frame(pack, n)
    tap = _PhaseTap(src, frame.weights)
    dead = np.zeros(n, bool)
    sup_orb = np.zeros((n, spec.n_windows))
    sup_lin = np.zeros((n, spec.n_windows))
    end_orb = np.zeros((n, spec.n_windows))
    L4 = grid.domain_length / 4
    for w in range(spec.n_windows):
        done = 0
        while done < n_window_steps:
            m = min(stride, n_window_steps - done)
            u = stepper.advance(u, m, tap, sigma)
            done += m
            bad = ~np.all(np.isfinite(u), axis=1) | (np.max(np.abs(u), axis=1) > 1e3)
            if bad.any():
                dead |= bad
                u[bad] = 0.0
            seed = frame.c + sigma * tap.a1
            d_orb, _ = orbital_distance(u, params, grid, seed)
            r = u - wave_profile(params, grid.x[None, :] + seed[:, None])
            d_lin = np.sqrt(np.sum(r.real ** 2 + r.imag ** 2, axis=1) * grid.dx)
            sup_orb[:, w] = np.maximum(sup_orb[:, w], d_orb)
            sup_lin[:, w] = np.maximum(sup_lin[:, w], d_lin)
        end_orb[:, w] = d_orb
        if sigma > 0:
            # reset: re-center on u*(. + c + sigma a1(T)); paths leaving the central half are lost
            target = frame.c + sigma * tap.a1
            lost = np.abs(target) >= L4
            dead |= lost
            frame.move(sigma * tap.a1, ~lost)
            tap.weights = frame.weights
            tap.a1 = frame.phase((u - frame.us) / sigma)
    sup_orb[dead] = np.inf
    sup_lin[dead] = np.inf
    return sup_orb, sup_lin, end_orb, dead, frame.c, src.crc


@dataclass
class EscapeReport(StudyReport):
    entries: list = field(default_factory=list)     # per (sigma, eps) dicts
    tail: dict = field(default_factory=dict)        # eps -> (c, k, r2)


def run_escape_study(spec: EnsembleSpec, pack: LinearizationPack | None = None) -> EscapeReport:
    """Empirical P[sup_t inf_a ||u - u*(. + a)|| >= eps] over n_windows reset windows."""
    pack = pack or build_pack(spec, fit=spec.window is None)
    T = spec.window if spec.window is not None else pack.reset_window
    m = max(1, int(round(T / spec.dt)))
    T = m * spec.dt
    horizon = spec.n_windows * T
    W = worker_count(spec)
    chunks = chunk_ranges(spec.n_paths, spec.chunk_size)
    n = spec.n_paths
    entries, rows = [], []
    checks = {}
    sups = {}
    for si, sigma in enumerate(spec.sigma_sweep):
        parts = run_chunks(_escape_chunk, [(spec, pack, si, sigma, m, lo, hi) for lo, hi in chunks], W)
        sup_orb = np.concatenate([p[0] for p in parts])
        dead = np.concatenate([p[3] for p in parts])
        crc = 0
        for p in parts:
            crc = (crc * 1000003 + p[5]) & 0xFFFFFFFF
        sups[sigma] = sup_orb
        total = sup_orb.max(axis=1)
        prev = np.ones(n, bool)
        for eps in spec.eps_sweep:
            hit = total >= eps
            checks.setdefault("pathwise_monotone_in_eps", True)
            checks["pathwise_monotone_in_eps"] &= bool(np.all(hit <= prev))
            prev = hit
            k = int(hit.sum())
            lo_ci, hi_ci = wilson_interval(k, n)
            win = [(sup_orb[:, w] >= eps).mean() for w in range(spec.n_windows)]
            e = dict(sigma=sigma, eps=eps, count=k, n=n, p=k / n, ci_lo=float(lo_ci), ci_hi=float(hi_ci),
                     censored=k < 3, blowups=int(dead.sum()), window_freq=[float(x) for x in win],
                     median_sup=float(np.median(total)), noise_crc=crc)
            entries.append(e)
            rows.append([sigma, eps, k, n, k / n, float(lo_ci), float(hi_ci), int(k < 3), int(dead.sum())]
                        + [float(x) for x in win])
    tail = {}
    for eps in spec.eps_sweep:
        es = sorted([e for e in entries if e["eps"] == eps and e["sigma"] > 0], key=lambda e: -e["sigma"])
        for a, b in zip(es, es[1:]):
            key = f"eps={eps:g}:strict_decrease_95ci"
            checks[key] = checks.get(key, True) and (b["ci_hi"] < a["ci_lo"])
        res = [e for e in es if not e["censored"] and e["count"] < n]
        logp = [math.log(e["p"]) for e in res]
        if len(res) >= 2:
            xs = np.array([eps ** 2 / e["sigma"] ** 2 for e in res])
            slope, icpt, r2 = linear_fit(xs, logp)
            tail[eps] = dict(c=math.exp(icpt) / horizon, k=-slope, r2=r2, n_points=len(res))
            checks[f"eps={eps:g}:k>0"] = -slope > 0
            checks[f"eps={eps:g}:logp_monotone"] = bool(np.all(np.diff(logp) < 0))
            if len(res) == len([e for e in es]):
                checks[f"eps={eps:g}:tail_r2>=0.9"] = r2 >= 0.9
        for e in entries:
            if e["sigma"] == 0 and e["eps"] == eps:
                checks[f"eps={eps:g}:sigma0_no_escape"] = e["count"] == 0
    summary = {"window": T, "horizon": horizon, "n_paths": n, "window_steps": m}
    for eps, t in tail.items():
        for kk, v in t.items():
            summary[f"eps={eps:g}:tail_{kk}"] = v
    header = ["sigma", "eps", "count", "n", "p", "ci_lo", "ci_hi", "censored", "blowups"] + \
             [f"freq_window_{w + 1}" for w in range(spec.n_windows)]
    return EscapeReport("escape", summary, {"escape": (header, np.array(rows, float))}, checks,
                        spec.describe(), entries, tail)

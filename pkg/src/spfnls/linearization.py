"""Real-linear operator of the PFNLS linearized about u*, its spectrum and projections.

A complex field v = p + i q is stored as the real vector [p, q]. With
W = 2|u*|^2, Z = u*^2 and D2 the spectral second-derivative matrix the operator
v -> i v_xx + L v + i kappa (W v + Z conj v) reads

    dp = (-eps gamma + eps mu - kappa Im Z) p + (-D2 + nu - kappa W + kappa Re Z) q
    dq = (D2 - nu + kappa W + kappa Re Z) p + (-eps gamma - eps mu + kappa Im Z) q

The adjoint for the real L2 pairing is the transpose.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import os
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.linalg as sla
from scipy.sparse.linalg import eigs, expm_multiply

from .dynamics import LinearizedStepper, SplitStepper
from .errors import DegenerateSpectrumError, DiscretizationError
from .model import ModelParams, SolitaryWave, solitary_wave
from .spectral_core import AdmissiblePair, Field, Grid, l2_inner, lp_norms

log = logging.getLogger(__name__)

DENSE_CAP = 2048
ZERO_TOL = 1e-8
COSINE_MIN = 0.999
CACHE_VERSION = 1


@dataclass(frozen=True)
class RealField2:
    re: np.ndarray
    im: np.ndarray

    @classmethod
    def from_field(cls, f: Field):
        return cls(f.values.real.copy(), f.values.imag.copy())

    def to_field(self, grid: Grid) -> Field:
        return Field(self.re + 1j * self.im, grid)

    def vector(self):
        return np.concatenate([self.re, self.im])

    @classmethod
    def from_vector(cls, v):
        n = v.size // 2
        return cls(np.asarray(v[:n], float), np.asarray(v[n:], float))


def to_real(values: np.ndarray) -> np.ndarray:
    """Complex (..., N) -> real (..., 2N)."""
    return np.concatenate([values.real, values.imag], axis=-1)


def to_complex(vec: np.ndarray) -> np.ndarray:
    n = vec.shape[-1] // 2
    return vec[..., :n] + 1j * vec[..., n:]


def second_derivative_matrix(grid: Grid) -> np.ndarray:
    n = grid.n_points
    col = np.real(np.fft.ifft(grid.laplace_symbol))
    idx = (np.arange(n)[:, None] - np.arange(n)[None, :]) % n
    return col[idx]


def operator_matrix(wave: SolitaryWave) -> np.ndarray:
    p = wave.params
    u = wave.u_star.values
    D2 = second_derivative_matrix(wave.grid)
    W = 2 * np.abs(u) ** 2
    Z = u ** 2
    k = p.kappa
    Mpp = np.diag(-p.eps * p.gamma + p.eps * p.mu - k * Z.imag)
    Mpq = -D2 + np.diag(p.nu - k * W + k * Z.real)
    Mqp = D2 + np.diag(-p.nu + k * W + k * Z.real)
    Mqq = np.diag(-p.eps * p.gamma - p.eps * p.mu + k * Z.imag)
    return np.block([[Mpp, Mpq], [Mqp, Mqq]])


def apply_operator(wave: SolitaryWave, values: np.ndarray) -> np.ndarray:
    """Matrix-free action on complex arrays (..., N)."""
    from .model import local_linear
    from .spectral_core import laplacian
    u = wave.u_star.values
    k = wave.params.kappa
    return (1j * laplacian(values, wave.grid) + local_linear(values, wave.params)
            + 1j * k * (2 * np.abs(u) ** 2 * values + u ** 2 * np.conj(values)))


def _two_norm(A, iters=60, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(A.shape[1])
    s = 0.0
    for _ in range(iters):
        y = A.T @ (A @ x)
        s_new = np.sqrt(np.linalg.norm(y))
        x = y / np.linalg.norm(y)
        if abs(s_new - s) <= 1e-10 * s_new:
            break
        s = s_new
    return float(np.linalg.norm(A @ x))


def linear_operator_spectrum(wave: SolitaryWave) -> np.ndarray:
    """All eigenvalues of the dense matrix, without zero-mode bookkeeping."""
    return sla.eigvals(operator_matrix(wave), overwrite_a=True, check_finite=False)


@dataclass(frozen=True)
class DecayFit:
    M: float
    a: float
    t: np.ndarray
    norms: np.ndarray     # ||exp(tA) Pi||_2


class LinearizationPack:
    """Immutable bundle; attributes are read-only by convention."""

    def __init__(self, wave, matrix, spectrum, right_null, left_null, zero_index, gap_b,
                 matrix_norm, decay=None):
        self.wave = wave
        self.grid = wave.grid
        self.params = wave.params
        self._matrix = matrix
        self.spectrum = spectrum
        self.right_null = right_null
        self.left_null = left_null
        self.zero_index = zero_index
        self.gap_b = gap_b
        self.matrix_norm = matrix_norm
        self._decay = decay
        ux = wave.u_star_x.values
        psi = left_null.re + 1j * left_null.im
        self._psi = psi
        self._ux = ux
        self._pair_den = float(l2_inner(ux, psi, self.grid.dx))
        if abs(self._pair_den) < 1e-12 * np.linalg.norm(ux) * np.linalg.norm(psi) * self.grid.dx:
            raise DegenerateSpectrumError("<u*_x, psi> vanishes")
        self._steppers = {}

    # --- basic data ---------------------------------------------------------
    @property
    def matrix(self) -> np.ndarray:
        if self._matrix is None:
            self._matrix = operator_matrix(self.wave)
        return self._matrix

    @property
    def zero_eigenvalue(self) -> complex:
        return complex(self.spectrum[self.zero_index])

    @property
    def nonzero_spectrum(self):
        return np.delete(self.spectrum, self.zero_index)

    @property
    def decay_fit(self) -> DecayFit:
        if self._decay is None:
            self._decay = fit_decay(self)
        return self._decay

    @property
    def decay_ready(self) -> bool:
        return self._decay is not None

    @cached_property
    def reset_window(self) -> float:
        d = self.decay_fit
        return math.log(6 * d.M) / d.a

    # --- projections on arrays (..., N) -------------------------------------
    def phase(self, values):
        """P(f) = <f, psi> / <u*_x, psi>."""
        return l2_inner(values, self._psi, self.grid.dx) / self._pair_den

    def pi0(self, values):
        c = self.phase(values)
        return np.multiply.outer(c, self._ux) if np.ndim(c) else c * self._ux

    def pi(self, values):
        return values - self.pi0(values)

    # --- steppers -----------------------------------------------------------
    def linear_stepper(self, dt, scheme="yoshida_exact_noise", beta2=1.0, ito=False):
        key = (float(dt), scheme, float(beta2), bool(ito))
        if key not in self._steppers:
            st = SplitStepper(self.params, self.grid, dt, scheme)
            self._steppers[key] = LinearizedStepper(st, self.wave.u_star.values, beta2, ito)
        return self._steppers[key]

    def translated(self, shift: float) -> "LinearizationPack":
        """Pack for u*(x + shift), reusing spectrum and fit (translation equivariance)."""
        wave = solitary_wave(self.params, self.grid, self.wave.shift + shift)
        ph = np.exp(2j * np.pi * self.grid.freqs * shift)

        def sh(rf):
            f = np.fft.ifft(ph * np.fft.fft(rf.re + 1j * rf.im))
            return RealField2(f.real, f.imag)

        return LinearizationPack(wave, None, self.spectrum, sh(self.right_null), sh(self.left_null),
                                 self.zero_index, self.gap_b, self.matrix_norm, self._decay)


def _null_vectors(A, lam0, ux_vec, seed=0):
    n2 = A.shape[0]
    shift = lam0.real if abs(lam0) > 0 else 0.0
    lu = sla.lu_factor(A - shift * np.eye(n2), check_finite=False)
    r = ux_vec / np.linalg.norm(ux_vec)
    for _ in range(3):
        r = sla.lu_solve(lu, r, check_finite=False)
        r /= np.linalg.norm(r)
    if r @ ux_vec < 0:
        r = -r
    rng = np.random.default_rng(seed)
    l = rng.standard_normal(n2)
    for _ in range(4):
        l = sla.lu_solve(lu, l, trans=1, check_finite=False)
        l /= np.linalg.norm(l)
    if l @ ux_vec < 0:
        l = -l
    return r, l


def build_linearization(wave: SolitaryWave, dense_cap: int = DENSE_CAP, n_shift_invert: int = 30,
                        fit: bool = False) -> LinearizationPack:
    A = operator_matrix(wave)
    nrm = _two_norm(A)
    n2 = A.shape[0]
    if wave.grid.n_points <= dense_cap:
        lam = sla.eigvals(A, check_finite=False)
    else:
        # shift-invert near the origin: the zero mode and the slowest modes
        lam = eigs(A, k=min(n_shift_invert, n2 - 2), sigma=1e-3, which="LM",
                   return_eigenvectors=False)
    small = np.flatnonzero(np.abs(lam) <= ZERO_TOL * nrm)
    if small.size == 0:
        raise DiscretizationError(
            f"no eigenvalue within {ZERO_TOL:g}*||L|| of 0 (closest {np.abs(lam).min():.3g})")
    if small.size > 1:
        raise DegenerateSpectrumError(f"{small.size} eigenvalues within {ZERO_TOL:g}*||L|| of 0")
    iz = int(small[0])
    ux_vec = to_real(wave.u_star_x.values)
    r, l = _null_vectors(A, lam[iz], ux_vec)
    cos = abs(r @ ux_vec) / np.linalg.norm(ux_vec)
    if cos < COSINE_MIN:
        raise DiscretizationError(f"zero mode / u*_x cosine similarity {cos:.6f} < {COSINE_MIN}")
    rest = np.delete(lam, iz)
    gap = -float(rest.real.max())
    if not gap > 0:
        raise DegenerateSpectrumError(f"nonzero spectrum reaches Re = {-gap:.3g} >= 0: wave is unstable")
    pack = LinearizationPack(wave, A, lam, RealField2.from_vector(r), RealField2.from_vector(l),
                             iz, gap, nrm)
    pack.zero_mode_cosine = float(cos)
    if fit:
        pack.decay_fit
    return pack


def fit_decay(pack: LinearizationPack, n_t: int = 241, horizon_factor: float = 10.0) -> DecayFit:
    """a = spectral gap, M = sup_t ||exp(tA) Pi||_2 e^{at} over t in [0, horizon/a].

    Uses the eigen-decomposition A = V diag(lam) V^-1 and warm-started power
    iteration for the operator norms.
    """
    A = pack.matrix
    lam, V = sla.eig(A, check_finite=False)
    Vi = sla.inv(V, check_finite=False)
    iz = int(np.argmin(np.abs(lam)))
    mask = np.ones(lam.size)
    mask[iz] = 0.0
    a = pack.gap_b
    ts = np.linspace(0.0, horizon_factor / a, n_t)
    rng = np.random.default_rng(1)
    x = rng.standard_normal(A.shape[0])
    norms = np.empty(n_t)
    for k, t in enumerate(ts):
        d = mask * np.exp(lam * t)
        s_old = 0.0
        for it in range(200):
            y = (V @ (d * (Vi @ x))).real
            z = (Vi.T @ (d * (V.T @ y))).real
            s = math.sqrt(np.linalg.norm(z))
            x = z / np.linalg.norm(z)
            if abs(s - s_old) <= 1e-9 * s:
                break
            s_old = s
        norms[k] = np.linalg.norm((V @ (d * (Vi @ x))).real)
    M = float(np.max(norms * np.exp(a * ts)))
    return DecayFit(M, a, ts, norms)


def worst_case_direction(pack: LinearizationPack, t: float, iters: int = 300):
    """Unit complex field maximizing ||exp(tA) Pi f|| (power iteration on the eigen-decomposition)."""
    A = pack.matrix
    lam, V = sla.eig(A, check_finite=False)
    Vi = sla.inv(V, check_finite=False)
    d = np.exp(lam * t)
    d[int(np.argmin(np.abs(lam)))] = 0.0
    x = np.random.default_rng(3).standard_normal(A.shape[0])
    for _ in range(iters):
        y = (V @ (d * (Vi @ x))).real
        z = (Vi.T @ (d * (V.T @ y))).real
        x = z / np.linalg.norm(z)
    f = to_complex(x)
    return f / math.sqrt(l2_inner(f, f, pack.grid.dx))


# --- Field-level API ----------------------------------------------------------

def project_pi0(f: Field, pack: LinearizationPack) -> Field:
    return Field(pack.pi0(f.values), f.grid)


def project_pi(f: Field, pack: LinearizationPack) -> Field:
    return Field(pack.pi(f.values), f.grid)


def phase_functional(f: Field, pack: LinearizationPack) -> float:
    return float(pack.phase(f.values))


def default_linear_dt(grid: Grid, t: float, dt_max: float = 1e-3):
    n = max(1, int(math.ceil(t / dt_max - 1e-9)))
    return t / n, n


def semigroup_array(values, t, pack, mode="matrix_exp", dt=None, scheme="yoshida_exact_noise"):
    if t < 0:
        raise ValueError("t must be nonnegative")
    if t == 0:
        return np.array(values, complex)
    if mode == "matrix_exp":
        vec = to_real(np.atleast_2d(values)).T
        out = expm_multiply(t * pack.matrix, vec)
        return to_complex(out.T).reshape(np.shape(values))
    if mode == "timestep":
        if dt is None:
            dt, n = default_linear_dt(pack.grid, t)
        else:
            n = int(round(t / dt))
            if abs(n * dt - t) > 1e-9 * t:
                raise ValueError("dt must divide t")
        return pack.linear_stepper(dt, scheme).advance_v1(np.array(values, complex), n)
    raise ValueError(f"unknown mode {mode!r}")


def apply_semigroup(f: Field, t: float, pack: LinearizationPack, mode: str = "matrix_exp", dt=None) -> Field:
    return Field(semigroup_array(f.values, t, pack, mode, dt), f.grid)


@dataclass(frozen=True)
class StrichartzEstimate:
    constant: float
    pi0_constant: float
    pi0_bound: float
    T: float
    pair: AdmissiblePair
    weighted_sup: float = float("nan")   # max_f sup_t e^{at} ||P(t) Pi f||_{L^p}


def top_singular_vector_pi(pack: LinearizationPack, iters=100):
    """Unit complex field maximizing ||Pi f||."""
    rng = np.random.default_rng(2)
    n = pack.grid.n_points
    x = rng.standard_normal(n) + 1j * rng.standard_normal(n)
    dx = pack.grid.dx
    ux, psi, den = pack._ux, pack._psi, pack._pair_den
    for _ in range(iters):
        y = pack.pi(x)
        # adjoint of Pi under the real pairing: f - <f, u_x> psi / den
        x = y - l2_inner(y, ux, dx) / den * psi
        x = x / math.sqrt(l2_inner(x, x, dx))
    return x


def random_unit_fields(grid: Grid, n, rng, bandwidth=1.0):
    """Smooth random complex fields with unit L2 norm, concentrated in the box centre."""
    x = grid.x
    envelope = np.exp(-(x / (0.1 * grid.domain_length)) ** 2)
    k = np.exp(-(grid.freqs / bandwidth) ** 2)
    out = np.empty((n, grid.n_points), complex)
    for i in range(n):
        w = rng.standard_normal(grid.n_points) + 1j * rng.standard_normal(grid.n_points)
        f = np.fft.ifft(k * np.fft.fft(w)) * envelope
        out[i] = f / np.sqrt(np.sum(np.abs(f) ** 2) * grid.dx)
    return out


def empirical_strichartz(pack: LinearizationPack, pair: AdmissiblePair, n_samples: int = 32,
                         T: float = 10.0, dt: float = None, seed: int = 0) -> StrichartzEstimate:
    """max over unit f of ||P(.) Pi f||_{L^r(0,T;L^p)}; lower bound for the constant."""
    if math.isinf(pair.p) and pair.r == 4:
        raise ValueError("endpoint pair (4, inf) is excluded")
    grid = pack.grid
    rng = np.random.default_rng(seed)
    fs = random_unit_fields(grid, n_samples, rng)
    extra = [top_singular_vector_pi(pack)]
    if pack.decay_ready:
        fit = pack.decay_fit
        extra.append(worst_case_direction(pack, float(fit.t[np.argmax(fit.norms * np.exp(fit.a * fit.t))])))
    fs = np.vstack([fs] + [e[None, :] for e in extra])
    a = pack.decay_fit.a if pack.decay_ready else 0.0
    if dt is None:
        dt = min(1e-2, grid.dx ** 2 / math.pi)
    n = int(math.ceil(T / dt - 1e-9))
    dt = T / n
    st = pack.linear_stepper(dt)
    dx = grid.dx
    g = pack.pi(fs)
    h = pack.pi0(fs)
    acc = np.zeros(len(fs))
    sup = lp_norms(g, dx, pair.p)
    wsup = sup.copy()
    sup0 = lp_norms(h, dx, pair.p)
    for k in range(n):
        vals = lp_norms(g, dx, pair.p)
        acc += vals ** pair.r * dt if not math.isinf(pair.r) else 0.0
        g = st.advance_v1(g, 1)
        h = st.advance_v1(h, 1)
        vals = lp_norms(g, dx, pair.p)
        sup = np.maximum(sup, vals)
        wsup = np.maximum(wsup, vals * math.exp(a * (k + 1) * dt))
        sup0 = np.maximum(sup0, lp_norms(h, dx, pair.p))
    norms = sup if math.isinf(pair.r) else acc ** (1.0 / pair.r)
    h0 = lp_norms(pack.pi0(fs), dx, 2)
    ok = h0 > 1e-12
    ux = pack._ux
    bound = float(lp_norms(ux, dx, pair.p) / lp_norms(ux, dx, 2))
    return StrichartzEstimate(float(norms.max()), float(np.max(sup0[ok] / h0[ok])), bound, T, pair,
                              float(wsup.max()) if a else float("nan"))


# --- cache --------------------------------------------------------------------

def pack_key(params: ModelParams, grid: Grid, shift: float = 0.0) -> str:
    blob = json.dumps({"v": CACHE_VERSION, "params": params.as_dict(), "N": grid.n_points,
                       "L": grid.domain_length, "shift": shift}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:20]


def save_pack(pack: LinearizationPack, path: str):
    d = {"spectrum": pack.spectrum, "right": pack.right_null.vector(), "left": pack.left_null.vector(),
         "zero_index": pack.zero_index, "gap_b": pack.gap_b, "matrix_norm": pack.matrix_norm}
    if pack.decay_ready:
        f = pack.decay_fit
        d.update(M=f.M, a=f.a, fit_t=f.t, fit_norms=f.norms)
    tmp = path + ".tmp.npz"
    np.savez(tmp, **d)
    os.replace(tmp, path)


def load_pack(wave: SolitaryWave, path: str) -> LinearizationPack:
    with np.load(path) as z:
        decay = None
        if "M" in z:
            decay = DecayFit(float(z["M"]), float(z["a"]), z["fit_t"], z["fit_norms"])
        return LinearizationPack(wave, None, z["spectrum"], RealField2.from_vector(z["right"]),
                                 RealField2.from_vector(z["left"]), int(z["zero_index"]),
                                 float(z["gap_b"]), float(z["matrix_norm"]), decay)


def cached_linearization(wave: SolitaryWave, cache_dir: str | None, fit: bool = True) -> LinearizationPack:
    """Build or load a pack; cache entries are keyed by (params, grid)."""
    if not cache_dir:
        return build_linearization(wave, fit=fit)
    os.makedirs(cache_dir, exist_ok=True)
    path = os.path.join(cache_dir, f"pack-{pack_key(wave.params, wave.grid, wave.shift)}.npz")
    if os.path.exists(path):
        pack = load_pack(wave, path)
        if pack.decay_ready or not fit:
            log.info("pack cache hit: %s", path)
            return pack
    log.info("pack cache miss: building %s", path)
    pack = build_linearization(wave, fit=fit)
    save_pack(pack, path)
    return pack

"""Split-step integrators for the stochastic PFNLS and its linearizations.

A step is a composition of symmetric stages with weights w (sum w = 1):

    S(w dt/2) E_L(w dt/2) K(w dt) E_L(w dt/2) S(w dt/2)

S is the free group, E_L the exact flow of the pointwise real-linear part L
(a 2x2 matrix exponential) and K the exact Kerr phase rotation
u -> u exp(i kappa tau |u|^2). The Stratonovich noise u -> u exp(-i sigma eta)
is a pointwise phase as well, so it commutes with K and is folded into the
central stage. With one stage this is Strang splitting; with the triple-jump
weights it is fourth order in the deterministic limit.
"""
from __future__ import annotations

import math
import warnings
import zlib
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm

from .errors import BlowupError, UnsupportedError
from .model import ModelParams, local_linear
from .noise import IncrementSource, NoiseModel
from .spectral_core import Field, Grid, free_symbol, hs_norms, lp_norms

SCHEMES = ("strang_exact_noise", "yoshida_exact_noise", "euler_maruyama")
BLOWUP_L6 = 1e6


def composition(scheme: str):
    """Stage weights and the index of the stage carrying the noise."""
    if scheme == "strang_exact_noise":
        return np.array([1.0]), 0
    if scheme == "yoshida_exact_noise":
        c = 2.0 ** (1.0 / 3.0)
        w1 = 1.0 / (2.0 - c)
        return np.array([w1, -c * w1, w1]), 1
    raise ValueError(f"scheme {scheme!r} is not a splitting scheme")


def lflow_coefficients(params: ModelParams, tau: float):
    """(alpha, beta) with exp(tau L) u = alpha u + beta conj(u)."""
    p = params
    B = np.array([[-p.eps * p.gamma + p.eps * p.mu, p.nu],
                  [-p.nu, -p.eps * p.gamma - p.eps * p.mu]])
    E = expm(tau * B)
    alpha = 0.5 * (E[0, 0] + E[1, 1]) + 0.5j * (E[1, 0] - E[0, 1])
    beta = 0.5 * (E[0, 0] - E[1, 1]) + 0.5j * (E[1, 0] + E[0, 1])
    return complex(alpha), complex(beta)


def cis(phase):
    """exp(i phase) for real phase; cos/sin is about twice as fast as complex exp."""
    out = np.empty(np.shape(phase), complex)
    out.real = np.cos(phase)
    out.imag = np.sin(phase)
    return out


def cfl_limit(grid: Grid) -> float:
    return grid.dx ** 2 / math.pi


class SplitStepper:
    """Batched stepper; arrays have space on the last axis."""

    def __init__(self, params: ModelParams, grid: Grid, dt: float, scheme: str = "yoshida_exact_noise"):
        if not dt > 0:
            raise ValueError("dt must be positive")
        self.params, self.grid, self.dt, self.scheme = params, grid, float(dt), scheme
        self.weights, self.noise_stage = composition(scheme)
        w = self.weights
        half = [free_symbol(grid, wj * dt / 2) for wj in w]
        self.h_first = half[0]
        self.h_last = half[-1]
        self.h_join = [half[j] * half[j + 1] for j in range(len(w) - 1)]
        self.h_wrap = half[-1] * half[0]
        self.lcoef = [lflow_coefficients(params, wj * dt / 2) for wj in w]
        self.ktau = [params.kappa * wj * dt for wj in w]

    @property
    def n_stages(self):
        return len(self.weights)

    def _lhalf(self, u, j):
        a, b = self.lcoef[j]
        return a * u + b * np.conj(u)

    def _local(self, u, j, eta, sigma):
        u = self._lhalf(u, j)
        phase = self.ktau[j] * (u.real ** 2 + u.imag ** 2)
        if eta is not None and j == self.noise_stage and sigma != 0:
            phase = phase - sigma * eta
        u = u * cis(phase)
        return self._lhalf(u, j)

    def _mult(self, j, last):
        if j < self.n_stages - 1:
            return self.h_join[j]
        return self.h_last if last else self.h_wrap

    def advance(self, u, n_steps: int, source: IncrementSource | None = None, sigma: float = 0.0):
        """n_steps steps from physical-space u; returns physical-space u."""
        fft, ifft = np.fft.fft, np.fft.ifft
        uh = fft(u, axis=-1) * self.h_first
        for k in range(n_steps):
            eta = source.next() if source is not None else None
            last = k == n_steps - 1
            for j in range(self.n_stages):
                u = ifft(uh, axis=-1)
                u = self._local(u, j, eta, sigma)
                uh = fft(u, axis=-1) * self._mult(j, last)
        return ifft(uh, axis=-1) if n_steps else u

    def stage_states(self, u):
        """States entering each Kerr rotation during one deterministic step from u."""
        fft, ifft = np.fft.fft, np.fft.ifft
        out = []
        uh = fft(u) * self.h_first
        for j in range(self.n_stages):
            v = self._lhalf(ifft(uh), j)
            out.append(v)
            v = v * cis(self.ktau[j] * (v.real ** 2 + v.imag ** 2))
            uh = fft(self._lhalf(v, j)) * self._mult(j, True)
        return out


class EulerMaruyama:
    """Exponential Euler-Maruyama on the Ito form with explicit -1/2 sigma^2 beta^2 u drift."""

    scheme = "euler_maruyama"

    def __init__(self, params: ModelParams, grid: Grid, dt: float, beta2: float):
        self.params, self.grid, self.dt, self.beta2 = params, grid, float(dt), float(beta2)
        self.S = free_symbol(grid, dt)

    def advance(self, u, n_steps, source=None, sigma=0.0):
        p, dt = self.params, self.dt
        k = p.kappa
        for _ in range(n_steps):
            drift = local_linear(u, p) + 1j * k * (u.real ** 2 + u.imag ** 2) * u \
                - 0.5 * sigma ** 2 * self.beta2 * u
            w = u + dt * drift
            if source is not None:
                eta = source.next()
                if sigma != 0:
                    w = w - 1j * sigma * u * eta
            u = np.fft.ifft(self.S * np.fft.fft(w, axis=-1), axis=-1)
        return u


def make_stepper(params, grid, dt, scheme, beta2=1.0):
    if scheme == "euler_maruyama":
        return EulerMaruyama(params, grid, dt, beta2)
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}; choose from {SCHEMES}")
    return SplitStepper(params, grid, dt, scheme)


class LinearizedStepper:
    """First and second sigma-derivatives of the SplitStepper step map at a base state.

    Writing the Kerr-point state as U + s a + s^2 b, the rotation
    X exp(i kappa tau |X|^2 - i s eta) expands with
        phi1 = 2 kappa tau Re(conj(U) a) - eta,  phi2 = kappa tau (|a|^2 + 2 Re(conj(U) b))
    into a' = e0 (a + i phi1 U) and b' = e0 (b + i phi1 a + (i phi2 - phi1^2/2) U).
    With ito=True the eta^2 inside phi1^2 is replaced by its mean beta^2 dt. The resulting
    -1/2 beta^2 dt U forcing is distributed over the stages by weight and split half before
    and half after each rotation, so the linearized Kerr flow acts on it and the forced
    linear system keeps the order of the composition.
    """

    def __init__(self, stepper: SplitStepper, base: np.ndarray, beta2: float = 1.0, ito: bool = False):
        self.st = stepper
        self.base = np.asarray(base, complex)
        self.beta2 = float(beta2)
        self.ito = ito
        self.U = stepper.stage_states(self.base)
        self.e0 = [cis(stepper.ktau[j] * (U.real ** 2 + U.imag ** 2)) for j, U in enumerate(self.U)]
        self.Ue = [e * U for e, U in zip(self.e0, self.U)]

    def _local1(self, a, j, eta):
        st = self.st
        a = st._lhalf(a, j)
        U = self.U[j]
        phi1 = 2 * st.ktau[j] * (U.real * a.real + U.imag * a.imag)
        if eta is not None and j == st.noise_stage:
            phi1 = phi1 - eta
        a = self.e0[j] * a + 1j * phi1 * self.Ue[j]
        return st._lhalf(a, j)

    def _local2(self, a, b, j, eta):
        st = self.st
        a = st._lhalf(a, j)
        b = st._lhalf(b, j)
        U = self.U[j]
        kt = st.ktau[j]
        d1 = 2 * kt * (U.real * a.real + U.imag * a.imag)
        phi2 = kt * (a.real ** 2 + a.imag ** 2 + 2 * (U.real * b.real + U.imag * b.imag))
        noisy = eta is not None and j == st.noise_stage
        phi1 = d1 - eta if noisy else d1
        e0, Ue = self.e0[j], self.Ue[j]
        if self.ito:
            sq = d1 * d1
            if noisy:
                sq = sq - 2 * d1 * eta
            # deterministic part spread over stages by weight: 4th order under triple jump
            q = 0.25 * self.beta2 * st.weights[j] * st.dt
            if q:
                b = b - q * U
                phi2 = phi2 - 2 * kt * q * (U.real * U.real + U.imag * U.imag)
                sq = sq + 2 * q
        else:
            sq = phi1 * phi1
        b = e0 * (b + 1j * phi1 * a) + (1j * phi2 - 0.5 * sq) * Ue
        a = e0 * a + 1j * phi1 * Ue
        return st._lhalf(a, j), st._lhalf(b, j)

    def advance_v1(self, v1, n_steps, source=None, etas=None):
        fft, ifft = np.fft.fft, np.fft.ifft
        st = self.st
        vh = fft(v1, axis=-1) * st.h_first
        for k in range(n_steps):
            eta = source.next() if source is not None else (etas[k] if etas is not None else None)
            last = k == n_steps - 1
            for j in range(st.n_stages):
                v = self._local1(ifft(vh, axis=-1), j, eta)
                vh = fft(v, axis=-1) * st._mult(j, last)
        return ifft(vh, axis=-1) if n_steps else v1

    def advance_pair(self, v1, v2, n_steps, source=None, etas=None):
        fft, ifft = np.fft.fft, np.fft.ifft
        st = self.st
        vh = fft(np.stack([v1, v2]), axis=-1) * st.h_first
        for k in range(n_steps):
            eta = source.next() if source is not None else (etas[k] if etas is not None else None)
            last = k == n_steps - 1
            for j in range(st.n_stages):
                v = ifft(vh, axis=-1)
                a, b = self._local2(v[0], v[1], j, eta)
                vh = fft(np.stack([a, b]), axis=-1) * st._mult(j, last)
        if not n_steps:
            return v1, v2
        v = ifft(vh, axis=-1)
        return v[0], v[1]


# ---------------------------------------------------------------------------

@dataclass
class StepperConfig:
    dt: float = 1e-3
    scheme: str = "yoshida_exact_noise"
    t_end: float = 10.0
    record_stride: int = 100

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not self.t_end > 0:
            raise ValueError("t_end must be positive")
        if int(self.record_stride) < 1:
            raise ValueError("record_stride must be >= 1")
        self.record_stride = int(self.record_stride)
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}; choose from {SCHEMES}")
        ratio = self.t_end / (self.dt * self.record_stride)
        if abs(ratio - round(ratio)) > 1e-9 * max(1.0, ratio) or round(ratio) < 1:
            raise ValueError("dt * record_stride must divide t_end exactly")

    @property
    def n_records(self) -> int:
        return int(round(self.t_end / (self.dt * self.record_stride)))

    @property
    def n_steps(self) -> int:
        return self.n_records * self.record_stride

    @property
    def record_dt(self) -> float:
        return self.dt * self.record_stride


@dataclass
class Trajectory:
    """Recorded path(s). Arrays carry a path axis after the time axis."""
    times: np.ndarray
    grid: Grid
    states: np.ndarray | None          # (n_t, P, N) or None in lean mode
    l2: np.ndarray                      # (n_t, P)
    h1: np.ndarray
    h2: np.ndarray
    linf_l2: np.ndarray                 # running sup_t ||u||_2
    l6_l6: np.ndarray                   # running ||u||_{L^6(0,t;L^6)}
    blowup_time: np.ndarray             # (P,), nan if none
    provenance: dict = field(default_factory=dict)

    @property
    def n_paths(self):
        return self.l2.shape[1]

    def path_states(self, p: int = 0):
        if self.states is None:
            raise UnsupportedError("trajectory was recorded in summary-only mode")
        return [Field(s, self.grid) for s in self.states[:, p]]

    def final(self, p: int = 0) -> Field:
        return Field(self.states[-1, p], self.grid)


def simulate_batch(u0: np.ndarray, grid: Grid, params: ModelParams, nm: NoiseModel,
                   cfg: StepperConfig, source: IncrementSource | None,
                   keep_states: bool = True, raise_on_blowup: bool = False) -> Trajectory:
    """Evolve P paths (rows of u0) with increments from `source`."""
    u = np.array(u0, dtype=complex, ndmin=2)
    sigma = nm.sigma if nm is not None else 0.0
    if cfg.dt > cfl_limit(grid) * (1 + 1e-12):
        warnings.warn(f"dt={cfg.dt:g} exceeds dx^2/pi={cfl_limit(grid):.3g}", RuntimeWarning, stacklevel=2)
    beta2 = nm.beta ** 2 if nm is not None else 0.0
    stepper = make_stepper(params, grid, cfg.dt, cfg.scheme, beta2)
    if sigma == 0:
        source = None
    n_t = cfg.n_records + 1
    P = u.shape[0]
    times = cfg.record_dt * np.arange(n_t)
    dx = grid.dx
    states = np.empty((n_t, P, grid.n_points), complex) if keep_states else None
    l2 = np.empty((n_t, P)); h1 = np.empty((n_t, P)); h2 = np.empty((n_t, P))
    linf = np.empty((n_t, P)); l6 = np.empty((n_t, P))
    blow = np.full(P, np.nan)
    acc6 = np.zeros(P)

    def record(k):
        nonlocal acc6
        bad = ~np.all(np.isfinite(u), axis=-1)
        if keep_states:
            states[k] = u
        l2[k] = lp_norms(u, dx, 2)
        h1[k] = hs_norms(u, grid, 1)
        h2[k] = hs_norms(u, grid, 2)
        linf[k] = l2[k] if k == 0 else np.maximum(linf[k - 1], l2[k])
        l6[k] = acc6 ** (1 / 6)
        acc6 = acc6 + lp_norms(u, dx, 6) ** 6 * cfg.record_dt
        bad |= ~np.isfinite(l6[k]) | (l6[k] > BLOWUP_L6)
        new = bad & np.isnan(blow)
        if new.any():
            blow[new] = times[k]
            if raise_on_blowup:
                raise BlowupError("solution blew up", times[k])
            u[new] = 0.0
            acc6[new] = np.inf

    record(0)
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(1, n_t):
            u = stepper.advance(u, cfg.record_stride, source, sigma)
            record(k)
    prov = {"params": params.as_dict(), "scheme": cfg.scheme, "dt": cfg.dt, "t_end": cfg.t_end,
            "record_stride": cfg.record_stride, "sigma": sigma,
            "beta": nm.beta if nm is not None else 0.0,
            "noise_crc": source.crc if source is not None else 0,
            "n_points": grid.n_points, "domain_length": grid.domain_length}
    return Trajectory(times, grid, states, l2, h1, h2, linf, l6, blow, prov)


def step_spfnls(u: Field, params: ModelParams, nm: NoiseModel, dt: float,
                stream: np.random.Generator | None, scheme: str = "yoshida_exact_noise") -> Field:
    """One step of size dt; draws one increment from `stream` when sigma > 0."""
    if dt > cfl_limit(u.grid) * (1 + 1e-12):
        warnings.warn(f"dt={dt:g} exceeds dx^2/pi", RuntimeWarning, stacklevel=2)
    st = make_stepper(params, u.grid, dt, scheme, nm.beta ** 2)
    src = None
    if nm.sigma != 0 and stream is not None:
        src = IncrementSource(nm, [stream], dt, block=1)
    out = st.advance(u.values[None, :], 1, src, nm.sigma)[0]
    if not np.all(np.isfinite(out)):
        raise BlowupError("non-finite state", dt)
    return Field(out, u.grid)


def simulate(u0: Field, params: ModelParams, nm: NoiseModel, cfg: StepperConfig,
             stream: np.random.Generator | None = None, keep_states: bool = True) -> Trajectory:
    src = IncrementSource(nm, [stream], cfg.dt) if (stream is not None and nm.sigma) else None
    traj = simulate_batch(u0.values, u0.grid, params, nm, cfg, src, keep_states, raise_on_blowup=True)
    return traj


def conservation_balance(traj: Trajectory, params: ModelParams, path: int = 0) -> np.ndarray:
    """r(t) = ||u||^2 - ||u0||^2 + 2 eps int (gamma ||u||^2 - mu Re<conj u, u>) dt'."""
    if traj.states is None:
        raise UnsupportedError("conservation balance needs stored states")
    u = traj.states[:, path]
    dx = traj.grid.dx
    m = np.sum(np.abs(u) ** 2, axis=-1) * dx
    cross = np.sum((np.conj(u) ** 2).real, axis=-1) * dx
    g = params.gamma * m - params.mu * cross
    dt = np.diff(traj.times)
    integral = np.concatenate([[0.0], np.cumsum(0.5 * (g[1:] + g[:-1]) * dt)])
    return m - m[0] + 2 * params.eps * integral


def noise_checksum(etas) -> int:
    crc = 0
    for e in etas:
        crc = zlib.adler32(np.ascontiguousarray(e).tobytes(), crc)
    return crc


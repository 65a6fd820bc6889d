"""Second-order sigma-expansion u = u* + s v1 + s^2 v2 + z and the phase decomposition.

Fields are numpy arrays with space on the last axis, optionally batched over
paths on the leading axis. v1 and v2 are advanced by the exact sigma-derivatives
of the split-step map (see dynamics.LinearizedStepper) so that, with shared
increments, z is a pure O(s^3) remainder of the discrete scheme.
"""
from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import expm

from .dynamics import SplitStepper
from .errors import CouplingError
from .linearization import LinearizationPack, to_complex, to_real
from .model import SolitaryWave, bracket, solitary_wave, wave_profile
from .noise import IncrementSource, NoiseIncrement, NoiseModel, sample_increment
from .spectral_core import Field, Grid, lp_norms


@dataclass
class ExpansionState:
    v1: np.ndarray
    v2: np.ndarray
    t: float = 0.0
    a1: np.ndarray | float | None = None
    a2: np.ndarray | float | None = None
    w1: np.ndarray | None = None
    w2: np.ndarray | None = None
    z: np.ndarray | None = None
    z_prime: np.ndarray | None = None
    steps_v1: int = 0
    steps_v2: int = 0
    crc: int = 0
    provenance: dict = field(default_factory=dict)


def initial_state(pack: LinearizationPack, v10=None, n_paths: int | None = None) -> ExpansionState:
    n = pack.grid.n_points
    shape = (n,) if n_paths is None else (n_paths, n)
    v1 = np.zeros(shape, complex)
    if v10 is not None:
        v1 = v1 + np.asarray(v10.values if isinstance(v10, Field) else v10, complex)
    st = ExpansionState(v1, np.zeros(shape, complex))
    return phase_decompose(st, pack)


def _eta(noise, nm: NoiseModel, dt: float, shape):
    """Normalize the various ways of passing one step of noise to an array."""
    if noise is None:
        return None
    if isinstance(noise, NoiseIncrement):
        return noise.values.values.real
    if isinstance(noise, Field):
        return noise.values.real
    if isinstance(noise, np.random.Generator):
        if len(shape) == 1:
            return sample_increment(nm, dt, noise).values.values.real
        return np.stack([sample_increment(nm, dt, noise).values.values.real for _ in range(shape[0])])
    return np.asarray(noise, float)


def _crc(crc, eta):
    return crc if eta is None else zlib.adler32(np.ascontiguousarray(eta).tobytes(), crc)


def _stepper(pack, dt, scheme, nm, ito):
    beta2 = nm.beta ** 2 if nm is not None else 0.0
    return pack.linear_stepper(dt, scheme, beta2, ito)


def evolve_v1(state: ExpansionState, pack: LinearizationPack, nm: NoiseModel, dt: float, noise,
              scheme: str = "yoshida_exact_noise") -> ExpansionState:
    """One step of dv1 = L v1 dt - i u* Phi dW. `noise` is an increment, array or Generator."""
    eta = _eta(noise, nm, dt, state.v1.shape)
    lin = _stepper(pack, dt, scheme, nm, False)
    v1 = lin.advance_v1(state.v1, 1, etas=[eta])
    return replace(state, v1=v1, t=state.t + dt, steps_v1=state.steps_v1 + 1,
                   crc=_crc(state.crc, eta), a1=None, a2=None, w1=None, w2=None)


def evolve_v2(state: ExpansionState, pack: LinearizationPack, nm: NoiseModel, dt: float, noise,
              scheme: str = "yoshida_exact_noise", ito: bool = False) -> ExpansionState:
    """One joint step of (v1, v2); v2 sees the current v1 in drift and diffusion."""
    if state.steps_v1 != state.steps_v2:
        raise CouplingError(f"v1 has consumed {state.steps_v1} increments but v2 {state.steps_v2}")
    eta = _eta(noise, nm, dt, state.v1.shape)
    lin = _stepper(pack, dt, scheme, nm, ito)
    v1, v2 = lin.advance_pair(state.v1, state.v2, 1, etas=[eta])
    n = state.steps_v1 + 1
    return replace(state, v1=v1, v2=v2, t=state.t + dt, steps_v1=n, steps_v2=n,
                   crc=_crc(state.crc, eta), a1=None, a2=None, w1=None, w2=None)


def phase_decompose(state: ExpansionState, pack: LinearizationPack) -> ExpansionState:
    uxx = pack.wave.u_star_xx.values
    a1 = pack.phase(state.v1)
    y = state.v2 - 0.5 * np.multiply.outer(a1 ** 2, uxx)
    a2 = pack.phase(y)
    return replace(state, a1=a1, a2=a2, w1=pack.pi(state.v1), w2=pack.pi(y))


def reconstruction_errors(state: ExpansionState, pack: LinearizationPack):
    """Max over paths of the three decomposition identities."""
    dx = pack.grid.dx
    ux, uxx = pack.wave.u_star_x.values, pack.wave.u_star_xx.values
    a1 = np.atleast_1d(state.a1)[:, None]
    a2 = np.atleast_1d(state.a2)[:, None]
    v1 = np.atleast_2d(state.v1); v2 = np.atleast_2d(state.v2)
    w1 = np.atleast_2d(state.w1); w2 = np.atleast_2d(state.w2)
    e1 = lp_norms(v1 - a1 * ux - w1, dx, 2).max()
    e2 = lp_norms(v2 - a2 * ux - 0.5 * a1 ** 2 * uxx - w2, dx, 2).max()
    e3 = (np.abs(pack.phase(w1)) + np.abs(pack.phase(w2))).max()
    return float(e1), float(e2), float(e3)


def compute_residuals(u, state: ExpansionState, wave: SolitaryWave, sigma: float, u_crc: int | None = None):
    """z = u - u* - s v1 - s^2 v2 and z' = u - u* - s v1."""
    if u_crc is not None and u_crc != state.crc:
        raise CouplingError("u and the expansion fields consumed different increments")
    uv = u.values if isinstance(u, Field) else u
    zp = uv - wave.u_star.values - sigma * state.v1
    z = zp - sigma ** 2 * state.v2
    return z, zp


def reset_frame(u, shift: float, pack: LinearizationPack, sigma: float, rebuild: bool = False):
    """Re-linearize around u*(x + c + shift) where c is the current frame shift.

    Returns (wave, pack, state) with v1(0) = (u - u*_new)/sigma and v2(0) = 0.
    """
    grid = pack.grid
    if abs(pack.wave.shift + shift) >= grid.domain_length / 4:
        raise ValueError(f"frame shift {pack.wave.shift + shift:.3g} exceeds a quarter of the box")
    if rebuild:
        from .linearization import build_linearization
        new_pack = build_linearization(solitary_wave(pack.params, grid, pack.wave.shift + shift))
    else:
        new_pack = pack.translated(shift)
    wave = new_pack.wave
    uv = u.values if isinstance(u, Field) else np.asarray(u)
    v10 = (uv - wave.u_star.values) / sigma
    st = ExpansionState(v10, np.zeros_like(v10), provenance={"frame_shift": wave.shift})
    return wave, new_pack, phase_decompose(st, new_pack)


# --- stopping times -------------------------------------------------------------

@dataclass(frozen=True)
class StoppingTimes:
    tau_v1: np.ndarray
    tau_v2: np.ndarray
    tau_z: np.ndarray
    tau_z_prime: np.ndarray
    T: float


def first_crossing(times, values, cap):
    """First mesh time with value > cap along axis 0, else times[-1]."""
    times = np.asarray(times)
    over = np.asarray(values) > cap
    hit = over.any(axis=0)
    idx = np.argmax(over, axis=0)
    return np.where(hit, times[idx], times[-1])


def stopping_times(diag, eps: float, sigma: float, c1: float) -> StoppingTimes:
    """Caps: ||v1|| <= eps/s, ||v2|| <= eps^2/s^2, ||z|| <= c1 eps^3, ||z'|| <= c1 eps^2.

    Norms are the running L^inf L^2 and L^6 L^6 norms combined by max.
    """
    t = diag.times
    r = math.inf if sigma == 0 else eps / sigma
    return StoppingTimes(
        first_crossing(t, diag.v1_mixed, r),
        first_crossing(t, diag.v2_mixed, r * r),
        first_crossing(t, diag.z_mixed, c1 * eps ** 3),
        first_crossing(t, diag.zp_mixed, c1 * eps ** 2),
        float(t[-1]))


# --- coupled ensemble run ----------------------------------------------------------

@dataclass
class PathDiagnostics:
    times: np.ndarray
    a1: np.ndarray            # (n_t, P)
    a2: np.ndarray
    w1: np.ndarray            # ||w1||_2
    w2: np.ndarray
    v1: np.ndarray            # ||v1||_2
    v2: np.ndarray
    z: np.ndarray
    zp: np.ndarray
    taylor: np.ndarray        # ||u - u*(.+s a1+s^2 a2) - s w1 - s^2 w2||
    v1_mixed: np.ndarray      # running max(L^inf L^2, L^6 L^6)
    v2_mixed: np.ndarray
    z_mixed: np.ndarray
    zp_mixed: np.ndarray
    recon: tuple = (0.0, 0.0, 0.0)
    crc: int = 0
    provenance: dict = field(default_factory=dict)

    def sup(self, name, t_max=None):
        arr = getattr(self, name)
        sel = slice(None) if t_max is None else self.times <= t_max + 1e-12
        return np.max(arr[sel], axis=0)

    def rows(self, path: int = 0):
        for k, t in enumerate(self.times):
            yield (t, self.a1[k, path], self.a2[k, path], self.w1[k, path], self.w2[k, path],
                   self.z[k, path], self.zp[k, path], self.v1_mixed[k, path], self.v2_mixed[k, path])


class _Running:
    def __init__(self, P, dt_rec):
        self.sup = np.zeros(P)
        self.acc6 = np.zeros(P)
        self.dt = dt_rec

    def update(self, vals, dx):
        l2 = lp_norms(vals, dx, 2)
        self.sup = np.maximum(self.sup, l2)
        out = np.maximum(self.sup, self.acc6 ** (1 / 6))
        self.acc6 = self.acc6 + lp_norms(vals, dx, 6) ** 6 * self.dt
        return l2, out


def run_coupled(pack: LinearizationPack, nm: NoiseModel, sigma: float, T: float, dt: float,
                streams, record_stride: int = 10, scheme: str = "yoshida_exact_noise",
                v10=None, track_u: bool = True, track_v2: bool = True, ito: bool = False,
                group: int = 1) -> PathDiagnostics:
    """Simulate u, v1, v2 on shared increments for len(streams) paths and record diagnostics."""
    grid = pack.grid
    dx = grid.dx
    P = len(streams)
    n_rec = int(round(T / (dt * record_stride)))
    if abs(n_rec * dt * record_stride - T) > 1e-9 * T:
        raise ValueError("dt * record_stride must divide T")
    wave = pack.wave
    us = wave.u_star.values
    ux, uxx = wave.u_star_x.values, wave.u_star_xx.values
    src = IncrementSource(nm, streams, dt, group=group)
    beta2 = nm.beta ** 2
    lin = pack.linear_stepper(dt, scheme, beta2, ito)
    stepper = lin.st
    v1 = np.zeros((P, grid.n_points), complex)
    if v10 is not None:
        v1 = v1 + np.asarray(v10, complex)
    v2 = np.zeros_like(v1)
    u = us[None, :] + sigma * v1
    times = dt * record_stride * np.arange(n_rec + 1)
    names = ("a1", "a2", "w1", "w2", "v1", "v2", "z", "zp", "taylor",
             "v1_mixed", "v2_mixed", "z_mixed", "zp_mixed")
    rec = {k: np.zeros((n_rec + 1, P)) for k in names}
    runs = {k: _Running(P, dt * record_stride) for k in ("v1", "v2", "z", "zp")}
    worst = np.zeros(3)
    x = grid.x
    params = pack.params

    def record(k):
        st = phase_decompose(ExpansionState(v1, v2), pack)
        worst[:] = np.maximum(worst, reconstruction_errors(st, pack))
        rec["a1"][k], rec["a2"][k] = st.a1, st.a2
        rec["w1"][k] = lp_norms(st.w1, dx, 2)
        rec["w2"][k] = lp_norms(st.w2, dx, 2)
        rec["v1"][k], rec["v1_mixed"][k] = runs["v1"].update(v1, dx)
        rec["v2"][k], rec["v2_mixed"][k] = runs["v2"].update(v2, dx)
        if track_u:
            zp = u - us - sigma * v1
            z = zp - sigma ** 2 * v2
            rec["z"][k], rec["z_mixed"][k] = runs["z"].update(z, dx)
            rec["zp"][k], rec["zp_mixed"][k] = runs["zp"].update(zp, dx)
            shift = sigma * st.a1 + sigma ** 2 * st.a2
            ref = wave_profile(params, x[None, :] + wave.shift + shift[:, None])
            rest = u - ref - sigma * st.w1 - sigma ** 2 * st.w2
            rec["taylor"][k] = lp_norms(rest, dx, 2)

    record(0)
    etas = []
    for k in range(1, n_rec + 1):
        etas.clear()
        for _ in range(record_stride):
            etas.append(src.next())
        if track_u:
            u = _advance_with(stepper, u, etas, sigma)
        if track_v2:
            v1, v2 = lin.advance_pair(v1, v2, record_stride, etas=etas)
        else:
            v1 = lin.advance_v1(v1, record_stride, etas=etas)
        record(k)
    prov = {"sigma": sigma, "dt": dt, "T": T, "scheme": scheme, "paths": P, "ito": ito,
            "params": params.as_dict(), "beta": nm.beta}
    return PathDiagnostics(times, recon=tuple(worst), crc=src.crc, provenance=prov, **rec)


def _advance_with(stepper: SplitStepper, u, etas, sigma):
    class _Fixed:
        def __init__(self, seq):
            self.it = iter(seq)

        def next(self):
            return next(self.it)
    return stepper.advance(u, len(etas), _Fixed(etas), sigma)


# --- mild-form cross-check ------------------------------------------------------------

def mild_solution(pack: LinearizationPack, etas, dt: float, beta2: float, v10=None):
    """Midpoint quadrature of the mild formulas with the dense semigroup.

    v1(t+dt) = P(dt/2) [P(dt/2) v1 - i u* eta]
    v2(t+dt) = P(dt/2) [P(dt/2) v2 + dt (i kappa {u*, m, m} - beta^2 u*/2) - i m eta],  m = P(dt/2) v1
    """
    A = pack.matrix
    Eh = expm(0.5 * dt * A)
    us = pack.wave.u_star.values
    kappa = pack.params.kappa
    n = pack.grid.n_points
    shape = np.shape(etas[0])
    v1 = np.zeros(shape, complex) if v10 is None else np.array(np.broadcast_to(v10, shape), complex)
    v2 = np.zeros(shape, complex)

    def half(v):
        return to_complex(to_real(v) @ Eh.T)

    for eta in etas:
        m = half(v1)
        y2 = half(v2) + dt * (1j * kappa * bracket(us, m, m) - 0.5 * beta2 * us) - 1j * m * eta
        v1 = half(m - 1j * us * eta)
        v2 = half(y2)
    return v1, v2

"""Model constants, the sech standing wave, triple bracket and PFNLS vector field."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import NoWaveError, ResolutionError, UnstableRegimeError
from .spectral_core import Field, Grid, _check_grid, laplacian, spectral_derivative

# |u*| has full width at half maximum 2 arccosh(2)/s
FWHM_FACTOR = 2.0 * math.acosh(2.0)
MIN_POINTS_PER_WIDTH = 16


@dataclass(frozen=True)
class ModelParams:
    nu: float
    eps: float
    gamma: float
    mu: float
    kappa: float
    theta: float = field(init=False)
    wave_scale: float = field(init=False)

    def __post_init__(self):
        for k in ("nu", "eps", "gamma", "mu", "kappa"):
            object.__setattr__(self, k, float(getattr(self, k)))
        th = 0.5 * math.acos(self.gamma / self.mu)
        object.__setattr__(self, "theta", th)
        lam = self.nu + self.eps * self.mu * math.sin(2 * th)
        object.__setattr__(self, "wave_scale", math.sqrt(lam))

    @property
    def amplitude(self) -> float:
        return self.wave_scale * math.sqrt(2.0 / self.kappa)

    def as_dict(self):
        return {k: getattr(self, k) for k in ("nu", "eps", "gamma", "mu", "kappa")}

    def replace(self, **kw):
        d = self.as_dict()
        d.update(kw)
        return make_params(**d)


def make_params(nu, eps, gamma, mu, kappa) -> ModelParams:
    if not gamma > 0:
        raise ValueError("gamma > 0 required")
    if not eps > 0:
        raise ValueError("eps > 0 required")
    if not kappa > 0:
        raise ValueError("kappa > 0 required")
    if not mu > gamma:
        raise UnstableRegimeError(f"mu > gamma required (mu={mu}, gamma={gamma})")
    s2 = 1.0 - (gamma / mu) ** 2
    lam = nu + eps * mu * math.sqrt(max(s2, 0.0))
    if not lam > 0:
        raise NoWaveError(f"nu + eps*mu*sin(2 theta) = {lam:.6g} must be positive")
    return ModelParams(nu, eps, gamma, mu, kappa)


def wave_profile(params: ModelParams, x) -> np.ndarray:
    """Analytic u*(x) = A sech(s x) e^{i theta}, A^2 = 2 s^2 / kappa."""
    s = params.wave_scale
    return params.amplitude / np.cosh(s * np.asarray(x)) * np.exp(1j * params.theta)


def wave_profile_dx(params: ModelParams, x) -> np.ndarray:
    s = params.wave_scale
    x = np.asarray(x)
    return -s * np.tanh(s * x) * wave_profile(params, x)


@dataclass(frozen=True)
class SolitaryWave:
    u_star: Field
    u_star_x: Field
    u_star_xx: Field
    params: ModelParams
    shift: float = 0.0

    @property
    def grid(self) -> Grid:
        return self.u_star.grid


def points_per_width(params: ModelParams, grid: Grid) -> float:
    return FWHM_FACTOR / params.wave_scale / grid.dx


def solitary_wave(params: ModelParams, grid: Grid, shift: float = 0.0) -> SolitaryWave:
    ppw = points_per_width(params, grid)
    if ppw < MIN_POINTS_PER_WIDTH:
        raise ResolutionError(
            f"grid has {ppw:.1f} points per soliton width, need >= {MIN_POINTS_PER_WIDTH}")
    x = grid.x + shift
    u = wave_profile(params, x)
    tail = max(abs(u[0]), abs(u[-1]))
    if tail > 1e-12:
        warnings.warn(f"wave tail {tail:.1e} at the box edge exceeds 1e-12; enlarge the box",
                      RuntimeWarning, stacklevel=2)
    ux = spectral_derivative(u, grid, 1)
    uxx = spectral_derivative(u, grid, 2)
    return SolitaryWave(Field(u, grid), Field(ux, grid), Field(uxx, grid), params, float(shift))


def bracket(a, b, c):
    """Array version of {a,b,c} = a b conj(c) + a conj(b) c + conj(a) b c."""
    return a * b * np.conj(c) + a * np.conj(b) * c + np.conj(a) * b * c


def triple_bracket(a: Field, b: Field, c: Field) -> Field:
    g = _check_grid(a, b, c)
    return Field(bracket(a.values, b.values, c.values), g)


def local_linear(values, params: ModelParams):
    """L u = -i nu u - eps (gamma u - mu conj(u))."""
    p = params
    return -1j * p.nu * values - p.eps * (p.gamma * values - p.mu * np.conj(values))


def pfnls_rhs(u: Field, params: ModelParams) -> Field:
    v = u.values
    out = (1j * laplacian(v, u.grid) + local_linear(v, params)
           + 1j * params.kappa / 3.0 * bracket(v, v, v))
    return Field(out, u.grid)

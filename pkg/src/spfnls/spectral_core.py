"""Periodic grid, Fourier helpers, free Schrodinger group and norms.

Convention: xi = fftfreq(N, dx) are ordinary frequencies, the Laplacian has
symbol -4 pi^2 xi^2 and S(t) = exp(t i Delta) has symbol exp(-4 pi^2 i xi^2 t).
Grid nodes are x_j = -L/2 + j dx.
"""
from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import GridMismatchError

TWO_PI = 2.0 * np.pi


@dataclass(frozen=True)
class Grid:
    n_points: int
    domain_length: float

    def __post_init__(self):
        n = int(self.n_points)
        if n < 2 or n & (n - 1):
            raise ValueError(f"n_points must be a power of two >= 2, got {self.n_points}")
        if not (np.isfinite(self.domain_length) and self.domain_length > 0):
            raise ValueError("domain_length must be positive and finite")
        object.__setattr__(self, "n_points", n)
        object.__setattr__(self, "domain_length", float(self.domain_length))

    @property
    def dx(self) -> float:
        return self.domain_length / self.n_points

    @cached_property
    def x(self) -> np.ndarray:
        return -0.5 * self.domain_length + self.dx * np.arange(self.n_points)

    @cached_property
    def freqs(self) -> np.ndarray:
        return np.fft.fftfreq(self.n_points, self.dx)

    @cached_property
    def laplace_symbol(self) -> np.ndarray:
        return -(TWO_PI * self.freqs) ** 2

    def zeros(self) -> "Field":
        return Field(np.zeros(self.n_points, complex), self)


def _check_grid(*fields):
    g = fields[0].grid
    for f in fields[1:]:
        if f.grid != g:
            raise GridMismatchError("fields live on different grids")
    return g


class Field:
    """Complex samples on a Grid. Arithmetic returns new Fields."""

    __slots__ = ("values", "grid")

    def __init__(self, values, grid: Grid):
        v = np.asarray(values, dtype=complex)
        if v.shape != (grid.n_points,):
            raise ValueError(f"expected {grid.n_points} samples, got shape {v.shape}")
        self.values = v
        self.grid = grid

    def __repr__(self):
        return f"Field(N={self.grid.n_points}, L={self.grid.domain_length})"

    def copy(self):
        return Field(self.values.copy(), self.grid)

    def conj(self):
        return Field(self.values.conj(), self.grid)

    @property
    def real(self):
        return self.values.real

    @property
    def imag(self):
        return self.values.imag

    def _other(self, o):
        if isinstance(o, Field):
            _check_grid(self, o)
            return o.values
        return o

    def __add__(self, o):
        return Field(self.values + self._other(o), self.grid)

    __radd__ = __add__

    def __sub__(self, o):
        return Field(self.values - self._other(o), self.grid)

    def __rsub__(self, o):
        return Field(self._other(o) - self.values, self.grid)

    def __mul__(self, o):
        return Field(self.values * self._other(o), self.grid)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return Field(self.values / self._other(o), self.grid)

    def __neg__(self):
        return Field(-self.values, self.grid)

    def is_finite(self):
        return bool(np.all(np.isfinite(self.values)))

    def shifted(self, k: int):
        """Translate by k grid cells: g(x) = f(x - k dx)."""
        return Field(np.roll(self.values, k), self.grid)

    # serialization ---------------------------------------------------------
    def to_bytes(self) -> bytes:
        head = struct.pack("<qd", self.grid.n_points, self.grid.domain_length)
        body = np.ascontiguousarray(np.column_stack([self.values.real, self.values.imag]),
                                    dtype="<f8").tobytes()
        return head + body

    @classmethod
    def from_bytes(cls, buf: bytes) -> "Field":
        n, length = struct.unpack_from("<qd", buf, 0)
        data = np.frombuffer(buf, dtype="<f8", count=2 * n, offset=16)
        return cls(data[0::2] + 1j * data[1::2], Grid(n, length))

    def to_csv(self) -> str:
        out = io.StringIO()
        out.write("x,re,im\n")
        for xi, v in zip(self.grid.x, self.values):
            out.write(f"{xi:.17g},{v.real:.17g},{v.imag:.17g}\n")
        return out.getvalue()


FIELD_RECORD_HEADER = struct.calcsize("<qd")


def field_record_size(n_points: int) -> int:
    return FIELD_RECORD_HEADER + 16 * n_points


@dataclass(frozen=True)
class AdmissiblePair:
    r: float
    p: float

    def __post_init__(self):
        r, p = float(self.r), float(self.p)
        if not (4 <= r <= math.inf and 2 <= p <= math.inf):
            raise ValueError(f"pair ({r},{p}) outside r in [4,inf], p in [2,inf]")
        lhs = (0.0 if math.isinf(r) else 2.0 / r) + (0.0 if math.isinf(p) else 1.0 / p)
        if abs(lhs - 0.5) > 1e-12:
            raise ValueError(f"pair ({r},{p}) violates 2/r + 1/p = 1/2")
        object.__setattr__(self, "r", r)
        object.__setattr__(self, "p", p)


# array-level kernels (last axis is space) ----------------------------------

def free_symbol(grid: Grid, t: float) -> np.ndarray:
    return np.exp(1j * grid.laplace_symbol * t)


def spectral_derivative(values: np.ndarray, grid: Grid, order: int = 1) -> np.ndarray:
    sym = (TWO_PI * 1j * grid.freqs) ** order
    if order % 2 == 1:
        sym = sym.copy()
        sym[grid.n_points // 2] = 0.0  # Nyquist mode has no odd derivative
    return np.fft.ifft(sym * np.fft.fft(values, axis=-1), axis=-1)


def laplacian(values: np.ndarray, grid: Grid) -> np.ndarray:
    return np.fft.ifft(grid.laplace_symbol * np.fft.fft(values, axis=-1), axis=-1)


def lp_norms(values: np.ndarray, dx: float, p: float) -> np.ndarray:
    a = np.abs(values)
    if math.isinf(p):
        return a.max(axis=-1)
    if p == 2:
        return np.sqrt(np.sum(a * a, axis=-1) * dx)
    return (np.sum(a ** p, axis=-1) * dx) ** (1.0 / p)


def l2_inner(f: np.ndarray, g: np.ndarray, dx: float):
    """Real L2 pairing Re sum(f conj(g)) dx, i.e. the R^2 dot product."""
    return np.sum(f.real * g.real + f.imag * g.imag, axis=-1) * dx


# public operations ----------------------------------------------------------

def apply_free_group(f: Field, t: float) -> Field:
    t = float(t)
    if not np.isfinite(t):
        raise ValueError("t must be finite")
    if t == 0.0:
        return f.copy()
    return Field(np.fft.ifft(free_symbol(f.grid, t) * np.fft.fft(f.values)), f.grid)


def lp_norm(f: Field, p: float) -> float:
    if not p >= 1:
        raise ValueError(f"p must be >= 1, got {p}")
    return float(lp_norms(f.values, f.grid.dx, p))


def hs_norms(values: np.ndarray, grid: Grid, s: float) -> np.ndarray:
    """H^s norms along the last axis, via Parseval."""
    fh = np.fft.fft(values, axis=-1)
    w = (1.0 + (TWO_PI * grid.freqs) ** 2) ** s
    # Parseval: sum |f|^2 dx = sum |fh|^2 dx / N
    return np.sqrt(np.sum(w * np.abs(fh) ** 2, axis=-1) * grid.dx / grid.n_points)


def hs_norm(f: Field, s: float) -> float:
    if not s >= 0:
        raise ValueError(f"s must be >= 0, got {s}")
    if s == 0:
        return lp_norm(f, 2)
    return float(hs_norms(f.values, f.grid, s))


def _path_array(states):
    if isinstance(states, np.ndarray):
        return states, None
    grid = _check_grid(*states)
    return np.stack([s.values for s in states]), grid


def mixed_norm(times, states, pair: AdmissiblePair, t0: float, t1: float, dx: float = None) -> float:
    """Left-endpoint Riemann approximation of ||u||_{L^r(t0,t1; L^p)}.

    states is a sequence of Fields or an (n_t, N) array (then dx is required).
    Samples with t0 <= t_k < t1 contribute; r = inf takes the max over t0 <= t_k <= t1.
    """
    times = np.asarray(times, float)
    arr, grid = _path_array(states)
    if grid is not None:
        dx = grid.dx
    if dx is None:
        raise ValueError("dx required for array input")
    if not t1 > t0:
        raise ValueError("empty time window")
    tol = 1e-9 * max(1.0, abs(t1))
    if math.isinf(pair.r):
        sel = (times >= t0 - tol) & (times <= t1 + tol)
        if not sel.any():
            raise ValueError("no samples in window")
        return float(lp_norms(arr[sel], dx, pair.p).max())
    sel = (times >= t0 - tol) & (times < t1 - tol)
    if not sel.any():
        raise ValueError("no samples in window")
    idx = np.flatnonzero(sel)
    # step to the next sample (or to t1 for the last one)
    nxt = np.append(times[idx[1:]], t1)
    dt = nxt - times[idx]
    vals = lp_norms(arr[idx], dx, pair.p)
    return float(np.sum(vals ** pair.r * dt) ** (1.0 / pair.r))

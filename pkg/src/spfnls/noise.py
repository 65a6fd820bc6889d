"""Correlated noise: kernel phi, the convolution Phi, and Wiener increments.

The discrete cylindrical Wiener process uses the node basis e_k = 1_k / sqrt(dx);
a white increment over dt is N(0, dt/dx) i.i.d. per node and Phi dW is its
circular convolution with phi.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.fft as sfft

from .errors import GridMismatchError
from .spectral_core import Field, Grid, lp_norm

SUPPORT_REL_THRESHOLD = 1e-12


def path_stream(base_seed: int, sweep_index: int = 0, path_index: int = 0) -> np.random.Generator:
    """Independent stream for one path; depends only on the three integers."""
    ss = np.random.SeedSequence(int(base_seed), spawn_key=(int(sweep_index), int(path_index)))
    return np.random.Generator(np.random.PCG64(ss))


def gaussian_kernel(grid: Grid, length_scale: float) -> np.ndarray:
    ell = float(length_scale)
    return (np.pi * ell ** 2) ** -0.25 * np.exp(-grid.x ** 2 / (2 * ell ** 2))


def box_kernel(grid: Grid, width: float) -> np.ndarray:
    """Indicator of |x| <= width/2 scaled to unit L2 mass on the grid."""
    ind = (np.abs(grid.x) <= 0.5 * width + 1e-12 * width).astype(float)
    n = ind.sum()
    if n == 0:
        raise ValueError("box kernel narrower than one grid cell")
    return ind / np.sqrt(n * grid.dx)


def kernel_support(phi: np.ndarray, grid: Grid) -> float:
    a = np.abs(phi)
    idx = np.flatnonzero(a > SUPPORT_REL_THRESHOLD * a.max())
    x = grid.x[idx]
    return float(x.max() - x.min() + grid.dx)


@dataclass(frozen=True)
class NoiseModel:
    phi: Field
    sigma: float = 0.0
    base_seed: int = 0
    beta: float = field(init=False)

    def __post_init__(self):
        if np.any(self.phi.values.imag != 0):
            raise ValueError("phi must be real valued")
        if not self.sigma >= 0:
            raise ValueError("sigma must be nonnegative")
        object.__setattr__(self, "beta", lp_norm(self.phi, 2))

    @property
    def grid(self) -> Grid:
        return self.phi.grid

    @cached_property
    def phi_hat(self) -> np.ndarray:
        """DFT of phi re-centred at index 0, times dx (continuous convolution weight)."""
        return np.fft.fft(np.fft.ifftshift(self.phi.values.real)) * self.grid.dx

    @cached_property
    def phi_rhat(self) -> np.ndarray:
        return np.fft.rfft(np.fft.ifftshift(self.phi.values.real)) * self.grid.dx

    def with_sigma(self, sigma):
        return NoiseModel(self.phi, float(sigma), self.base_seed)

    def scaled(self, c):
        """Kernel multiplied by c (beta -> c beta)."""
        return NoiseModel(self.phi * float(c), self.sigma, self.base_seed)

    def convolve_real(self, g: np.ndarray) -> np.ndarray:
        X = sfft.rfft(g, axis=-1)
        X *= self.phi_rhat
        return sfft.irfft(X, n=self.grid.n_points, axis=-1, overwrite_x=True)


def make_noise(grid: Grid, kind: str = "gaussian", length_scale: float = 0.25, sigma: float = 0.0,
               normalize_beta: bool = False, path: str | None = None, base_seed: int = 0,
               check_support: bool = True) -> NoiseModel:
    if kind == "gaussian":
        phi = gaussian_kernel(grid, length_scale)
    elif kind == "box":
        phi = box_kernel(grid, length_scale)
    elif kind == "file":
        if not path:
            raise ValueError("kernel kind 'file' needs a path")
        data = np.loadtxt(path, delimiter=",", ndmin=2)
        if data.shape[1] == 1:
            phi = data[:, 0]
            if phi.size != grid.n_points:
                raise ValueError(f"kernel file has {phi.size} samples, grid has {grid.n_points}")
        else:
            phi = np.interp(grid.x, data[:, 0], data[:, 1], left=0.0, right=0.0)
    else:
        raise ValueError(f"unknown kernel kind {kind!r}")
    if normalize_beta:
        phi = phi / np.sqrt(np.sum(phi ** 2) * grid.dx)
    if check_support:
        w = kernel_support(phi, grid)
        if w >= grid.domain_length / 4:
            raise ValueError(f"kernel support {w:.3g} must be below a quarter of the box "
                             f"({grid.domain_length / 4:.3g})")
    return NoiseModel(Field(phi, grid), float(sigma), int(base_seed))


def apply_phi(f: Field, nm: NoiseModel) -> Field:
    if f.grid != nm.grid:
        raise GridMismatchError("field and kernel grids differ")
    out = np.fft.ifft(nm.phi_hat * np.fft.fft(f.values))
    if np.all(f.values.imag == 0):
        out = out.real
    return Field(out, f.grid)


@dataclass(frozen=True)
class NoiseIncrement:
    values: Field
    dt: float

    def __post_init__(self):
        if np.any(self.values.values.imag != 0):
            raise ValueError("increment must be real")


def white_increment(gen: np.random.Generator, dt: float, grid: Grid, size=()):
    shape = tuple(np.atleast_1d(size)) + (grid.n_points,) if size != () else (grid.n_points,)
    return gen.standard_normal(shape) * np.sqrt(dt / grid.dx)


def sample_increment(nm: NoiseModel, dt: float, stream: np.random.Generator) -> NoiseIncrement:
    if not dt > 0:
        raise ValueError("dt must be positive")
    g = white_increment(stream, dt, nm.grid)
    return NoiseIncrement(Field(nm.convolve_real(g), nm.grid), float(dt))


def ito_correction_coefficient(nm: NoiseModel) -> float:
    return nm.beta ** 2


def basis_images(nm: NoiseModel) -> np.ndarray:
    """Matrix with columns Phi e_k: (Phi e_k)(x_i) = phi(x_i - x_k) sqrt(dx)."""
    g = nm.grid
    n = g.n_points
    c = np.fft.ifftshift(nm.phi.values.real)  # c[m] = phi at offset m dx
    idx = (np.arange(n)[:, None] - np.arange(n)[None, :]) % n
    return c[idx] * np.sqrt(g.dx)


def basis_sum(nm: NoiseModel) -> np.ndarray:
    """F(x) = sum_k (Phi e_k)(x)^2, should equal beta^2 everywhere."""
    return np.sum(basis_images(nm) ** 2, axis=1)


def hilbert_schmidt_sq(u: Field, nm: NoiseModel, s: float = 0.0) -> float:
    """sum_k ||u Phi e_k||^2_{H^s}."""
    from .spectral_core import hs_norms
    B = basis_images(nm)
    prod = u.values[None, :] * B.T  # row k is u * Phi e_k
    return float(np.sum(hs_norms(prod, u.grid, s) ** 2))


class IncrementSource:
    """Batched Phi dW increments for a set of paths with independent streams.

    Each step of size dt consumes `group` white draws of size dt/group per
    path, so runs with different group sizes on the same streams are coupled
    (coarse increments are sums of fine ones). Draws are taken in fixed blocks
    per path so the output never depends on how paths are partitioned.
    """

    def __init__(self, nm: NoiseModel, streams, dt: float, group: int = 1, block: int = 64):
        self.nm = nm
        self.streams = list(streams)
        self.dt = float(dt)
        self.group = int(group)
        self.block = int(block)
        self._buf = None
        self._pos = 0
        self._crc = 0
        self._crc_pos = 0
        self.count = 0

    def _fold_crc(self):
        # adler32 over consumed increments, folded per block rather than per step
        if self._buf is not None and self._crc_pos < self._pos:
            self._crc = zlib.adler32(self._buf[self._crc_pos:self._pos].tobytes(), self._crc)
            self._crc_pos = self._pos

    @property
    def crc(self) -> int:
        self._fold_crc()
        return self._crc

    def _refill(self):
        self._fold_crc()
        n = self.nm.grid.n_points
        sub = self.dt / self.group
        scale = np.sqrt(sub / self.nm.grid.dx)
        rows = []
        for g in self.streams:
            w = g.standard_normal((self.block, self.group, n))
            w *= scale
            rows.append(w[:, 0] if self.group == 1 else w.sum(axis=1))
        self._buf = self.nm.convolve_real(np.stack(rows, axis=1))  # (block, P, N)
        self._pos = 0
        self._crc_pos = 0

    def next(self) -> np.ndarray:
        """Increments for one step, shape (P, N)."""
        if self._buf is None or self._pos == self.block:
            self._refill()
        eta = self._buf[self._pos]
        self._pos += 1
        self.count += 1
        return eta

"""Periodic 2D grids, fields on them, and the real 2D Fourier transform.

Conventions used across the package:

* Field values are stored row-major with shape ``(..., ny, nx)``; any leading
  axes are batch axes.
* The forward transform is unnormalized and the inverse carries ``1/(nx*ny)``
  (numpy's "backward" norm).  Spectra use the half-spectrum layout of
  ``rfft2``: ``kx`` in ``[0, nx/2]`` along the last axis and ``ky`` in standard
  FFT order along the second-to-last axis.
* The inner product carries the quadrature weight ``lx*ly/(nx*ny)`` so that
  norms approximate the L2 norm of the underlying function.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.fft

TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class GridSpec:
    nx: int
    ny: int
    lx: float = TWO_PI
    ly: float = TWO_PI

    def __post_init__(self):
        for name in ("nx", "ny"):
            n = getattr(self, name)
            if int(n) != n or n < 4 or n % 2:
                raise ValueError(f"{name} must be an even integer >= 4, got {n}")
        if not (self.lx > 0 and self.ly > 0):
            raise ValueError(f"domain lengths must be positive, got lx={self.lx}, ly={self.ly}")
        object.__setattr__(self, "nx", int(self.nx))
        object.__setattr__(self, "ny", int(self.ny))
        object.__setattr__(self, "lx", float(self.lx))
        object.__setattr__(self, "ly", float(self.ly))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.ny, self.nx)

    @property
    def size(self) -> int:
        return self.nx * self.ny

    @property
    def spectral_shape(self) -> tuple[int, int]:
        return (self.ny, self.nx // 2 + 1)

    @property
    def cell_area(self) -> float:
        """Quadrature weight of one node."""
        return self.lx * self.ly / (self.nx * self.ny)

    def coords(self) -> tuple[np.ndarray, np.ndarray]:
        """Node coordinates ``(x, y)`` as 1D arrays starting at 0."""
        x = np.arange(self.nx) * (self.lx / self.nx)
        y = np.arange(self.ny) * (self.ly / self.ny)
        return x, y

    def meshgrid(self) -> tuple[np.ndarray, np.ndarray]:
        x, y = self.coords()
        return np.meshgrid(x, y)  # each (ny, nx)

    def with_resolution(self, nx: int, ny: int) -> GridSpec:
        return GridSpec(nx, ny, self.lx, self.ly)


def _first_nonfinite(values: np.ndarray) -> tuple[int, ...] | None:
    bad = ~np.isfinite(values)
    if not bad.any():
        return None
    return tuple(int(i) for i in np.argwhere(bad)[0])


@dataclass(frozen=True)
class Field:
    """Real scalar field(s) on a grid; ``values`` has shape ``(..., ny, nx)``."""

    grid: GridSpec
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim < 2 or values.shape[-2:] != self.grid.shape:
            raise ValueError(
                f"values shape {values.shape} does not end with grid shape {self.grid.shape}"
            )
        bad = _first_nonfinite(values)
        if bad is not None:
            raise ValueError(f"non-finite field value at index {bad}")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def batch_shape(self) -> tuple[int, ...]:
        return self.values.shape[:-2]

    def __len__(self) -> int:
        if not self.batch_shape:
            raise TypeError("unbatched Field has no len()")
        return self.batch_shape[0]

    def __getitem__(self, idx) -> Field:
        if not self.batch_shape:
            raise TypeError("unbatched Field is not indexable")
        return Field(self.grid, self.values[idx])

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    @classmethod
    def stack(cls, fields) -> Field:
        fields = list(fields)
        if not fields:
            raise ValueError("cannot stack an empty sequence of fields")
        grid = fields[0].grid
        for f in fields[1:]:
            check_same_grid(grid, f.grid)
        return cls(grid, np.stack([f.values for f in fields]))


@dataclass(frozen=True)
class SpectralField:
    """Half-spectrum coefficients, shape ``(..., ny, nx//2 + 1)``."""

    grid: GridSpec
    coeffs: np.ndarray = field(repr=False)

    def __post_init__(self):
        coeffs = np.asarray(self.coeffs, dtype=np.complex128)
        if coeffs.ndim < 2 or coeffs.shape[-2:] != self.grid.spectral_shape:
            raise ValueError(
                f"coefficient shape {coeffs.shape} inconsistent with grid "
                f"(expected trailing {self.grid.spectral_shape})"
            )
        if not np.isfinite(coeffs).all():
            raise ValueError("non-finite spectral coefficient")
        _check_hermitian_columns(coeffs, self.grid)
        coeffs.setflags(write=False)
        object.__setattr__(self, "coeffs", coeffs)


def _check_hermitian_columns(coeffs: np.ndarray, grid: GridSpec, rtol: float = 1e-9):
    # the kx=0 and kx=nx/2 columns of a real signal satisfy c[-ky] = conj(c[ky])
    scale = max(float(np.abs(coeffs).max(initial=0.0)), 1e-300)
    for col in (0, grid.nx // 2):
        c = coeffs[..., :, col]
        mirrored = np.conj(np.roll(c[..., ::-1], 1, axis=-1))
        if np.abs(c - mirrored).max(initial=0.0) > rtol * scale:
            raise ValueError(f"spectrum column kx={col} violates Hermitian symmetry")


def check_same_grid(a: GridSpec, b: GridSpec):
    if a != b:
        raise ValueError(f"grid mismatch: {a} vs {b}")


def forward_transform(f: Field) -> SpectralField:
    return SpectralField(f.grid, scipy.fft.rfft2(f.values, axes=(-2, -1)))


def inverse_transform(s: SpectralField) -> Field:
    return Field(s.grid, scipy.fft.irfft2(s.coeffs, s=s.grid.shape, axes=(-2, -1)))


def half_spectrum_weights(grid: GridSpec) -> np.ndarray:
    """Multiplicity of each stored ``kx`` column in the full spectrum."""
    w = np.full(grid.nx // 2 + 1, 2.0)
    w[0] = 1.0
    w[-1] = 1.0
    return w


def spectral_energy(s: SpectralField) -> np.ndarray:
    """Sum of ``|c|^2`` over the full spectrum (per batch element)."""
    w = half_spectrum_weights(s.grid)
    return np.sum(np.abs(s.coeffs) ** 2 * w, axis=(-2, -1))


def wave_indices(n: int) -> np.ndarray:
    """Signed integer mode indices in FFT order; the Nyquist index is negative."""
    return np.fft.fftfreq(n, d=1.0 / n).astype(np.int64)


def wavenumbers(grid: GridSpec) -> tuple[np.ndarray, np.ndarray]:
    """Physical wavenumbers ``(kx, ky)``, full FFT ordering, Nyquist negative."""
    kx = wave_indices(grid.nx) * (TWO_PI / grid.lx)
    ky = wave_indices(grid.ny) * (TWO_PI / grid.ly)
    return kx, ky


def rfft_wavenumbers(grid: GridSpec) -> tuple[np.ndarray, np.ndarray]:
    """Wavenumber meshes ``(KX, KY)`` matching the half-spectrum layout."""
    kx = np.arange(grid.nx // 2 + 1) * (TWO_PI / grid.lx)
    _, ky = wavenumbers(grid)
    return np.meshgrid(kx, ky)


# --- field arithmetic -------------------------------------------------------

def axpy(a: float, x: Field, y: Field) -> Field:
    check_same_grid(x.grid, y.grid)
    return Field(x.grid, a * x.values + y.values)


def scale(a: float, x: Field) -> Field:
    return Field(x.grid, a * x.values)


def inner(a: np.ndarray, b: np.ndarray, grid: GridSpec) -> np.ndarray:
    """Weighted inner product of raw value arrays over the last two axes."""
    return grid.cell_area * np.einsum("...ij,...ij->...", a, b)


def dot(f: Field, g: Field):
    check_same_grid(f.grid, g.grid)
    return inner(f.values, g.values, f.grid)


def norm(f: Field):
    return np.sqrt(np.maximum(dot(f, f), 0.0))

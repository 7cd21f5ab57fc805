"""Turbulence statistics for comparing generated and reference ensembles.

Spectral energies use the full two-sided FFT normalized by ``(nx * ny)**2``,
so the energy of a mode equals the squared amplitude of its complex
exponential.  Radial shells use nearest-integer binning of the index
magnitude ``sqrt(i**2 + j**2)``; the ``k = 0`` mode is always excluded.
"""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.fft

from . import rng as rngmod
from .grid import Field, check_same_grid, wave_indices

KDE_POINTS = 512
KDE_MAX_VALUES = 1_000_000
_KDE_REFINE = 8  # fine binning nodes per evaluation interval
LOG_FLOOR = 1e-300


class NonPositiveSpectrumWarning(UserWarning):
    pass


@dataclass(frozen=True)
class SpectrumCurve:
    k_bins: np.ndarray
    energy: np.ndarray  # mean energy per mode in each bin, averaged over the ensemble
    counts: np.ndarray = field(repr=False)  # modes per bin
    dc_energy: float = 0.0
    beyond_energy: float = 0.0  # modes whose shell index exceeds the last bin

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("bin", "energy"))
            for k, e in zip(self.k_bins, self.energy):
                w.writerow((int(k), repr(float(e))))


@dataclass(frozen=True)
class DensityCurve:
    eval_points: np.ndarray
    pdf: np.ndarray

    def integral(self) -> float:
        return float(np.trapezoid(self.pdf, self.eval_points))


REPORT_COLUMNS = ("kde_r2", "kde_rmse", "rs_r2", "rs_rmse", "ds_kx_r2", "ds_kx_rmse", "ds_ky_r2", "ds_ky_rmse", "nfe")


@dataclass(frozen=True)
class MetricsReport:
    kde_r2: float
    kde_rmse: float
    rs_r2: float
    rs_rmse: float
    ds_kx_r2: float
    ds_kx_rmse: float
    ds_ky_r2: float
    ds_ky_rmse: float
    nfe: int = 0

    def row(self) -> tuple:
        return tuple(getattr(self, c) for c in REPORT_COLUMNS)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(REPORT_COLUMNS)
            w.writerow([repr(float(v)) if c != "nfe" else int(v) for c, v in zip(REPORT_COLUMNS, self.row())])

    @classmethod
    def read_csv(cls, path) -> MetricsReport:
        with open(path, newline="") as fh:
            header, values = list(csv.reader(fh))[:2]
        if tuple(header) != REPORT_COLUMNS:
            raise ValueError(f"unexpected report header {header}")
        return cls(*(float(v) for v in values[:-1]), int(values[-1]))


def _as_batch(ensemble) -> Field:
    if isinstance(ensemble, Field):
        f = ensemble
    else:
        f = Field.stack(ensemble)
    if f.values.ndim == 2:
        f = Field(f.grid, f.values[None])
    if f.values.ndim != 3 or len(f) < 1:
        raise ValueError("ensemble must be a non-empty batch of fields")
    return f


def mode_energies(ensemble) -> np.ndarray:
    """Ensemble-mean ``|F(k)|^2 / (nx ny)^2`` on the full FFT layout ``(ny, nx)``."""
    f = _as_batch(ensemble)
    n = f.grid.size
    c = scipy.fft.fft2(f.values)
    e = c.real**2 + c.imag**2
    # sorting over the ensemble axis makes the mean independent of ensemble order, bit for bit
    return np.sort(e, axis=0).sum(axis=0) / (len(f) * n * n)


def shell_index(nx: int, ny: int) -> np.ndarray:
    i = wave_indices(nx)
    j = wave_indices(ny)
    return np.rint(np.hypot(i[None, :], j[:, None])).astype(np.int64)


def radial_spectrum(ensemble) -> SpectrumCurve:
    f = _as_batch(ensemble)
    e = mode_energies(f)
    nx, ny = f.grid.nx, f.grid.ny
    kmax = min(nx, ny) // 2
    shells = shell_index(nx, ny)
    sums = np.bincount(shells.ravel(), weights=e.ravel())
    counts = np.bincount(shells.ravel())
    bins = np.arange(1, kmax + 1)
    return SpectrumCurve(
        k_bins=bins,
        energy=sums[bins] / counts[bins],
        counts=counts[bins],
        dc_energy=float(e[0, 0]),
        beyond_energy=float(sums[kmax + 1:].sum()),
    )


def directional_spectrum(ensemble, axis: str) -> SpectrumCurve:
    """Energy summed over the other wavenumber, folded over ``+-b``; ``b = 0`` excluded."""
    f = _as_batch(ensemble)
    e = mode_energies(f)
    if axis == "x":
        line, n = e.sum(axis=0), f.grid.nx
    elif axis == "y":
        line, n = e.sum(axis=1), f.grid.ny
    else:
        raise ValueError(f"axis must be 'x' or 'y', got {axis!r}")
    idx = np.abs(wave_indices(n))
    folded = np.bincount(idx, weights=line)
    bins = np.arange(1, n // 2 + 1)
    return SpectrumCurve(bins, folded[bins], np.bincount(idx)[bins], float(line[0]), 0.0)


def _r2_rmse(pred: np.ndarray, ref: np.ndarray) -> tuple[float, float]:
    resid = pred - ref
    ss_res = float(np.sum(resid * resid))
    ss_tot = float(np.sum((ref - ref.mean()) ** 2))
    rmse = float(np.sqrt(np.mean(resid * resid)))
    if ss_tot == 0.0:
        r2 = 1.0 if ss_res == 0.0 else -np.inf
    else:
        r2 = 1.0 - ss_res / ss_tot
    return r2, rmse


def log_fit_metrics(gen: SpectrumCurve, ref: SpectrumCurve) -> tuple[float, float]:
    """R^2 and RMSE between natural logs of two spectra on identical bins."""
    if not np.array_equal(gen.k_bins, ref.k_bins):
        raise ValueError("spectra have different bins")
    if np.any(ref.energy <= 0):
        raise ValueError("reference spectrum has non-positive energies")
    g = np.asarray(gen.energy, dtype=np.float64)
    if np.any(g <= 0):
        warnings.warn(
            f"{int(np.sum(g <= 0))} non-positive generated bins floored at {LOG_FLOOR:g}",
            NonPositiveSpectrumWarning,
            stacklevel=2,
        )
        g = np.maximum(g, LOG_FLOOR)
    return _r2_rmse(np.log(g), np.log(ref.energy))


def restrict(curve: SpectrumCurve, kmax: int) -> SpectrumCurve:
    keep = curve.k_bins <= kmax
    return SpectrumCurve(curve.k_bins[keep], curve.energy[keep], curve.counts[keep], curve.dc_energy, 0.0)


def _pooled(f: Field, seed: int) -> np.ndarray:
    v = np.sort(f.values, axis=None)
    if v.size > KDE_MAX_VALUES:
        v = rngmod.stream(seed, rngmod.EVAL).choice(v, size=KDE_MAX_VALUES, replace=False)
        v.sort()
    return v


def scott_bandwidth(values: np.ndarray, span: float) -> float:
    h = float(np.std(values)) * values.size ** (-0.2)
    return h if h > 0 else 1e-6 * max(span, 1.0)


def gaussian_kde(values: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Gaussian KDE (Scott bandwidth) on equally spaced ``points``.

    Values are linearly binned onto a grid ``_KDE_REFINE`` times finer than
    ``points`` and the kernel sum is taken exactly over the bins.
    """
    lo, hi = float(points[0]), float(points[-1])
    span = hi - lo
    h = scott_bandwidth(values, span)
    if span == 0.0:
        return np.full(points.shape, 1.0 / (np.sqrt(2 * np.pi) * h))
    m = (len(points) - 1) * _KDE_REFINE + 1
    delta = span / (m - 1)
    pos = np.clip((values - lo) / delta, 0.0, m - 1)
    left = np.minimum(np.floor(pos).astype(np.int64), m - 2)
    frac = pos - left
    weights = np.bincount(left, weights=1.0 - frac, minlength=m) + np.bincount(left + 1, weights=frac, minlength=m)
    nodes = lo + delta * np.arange(m)
    z = (points[:, None] - nodes[None, :]) / h
    kern = np.exp(-0.5 * z * z)
    return kern @ weights / (values.size * h * np.sqrt(2 * np.pi))


def kde_metrics(gen, ref, seed: int = 0):
    """Density R^2/RMSE (linear domain) between pooled node-value distributions."""
    g_f, r_f = _as_batch(gen), _as_batch(ref)
    g, r = _pooled(g_f, seed), _pooled(r_f, seed + 1)
    lo = min(g.min(), r.min())
    hi = max(g.max(), r.max())
    points = np.linspace(lo, hi, KDE_POINTS)
    g_pdf, r_pdf = gaussian_kde(g, points), gaussian_kde(r, points)
    r2, rmse = _r2_rmse(g_pdf, r_pdf)
    return r2, rmse, DensityCurve(points, g_pdf), DensityCurve(points, r_pdf)


def evaluate(gen, ref, nfe: int = 0, seed: int = 0) -> MetricsReport:
    g, r = _as_batch(gen), _as_batch(ref)
    check_same_grid(g.grid, r.grid)
    kde_r2, kde_rmse, _, _ = kde_metrics(g, r, seed)
    rs = log_fit_metrics(radial_spectrum(g), radial_spectrum(r))
    dx = log_fit_metrics(directional_spectrum(g, "x"), directional_spectrum(r, "x"))
    dy = log_fit_metrics(directional_spectrum(g, "y"), directional_spectrum(r, "y"))
    return MetricsReport(kde_r2, kde_rmse, rs[0], rs[1], dx[0], dx[1], dy[0], dy[1], nfe)

"""Fourier neural operator velocity model with hand-written reverse mode.

Architecture (channel-last activations, shape ``(B, ny, nx, C)``)::

    input  = [f, t, x/lx, y/ly]               pointwise lift: in -> lift -> width
    layer  = act(spectral(h) + h @ W + b)     no activation after the last layer
    output = gelu(h @ P1 + c1) @ P2 + c2      pointwise projection: width -> proj -> 1

The spectral convolution multiplies the retained modes ``kx in [0, m)``,
``ky in [-m, m)`` by learned complex matrices (two blocks, for non-negative and
negative ``ky``) and zeroes the rest.  Transforms use the unnormalized forward
convention, so the same weights act consistently on any grid whose Nyquist
limit admits ``m`` modes.

Parameters live in a plain ``dict[str, ndarray]`` (float64); gradients use the
same keys.  Complex weights are stored as separate real and imaginary tensors.
"""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np
import scipy.special

from . import rng as rngmod
from .grid import Field, GridSpec, check_same_grid

_SQRT_HALF = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class FnoConfig:
    n_layers: int = 4
    modes: int = 8
    width: int = 32
    lift_dim: int = 64
    proj_dim: int = 64
    activation: str = "gelu"  # "linear" disables every nonlinearity (test hook)
    use_coords: bool = True

    def __post_init__(self):
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        for name in ("modes", "width", "lift_dim", "proj_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.activation not in ("gelu", "linear"):
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def in_channels(self) -> int:
        return 4 if self.use_coords else 2

    def check_grid(self, grid: GridSpec):
        if self.modes > min(grid.nx, grid.ny) // 2:
            need = 2 * self.modes
            raise ValueError(
                f"{self.modes} modes exceed the capacity of a {grid.nx}x{grid.ny} grid; "
                f"need at least {need}x{need}"
            )


def param_shapes(config: FnoConfig) -> dict[str, tuple[int, ...]]:
    """Declared tensor order and shapes (independent of the grid)."""
    w, m = config.width, config.modes
    shapes = {
        "lift.w1": (config.in_channels, config.lift_dim),
        "lift.b1": (config.lift_dim,),
        "lift.w2": (config.lift_dim, w),
        "lift.b2": (w,),
    }
    for i in range(config.n_layers):
        shapes[f"layer{i}.spec_re"] = (2, m, m, w, w)
        shapes[f"layer{i}.spec_im"] = (2, m, m, w, w)
        shapes[f"layer{i}.w"] = (w, w)
        shapes[f"layer{i}.b"] = (w,)
    shapes.update(
        {
            "proj.w1": (w, config.proj_dim),
            "proj.b1": (config.proj_dim,),
            "proj.w2": (config.proj_dim, 1),
            "proj.b2": (1,),
        }
    )
    return shapes


def count_params(config: FnoConfig) -> int:
    w, m = config.width, config.modes
    lift = config.in_channels * config.lift_dim + config.lift_dim + config.lift_dim * w + w
    layer = 2 * (2 * m * m * w * w) + w * w + w
    proj = w * config.proj_dim + config.proj_dim + config.proj_dim + 1
    return lift + config.n_layers * layer + proj


# float32 erf as an odd/even rational function on [-4, 4] (accurate to a few ulp)
# erfc(x) ~ t (a1 + t (a2 + ...)) exp(-x^2), t = 1 / (1 + p x), x >= 0; absolute error < 1.5e-7
_ERFC_A = (1.061405429, -1.453152027, 1.421413741, -0.284496736, 0.254829592)
_ERFC_P = 0.3275911
_CHUNK = 16384


def _gelu_block32(z):
    e = z * z
    e *= np.float32(-0.5)
    np.exp(e, out=e)  # exp(-z^2 / 2), shared by the cdf and the slope
    t = np.abs(z)
    t *= np.float32(_ERFC_P * _SQRT_HALF)
    t += np.float32(1.0)
    np.reciprocal(t, out=t)
    h = t * np.float32(_ERFC_A[0])
    for c in _ERFC_A[1:]:
        h += np.float32(c)
        h *= t
    h *= e
    h *= np.float32(0.5)  # Phi(-|z|)
    cdf = np.float32(0.5) - h
    np.copysign(cdf, z, out=cdf)
    cdf += np.float32(0.5)
    slope = z * e
    slope *= np.float32(_INV_SQRT_2PI)
    slope += cdf
    return z * cdf, slope


def _gelu_block(z):
    if z.dtype == np.float32:
        return _gelu_block32(z)
    cdf = 0.5 * (1.0 + scipy.special.erf(z * _SQRT_HALF))
    slope = cdf + z * np.exp(-0.5 * z * z) * _INV_SQRT_2PI
    return z * cdf, slope


def gelu(z: np.ndarray):
    """Exact (erf-based) GeLU and its derivative, evaluated cache-sized chunks at a time."""
    if z.dtype != np.float32:
        return _gelu_block(z)
    flat = z.reshape(-1)
    out, slope = np.empty_like(flat), np.empty_like(flat)
    for s in range(0, flat.size, _CHUNK):
        out[s:s + _CHUNK], slope[s:s + _CHUNK] = _gelu_block(flat[s:s + _CHUNK])
    return out.reshape(z.shape), slope.reshape(z.shape)


class FNO:
    """Velocity model ``u(t, f)``; ``dtype`` is the internal compute precision."""

    def __init__(self, config: FnoConfig, dtype=np.float64):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.cdtype = np.result_type(self.dtype, np.complex64)

    # --- parameters ---------------------------------------------------------

    def init(self, seed: int, zero_output: bool = False) -> dict[str, np.ndarray]:
        cfg = self.config
        gen = rngmod.stream(seed, rngmod.INIT)
        params = {}
        for name, shape in param_shapes(cfg).items():
            if ".spec_" in name:
                # real and imaginary parts together form a complex Gaussian
                std = 1.0 / (cfg.width * cfg.modes)
                params[name] = gen.standard_normal(shape) * (std * _SQRT_HALF)
            else:
                fan_in = shape[0] if name.endswith(("w1", "w2", ".w")) else _fan_in_of_bias(name, cfg)
                bound = 1.0 / math.sqrt(fan_in)
                params[name] = gen.uniform(-bound, bound, size=shape)
        if zero_output:
            params["proj.w2"][...] = 0.0
            params["proj.b2"][...] = 0.0
        return params

    # --- forward ------------------------------------------------------------

    def _inputs(self, t, values: np.ndarray, grid: GridSpec) -> np.ndarray:
        b = values.shape[0]
        chans = [values, np.broadcast_to(np.reshape(np.asarray(t, dtype=np.float64), (-1, 1, 1)), values.shape)]
        if self.config.use_coords:
            x, y = grid.coords()
            chans.append(np.broadcast_to((x / grid.lx)[None, None, :], values.shape))
            chans.append(np.broadcast_to((y / grid.ly)[None, :, None], values.shape))
        out = np.stack(chans, axis=-1).astype(self.dtype, copy=False)
        assert out.shape[0] == b
        return out

    def _act(self, z):
        # returns (activation, slope); the slope is cached for the reverse pass
        if self.config.activation == "linear":
            return z, None
        return gelu(z)

    @staticmethod
    def _act_grad(g, slope):
        return g if slope is None else g * slope

    def _run(self, params, t, values, grid, keep_cache: bool):
        cfg = self.config
        cfg.check_grid(grid)
        p = {k: v.astype(self.dtype, copy=False) for k, v in params.items()}
        m = cfg.modes
        x0 = self._inputs(t, values, grid)
        cache = {"x0": x0, "params": p, "grid": grid} if keep_cache else None

        z = x0 @ p["lift.w1"] + p["lift.b1"]
        a, slope = self._act(z)
        h = a @ p["lift.w2"] + p["lift.b2"]
        assert h.dtype == self.dtype
        if keep_cache:
            cache["lift"] = (a, slope)
        layers = []
        for i in range(cfg.n_layers):
            sel = _forward_modes(h, m)
            spec = _inverse_modes(np.matmul(sel, _spectral_weights(p, i, self.cdtype)), grid, m)
            z = spec + h @ p[f"layer{i}.w"] + p[f"layer{i}.b"]
            if i == cfg.n_layers - 1:
                h_next, slope = z, None
            else:
                h_next, slope = self._act(z)
            if not np.isfinite(h_next).all():
                raise FloatingPointError(f"non-finite activations in Fourier layer {i}")
            if keep_cache:
                layers.append((h, sel, slope))
            h = h_next
        z = h @ p["proj.w1"] + p["proj.b1"]
        a, slope = self._act(z)
        out = (a @ p["proj.w2"] + p["proj.b2"])[..., 0]
        if not np.isfinite(out).all():
            raise FloatingPointError("non-finite activations in projection")
        if keep_cache:
            cache["layers"] = layers
            cache["proj"] = (h, a, slope)
        return out, cache

    def velocity(self, params, t, values: np.ndarray, grid: GridSpec) -> np.ndarray:
        """Batched evaluation on raw arrays ``(B, ny, nx)``; returns float64."""
        out, _ = self._run(params, t, values, grid, keep_cache=False)
        return out.astype(np.float64, copy=False)

    def forward(self, params, t, f: Field) -> Field:
        if not np.all((np.asarray(t) >= 0.0) & (np.asarray(t) <= 1.0)):
            raise ValueError(f"t must lie in [0, 1], got {t}")
        values = f.values
        single = values.ndim == 2
        if single:
            values = values[None]
        out = self.velocity(params, t, values, f.grid)
        return Field(f.grid, out[0] if single else out)

    # --- reverse mode -------------------------------------------------------

    def backward(self, cache, g_out: np.ndarray):
        """Gradients of a scalar w.r.t. every parameter and the input field.

        ``g_out`` is the derivative of the scalar w.r.t. the output values.
        """
        cfg = self.config
        p = cache["params"]
        grid = cache["grid"]
        m = cfg.modes
        grads = {}
        g = g_out.astype(self.dtype, copy=False)[..., None]

        h, a, slope = cache["proj"]
        _affine_grads(grads, "proj.w2", "proj.b2", a, g)
        g = self._act_grad(g @ p["proj.w2"].T, slope)
        _affine_grads(grads, "proj.w1", "proj.b1", h, g)
        g = g @ p["proj.w1"].T

        for i in reversed(range(cfg.n_layers)):
            h_in, sel, slope = cache["layers"][i]
            g = self._act_grad(g, slope)
            _affine_grads(grads, f"layer{i}.w", f"layer{i}.b", h_in, g)
            g_h = g @ p[f"layer{i}.w"].T
            gy = _inverse_modes_adjoint(g, m)
            gw = np.matmul(np.conj(sel).transpose(0, 2, 1), gy).reshape(2, m, m, cfg.width, cfg.width)
            grads[f"layer{i}.spec_re"] = gw.real
            grads[f"layer{i}.spec_im"] = gw.imag
            gsel = np.matmul(gy, np.conj(_spectral_weights(p, i, self.cdtype)).transpose(0, 2, 1))
            g = g_h + _forward_modes_adjoint(gsel, grid, m)

        a, slope = cache["lift"]
        _affine_grads(grads, "lift.w2", "lift.b2", a, g)
        g = self._act_grad(g @ p["lift.w2"].T, slope)
        _affine_grads(grads, "lift.w1", "lift.b1", cache["x0"], g)
        g_in = (g @ p["lift.w1"].T)[..., 0]
        assert g_in.dtype == self.dtype

        ordered = {k: np.asarray(grads[k], dtype=np.float64).reshape(p[k].shape) for k in p}
        return ordered, g_in.astype(np.float64)

    def loss_and_grad_values(self, params, t, f_t: np.ndarray, v_target: np.ndarray, grid: GridSpec):
        """Batch-mean squared Hilbert-norm residual and its parameter gradients."""
        out, cache = self._run(params, t, f_t, grid, keep_cache=True)
        resid = out.astype(np.float64) - v_target
        b = f_t.shape[0]
        loss = grid.cell_area * float(np.sum(resid * resid)) / b
        grads, _ = self.backward(cache, (2.0 * grid.cell_area / b) * resid)
        return loss, grads

    def loss_and_grad(self, params, t, f_t: Field, v_target: Field):
        check_same_grid(f_t.grid, v_target.grid)
        if f_t.values.ndim != 3 or len(f_t) < 1:
            raise ValueError("loss_and_grad expects a non-empty batch of fields")
        return self.loss_and_grad_values(params, t, f_t.values, v_target.values, f_t.grid)


def _fan_in_of_bias(name: str, cfg: FnoConfig) -> int:
    return {
        "lift.b1": cfg.in_channels,
        "lift.b2": cfg.lift_dim,
        "proj.b1": cfg.width,
        "proj.b2": cfg.proj_dim,
    }.get(name, cfg.width)


def _affine_grads(grads, w_name, b_name, x, g):
    grads[w_name] = x.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
    grads[b_name] = g.sum(axis=(0, 1, 2))


def _spectral_weights(p, i, cdtype):
    re, im = p[f"layer{i}.spec_re"], p[f"layer{i}.spec_im"]
    two, m, _, cin, cout = re.shape
    return (re + 1j * im).astype(cdtype, copy=False).reshape(two * m * m, cin, cout)


# The retained block is stored as (2m*m, B, C): rows ky = 0..m-1 then -m..-1,
# each followed by kx = 0..m-1.  Only these modes are ever transformed, so the
# restricted transforms are small real DFT matrices applied by matmul on the
# channel-last layout (cheaper than full FFTs when m is well below Nyquist).

@functools.lru_cache(maxsize=32)
def _dft_matrices(ny: int, nx: int, m: int, dtype_name: str):
    dtype = np.dtype(dtype_name)
    kx = np.arange(m)
    ky = np.concatenate([np.arange(m), np.arange(-m, 0)])
    ax = 2.0 * np.pi * np.outer(kx, np.arange(nx)) / nx  # (m, nx)
    ay = 2.0 * np.pi * np.outer(ky, np.arange(ny)) / ny  # (2m, ny)
    cy, sy = np.cos(ay), np.sin(ay)
    fx = np.concatenate([np.cos(ax), -np.sin(ax)])  # rows: Re, Im of exp(-i kx x)
    # forward along y, rows (part, ky) from rows (y, part) of X = Xr + i Xi:
    # Y = sum_y X exp(-i ky y) -> Yr = cos Xr + sin Xi, Yi = cos Xi - sin Xr
    fy = np.zeros((2, 2 * m, ny, 2))
    fy[0, :, :, 0], fy[0, :, :, 1] = cy, sy
    fy[1, :, :, 0], fy[1, :, :, 1] = -sy, cy
    # inverse along y, rows (y, part) from rows (part, ky): Q = sum_ky Y exp(+i ky y)
    gy = np.zeros((ny, 2, 2, 2 * m))
    gy[:, 0, 0], gy[:, 0, 1] = cy.T, -sy.T
    gy[:, 1, 0], gy[:, 1, 1] = sy.T, cy.T
    mult = np.where(kx == 0, 1.0, 2.0)
    # inverse along x: out = sum_kx c_kx (Qr cos - Qi sin) / N
    gx = np.concatenate([np.cos(ax) * mult[:, None], -np.sin(ax) * mult[:, None]]).T / (nx * ny)
    mats = (fx, fy.reshape(4 * m, 2 * ny), gy.reshape(2 * ny, 4 * m), gx)
    return tuple(np.ascontiguousarray(a, dtype=dtype) for a in mats)


def _kx_multiplicity(m: int) -> np.ndarray:
    # how often each retained kx column appears in the full two-sided spectrum
    c = np.full(m, 2.0)
    c[0] = 1.0
    return np.tile(c, 2 * m).reshape(2 * m * m, 1, 1)


def _forward_modes(h: np.ndarray, m: int) -> np.ndarray:
    """Retained modes of ``rfft2(h)`` over the grid axes of ``(B, ny, nx, C)``."""
    b, ny, nx, c = h.shape
    fx, fy, _, _ = _dft_matrices(ny, nx, m, h.dtype.name)
    xk = np.matmul(fx, h).reshape(b, 2 * ny, m * c)  # rows (y, [Re | Im])
    y = np.matmul(fy, xk).reshape(b, 2, 2 * m * m, c)
    out = np.empty((2 * m * m, b, c), dtype=np.result_type(h.dtype, np.complex64))
    out.real = y[:, 0].transpose(1, 0, 2)
    out.imag = y[:, 1].transpose(1, 0, 2)
    return out


def _inverse_modes(sel: np.ndarray, grid: GridSpec, m: int) -> np.ndarray:
    """``irfft2`` of a half-spectrum that is zero outside the retained block."""
    b, c = sel.shape[1], sel.shape[2]
    rdtype = sel.real.dtype
    _, _, gy, gx = _dft_matrices(grid.ny, grid.nx, m, rdtype.name)
    r = np.empty((b, 2, 2 * m * m, c), dtype=rdtype)
    r[:, 0] = sel.real.transpose(1, 0, 2)
    r[:, 1] = sel.imag.transpose(1, 0, 2)
    q = np.matmul(gy, r.reshape(b, 4 * m, m * c)).reshape(b, grid.ny, 2 * m, c)
    return np.matmul(gx, q)  # (B, ny, nx, C)


def _inverse_modes_adjoint(g: np.ndarray, m: int) -> np.ndarray:
    """Gradient w.r.t. the retained coefficients of :func:`_inverse_modes`."""
    n = g.shape[1] * g.shape[2]
    sel = _forward_modes(g, m)
    return sel * (_kx_multiplicity(m) / n).astype(sel.real.dtype)


def _forward_modes_adjoint(gsel: np.ndarray, grid: GridSpec, m: int) -> np.ndarray:
    """Gradient w.r.t. ``h`` given the gradient w.r.t. :func:`_forward_modes`."""
    scale = (grid.size / _kx_multiplicity(m)).astype(gsel.real.dtype)
    return _inverse_modes(gsel * scale, grid, m)

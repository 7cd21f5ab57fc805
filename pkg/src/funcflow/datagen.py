"""Reference data: a pseudo-spectral 2D Kolmogorov-flow solver and synthetic GRF datasets.

The solver evolves vorticity on a ``2*pi``-periodic box,

    w_t + u . grad w = nu * lap w - a * n * cos(n y),

which is the curl of the momentum equation forced by ``a * sin(n y) x_hat``.
Velocity comes from the streamfunction (``lap psi = -w``, ``u = psi_y``,
``v = -psi_x``).  Time stepping is classical RK4 in integrating-factor form, so
diffusion is integrated exactly, and the nonlinear term is dealiased with the
2/3 rule.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.fft

from . import rng as rngmod
from .grf import KernelSpec, build_sampler
from .grid import TWO_PI, Field, GridSpec


class CflViolation(RuntimeError):
    pass


@dataclass(frozen=True)
class KolmogorovConfig:
    grid: GridSpec = GridSpec(64, 64)
    re: float = 40.0  # math.inf switches viscosity off
    n_forcing: int = 4
    forcing_amplitude: float = 1.0  # 0 switches forcing off
    dt: float = 1e-3
    spinup_time: float = 50.0
    snapshot_interval: float = 1.0
    n_snapshots: int = 100
    n_trajectories: int = 1  # independent runs advanced together as one batch
    seed: int = 0
    init_amplitude: float = 0.1
    output_grid: GridSpec | None = None  # spectral resampling of saved snapshots
    cfl_limit: float = 0.5

    def __post_init__(self):
        if abs(self.grid.lx - TWO_PI) > 1e-12 or abs(self.grid.ly - TWO_PI) > 1e-12:
            raise ValueError("the solver domain must be 2*pi x 2*pi")
        if not self.re > 0:
            raise ValueError("re must be positive")
        if self.dt <= 0 or self.spinup_time < 0 or self.snapshot_interval <= 0:
            raise ValueError("dt and snapshot_interval must be positive, spinup_time nonnegative")
        if self.n_snapshots < 1 or self.n_trajectories < 1:
            raise ValueError("n_snapshots and n_trajectories must be >= 1")
        if self.n_forcing < 0 or int(self.n_forcing) != self.n_forcing:
            raise ValueError("n_forcing must be a nonnegative integer")
        if self.forcing_amplitude != 0 and self.n_forcing == 0:
            raise ValueError("n_forcing=0 gives a zero vorticity forcing; set forcing_amplitude=0 instead")
        for name in ("spinup_time", "snapshot_interval"):
            steps = getattr(self, name) / self.dt
            if abs(steps - round(steps)) > 1e-6 * max(1.0, steps):
                raise ValueError(f"{name} must be a whole number of steps of dt={self.dt}")

    @property
    def nu(self) -> float:
        return 0.0 if math.isinf(self.re) else 1.0 / self.re

    @property
    def spinup_steps(self) -> int:
        return int(round(self.spinup_time / self.dt))

    @property
    def snapshot_steps(self) -> int:
        return int(round(self.snapshot_interval / self.dt))

    @property
    def snapshots_per_trajectory(self) -> int:
        return -(-self.n_snapshots // self.n_trajectories)


class VorticitySolver:
    """Right-hand side, integrating-factor RK4 step and diagnostics for one grid."""

    def __init__(self, grid: GridSpec, nu: float, n_forcing: int = 0, forcing_amplitude: float = 0.0):
        self.grid = grid
        self.nu = float(nu)
        ny, nx = grid.shape
        kx = np.arange(nx // 2 + 1, dtype=np.float64)
        ky = np.fft.fftfreq(ny, 1.0 / ny)
        self.kx, self.ky = np.meshgrid(kx, ky)
        k2 = self.kx**2 + self.ky**2
        self.inv_k2 = np.divide(1.0, k2, out=np.zeros_like(k2), where=k2 > 0)
        self.lap = -k2
        # derivative operators drop the Nyquist rows and columns, which carry no odd part
        dx = 1j * self.kx
        dy = 1j * self.ky
        dx[:, -1] = 0.0
        dy[ny // 2, :] = 0.0
        self.dx, self.dy = dx, dy
        self.mask = (np.abs(self.kx) < nx / 3.0) & (np.abs(self.ky) < ny / 3.0)
        # velocity straight from vorticity, and the x columns that survive dealiasing
        self.u_op, self.v_op = dy * self.inv_k2, -dx * self.inv_k2
        self._ncol = int(np.ceil(nx / 3.0))
        _, y = grid.meshgrid()
        self.n_forcing = int(n_forcing)
        self.forcing_amplitude = float(forcing_amplitude)
        force = -forcing_amplitude * n_forcing * np.cos(n_forcing * y)
        self.forcing_hat = scipy.fft.rfft2(force) * self.mask
        self.max_speed = 0.0

    def to_spectral(self, w: np.ndarray) -> np.ndarray:
        return scipy.fft.rfft2(w) * self.mask

    def to_physical(self, w_hat: np.ndarray) -> np.ndarray:
        return scipy.fft.irfft2(w_hat, s=self.grid.shape)

    def velocity_hat(self, w_hat):
        psi = w_hat * self.inv_k2
        return self.dy * psi, -self.dx * psi

    def velocity(self, w_hat):
        u_hat, v_hat = self.velocity_hat(w_hat)
        return self.to_physical(u_hat), self.to_physical(v_hat)

    def rhs(self, w_hat: np.ndarray, track_speed: bool = True) -> np.ndarray:
        """Dealiased ``-u . grad w`` plus forcing (diffusion is handled by the integrating factor).

        ``w_hat`` must already be dealiased; only its low x columns are transformed.
        """
        c = self._ncol
        w = w_hat[..., :c]
        buf = np.empty((4,) + w.shape, dtype=complex)
        np.multiply(w, self.u_op[:, :c], out=buf[0])
        np.multiply(w, self.v_op[:, :c], out=buf[1])
        np.multiply(w, self.dx[:, :c], out=buf[2])
        np.multiply(w, self.dy[:, :c], out=buf[3])
        cols = scipy.fft.ifft(buf, axis=-2, overwrite_x=True)
        u, v, wx, wy = scipy.fft.irfft(cols, n=self.grid.nx, axis=-1, overwrite_x=True)
        if track_speed:
            self.max_speed = float(np.sqrt(np.max(u * u + v * v)))
        u *= wx
        v *= wy
        u += v
        adv = scipy.fft.fft(scipy.fft.rfft(u, axis=-1)[..., :c], axis=-2, overwrite_x=True)
        out = np.zeros(w_hat.shape, dtype=complex)
        out += self.forcing_hat
        out[..., :c] -= self.mask[:, :c] * adv
        return out

    def factors(self, dt: float):
        return np.exp(self.nu * self.lap * dt), np.exp(self.nu * self.lap * dt / 2)

    def step(self, w_hat: np.ndarray, dt: float, factors=None) -> np.ndarray:
        e, e2 = factors if factors is not None else self.factors(dt)
        n1 = self.rhs(w_hat)
        n2 = self.rhs(e2 * (w_hat + 0.5 * dt * n1), False)
        n3 = self.rhs(e2 * w_hat + 0.5 * dt * n2, False)
        n4 = self.rhs(e * w_hat + dt * e2 * n3, False)
        return e * w_hat + (dt / 6.0) * (e * n1 + 2.0 * e2 * (n2 + n3) + n4)

    def cfl(self, dt: float) -> float:
        dxmin = min(self.grid.lx / self.grid.nx, self.grid.ly / self.grid.ny)
        return self.max_speed * dt / dxmin

    # diagnostics, each per batch element; means are over the domain
    def energy(self, w_hat):
        u, v = self.velocity(w_hat)
        return 0.5 * np.mean(u * u + v * v, axis=(-2, -1))

    def enstrophy(self, w_hat):
        w = self.to_physical(w_hat)
        return 0.5 * np.mean(w * w, axis=(-2, -1))

    def energy_input(self, w_hat):
        u, _ = self.velocity(w_hat)
        _, y = self.grid.meshgrid()
        return self.forcing_amplitude * np.mean(u * np.sin(self.n_forcing * y), axis=(-2, -1))

    def dissipation(self, w_hat):
        return 2.0 * self.nu * self.enstrophy(w_hat)

    def divergence(self, w_hat) -> float:
        u_hat, v_hat = self.velocity_hat(w_hat)
        return float(np.max(np.abs(self.to_physical(self.dx * u_hat + self.dy * v_hat))))


def advance(solver: VorticitySolver, w_hat: np.ndarray, n_steps: int, dt: float,
            cfl_limit: float = 0.5, step_offset: int = 0) -> np.ndarray:
    """Take ``n_steps`` steps, aborting on a CFL violation or a non-finite state."""
    fac = solver.factors(dt)
    for s in range(n_steps):
        w_hat = solver.step(w_hat, dt, fac)
        c = solver.cfl(dt)
        if c >= cfl_limit:
            raise CflViolation(f"CFL number {c:.3f} >= {cfl_limit} at step {step_offset + s}")
        if not np.isfinite(w_hat).all():
            raise FloatingPointError(f"non-finite vorticity at step {step_offset + s}")
    return w_hat


def resample(w_hat: np.ndarray, src: GridSpec, dst: GridSpec) -> np.ndarray:
    """Physical values on ``dst`` of the band-limited field with half spectrum ``w_hat`` on ``src``.

    When ``src`` is an integer multiple of ``dst`` along both axes, the field is
    truncated to ``|k| <= N/2`` of the coarse grid and sampled at the shared nodes,
    so the coarse Nyquist modes keep the folded ``+-N/2`` content. Otherwise modes
    beyond the smaller grid's Nyquist are dropped, and so are the Nyquist modes
    themselves, which keeps the result real and symmetric.
    """
    if src == dst:
        return scipy.fft.irfft2(w_hat, s=src.shape)
    if src.nx % dst.nx == 0 and src.ny % dst.ny == 0 and src.nx >= dst.nx and src.ny >= dst.ny:
        ky = np.abs(np.fft.fftfreq(src.ny, 1.0 / src.ny))
        kx = np.arange(src.spectral_shape[1])
        keep = (ky[:, None] <= dst.ny // 2) & (kx[None, :] <= dst.nx // 2)
        full = scipy.fft.irfft2(w_hat * keep, s=src.shape)
        return np.ascontiguousarray(full[..., ::src.ny // dst.ny, ::src.nx // dst.nx])
    my = min(src.ny, dst.ny) // 2
    mx = min(src.nx, dst.nx) // 2
    out = np.zeros(w_hat.shape[:-2] + dst.spectral_shape, dtype=complex)
    out[..., :my, :mx] = w_hat[..., :my, :mx]
    out[..., -my + 1:, :mx] = w_hat[..., -my + 1:, :mx]
    scale = dst.size / src.size
    return scipy.fft.irfft2(out * scale, s=dst.shape)


def initial_condition(config: KolmogorovConfig) -> np.ndarray:
    """Small-amplitude smooth random vorticity, one per trajectory, as a half spectrum."""
    sub = int(rngmod.stream(config.seed, rngmod.DATAGEN).integers(2**62))
    sampler = build_sampler(KernelSpec(nu=2.5, length_scale=1.0), config.grid, sub)
    w0 = config.init_amplitude * sampler.draw(range(config.n_trajectories)).values
    return scipy.fft.rfft2(w0) * VorticitySolver(config.grid, 0.0).mask


def make_solver(config: KolmogorovConfig) -> VorticitySolver:
    return VorticitySolver(config.grid, config.nu, config.n_forcing, config.forcing_amplitude)


def simulate_kolmogorov(config: KolmogorovConfig, log=None) -> Field:
    """Vorticity snapshots as one batch, ordered trajectory-major, truncated to ``n_snapshots``."""
    solver = make_solver(config)
    w_hat = initial_condition(config)
    w_hat = advance(solver, w_hat, config.spinup_steps, config.dt, config.cfl_limit)
    out_grid = config.output_grid or config.grid
    per = config.snapshots_per_trajectory
    frames = np.empty((per, config.n_trajectories) + out_grid.shape)
    done = config.spinup_steps
    for j in range(per):
        if j > 0:
            w_hat = advance(solver, w_hat, config.snapshot_steps, config.dt, config.cfl_limit, done)
            done += config.snapshot_steps
        frames[j] = resample(w_hat, config.grid, out_grid)
        if log is not None:
            log(j + 1, per)
    values = frames.transpose(1, 0, 2, 3).reshape((-1,) + out_grid.shape)[: config.n_snapshots]
    return Field(out_grid, np.ascontiguousarray(values))


def flow_statistics(config: KolmogorovConfig, n_samples: int, sample_every: int):
    """Run past spinup and record per-sample energy, input and dissipation (trajectory 0)."""
    solver = make_solver(config)
    w_hat = advance(solver, initial_condition(config), config.spinup_steps, config.dt, config.cfl_limit)
    rows = []
    for _ in range(n_samples):
        rows.append((float(solver.energy(w_hat)[0]), float(solver.energy_input(w_hat)[0]),
                     float(solver.dissipation(w_hat)[0])))
        w_hat = advance(solver, w_hat, sample_every, config.dt, config.cfl_limit)
    return np.array(rows)


def taylor_green_error(re: float = 100.0, n: int = 64, dt: float = 1e-3, t_end: float = 1.0) -> float:
    """Relative max error against ``2 cos x cos y exp(-2 t / Re)`` with forcing off."""
    grid = GridSpec(n, n)
    x, y = grid.meshgrid()
    w0 = 2.0 * np.cos(x) * np.cos(y)
    solver = VorticitySolver(grid, 1.0 / re)
    steps = int(round(t_end / dt))
    w = solver.to_physical(advance(solver, solver.to_spectral(w0), steps, dt))
    exact = w0 * math.exp(-2.0 * steps * dt / re)
    return float(np.max(np.abs(w - exact)) / np.max(np.abs(exact)))


def inviscid_drift(n: int = 64, dt: float = 1e-3, t_end: float = 0.1, seed: int = 0) -> tuple[float, float]:
    """Relative change of energy and enstrophy for unforced, inviscid flow from a smooth random state."""
    config = KolmogorovConfig(grid=GridSpec(n, n), re=math.inf, forcing_amplitude=0.0, dt=dt,
                              spinup_time=0.0, seed=seed, init_amplitude=1.0)
    solver = make_solver(config)
    w_hat = initial_condition(config)
    e0, z0 = solver.energy(w_hat)[0], solver.enstrophy(w_hat)[0]
    w_hat = advance(solver, w_hat, int(round(t_end / dt)), dt)
    e1, z1 = solver.energy(w_hat)[0], solver.enstrophy(w_hat)[0]
    return float(abs(e1 - e0) / e0), float(abs(z1 - z0) / z0)


@dataclass(frozen=True)
class MixtureSpec:
    weights: tuple[float, ...] = (0.5, 0.5)
    shifts: tuple[float, ...] = (-1.0, 1.0)  # constant added to every node of a component's draws

    def __post_init__(self):
        if len(self.weights) != len(self.shifts) or not self.weights:
            raise ValueError("weights and shifts must be nonempty and of equal length")
        if min(self.weights) < 0 or abs(sum(self.weights) - 1.0) > 1e-12:
            raise ValueError("weights must be nonnegative and sum to 1")


def make_grf_dataset(kernel: KernelSpec, grid: GridSpec, n: int, seed: int,
                     mixture: MixtureSpec | None = None) -> Field:
    """``n`` i.i.d. GRF draws, optionally mean-shifted into a mixture."""
    if n < 1:
        raise ValueError("n must be >= 1")
    sub = int(rngmod.stream(seed, rngmod.DATAGEN).integers(2**62))
    values = build_sampler(kernel, grid, sub).draw(range(n)).values
    if mixture is not None:
        comp = rngmod.stream(seed, rngmod.DATAGEN, 1).choice(len(mixture.weights), size=n, p=mixture.weights)
        values = values + np.asarray(mixture.shifts)[comp][:, None, None]
    return Field(grid, values)


@dataclass(frozen=True)
class Manifest:
    kind: str
    config: dict
    count: int
    grid: dict
    extra: dict = field(default_factory=dict)

    def write(self, path):
        with open(path, "w") as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True, default=_json_default)
            fh.write("\n")

    @classmethod
    def read(cls, path) -> Manifest:
        with open(path) as fh:
            return cls(**json.load(fh))


def _json_default(obj):
    if isinstance(obj, float) and math.isinf(obj):
        return "inf"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def manifest_for(config: KolmogorovConfig, count: int, **extra) -> Manifest:
    cfg = asdict(config)
    if math.isinf(config.re):
        cfg["re"] = "inf"
    out = config.output_grid or config.grid
    return Manifest("kolmogorov", cfg, count, asdict(out), extra)

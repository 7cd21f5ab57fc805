import math

import numpy as np
import pytest

from funcflow.datagen import (
    CflViolation,
    KolmogorovConfig,
    Manifest,
    MixtureSpec,
    VorticitySolver,
    advance,
    flow_statistics,
    initial_condition,
    inviscid_drift,
    make_grf_dataset,
    make_solver,
    manifest_for,
    resample,
    simulate_kolmogorov,
    taylor_green_error,
)
from funcflow.grf import KernelSpec
from funcflow.grid import GridSpec

G32 = GridSpec(32, 32)


def spun_up(dt=0.01, spinup=10.0, grid=G32):
    c = KolmogorovConfig(grid=grid, dt=dt, spinup_time=spinup)
    s = make_solver(c)
    return c, s, advance(s, initial_condition(c), c.spinup_steps, dt)


class TestConfig:
    def test_defaults(self):
        c = KolmogorovConfig()
        assert (c.re, c.n_forcing, c.grid.nx, c.dt, c.spinup_time, c.snapshot_interval) == (40.0, 4, 64, 1e-3, 50.0, 1.0)
        assert c.nu == 1 / 40

    def test_rejects(self):
        with pytest.raises(ValueError):
            KolmogorovConfig(grid=GridSpec(32, 32, lx=1.0))
        with pytest.raises(ValueError):
            KolmogorovConfig(dt=0.3, snapshot_interval=1.0)
        with pytest.raises(ValueError):
            KolmogorovConfig(n_snapshots=0)
        with pytest.raises(ValueError):
            KolmogorovConfig(n_forcing=0)

    def test_inviscid(self):
        assert KolmogorovConfig(re=math.inf).nu == 0.0


class TestSolverOracles:
    def test_taylor_green(self):
        assert taylor_green_error(re=100.0, n=64, dt=1e-3, t_end=1.0) < 1e-3

    def test_taylor_green_coarse_step(self):
        # diffusion is integrated exactly and the TG nonlinearity vanishes, so even huge steps are exact
        assert taylor_green_error(re=100.0, n=32, dt=0.05, t_end=1.0) < 1e-12

    def test_inviscid_conservation(self):
        de, dz = inviscid_drift(n=64, dt=1e-3, t_end=0.1)
        assert de < 1e-6 and dz < 1e-6

    def test_divergence_free(self):
        _, s, w = spun_up(spinup=2.0)
        assert s.divergence(w) < 1e-10

    def test_temporal_order(self):
        _, s, w = spun_up(spinup=5.0)
        ref = advance(s, w, 400, 1e-3)
        errs = [np.abs(s.to_physical(advance(s, w, int(round(0.4 / dt)), dt) - ref)).max() for dt in (0.04, 0.02, 0.01)]
        orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
        assert np.all(orders > 3.5)

    def test_velocity_from_streamfunction(self):
        g = GridSpec(16, 16)
        x, y = g.meshgrid()
        s = VorticitySolver(g, 0.0)
        u, v = s.velocity(s.to_spectral(2 * np.cos(x) * np.cos(y)))
        np.testing.assert_allclose(u, -np.cos(x) * np.sin(y), atol=1e-14)
        np.testing.assert_allclose(v, np.sin(x) * np.cos(y), atol=1e-14)

    def test_laminar_fixed_point(self):
        # w = -(Re / n) cos(n y) is the steady laminar state: u = (Re / n^2) sin(n y)
        g = GridSpec(32, 32)
        _, y = g.meshgrid()
        s = VorticitySolver(g, 1 / 5.0, 4, 1.0)
        w = s.to_spectral(-(5.0 / 4) * np.cos(4 * y))
        out = advance(s, w, 50, 0.01)
        np.testing.assert_allclose(s.to_physical(out), s.to_physical(w), atol=1e-12)


class TestAborts:
    def test_cfl(self):
        c, s, w = spun_up(spinup=1.0)
        with pytest.raises(CflViolation, match="step 0"):
            advance(s, w, 5, 0.5)

    def test_nonfinite(self):
        s = VorticitySolver(G32, 0.01)
        w = np.zeros(G32.spectral_shape, dtype=complex)
        w[0, 1] = np.nan
        with pytest.raises(FloatingPointError, match="step 0"):
            advance(s, w, 3, 0.01)


class TestSimulate:
    CFG = KolmogorovConfig(grid=G32, dt=0.01, spinup_time=1.0, snapshot_interval=0.5, n_snapshots=5,
                           n_trajectories=2, seed=3)

    def test_shape_and_order(self):
        f = simulate_kolmogorov(self.CFG)
        assert f.values.shape == (5, 32, 32) and f.grid == G32
        # trajectory-major: frames 0..2 from trajectory 0, 3..4 from trajectory 1
        longer = simulate_kolmogorov(KolmogorovConfig(**{**self.CFG.__dict__, "n_snapshots": 6}))
        np.testing.assert_array_equal(longer.values[:5][[0, 1, 2]], f.values[[0, 1, 2]])
        np.testing.assert_array_equal(longer.values[3:5], f.values[3:5])

    def test_deterministic(self):
        a = simulate_kolmogorov(self.CFG)
        b = simulate_kolmogorov(self.CFG)
        assert a.values.tobytes() == b.values.tobytes()

    def test_output_grid(self):
        cfg = KolmogorovConfig(**{**self.CFG.__dict__, "output_grid": GridSpec(16, 16)})
        f = simulate_kolmogorov(cfg)
        full = simulate_kolmogorov(self.CFG)
        assert f.grid == GridSpec(16, 16)
        # a node shared by both grids agrees up to the modes above the coarse Nyquist
        assert np.abs(f.values - full.values[:, ::2, ::2]).max() < 0.05 * np.abs(full.values).max()

    def test_downsample_keeps_nyquist(self):
        fine, coarse = GridSpec(64, 64), GridSpec(32, 32)
        x, y = fine.meshgrid()
        w = np.cos(16 * x) + 0.5 * np.sin(3 * x - 16 * y) + np.cos(5 * x + 2 * y)
        down = resample(np.fft.rfft2(w), fine, coarse)
        np.testing.assert_allclose(down, w[::2, ::2], atol=1e-12)
        spec = np.abs(np.fft.rfft2(down))
        assert spec[0, 16] > 1.0 and spec[16, 3] > 1.0

    def test_downsample_drops_modes_above_nyquist(self):
        fine, coarse = GridSpec(64, 64), GridSpec(32, 32)
        x, y = fine.meshgrid()
        low = np.sin(2 * x) * np.cos(7 * y)
        down = resample(np.fft.rfft2(low + np.cos(20 * x) + np.sin(17 * y)), fine, coarse)
        np.testing.assert_allclose(down, low[::2, ::2], atol=1e-12)

    def test_resample_roundtrip_band_limited(self):
        g, fine = GridSpec(16, 16), GridSpec(24, 24)
        x, y = g.meshgrid()
        w = np.sin(2 * x) * np.cos(3 * y) + 0.5 * np.cos(x + 4 * y)
        s = VorticitySolver(g, 0.0)
        w_hat = np.fft.rfft2(w)
        up = resample(w_hat, g, fine)
        xf, yf = fine.meshgrid()
        np.testing.assert_allclose(up, np.sin(2 * xf) * np.cos(3 * yf) + 0.5 * np.cos(xf + 4 * yf), atol=1e-12)
        assert s.mask.shape == g.spectral_shape


@pytest.mark.slow
class TestStatistics:
    def test_energy_balance(self):
        cfg = KolmogorovConfig(grid=G32, dt=0.01, spinup_time=50.0)
        stats = flow_statistics(cfg, 200, 50)
        energy_in, dissipation = stats[:, 1].mean(), stats[:, 2].mean()
        assert abs(energy_in / dissipation - 1) < 0.10

    def test_snapshot_decorrelation_double_interval(self):
        cfg = KolmogorovConfig(grid=G32, dt=0.01, spinup_time=50.0)
        e = flow_statistics(cfg, 200, 200)[:, 0]
        x = e - e.mean()
        assert (x[:-1] * x[1:]).mean() / x.var() < 0.9

    @pytest.mark.xfail(strict=True, reason="total-energy autocorrelation at unit spacing measures about 0.93 for Re=40, n=4")
    def test_snapshot_decorrelation_default_interval(self):
        cfg = KolmogorovConfig(grid=G32, dt=0.01, spinup_time=50.0)
        e = flow_statistics(cfg, 400, 100)[:, 0]
        x = e - e.mean()
        assert (x[:-1] * x[1:]).mean() / x.var() < 0.9


class TestGrfDataset:
    K = KernelSpec(nu=1.5, length_scale=1.0)

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            make_grf_dataset(self.K, G32, 0, 0)

    def test_same_seed_same_bytes(self):
        a = make_grf_dataset(self.K, G32, 4, 7)
        b = make_grf_dataset(self.K, G32, 4, 7)
        assert a.values.tobytes() == b.values.tobytes()
        assert a.values.tobytes() != make_grf_dataset(self.K, G32, 4, 8).values.tobytes()

    def test_mixture_bimodal(self):
        c = 6.0
        f = make_grf_dataset(self.K, GridSpec(16, 16), 400, 1, MixtureSpec((0.5, 0.5), (-c, c)))
        means = f.values.mean(axis=(1, 2))
        assert np.all(np.abs(np.abs(means) - c) < 3.0)
        hist, edges = np.histogram(f.values, bins=60)
        centers = 0.5 * (edges[1:] + edges[:-1])
        assert abs(centers[np.argmax(np.where(centers < 0, hist, 0))] + c) < 1.0
        assert abs(centers[np.argmax(np.where(centers > 0, hist, 0))] - c) < 1.0
        assert hist[np.argmin(np.abs(centers))] < 0.05 * hist.max()

    def test_mixture_validation(self):
        with pytest.raises(ValueError):
            MixtureSpec((0.3, 0.3), (1.0, -1.0))


class TestManifest:
    def test_roundtrip(self, tmp_path):
        m = manifest_for(KolmogorovConfig(grid=G32, re=math.inf, forcing_amplitude=0.0), 10, source="test")
        m.write(tmp_path / "m.json")
        back = Manifest.read(tmp_path / "m.json")
        assert back.count == 10 and back.config["re"] == "inf" and back.extra == {"source": "test"}
        assert back.grid["nx"] == 32

import numpy as np
import pytest
import scipy.fft
import scipy.special

from funcflow.fno import FNO, FnoConfig, count_params, gelu, param_shapes
from funcflow.grid import Field, GridSpec

TINY = FnoConfig(n_layers=1, modes=2, width=2, lift_dim=4, proj_dim=4)
G8 = GridSpec(8, 8)


def fd_gradients(model, params, t, f, v, grid, h=1e-5):
    out = {}
    for name, a in params.items():
        g = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            orig = a[idx]
            a[idx] = orig + h
            lp, _ = model.loss_and_grad_values(params, t, f, v, grid)
            a[idx] = orig - h
            lm, _ = model.loss_and_grad_values(params, t, f, v, grid)
            a[idx] = orig
            g[idx] = (lp - lm) / (2 * h)
        out[name] = g
    return out


def rel_err(a, b):
    # tensor-wise: exactly-zero entries (e.g. imaginary DC weights) have no scale of their own
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300)


class TestConfig:
    def test_zero_layers_rejected(self):
        with pytest.raises(ValueError):
            FnoConfig(n_layers=0)

    def test_unknown_activation(self):
        with pytest.raises(ValueError):
            FnoConfig(activation="relu")

    def test_modes_exceed_grid(self):
        model = FNO(FnoConfig(modes=8))
        with pytest.raises(ValueError, match="at least 16x16"):
            model.velocity(model.init(0), 0.5, np.zeros((1, 8, 8)), G8)

    def test_hand_count(self):
        cfg = FnoConfig(n_layers=1, modes=2, width=2, lift_dim=2, proj_dim=2)
        lift = 4 * 2 + 2 + 2 * 2 + 2
        spectral = 2 * (2 * 2) * (2 * 2) * 2  # two ky blocks, modes^2, width^2, re+im
        bypass = 2 * 2 + 2
        proj = 2 * 2 + 2 + 2 * 1 + 1
        assert lift + spectral + bypass + proj == 95
        assert count_params(cfg) == 95

    @pytest.mark.parametrize("cfg", [TINY, FnoConfig(), FnoConfig(use_coords=False, n_layers=2)])
    def test_count_matches_tensors(self, cfg):
        params = FNO(cfg).init(0)
        assert sum(a.size for a in params.values()) == count_params(cfg)
        assert {k: a.shape for k, a in params.items()} == param_shapes(cfg)

    def test_params_grid_independent(self):
        model = FNO(FnoConfig(modes=4, width=4, lift_dim=8, proj_dim=8))
        p = model.init(1)
        for n in (8, 16, 32, 64):
            out = model.velocity(p, 0.3, np.zeros((1, n, n)), GridSpec(n, n))
            assert out.shape == (1, n, n)


class TestForward:
    def test_zero_params_zero_output(self):
        model = FNO(FnoConfig(modes=4, width=4))
        p = {k: np.zeros_like(a) for k, a in model.init(0).items()}
        f = Field(GridSpec(16, 16), np.random.default_rng(0).standard_normal((16, 16)))
        out = model.forward(p, 0.7, f)
        assert out.grid == f.grid
        assert np.all(out.values == 0.0)

    def test_zero_output_init(self):
        model = FNO(FnoConfig(modes=4, width=4))
        out = model.velocity(model.init(0, zero_output=True), 0.2, np.ones((2, 16, 16)), GridSpec(16, 16))
        assert np.all(out == 0.0)

    def test_identity_like_is_pointwise_affine(self):
        cfg = FnoConfig(n_layers=1, modes=2, width=3, lift_dim=5, proj_dim=4, activation="linear")
        model = FNO(cfg)
        p = model.init(3)
        p["layer0.spec_re"][...] = 0.0
        p["layer0.spec_im"][...] = 0.0
        p["layer0.w"] = 0.7 * np.eye(3)
        grid = GridSpec(8, 8)
        f = np.random.default_rng(4).standard_normal((2,) + grid.shape)
        t = 0.25
        # composite affine map from the four input channels
        w = np.linalg.multi_dot([p["lift.w1"], p["lift.w2"], p["layer0.w"], p["proj.w1"], p["proj.w2"]])[:, 0]
        b = (((p["lift.b1"] @ p["lift.w2"] + p["lift.b2"]) @ p["layer0.w"] + p["layer0.b"]) @ p["proj.w1"]
             + p["proj.b1"]) @ p["proj.w2"] + p["proj.b2"]
        x, y = grid.coords()
        expected = w[0] * f + w[1] * t + w[2] * (x / grid.lx)[None, None, :] + w[3] * (y / grid.ly)[None, :, None] + b[0]
        np.testing.assert_allclose(model.velocity(p, t, f, grid), expected, rtol=1e-12, atol=1e-12)

    def test_t_out_of_range(self):
        model = FNO(TINY)
        with pytest.raises(ValueError):
            model.forward(model.init(0), 1.5, Field(G8, np.zeros(G8.shape)))

    def test_nonfinite_names_layer(self):
        model = FNO(FnoConfig(n_layers=2, modes=2, width=2))
        p = model.init(0)
        p["layer1.w"][0, 0] = np.inf
        with pytest.raises(FloatingPointError, match="layer 1"):
            model.velocity(p, 0.5, np.ones((1, 8, 8)), G8)

    def test_per_sample_times(self):
        model = FNO(TINY)
        p = model.init(2)
        f = np.random.default_rng(0).standard_normal((3, 8, 8))
        t = np.array([0.1, 0.5, 0.9])
        batched = model.velocity(p, t, f, G8)
        for i in range(3):
            np.testing.assert_allclose(batched[i], model.velocity(p, t[i], f[i:i + 1], G8)[0], rtol=1e-13)

    def test_deterministic(self):
        model = FNO(TINY)
        a, b = model.init(11), model.init(11)
        for k in a:
            np.testing.assert_array_equal(a[k], b[k])
        f = np.random.default_rng(0).standard_normal((2, 8, 8))
        la, ga = model.loss_and_grad_values(a, 0.4, f, f[::-1].copy(), G8)
        lb, gb = model.loss_and_grad_values(b, 0.4, f, f[::-1].copy(), G8)
        assert la == lb
        for k in ga:
            np.testing.assert_array_equal(ga[k], gb[k])


def spectral_upsample(values, n_fine):
    ny, nx = values.shape[-2:]
    c = scipy.fft.fft2(values)
    fine = np.zeros(values.shape[:-2] + (n_fine, n_fine), dtype=complex)
    hy, hx = ny // 2, nx // 2
    fine[..., :hy, :hx] = c[..., :hy, :hx]
    fine[..., -hy:, :hx] = c[..., -hy:, :hx]
    fine[..., :hy, -hx:] = c[..., :hy, -hx:]
    fine[..., -hy:, -hx:] = c[..., -hy:, -hx:]
    return np.real(scipy.fft.ifft2(fine)) * (n_fine * n_fine) / (ny * nx)


def band_limited(rng, n, kmax):
    k = np.fft.fftfreq(n, 1.0 / n)
    c = scipy.fft.fft2(rng.standard_normal((n, n)))
    c[(np.abs(k)[:, None] > kmax) | (np.abs(k)[None, :] > kmax)] = 0.0
    return np.real(scipy.fft.ifft2(c))


class TestResolution:
    def test_linear_mode_agrees_on_shared_modes(self):
        cfg = FnoConfig(n_layers=3, modes=8, width=6, lift_dim=8, proj_dim=8, activation="linear", use_coords=False)
        model = FNO(cfg)
        p = model.init(5)
        f32 = band_limited(np.random.default_rng(6), 32, 12)
        f64 = spectral_upsample(f32, 64)
        out32 = model.velocity(p, 0.6, f32[None], GridSpec(32, 32))[0]
        out64 = model.velocity(p, 0.6, f64[None], GridSpec(64, 64))[0]
        c32 = scipy.fft.fft2(out32) / 32**2
        c64 = scipy.fft.fft2(out64) / 64**2
        idx = np.r_[0:16, -15:0]
        shared32 = c32[np.ix_(idx % 32, idx % 32)]
        shared64 = c64[np.ix_(idx % 64, idx % 64)]
        assert np.linalg.norm(shared64 - shared32) / np.linalg.norm(shared32) < 1e-6

    def test_spectral_truncation(self):
        # single linear spectral layer with the bypass removed: nothing outside the retained block
        cfg = FnoConfig(n_layers=1, modes=3, width=4, lift_dim=4, proj_dim=4, activation="linear")
        model = FNO(cfg)
        p = model.init(7)
        p["layer0.w"][...] = 0.0
        grid = GridSpec(16, 16)
        out = model.velocity(p, 0.5, np.random.default_rng(8).standard_normal((2, 16, 16)), grid)
        c = scipy.fft.rfft2(out)
        inside = np.zeros(c.shape[-2:], dtype=bool)
        inside[:3, :3] = True
        inside[-3:, :3] = True
        inside[3, 0] = True  # real output: Hermitian mirror of (ky=-3, kx=0)
        assert np.sum(np.abs(c[:, ~inside]) ** 2) < 1e-24 * np.sum(np.abs(c) ** 2)
        assert np.sum(np.abs(c[:, inside]) ** 2) > 0


class TestLoss:
    def test_target_equals_output(self):
        model = FNO(TINY)
        p = model.init(0)
        f = np.random.default_rng(1).standard_normal((3, 8, 8))
        v = model.velocity(p, 0.3, f, G8)
        loss, grads = model.loss_and_grad_values(p, 0.3, f, v, G8)
        assert loss == 0.0
        assert all(np.all(g == 0.0) for g in grads.values())

    def test_doubled_residual_quadruples_loss(self):
        model = FNO(TINY)
        p = model.init(0)
        f = np.random.default_rng(2).standard_normal((3, 8, 8))
        u = model.velocity(p, 0.3, f, G8)
        r = np.random.default_rng(3).standard_normal(f.shape)
        l1, _ = model.loss_and_grad_values(p, 0.3, f, u + r, G8)
        l2, _ = model.loss_and_grad_values(p, 0.3, f, u + 2 * r, G8)
        assert l2 == pytest.approx(4 * l1, rel=1e-12)

    def test_loss_is_batch_mean_hilbert_norm(self):
        model = FNO(TINY)
        p = model.init(0)
        grid = GridSpec(8, 8, 3.0, 5.0)
        f = np.random.default_rng(4).standard_normal((4, 8, 8))
        v = np.random.default_rng(5).standard_normal((4, 8, 8))
        loss, _ = model.loss_and_grad_values(p, 0.3, f, v, grid)
        u = model.velocity(p, 0.3, f, grid)
        direct = np.mean([grid.cell_area * np.sum((u[i] - v[i]) ** 2) for i in range(4)])
        assert loss == pytest.approx(direct, rel=1e-13)

    def test_field_interface(self):
        model = FNO(TINY)
        p = model.init(0)
        f = Field(G8, np.ones((2, 8, 8)))
        loss, grads = model.loss_and_grad(p, 0.5, f, Field(G8, np.zeros((2, 8, 8))))
        assert loss > 0 and set(grads) == set(p)
        with pytest.raises(ValueError, match="grid"):
            model.loss_and_grad(p, 0.5, f, Field(GridSpec(8, 8, lx=1.0), np.zeros((2, 8, 8))))


class TestGradients:
    @pytest.mark.parametrize("seed", range(5))
    def test_finite_differences(self, seed):
        model = FNO(TINY)
        p = model.init(seed)
        rng = np.random.default_rng(100 + seed)
        f = rng.standard_normal((1, 8, 8))
        v = rng.standard_normal((1, 8, 8))
        t = float(rng.uniform())
        _, grads = model.loss_and_grad_values(p, t, f, v, G8)
        fd = fd_gradients(model, p, t, f, v, G8)
        for name in p:
            assert rel_err(grads[name], fd[name]) < 1e-5, name

    @pytest.mark.parametrize("cfg", [
        FnoConfig(n_layers=2, modes=3, width=3, lift_dim=3, proj_dim=3),
        FnoConfig(n_layers=2, modes=4, width=2, lift_dim=2, proj_dim=2, use_coords=False),
    ])
    def test_finite_differences_deeper(self, cfg):
        # m = ny/2 reaches the Nyquist row; two layers exercise the inner activation
        model = FNO(cfg)
        p = model.init(9)
        rng = np.random.default_rng(9)
        f, v = rng.standard_normal((2, 8, 8)), rng.standard_normal((2, 8, 8))
        _, grads = model.loss_and_grad_values(p, 0.6, f, v, G8)
        fd = fd_gradients(model, p, 0.6, f, v, G8)
        for name in p:
            assert rel_err(grads[name], fd[name]) < 1e-5, name

    def test_input_gradient(self):
        model = FNO(FnoConfig(n_layers=2, modes=2, width=3, lift_dim=3, proj_dim=3))
        p = model.init(4)
        rng = np.random.default_rng(4)
        f = rng.standard_normal((1, 8, 8))
        w = rng.standard_normal((1, 8, 8))
        _, cache = model._run(p, 0.4, f, G8, keep_cache=True)
        _, g_in = model.backward(cache, w)
        fd = np.zeros_like(f)
        h = 1e-5
        for idx in np.ndindex(f.shape):
            fp, fm = f.copy(), f.copy()
            fp[idx] += h
            fm[idx] -= h
            fd[idx] = (np.sum(w * model.velocity(p, 0.4, fp, G8)) - np.sum(w * model.velocity(p, 0.4, fm, G8))) / (2 * h)
        assert rel_err(g_in, fd) < 1e-6

    def test_float32_matches_float64(self):
        cfg = FnoConfig(n_layers=2, modes=4, width=8, lift_dim=8, proj_dim=8)
        p = FNO(cfg).init(0)
        grid = GridSpec(16, 16)
        rng = np.random.default_rng(1)
        f, v = rng.standard_normal((4, 16, 16)), rng.standard_normal((4, 16, 16))
        l64, g64 = FNO(cfg).loss_and_grad_values(p, 0.5, f, v, grid)
        l32, g32 = FNO(cfg, dtype=np.float32).loss_and_grad_values(p, 0.5, f, v, grid)
        assert l32 == pytest.approx(l64, rel=1e-5)
        for k in g64:
            assert g32[k].dtype == np.float64
            assert rel_err(g32[k], g64[k]) < 1e-4, k


class TestGelu:
    def test_float32_tails(self):
        z = np.array([-40.0, -10.0, 10.0, 40.0], dtype=np.float32)
        out, slope = gelu(z)
        np.testing.assert_allclose(out, [0.0, 0.0, 10.0, 40.0], rtol=0, atol=1e-20)
        np.testing.assert_allclose(slope, [0.0, 0.0, 1.0, 1.0], rtol=0, atol=1e-20)

    @pytest.mark.parametrize("dtype", [np.float32, np.float64])
    def test_values_and_slope(self, dtype):
        z = np.linspace(-6, 6, 40001)
        out, slope = gelu(z.astype(dtype))
        exact = 0.5 * z * (1 + scipy.special.erf(z / np.sqrt(2)))
        tol = 2e-6 if dtype == np.float32 else 1e-15
        np.testing.assert_allclose(out, exact, rtol=0, atol=tol * 6)
        h = 1e-6
        num = (0.5 * (z + h) * (1 + scipy.special.erf((z + h) / np.sqrt(2)))
               - 0.5 * (z - h) * (1 + scipy.special.erf((z - h) / np.sqrt(2)))) / (2 * h)
        np.testing.assert_allclose(slope, num, rtol=0, atol=1e-6 if dtype == np.float32 else 5e-9)

import numpy as np
import pytest

from curvlab.grid import (
    GridError,
    Kernel,
    PeriodicGridField,
    convolve,
    finite_diff,
    integrate,
    mollifier_kernel,
    node_coordinates,
    read_field,
    shift_nodes,
    write_field,
)


def bump_field(N, freq=1):
    X, Y = node_coordinates(N)
    return PeriodicGridField(np.sin(2 * np.pi * freq * X))


def dense_convolution_oracle(values, kernel):
    """Direct double-loop periodic convolution (independent reference)."""
    N = values.shape[0]
    W = kernel.weights
    r = kernel.radius_nodes
    out = np.zeros_like(values)
    for i in range(N):
        for j in range(N):
            acc = 0.0
            for a in range(-r, r + 1):
                for b in range(-r, r + 1):
                    acc += W[a + r, b + r] * values[(i - a) % N, (j - b) % N]
            out[i, j] = acc
    return out


class TestKernel:
    def test_unit_mass(self):
        for eps in (1 / 8, 1 / 16, 1 / 32):
            k = mollifier_kernel(eps, 128)
            assert abs(k.discrete_mass - 1.0) < 1e-14
            assert np.all(k.weights >= 0)

    def test_support_radius(self):
        k = mollifier_kernel(1 / 16, 128)
        assert k.radius_nodes <= 128 // 16 + 1

    def test_exceeds_chart(self):
        with pytest.raises(GridError, match="kernel exceeds chart"):
            mollifier_kernel(0.5, 64)

    def test_derivative_kernel_zero_mean(self):
        for kind in ("dx", "dy"):
            k = mollifier_kernel(1 / 8, 64, kind=kind)
            assert abs(k.weights.sum()) < 1e-18


class TestConvolve:
    def test_constant_preserved(self):
        f = PeriodicGridField.constant(3.7, 64)
        out = convolve(f, mollifier_kernel(1 / 8, 64))
        assert np.max(np.abs(out.values - 3.7)) < 1e-13

    def test_positivity_preserved(self):
        rng = np.random.default_rng(0)
        f = PeriodicGridField(rng.random((64, 64)))
        out = convolve(f, mollifier_kernel(1 / 8, 64))
        assert np.all(out.values >= 0)

    def test_mass_preserved(self):
        rng = np.random.default_rng(1)
        f = PeriodicGridField(rng.random((64, 64)))
        out = convolve(f, mollifier_kernel(1 / 8, 64))
        assert abs(integrate(out) - integrate(f)) < 1e-13

    def test_matches_dense_sum_oracle(self):
        rng = np.random.default_rng(2)
        f = PeriodicGridField(rng.standard_normal((24, 24)))
        k = mollifier_kernel(1 / 8, 24)
        out = convolve(f, k)
        ref = dense_convolution_oracle(f.values, k)
        assert np.max(np.abs(out.values - ref)) < 1e-12

    def test_fft_path_matches_direct(self):
        rng = np.random.default_rng(3)
        f = PeriodicGridField(rng.standard_normal((96, 96)))
        k = mollifier_kernel(0.2, 96)  # large support
        from curvlab import grid as g

        out_fft = convolve(f, k)
        old = g.DIRECT_CONV_MAX_WEIGHTS
        g.DIRECT_CONV_MAX_WEIGHTS = 10**9
        try:
            out_direct = convolve(f, k)
        finally:
            g.DIRECT_CONV_MAX_WEIGHTS = old
        assert np.max(np.abs(out_fft.values - out_direct.values)) < 1e-12

    def test_sharper_kernel_gets_closer(self):
        f = bump_field(128)
        d = []
        for eps in (1 / 16, 1 / 32):
            out = convolve(f, mollifier_kernel(eps, 128))
            d.append(np.max(np.abs(out.values - f.values)))
        assert d[1] < d[0]

    def test_linearity(self):
        rng = np.random.default_rng(4)
        f = rng.standard_normal((48, 48))
        g = rng.standard_normal((48, 48))
        k = mollifier_kernel(1 / 8, 48)
        lhs = convolve(PeriodicGridField(2.5 * f - 1.25 * g), k).values
        rhs = (2.5 * convolve(PeriodicGridField(f), k).values
               - 1.25 * convolve(PeriodicGridField(g), k).values)
        assert np.max(np.abs(lhs - rhs)) < 1e-13

    def test_commutes_with_finite_diff(self):
        rng = np.random.default_rng(5)
        f = PeriodicGridField(rng.standard_normal((64, 64)))
        k = mollifier_kernel(1 / 8, 64)
        a = finite_diff(convolve(f, k), "x")
        b = convolve(finite_diff(f, "x"), k)
        assert np.max(np.abs(a.values - b.values)) < 1e-11

    def test_double_convolution_composes(self):
        rng = np.random.default_rng(6)
        f = PeriodicGridField(rng.standard_normal((64, 64)))
        k1 = mollifier_kernel(1 / 16, 64)
        k2 = mollifier_kernel(1 / 8, 64)
        two_pass = convolve(convolve(f, k1), k2)
        k12_grid = convolve(PeriodicGridField(k1.embedded() * 64.0**2), k2).values
        r = k1.radius_nodes + k2.radius_nodes
        idx = np.arange(-r, r + 1) % 64
        weights = k12_grid[np.ix_(idx, idx)] / 64.0**2
        k12 = Kernel(eps=k1.eps + k2.eps, resolution=64, weights=weights)
        one_pass = convolve(f, k12)
        assert np.max(np.abs(two_pass.values - one_pass.values)) < 1e-12

    def test_translation_equivariance(self):
        rng = np.random.default_rng(7)
        f = PeriodicGridField(rng.standard_normal((32, 32)))
        k = mollifier_kernel(1 / 8, 32)
        a = convolve(shift_nodes(f, 3, 5), k).values
        b = shift_nodes(convolve(f, k), 3, 5).values
        assert np.array_equal(a, b)

    def test_resolution_mismatch(self):
        f = PeriodicGridField(np.zeros((32, 32)))
        with pytest.raises(GridError, match="kernel sampled"):
            convolve(f, mollifier_kernel(1 / 8, 64))


class TestFiniteDiff:
    def test_constant_is_zero(self):
        f = PeriodicGridField.constant(2.0, 32)
        for scheme in ("central2", "central4"):
            assert np.all(finite_diff(f, "x", scheme).values == 0)

    def test_sin_central4_oracle(self):
        N = 128
        X, _ = node_coordinates(N)
        f = PeriodicGridField(np.sin(2 * np.pi * X))
        d = finite_diff(f, "x", "central4")
        # analytic truncation bound for the 4th-order stencil: h^4 |f^(5)| / 30
        bound = (2 * np.pi) ** 5 / (30 * N**4)
        assert np.max(np.abs(d.values - 2 * np.pi * np.cos(2 * np.pi * X))) < 1.01 * bound

    def test_x_independent_field(self):
        _, Y = node_coordinates(64)
        f = PeriodicGridField(np.cos(2 * np.pi * Y))
        assert np.max(np.abs(finite_diff(f, "x").values)) < 1e-12

    def test_small_grid_rejected(self):
        with pytest.raises(GridError):
            finite_diff(PeriodicGridField(np.zeros((4, 4))), "x")


class TestIntegrate:
    def test_unit_area(self):
        one = PeriodicGridField.constant(1.0, 64)
        assert integrate(one, one) == pytest.approx(1.0, abs=1e-15)

    def test_conformal_volume_against_refined_grid(self):
        def vol(N):
            X, Y = node_coordinates(N)
            u = 0.05 * np.sin(2 * np.pi * X) * np.sin(2 * np.pi * Y)
            return integrate(PeriodicGridField(np.exp(2 * u)))

        assert abs(vol(64) - vol(512)) < 1e-8

    def test_odd_symmetry(self):
        X, _ = node_coordinates(64)
        f = PeriodicGridField(np.sin(2 * np.pi * X))
        assert abs(integrate(f)) < 1e-12


class TestSerialization:
    @pytest.mark.parametrize("shape", [(16, 16), (16, 16, 2), (16, 16, 2, 2)])
    def test_round_trip(self, tmp_path, shape):
        rng = np.random.default_rng(8)
        f = PeriodicGridField(rng.standard_normal(shape))
        base = str(tmp_path / "field")
        write_field(f, base)
        g = read_field(base)
        assert g.rank == f.rank
        assert np.array_equal(g.values, f.values)

    def test_nonfinite_rejected(self):
        bad = np.zeros((16, 16))
        bad[3, 3] = np.nan
        with pytest.raises(GridError, match="non-finite"):
            PeriodicGridField(bad)

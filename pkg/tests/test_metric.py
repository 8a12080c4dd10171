import numpy as np
import pytest

from curvlab import expr as ex
from curvlab.grid import PeriodicGridField, finite_diff, node_coordinates
from curvlab.metric import (
    MetricError,
    STANDARD_METRICS,
    build_components,
    build_conformal,
    equivalence_delta,
    load_metric_spec,
    metric_spec_dict,
    sample,
    smooth,
)

U_SMOOTH = "0.05*sin(2*pi*x)*sin(2*pi*y)"
U_GLUED = "2.0*max(0, 0.04 - persq(x, y, 0.5, 0.5))^2"


@pytest.fixture(scope="module")
def conformal128():
    return sample(build_conformal(U_SMOOTH), 128)


@pytest.fixture(scope="module")
def glued128():
    return sample(build_conformal(U_GLUED), 128)


class TestBuild:
    def test_flat(self):
        m = sample(build_conformal("0"), 64)
        assert m.regularity == "smooth"
        assert m.is_flat()
        assert np.all(m.dg == 0.0)
        ident = np.eye(2)
        assert np.max(np.abs(m.g - ident)) == 0.0

    def test_regularity_inference(self):
        assert build_conformal(U_SMOOTH).regularity == "smooth"
        assert build_conformal(U_GLUED).regularity == "C11"

    def test_min_det_of_conformal(self, conformal128):
        # det g = e^{4u}, minimized where u is minimal
        det = (conformal128.g[..., 0, 0] * conformal128.g[..., 1, 1]
               - conformal128.g[..., 0, 1] ** 2)
        assert det.min() == pytest.approx(np.exp(4 * -0.05), rel=1e-8)

    def test_periodicity_enforced(self):
        with pytest.raises(ex.ExprError, match="periodicity"):
            build_conformal("x")

    def test_components_spd_failure_lists_nodes(self):
        m = build_components("1", "1", "1")  # det == 0 everywhere
        with pytest.raises(MetricError, match="nodes"):
            sample(m, 32)

    def test_spec_round_trip(self):
        for spec in STANDARD_METRICS.values():
            model = load_metric_spec(spec)
            again = load_metric_spec(metric_spec_dict(model))
            assert metric_spec_dict(model) == metric_spec_dict(again)

    def test_bad_spec_kind(self):
        with pytest.raises(MetricError, match="kind"):
            load_metric_spec({"kind": "weird"})

    def test_small_grid_rejected(self):
        with pytest.raises(MetricError, match="N >= 16"):
            sample(build_conformal("0"), 8)


class TestSampledDerivatives:
    def test_symbolic_matches_central4(self, conformal128):
        # spec example: agreement within 1e-5 sup-norm at N = 128
        for i, j in ((0, 0), (1, 1)):
            comp = PeriodicGridField(conformal128.g[..., i, j])
            for k, axis in enumerate("xy"):
                fd = finite_diff(comp, axis, "central4").values
                err = np.max(np.abs(fd - conformal128.dg[..., k, i, j]))
                assert err < 1e-5

    def test_glued_first_derivatives_continuous(self, glued128):
        # straddle the gluing circle: dg jump across it stays below 1e-6
        model = glued128
        eps = 1e-7
        theta = np.linspace(0, 2 * np.pi, 17)[:-1]
        inner = model.eval_dg(0.5 + (0.2 - eps) * np.cos(theta),
                              0.5 + (0.2 - eps) * np.sin(theta))
        outer = model.eval_dg(0.5 + (0.2 + eps) * np.cos(theta),
                              0.5 + (0.2 + eps) * np.sin(theta))
        assert np.max(np.abs(inner - outer)) < 1e-6

    def test_second_derivatives_jump_for_glued(self, glued128):
        eps = 1e-7
        inner = glued128.eval_d2g(np.array([0.7 - eps]), np.array([0.5]))
        outer = glued128.eval_d2g(np.array([0.7 + eps]), np.array([0.5]))
        assert np.max(np.abs(inner - outer)) > 0.1


class TestSmoothing:
    def test_flat_is_fixed_point(self):
        m = sample(build_conformal("0"), 64)
        sm = smooth(m, 1 / 8)
        ident = np.eye(2)
        assert np.max(np.abs(sm.g - ident)) < 1e-14
        assert np.max(np.abs(sm.dg)) < 1e-12
        assert np.max(np.abs(sm.d2g)) < 1e-10

    def test_second_order_rate(self, conformal128):
        # halving eps divides the sup deviation by about four
        d = [np.max(np.abs(smooth(conformal128, eps).g - conformal128.g))
             for eps in (1 / 8, 1 / 16)]
        assert 3.0 < d[0] / d[1] < 5.0

    def test_inverse_identity(self, conformal128):
        sm = smooth(conformal128, 1 / 16)
        prod = np.einsum("...ij,...jk->...ik", sm.g_inv, sm.g)
        ident = np.zeros_like(prod)
        ident[..., 0, 0] = ident[..., 1, 1] = 1.0
        assert np.max(np.abs(prod - ident)) < 1e-10

    def test_c11_derivative_bounds_uniform_in_eps(self, glued128):
        # Lipschitz first derivatives: dg_eps bounded by Lip(g), d2g_eps by
        # the essential sup of the a.e. second derivative, uniformly in eps
        X, Y = node_coordinates(512)
        lip = np.max(np.abs(glued128.eval_d2g(X, Y)))
        for eps in (1 / 8, 1 / 16, 1 / 32):
            sm = smooth(glued128, eps)
            assert np.max(np.abs(sm.d2g)) < 1.05 * lip

    def test_equivalence_band_shrinks(self, conformal128):
        deltas = [equivalence_delta(conformal128, smooth(conformal128, eps))
                  for eps in (1 / 8, 1 / 16, 1 / 32)]
        assert deltas[0] > deltas[1] > deltas[2]

    def test_volume_convergence_within_band(self, conformal128):
        vol = conformal128.volume()
        for eps in (1 / 8, 1 / 16):
            sm = smooth(conformal128, eps)
            delta = equivalence_delta(conformal128, sm)
            assert abs(sm.volume() - vol) <= 2.0 * delta * vol

    def test_oversample_consistency(self, glued128):
        a = smooth(glued128, 1 / 16, oversample=1)
        b = smooth(glued128, 1 / 16, oversample=2)
        assert np.max(np.abs(a.g - b.g)) < 5e-4
        assert np.max(np.abs(a.dg - b.dg)) < 5e-3

    def test_chart_guard(self, conformal128):
        with pytest.raises(Exception, match="chart"):
            smooth(conformal128, 0.6)

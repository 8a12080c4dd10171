import numpy as np
import pytest

from curvlab import expr as ex
from curvlab.curvature import (
    bound_check,
    christoffel,
    distributional_pairing,
    k_eff_entry,
    mollified_distributional_ricci,
    pencil_min_eig,
    riemann_ricci,
)
from curvlab.grid import node_coordinates
from curvlab.metric import MetricError, build_conformal, sample, smooth

U_SMOOTH = "0.05*sin(2*pi*x)*sin(2*pi*y)"
U_GLUED = "2.0*max(0, 0.04 - persq(x, y, 0.5, 0.5))^2"


def conformal_gauss_curvature(N):
    """Analytic oracle K_g = -e^{-2u} Lap u for u = 0.05 sin sin."""
    X, Y = node_coordinates(N)
    u = 0.05 * np.sin(2 * np.pi * X) * np.sin(2 * np.pi * Y)
    return 8 * np.pi**2 * u * np.exp(-2 * u)


def glued_gauss_curvature(N, a=2.0, r0=0.2):
    """Piecewise Laplacian oracle for the glued conformal factor."""
    X, Y = node_coordinates(N)
    dx = X - 0.5 - np.floor(X - 0.5 + 0.5)
    dy = Y - 0.5 - np.floor(Y - 0.5 + 0.5)
    q = dx * dx + dy * dy
    u = a * np.maximum(0.0, r0**2 - q) ** 2
    lap = np.where(q < r0**2, 8 * a * (2 * q - r0**2), 0.0)
    return -np.exp(-2 * u) * lap


@pytest.fixture(scope="module")
def flat64():
    return sample(build_conformal("0"), 64)


@pytest.fixture(scope="module")
def conformal256():
    return sample(build_conformal(U_SMOOTH), 256)


@pytest.fixture(scope="module")
def glued256():
    return sample(build_conformal(U_GLUED), 256)


class TestChristoffel:
    def test_flat_zero(self, flat64):
        assert np.max(np.abs(christoffel(flat64).gamma)) == 0.0

    def test_conformal_oracle(self, conformal256):
        # Gamma^1_11 = u_x, Gamma^1_12 = u_y, Gamma^1_22 = -u_x, and mirrored
        X, Y = node_coordinates(256)
        u = ex.parse_field(U_SMOOTH)
        ux = ex.compile_expr(u.d("x"))(X, Y)
        uy = ex.compile_expr(u.d("y"))(X, Y)
        gam = christoffel(conformal256).gamma
        assert np.max(np.abs(gam[..., 0, 0, 0] - ux)) < 1e-8
        assert np.max(np.abs(gam[..., 0, 0, 1] - uy)) < 1e-8
        assert np.max(np.abs(gam[..., 0, 1, 1] + ux)) < 1e-8
        assert np.max(np.abs(gam[..., 1, 1, 1] - uy)) < 1e-8
        assert np.max(np.abs(gam[..., 1, 0, 0] + uy)) < 1e-8
        assert np.max(np.abs(gam[..., 1, 0, 1] - ux)) < 1e-8

    def test_symmetry_in_lower_indices(self, conformal256):
        gam = christoffel(conformal256).gamma
        assert np.array_equal(gam[..., 0, 1], gam[..., 1, 0])

    def test_glued_smoothed_gamma_uniformly_bounded(self, glued256):
        sups = [np.max(np.abs(christoffel(smooth(glued256, eps)).gamma))
                for eps in (1 / 8, 1 / 16, 1 / 32)]
        X, Y = node_coordinates(512)
        lip = np.max(np.abs(glued256.eval_dg(X, Y)))
        assert all(s <= 1.1 * lip for s in sups)


class TestRiemannRicci:
    def test_flat_zero(self, flat64):
        fields = riemann_ricci(flat64)
        assert np.max(np.abs(fields.riem)) == 0.0
        assert np.max(np.abs(fields.ric)) == 0.0

    def test_conformal_oracle_sup_norm(self, conformal256):
        fields = riemann_ricci(conformal256)
        oracle = conformal_gauss_curvature(256)[..., None, None] * conformal256.g
        assert np.max(np.abs(fields.ric - oracle)) < 5e-3

    def test_proportionality_residual(self, conformal256):
        assert riemann_ricci(conformal256).proportionality_residual() < 1e-6

    def test_ricci_symmetry(self, conformal256):
        ric = riemann_ricci(conformal256).ric
        assert np.max(np.abs(ric[..., 0, 1] - ric[..., 1, 0])) < 1e-12

    def test_glued_direct_path_off_the_circle(self, glued256):
        fields = riemann_ricci(glued256)
        oracle = glued_gauss_curvature(256)[..., None, None] * glued256.g
        X, Y = node_coordinates(256)
        dx = X - 0.5 - np.floor(X + 0.0)
        q = (X - 0.5) ** 2 + (Y - 0.5) ** 2
        away = np.abs(np.sqrt(q) - 0.2) > 2.0 / 256
        err = np.abs(fields.ric - oracle).max(axis=(-2, -1))
        assert np.max(err[away]) < 1e-8

    def test_c1_direct_path_rejected(self):
        m = sample(build_conformal(U_SMOOTH, regularity="C1"), 64)
        with pytest.raises(MetricError, match="C1"):
            riemann_ricci(m)

    def test_frame_independence_of_ric_xx(self, conformal256):
        # Ric(X,X) is invariant under a nodewise change of frame applied to
        # both X components and the tensor
        rng = np.random.default_rng(0)
        fields = riemann_ricci(conformal256)
        ric = fields.ric[::64, ::64]
        Xv = rng.standard_normal(ric.shape[:2] + (2,))
        A = rng.standard_normal(ric.shape[:2] + (2, 2)) + 2 * np.eye(2)
        A_inv = np.linalg.inv(A)
        ric_t = np.einsum("...ai,...ab,...bj->...ij", A_inv, ric, A_inv)
        X_t = np.einsum("...ij,...j->...i", A, Xv)
        lhs = np.einsum("...ij,...i,...j->...", ric, Xv, Xv)
        rhs = np.einsum("...ij,...i,...j->...", ric_t, X_t, X_t)
        assert np.max(np.abs(lhs - rhs)) < 1e-10


class TestBoundCheck:
    def test_flat_k0_holds_every_delta(self, flat64):
        rep = bound_check(flat64, 0.0, [0.5, 0.05, 1e-4], [1 / 8, 1 / 16, 1 / 32])
        assert all(v.holds for v in rep.verdicts)
        assert all(e.k_eff == pytest.approx(0.0, abs=1e-12) for e in rep.entries)

    def test_flat_k_positive_fails_with_witness(self, flat64):
        rep = bound_check(flat64, 0.1, [0.05], [1 / 8, 1 / 16, 1 / 32])
        v = rep.verdicts[0]
        assert not v.holds
        assert v.witness["K_eff"] == pytest.approx(0.0, abs=1e-12)

    def test_conformal_oracle_bound(self, conformal256):
        k_min = float(conformal_gauss_curvature(256).min())
        rep = bound_check(conformal256, k_min, [0.1], [1 / 8, 1 / 16, 1 / 32])
        assert rep.verdicts[0].holds

    def test_keff_converges_to_oracle_min(self, conformal256):
        k_min = float(conformal_gauss_curvature(256).min())
        errs = [abs(k_eff_entry(smooth(conformal256, eps)).k_eff - k_min)
                for eps in (1 / 8, 1 / 16, 1 / 32)]
        assert errs[0] > errs[1] > errs[2]
        assert errs[2] < 0.03

    def test_monotone_in_k(self, conformal256):
        k_min = float(conformal_gauss_curvature(256).min())
        eps_list = [1 / 8, 1 / 16, 1 / 32]
        strong = bound_check(conformal256, k_min, [0.05], eps_list)
        weak = bound_check(conformal256, k_min - 0.3, [0.05], eps_list)
        if strong.verdicts[0].holds:
            assert weak.verdicts[0].holds

    def test_eps_list_must_decrease(self, flat64):
        with pytest.raises(MetricError, match="decreasing"):
            bound_check(flat64, 0.0, [0.1], [1 / 16, 1 / 8])

    def test_report_serialization(self, flat64):
        rep = bound_check(flat64, 0.0, [0.1], [1 / 8, 1 / 16])
        d = rep.to_dict()
        assert d["K"] == 0.0
        assert len(d["entries"]) == 2
        assert d["verdicts"][0]["holds"] is True
        assert "eps0" in d["verdicts"][0]

    def test_pencil_eig_is_kg_for_conformal(self, conformal256):
        fields = riemann_ricci(conformal256)
        lam = pencil_min_eig(fields.ric, conformal256.g)
        # sqrt of the near-zero discriminant leaves ~1e-8 noise
        assert np.max(np.abs(lam - fields.k_scalar)) < 1e-6


class TestDistributionalPairing:
    OMEGA = "1 + 0.5*cos(2*pi*x)*sin(2*pi*y)"

    def test_flat_zero(self, flat64):
        X = (ex.parse_field("1"), ex.parse_field("0"))
        tab = distributional_pairing(flat64, X, ex.parse_field(self.OMEGA),
                                     [1 / 8, 1 / 16, 1 / 32])
        assert abs(tab.extrapolated) < 1e-12
        assert abs(tab.direct_value) < 1e-12

    def test_conformal_matches_oracle(self, conformal256):
        X = (ex.parse_field("1"), ex.parse_field("0"))
        omega = ex.parse_field(self.OMEGA)
        tab = distributional_pairing(conformal256, X, omega,
                                     [1 / 8, 1 / 16, 1 / 32])
        Xg, Yg = node_coordinates(256)
        w = ex.compile_expr(omega)(Xg, Yg)
        oracle = float((conformal_gauss_curvature(256)
                        * conformal256.g[..., 0, 0] * w).mean())
        assert tab.extrapolated == pytest.approx(oracle, abs=1e-4)
        assert tab.direct_value == pytest.approx(oracle, abs=1e-6)

    def test_glued_two_paths_agree(self, glued256):
        X = (ex.parse_field("1"), ex.parse_field("0.5"))
        omega = ex.parse_field(self.OMEGA)
        tab = distributional_pairing(glued256, X, omega, [1 / 8, 1 / 16, 1 / 32])
        assert tab.extrapolated == pytest.approx(tab.direct_value, abs=1e-3)


class TestMollifiedDistributionalRicci:
    def test_flat_zero(self, flat64):
        out = mollified_distributional_ricci(flat64, 1 / 8)
        assert np.max(np.abs(out)) < 1e-12

    def test_smooth_model_commutator_decays_quadratically(self):
        model = sample(build_conformal(U_SMOOTH), 128)
        diffs = []
        for eps in (1 / 8, 1 / 16):
            dist = mollified_distributional_ricci(model, eps, oversample=2)
            ric_eps = riemann_ricci(smooth(model, eps, oversample=2)).ric
            diffs.append(np.max(np.abs(dist - ric_eps)))
        assert 3.0 < diffs[0] / diffs[1] < 5.5

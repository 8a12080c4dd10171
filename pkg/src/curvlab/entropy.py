"""Entropy functionals, displacement-convexity checks, and the pointwise
witness experiment connecting entropy convexity to curvature.

The lower-bound inequality checked here is

    U_nu(mu_t) <= t U_nu(mu_1) + (1-t) U_nu(mu_0)
                  - (1/2) lambda_K(U) t(1-t) W_2(mu_0, mu_1)^2

along constructed displacement interpolations, with nu the normalized
Riemannian volume. The Lagrangian form evaluates the same quantities from
the flow's volume log-Jacobian C(y, t) = -log vol(M) + log det DF_t(y);
for the entropy r log r both routes are computed and compared.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import expr as ex
from .geodesic import flow_jacobian
from .metric import MetricModel, SmoothedMetric
from .metricfield import as_metric_field
from .transport import (
    DiscreteMeasure,
    Interpolation,
    TransportError,
    cost_matrix,
    displacement_interpolation,
    solve_exact,
)


class EntropyError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# entropy functions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EntropyFunction:
    """Convex U on [0, inf) with U(0) = 0; optionally in the DC-infinity class."""

    name: str
    fn: object                      # callable r -> U(r), vectorized
    uprime: object | None = None    # callable r -> U'(r) where available
    uprime_inf: float = np.inf      # lim U(r)/r
    dc_inf: bool = False

    def __post_init__(self):
        r = np.geomspace(1e-4, 1e4, 257)
        vals = self(r)
        # chord test (the grid is non-uniform): f(r2) <= interpolant of neighbours
        lam = (r[2:] - r[1:-1]) / (r[2:] - r[:-2])
        chord = lam * vals[:-2] + (1 - lam) * vals[2:]
        if np.min(chord - vals[1:-1]) < -1e-10 * max(1.0, np.max(np.abs(vals))):
            raise EntropyError(f"{self.name} is not convex on the sample grid")
        if self.dc_inf:
            lam = np.linspace(-12.0, 12.0, 241)
            psi = np.exp(lam) * self(np.exp(-lam))
            d2 = psi[2:] - 2 * psi[1:-1] + psi[:-2]
            if np.min(d2) < -1e-8 * max(1.0, np.max(np.abs(psi))):
                raise EntropyError(f"{self.name} fails the DC-infinity convexity check")

    def __call__(self, r):
        return self.fn(np.asarray(r, dtype=float))


def _xlogx(r):
    r = np.asarray(r, dtype=float)
    out = np.zeros_like(r)
    pos = r > 0
    out[pos] = r[pos] * np.log(r[pos])
    return out


def shannon_entropy() -> EntropyFunction:
    """U(r) = r log r, the canonical DC-infinity member."""
    return EntropyFunction(name="r log r", fn=_xlogx,
                           uprime=lambda r: np.log(r) + 1.0,
                           uprime_inf=np.inf, dc_inf=True)


def power_entropy(p: float) -> EntropyFunction:
    """U(r) = (r^p - r) / (p - 1) for p > 1 (finite U'(inf) iff p <= 1)."""
    if p <= 1:
        raise EntropyError("power entropy needs p > 1")
    return EntropyFunction(
        name=f"(r^{p} - r)/({p} - 1)",
        fn=lambda r: (r**p - r) / (p - 1),
        uprime=lambda r: (p * r ** (p - 1) - 1) / (p - 1),
        uprime_inf=np.inf,
        dc_inf=False,
    )


def lambda_k(U: EntropyFunction, K: float) -> float:
    """inf over r > 0 of K p(r)/r with p(r) = r U'_+(r) - U(r); equals K for r log r."""
    if K == 0.0:
        return 0.0
    if U.name == "r log r":
        return float(K)
    r = np.geomspace(1e-6, 1e6, 721)
    if U.uprime is not None:
        up = U.uprime(r)
    else:
        h = 1e-7
        up = (U(r * (1 + h)) - U(r)) / (r * h)
    q = K * (r * up - U(r)) / r
    k0 = int(np.argmin(q))
    lo = r[max(k0 - 1, 0)]
    hi = r[min(k0 + 1, len(r) - 1)]
    rr = np.geomspace(lo, hi, 257)
    if U.uprime is not None:
        upp = U.uprime(rr)
    else:
        upp = (U(rr * (1 + 1e-7)) - U(rr)) / (rr * 1e-7)
    qq = K * (rr * upp - U(rr)) / rr
    val = float(min(q.min(), qq.min()))
    if k0 in (0, len(r) - 1) and abs(q[k0]) > 10 * abs(q[len(r) // 2]):
        return float("-inf")
    return val


# ---------------------------------------------------------------------------
# entropy of discrete measures
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ReferenceVolume:
    """The normalized volume measure nu = vol_g / vol_g(M)."""

    kind: str
    total: float


def normalized_volume(metric) -> ReferenceVolume:
    if isinstance(metric, SmoothedMetric):
        return ReferenceVolume(kind="vol_g_eps", total=metric.volume())
    if isinstance(metric, MetricModel):
        return ReferenceVolume(kind="vol_g", total=metric.require_sampled().volume())
    raise TypeError("normalized_volume needs a sampled model or smoothed metric")


def entropy_value(U: EntropyFunction, mu: DiscreteMeasure, nu: ReferenceVolume) -> float:
    """U_nu(mu) = sum U(rho_i) nu_i with rho = d mu / d nu on the support.

    mu must be absolutely continuous with its density bookkeeping intact;
    the singular term U'(inf) mu_s is out of scope and support mismatch is
    an error.
    """
    if mu.density is None or mu.nu_weights is None:
        raise EntropyError(
            "measure is not absolutely continuous against the reference volume "
            "(missing density bookkeeping); singular parts are unsupported"
        )
    if np.any(mu.nu_weights <= 0):
        raise EntropyError("support mismatch: nodes with zero reference volume")
    mass = float(np.sum(mu.density * mu.nu_weights) * nu.total)
    if abs(mass - 1.0) > 1e-9:
        raise EntropyError(f"density bookkeeping inconsistent (mass {mass!r})")
    rho = mu.density * nu.total
    return float(np.sum(U(rho) * mu.nu_weights))


# ---------------------------------------------------------------------------
# displacement convexity check
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConvexityReport:
    lam: float
    t: np.ndarray
    lhs: np.ndarray             # measure-side U_nu(mu_t)
    lhs_lagrangian: np.ndarray  # flow-side evaluation (r log r route)
    rhs: np.ndarray
    margins: np.ndarray
    verdict: bool
    tolerance: float
    w2: float
    w2_source: str
    cross_form_gap: float

    def to_dict(self) -> dict:
        return {
            "lambda": self.lam,
            "t": [float(v) for v in self.t],
            "lhs": [float(v) for v in self.lhs],
            "lhs_lagrangian": [float(v) for v in self.lhs_lagrangian],
            "rhs": [float(v) for v in self.rhs],
            "margin": [float(v) for v in self.margins],
            "verdict": bool(self.verdict),
            "tolerance": self.tolerance,
            "w2": self.w2,
            "w2_source": self.w2_source,
            "cross_form_gap": self.cross_form_gap,
        }


def lagrangian_w2_squared(metric, phi: ex.Node, mu0: DiscreteMeasure) -> float:
    """W_2(mu_0, mu_1)^2 = int |grad phi|_g^2 d mu_0 for the witness flow."""
    mf = as_metric_field(metric)
    p = mu0.points
    dphi = np.stack(
        [ex.compile_expr(phi.d(v))(p[..., 0], p[..., 1]) for v in "xy"], axis=-1
    )
    grad = mf.grad(p, dphi)
    g = mf.g(p)
    return float(np.sum(mu0.weights * np.einsum("...ij,...i,...j->...", g, grad, grad)))


def convexity_check(metric, phi: ex.Node, mu0: DiscreteMeasure, K: float,
                    t_list, U: EntropyFunction | None = None,
                    tolerance: float = 1e-3, steps_per_unit: int = 256,
                    w2_solver_check: bool = False, solver_steps: int = 96,
                    cache_dir: str | None = None,
                    interpolation: Interpolation | None = None) -> ConvexityReport:
    """Weak displacement convexity along the constructed geodesic.

    Both the measure-side entropies and the Lagrangian (log-Jacobian) form
    are evaluated; lambda = lambda_K(U). With ``w2_solver_check`` the
    constructed W_2 is cross-checked against the exact solver between the
    endpoint supports.
    """
    U = U or shannon_entropy()
    lam = lambda_k(U, K)
    nu = normalized_volume(metric)
    interp = interpolation or displacement_interpolation(
        metric, phi, mu0, t_list, steps_per_unit=steps_per_unit)
    t = interp.t
    lhs = np.array([entropy_value(U, m, nu) for m in interp.measures])

    # Lagrangian route for r log r: U_nu(mu_t) = int eta0 log eta0 dvol - int eta0 C(y, t) dvol
    vol_weights = mu0.nu_weights * nu.total
    base = float(np.sum(_xlogx(mu0.density) * vol_weights))
    C = -np.log(nu.total) + interp.flow.log_det  # (P, T)
    lhs_lagr = base - np.einsum("p,pt->t", mu0.density * vol_weights, C)

    w2_sq = lagrangian_w2_squared(metric, phi, mu0)
    w2_source = "constructed"
    if w2_solver_check:
        k1 = int(np.argmax(t))
        cost = cost_matrix(metric, mu0.points, interp.measures[k1].points,
                           steps=solver_steps, cache_dir=cache_dir)
        plan, _ = solve_exact(mu0, interp.measures[k1], cost)
        w2_solver = 2.0 * plan.cost_value / max(t[k1], 1e-300) ** 2
        w2_source = f"constructed (solver gap {abs(w2_solver - w2_sq):.2e})"

    u0, u1 = lhs[0], lhs[int(np.argmax(t))]
    t_max = t[int(np.argmax(t))]
    s = t / t_max
    rhs = s * u1 + (1 - s) * u0 - 0.5 * lam * s * (1 - s) * (t_max**2 * w2_sq)
    margins = rhs - lhs
    cross_gap = float(np.max(np.abs(lhs - lhs_lagr))) if U.name == "r log r" else 0.0
    verdict = bool(np.all(margins >= -tolerance))
    return ConvexityReport(lam=float(lam), t=t, lhs=lhs, lhs_lagrangian=lhs_lagr,
                           rhs=rhs, margins=margins, verdict=verdict,
                           tolerance=tolerance, w2=float(np.sqrt(w2_sq) * t_max),
                           w2_source=w2_source, cross_form_gap=cross_gap)


# ---------------------------------------------------------------------------
# witness potentials (the converse-direction experiment)
# ---------------------------------------------------------------------------


def build_witness_potential(metric, x_star, v, r_plateau: float = 0.2,
                            r_outer: float = 0.45,
                            verify_tol: float = 1e-6) -> ex.Node:
    """Potential with grad phi(x*) = -v and vanishing covariant Hessian at x*.

    phi(x) = [g(x*) v]_l (x*^l - x^l)
             - (1/2) Gamma^l_ij(x*) [g(x*) v]_l (x - x*)^i (x - x*)^j,
    cut off by a smooth plateau equal to 1 on the ball of radius r_plateau
    and supported in radius r_outer (< 1/2).
    """
    if not 0 < r_plateau < r_outer < 0.5:
        raise EntropyError("need 0 < r_plateau < r_outer < 1/2")
    mf = as_metric_field(metric)
    x_star = np.asarray(x_star, dtype=float)
    v = np.asarray(v, dtype=float)
    g0 = mf.g(x_star)
    gam0 = mf.christoffel(x_star)
    gv = g0 @ v  # [g(x*) v]_l

    dx = ex.Call("perdiff", (ex.Var("x"), ex.Num(float(x_star[0]))))
    dy = ex.Call("perdiff", (ex.Var("y"), ex.Num(float(x_star[1]))))
    d = (dx, dy)
    lin = -(ex.Num(float(gv[0])) * dx + ex.Num(float(gv[1])) * dy)
    quad = ex.Num(0.0)
    for i in range(2):
        for j in range(2):
            cij = float(np.dot(gam0[:, i, j], gv))
            quad = quad + ex.Num(-0.5 * cij) * d[i] * d[j]
    core = lin + quad

    q = ex.Call("persq", (ex.Var("x"), ex.Var("y"),
                          ex.Num(float(x_star[0])), ex.Num(float(x_star[1]))))
    width = r_outer**2 - r_plateau**2
    s1 = (ex.Num(r_outer**2) - q) / ex.Num(width)
    s2 = (q - ex.Num(r_plateau**2)) / ex.Num(width)
    b1 = ex.Call("bump", (s1,))
    b2 = ex.Call("bump", (s2,))
    plateau = b1 / (b1 + b2)
    phi = ex.simplify(plateau * core)

    _verify_witness(mf, phi, x_star, v, verify_tol)
    return phi


def _verify_witness(mf, phi, x_star, v, tol):
    x, y = np.array([x_star[0]]), np.array([x_star[1]])
    dphi = np.array([float(ex.compile_expr(phi.d(c))(x, y)[0]) for c in "xy"])
    grad = mf.grad(x_star, dphi)
    if np.max(np.abs(grad + v)) > tol:
        raise EntropyError(
            f"witness potential verification failed: grad phi(x*) + v = {grad + v}"
        )
    hess = np.empty((2, 2))
    dx, dy = phi.d("x"), phi.d("y")
    hess[0, 0] = float(ex.compile_expr(dx.d("x"))(x, y)[0])
    hess[0, 1] = hess[1, 0] = float(ex.compile_expr(dx.d("y"))(x, y)[0])
    hess[1, 1] = float(ex.compile_expr(dy.d("y"))(x, y)[0])
    gam = mf.christoffel(x_star)
    cov = hess - np.einsum("kij,k->ij", gam, dphi)
    scale = max(1.0, float(np.linalg.norm(v)))
    if np.max(np.abs(cov)) > tol * scale:
        raise EntropyError(
            f"witness potential verification failed: covariant Hessian at x* = {cov}"
        )


# ---------------------------------------------------------------------------
# the second-derivative identity and pointwise convexity
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SecondDerivativeIdentity:
    lhs: float          # -C''(0) from the flow log-Jacobian
    rhs: float          # Ric(v, v) at x*
    relative_error: float


def c_second_derivative_identity(metric, x_star, v, delta: float = 0.02,
                                 steps_per_unit: int = 512,
                                 phi: ex.Node | None = None) -> SecondDerivativeIdentity:
    """Check -d^2/dt^2 [log det DF_t(x*)]|_0 = Ric(v, v) for the witness flow."""
    mf = as_metric_field(metric)
    x_star = np.asarray(x_star, dtype=float)
    v = np.asarray(v, dtype=float)
    phi = phi if phi is not None else build_witness_potential(mf, x_star, v)
    t_grid = np.array([-2, -1, 0, 1, 2], dtype=float) * delta
    fj = flow_jacobian(mf, phi, x_star, t_grid, steps_per_unit=steps_per_unit)
    C = fj.log_det
    cpp = (-C[0] + 16 * C[1] - 30 * C[2] + 16 * C[3] - C[4]) / (12 * delta**2)
    lhs = -float(cpp)
    _, _, ric = mf.curvature(x_star)
    rhs = float(v @ ric @ v)
    rel = abs(lhs - rhs) / max(abs(rhs), 1e-12)
    return SecondDerivativeIdentity(lhs=lhs, rhs=rhs, relative_error=rel)


@dataclass(frozen=True)
class PointwiseConvexityReport:
    t: np.ndarray
    values: np.ndarray           # -C(x*, t) - (1/2)(K - delta/2) t^2 g(v,v)
    second_differences: np.ndarray
    verdict: bool
    zero_time_gap: float         # Ric(v,v) - (K - delta/2) g(v,v)

    def to_dict(self) -> dict:
        return {
            "t": [float(x) for x in self.t],
            "values": [float(x) for x in self.values],
            "second_differences": [float(x) for x in self.second_differences],
            "verdict": bool(self.verdict),
            "zero_time_gap": self.zero_time_gap,
        }


def pointwise_convexity_check(metric, x_star, v, K: float, delta: float,
                              t_grid=None, steps_per_unit: int = 512,
                              tol_scale: float = 1e-8) -> PointwiseConvexityReport:
    """Convexity of -C(x*, t) - (1/2)(K - delta/2) t^2 g(v, v) in t.

    Nonnegative second differences reproduce, at t = 0, the pointwise
    statement Ric(v, v) >= (K - delta/2) g(v, v).
    """
    mf = as_metric_field(metric)
    x_star = np.asarray(x_star, dtype=float)
    v = np.asarray(v, dtype=float)
    if t_grid is None:
        t_grid = np.linspace(-0.08, 0.08, 9)
    t_grid = np.asarray(t_grid, dtype=float)
    phi = build_witness_potential(mf, x_star, v)
    fj = flow_jacobian(mf, phi, x_star, t_grid, steps_per_unit=steps_per_unit)
    gvv = float(v @ mf.g(x_star) @ v)
    G = -fj.log_det - 0.5 * (K - delta / 2) * t_grid**2 * gvv
    h = t_grid[1] - t_grid[0]
    second = (G[2:] - 2 * G[1:-1] + G[:-2]) / h**2
    scale = 1.0 + abs(K - delta / 2) * gvv + float(np.max(np.abs(fj.log_det)))
    verdict = bool(np.all(second >= -tol_scale * scale))
    _, _, ric = mf.curvature(x_star)
    gap = float(v @ ric @ v - (K - delta / 2) * gvv)
    return PointwiseConvexityReport(t=t_grid, values=G, second_differences=second,
                                    verdict=verdict, zero_time_gap=gap)

"""Discrete optimal transport for the cost d^2/2: c-transforms, exact and
entropic solvers, Monge maps, and displacement interpolation.

Measure geodesics are constructed forward from a c-concave potential (the
flow F_t(y) = exp_y(-t grad phi(y))); the solvers serve as cross-checks, so
OT solver error never enters the curvature-sensitive entropy experiments.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, replace

import numpy as np
from scipy import sparse
from scipy.optimize import linprog

from . import expr as ex
from .curvature import riemann_ricci
from .geodesic import FlowJacobian, distance_pairs, exp_map, flow_jacobian
from .grid import node_coordinates
from .metric import MetricModel, SmoothedMetric, metric_spec_dict
from .metricfield import as_metric_field


class TransportError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# measures
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DiscreteMeasure:
    """Probability measure on finitely many torus points.

    ``density`` holds values of d mu / d vol against the reference volume;
    ``nu_weights`` the quadrature weights of the support nodes under the
    normalized volume nu = vol_g / vol_g(M). Absolutely continuous grid
    measures carry both; bare atomic measures may leave them None.
    """

    points: np.ndarray
    weights: np.ndarray
    reference: str = "vol_g"
    density: np.ndarray | None = None
    nu_weights: np.ndarray | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        w = np.asarray(self.weights, dtype=float)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise TransportError("points must be (P, 2)")
        if np.any(w < 0):
            raise TransportError("weights must be nonnegative")
        if abs(w.sum() - 1.0) > 1e-12:
            raise TransportError(f"weights sum to {w.sum()!r}, not 1")

    @property
    def size(self) -> int:
        return self.points.shape[0]


def grid_ball_measure(model: MetricModel, center, radius: float,
                      profile: str = "bump") -> DiscreteMeasure:
    """Absolutely continuous measure on grid nodes within a periodic ball.

    profile 'uniform' gives the normalized indicator; 'bump' a smooth
    cutoff vanishing at the boundary.
    """
    model.require_sampled()
    N = model.N
    X, Y = node_coordinates(N)
    dx = X - center[0] - np.floor(X - center[0] + 0.5)
    dy = Y - center[1] - np.floor(Y - center[1] + 0.5)
    q = dx * dx + dy * dy
    if profile == "uniform":
        eta = (q < radius**2).astype(float)
    elif profile == "bump":
        with np.errstate(divide="ignore", over="ignore"):
            s = 1.0 - q / radius**2
            eta = np.where(s > 0, np.exp(-1.0 / np.where(s > 0, s, 1.0)), 0.0)
    else:
        raise TransportError(f"unknown profile {profile!r}")
    mask = eta > 0
    if not np.any(mask):
        raise TransportError("ball contains no grid nodes")
    sq = np.sqrt(model.g[..., 0, 0] * model.g[..., 1, 1] - model.g[..., 0, 1] ** 2)
    vol = float(sq.mean())
    w_raw = eta[mask] * sq[mask] / N**2
    Z = w_raw.sum()
    pts = np.stack([X[mask], Y[mask]], axis=-1)
    return DiscreteMeasure(
        points=pts,
        weights=w_raw / Z,
        density=eta[mask] / Z,
        nu_weights=sq[mask] / N**2 / vol,
    )


def atoms(points, weights=None) -> DiscreteMeasure:
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if weights is None:
        weights = np.full(points.shape[0], 1.0 / points.shape[0])
    return DiscreteMeasure(points=points, weights=np.asarray(weights, dtype=float))


# ---------------------------------------------------------------------------
# cost matrices
# ---------------------------------------------------------------------------


COST_CACHE_FORMAT = "curvlab-cost-v1"


def _metric_signature(metric) -> dict:
    if isinstance(metric, SmoothedMetric):
        return {"model": metric_spec_dict(metric.model), "eps": metric.eps,
                "N": metric.N, "oversample": metric.oversample}
    if isinstance(metric, MetricModel):
        return {"model": metric_spec_dict(metric), "N": metric.N}
    return {"model": repr(metric)}


def cost_matrix(metric, src_points, tgt_points, steps: int = 96,
                cache_dir: str | None = None) -> np.ndarray:
    """Matrix of d^2/2 costs; geodesic distances optionally disk-cached."""
    src = np.asarray(src_points, dtype=float)
    tgt = np.asarray(tgt_points, dtype=float)
    key = None
    if cache_dir is not None:
        payload = json.dumps(
            {"metric": _metric_signature(metric), "steps": steps,
             "src": src.round(15).tolist(), "tgt": tgt.round(15).tolist()},
            sort_keys=True,
        ).encode()
        key = hashlib.sha256(payload).hexdigest()
        path = os.path.join(cache_dir, f"{key}.csv")
        if os.path.exists(path):
            d = _read_cost_cache(path, key, src.shape[0], tgt.shape[0])
            if d is not None:
                return 0.5 * d * d
    n, m = src.shape[0], tgt.shape[0]
    xs = np.repeat(src, m, axis=0)
    ys = np.tile(tgt, (n, 1))
    d = distance_pairs(metric, xs, ys, steps=steps).reshape(n, m)
    if cache_dir is not None:
        os.makedirs(cache_dir, exist_ok=True)
        _write_cost_cache(os.path.join(cache_dir, f"{key}.csv"), key, d)
    return 0.5 * d * d


def _write_cost_cache(path, key, d):
    with open(path, "w") as fh:
        fh.write(f"# {COST_CACHE_FORMAT} {key}\n")
        for row in d:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def _read_cost_cache(path, key, n, m):
    with open(path) as fh:
        head = fh.readline().strip()
        if head != f"# {COST_CACHE_FORMAT} {key}":
            return None
        d = np.array([[float(v) for v in line.split(",")] for line in fh])
    if d.shape != (n, m):
        return None
    return d


# ---------------------------------------------------------------------------
# potentials and c-transform
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Potential:
    """Kantorovich pair: psi on the source support, psi^c on the target."""

    psi: np.ndarray
    psi_c: np.ndarray

    def dual_value(self, mu_weights, nu_weights) -> float:
        return float(self.psi @ mu_weights + self.psi_c @ nu_weights)


def c_transform(psi: np.ndarray, cost: np.ndarray, axis: int = 0) -> np.ndarray:
    """Infimal convolution psi^c(y) = min_x (c(x, y) - psi(x)).

    axis 0 transforms a source potential to the target side; axis 1 the
    reverse.
    """
    psi = np.asarray(psi, dtype=float)
    if axis == 0:
        return np.min(cost - psi[:, None], axis=0)
    return np.min(cost - psi[None, :], axis=1)


def is_c_concave(psi: np.ndarray, cost: np.ndarray, tol: float = 1e-9):
    """(flag, residual) with residual = sup |psi^{cc} - psi| on the support."""
    psi_cc = c_transform(c_transform(psi, cost, axis=0), cost, axis=1)
    residual = float(np.max(np.abs(psi_cc - psi)))
    return residual <= tol, residual


def glaudo_check(metric, phi: ex.Node, eps: float, c_star: float | None,
                 diam: float | None = None, n_probe: int = 10) -> dict:
    """Sufficient conditions for c-concavity of a smooth potential:
    |grad phi| <= min(eps / (3 K diam), C*) and Hess phi <= (1 - eps) g.

    K is the sectional (Gauss) curvature upper bound of the metric; with
    K = 0 the gradient condition degenerates to |grad phi| <= C*. C* is
    required input (no closed form is implemented for it).
    """
    if c_star is None:
        raise TransportError("glaudo_check requires the constant C*")
    mf = as_metric_field(metric)
    fields = riemann_ricci(metric)
    K = max(0.0, float(fields.k_scalar.max()))
    if diam is None:
        t = (np.arange(n_probe) + 0.5) / n_probe
        X, Y = np.meshgrid(t, t, indexing="ij")
        pts = np.stack([X.ravel(), Y.ravel()], axis=-1)
        sub = pts[:: max(1, len(pts) // 32)]
        n = len(sub)
        iu, ju = np.triu_indices(n, k=1)
        diam = float(distance_pairs(mf, sub[iu], sub[ju], steps=64).max())
    N = fields.g.shape[0]
    Xg, Yg = node_coordinates(N)
    p = np.stack([Xg, Yg], axis=-1)
    grad, dgrad = _phi_derivatives(mf, phi, p)
    grad_norm = float(np.max(np.sqrt(np.einsum("...ij,...i,...j->...",
                                               mf.g(p), grad, grad))))
    bound = c_star if K == 0 else min(eps / (3 * K * diam), c_star)
    hess = _covariant_hessian(mf, phi, p)
    lam_max = _pencil_max(hess, mf.g(p))
    return {
        "gradient_sup": grad_norm,
        "gradient_bound": float(bound),
        "gradient_ok": grad_norm <= bound,
        "hessian_max_eig": lam_max,
        "hessian_bound": 1.0 - eps,
        "hessian_ok": lam_max <= 1.0 - eps,
        "K_upper": K,
        "diam": float(diam),
        "passes": bool(grad_norm <= bound and lam_max <= 1.0 - eps),
    }


def _phi_derivatives(mf, phi, p):
    x, y = p[..., 0], p[..., 1]
    dphi = np.stack([ex.compile_expr(phi.d(v))(x, y) for v in "xy"], axis=-1)
    grad = mf.grad(p, dphi)
    return grad, dphi


def _covariant_hessian(mf, phi, p):
    x, y = p[..., 0], p[..., 1]
    dx, dy = phi.d("x"), phi.d("y")
    dphi = np.stack([ex.compile_expr(dx)(x, y), ex.compile_expr(dy)(x, y)], axis=-1)
    hess = np.empty(p.shape[:-1] + (2, 2))
    hess[..., 0, 0] = ex.compile_expr(dx.d("x"))(x, y)
    hess[..., 0, 1] = hess[..., 1, 0] = ex.compile_expr(dx.d("y"))(x, y)
    hess[..., 1, 1] = ex.compile_expr(dy.d("y"))(x, y)
    gamma = mf.christoffel(p)
    return hess - np.einsum("...kij,...k->...ij", gamma, dphi)


def _pencil_max(A, B):
    a = B[..., 0, 0] * B[..., 1, 1] - B[..., 0, 1] ** 2
    b = (A[..., 0, 0] * B[..., 1, 1] + A[..., 1, 1] * B[..., 0, 0]
         - 2 * A[..., 0, 1] * B[..., 0, 1])
    c = A[..., 0, 0] * A[..., 1, 1] - A[..., 0, 1] ** 2
    disc = np.sqrt(np.maximum(b * b - 4 * a * c, 0.0))
    return float(((b + disc) / (2 * a)).max())


# ---------------------------------------------------------------------------
# solvers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TransportPlan:
    coupling: np.ndarray
    cost_value: float
    marginal_error: float
    converged: bool = True


def solve_exact(mu: DiscreteMeasure, nu: DiscreteMeasure, cost: np.ndarray,
                support_cap: int = 4096) -> tuple[TransportPlan, Potential]:
    """Optimal plan by linear programming, duals recovered and tightened.

    The returned potentials satisfy psi(x) + psi^c(y) <= c(x, y) exactly
    (psi is replaced by its double c-transform and psi^c recomputed).
    """
    n, m = mu.size, nu.size
    if n > support_cap or m > support_cap:
        raise TransportError(f"support sizes {n}x{m} exceed the cap {support_cap}")
    if cost.shape != (n, m):
        raise TransportError("cost matrix shape mismatch")
    a, b = mu.weights, nu.weights
    if abs(a.sum() - b.sum()) > 1e-9:
        raise TransportError("marginals are not balanced")

    rows_i = np.repeat(np.arange(n), m)
    cols = np.arange(n * m)
    rows_j = np.tile(np.arange(m), n) + n
    A = sparse.coo_matrix(
        (np.ones(2 * n * m), (np.concatenate([rows_i, rows_j]), np.concatenate([cols, cols]))),
        shape=(n + m, n * m),
    ).tocsr()
    rhs = np.concatenate([a, b])
    res = linprog(cost.ravel(), A_eq=A, b_eq=rhs, bounds=(0, None), method="highs")
    if not res.success:
        raise TransportError(f"exact solver failed: {res.message}")
    plan = res.x.reshape(n, m)
    marg = max(float(np.max(np.abs(plan.sum(axis=1) - a))),
               float(np.max(np.abs(plan.sum(axis=0) - b))))
    value = float(np.sum(plan * cost))

    # recover duals, then tighten by a double c-transform (exact feasibility);
    # the multiplier sign convention is pinned by whichever seed attains the
    # larger dual value
    u = np.asarray(res.eqlin.marginals[:n], dtype=float)
    best = None
    for seed in (u, -u):
        psi = c_transform(c_transform(seed, cost, axis=0), cost, axis=1)
        psi_c = c_transform(psi, cost, axis=0)
        val = psi @ a + psi_c @ b
        if best is None or val > best[0]:
            best = (val, Potential(psi=psi, psi_c=psi_c))
    return (TransportPlan(coupling=plan, cost_value=value, marginal_error=marg),
            best[1])


def solve_sinkhorn(mu: DiscreteMeasure, nu: DiscreteMeasure, cost: np.ndarray,
                   reg: float, max_iter: int = 5000,
                   tol: float = 1e-8) -> tuple[TransportPlan, Potential]:
    """Entropically regularized plan by log-domain Sinkhorn iterations."""
    if reg <= 0:
        raise TransportError("regularization must be positive")
    a, b = mu.weights, nu.weights
    la = np.where(a > 0, np.log(np.where(a > 0, a, 1.0)), -np.inf)
    lb = np.where(b > 0, np.log(np.where(b > 0, b, 1.0)), -np.inf)
    f = np.zeros(mu.size)
    g = np.zeros(nu.size)
    err = np.inf
    for _ in range(max_iter):
        M = (f[:, None] + g[None, :] - cost) / reg
        g = g - reg * _logsumexp(M + la[:, None], axis=0)
        M = (f[:, None] + g[None, :] - cost) / reg
        f = f - reg * _logsumexp(M + lb[None, :], axis=1)
        M = (f[:, None] + g[None, :] - cost) / reg
        plan = np.exp(M + la[:, None] + lb[None, :])
        err = max(float(np.max(np.abs(plan.sum(axis=1) - a))),
                  float(np.max(np.abs(plan.sum(axis=0) - b))))
        if err <= tol:
            break
    converged = err <= tol
    value = float(np.sum(plan * cost))
    return (TransportPlan(coupling=plan, cost_value=value, marginal_error=err,
                          converged=converged),
            Potential(psi=f, psi_c=c_transform(f, cost, axis=0)))


def _logsumexp(M, axis):
    mx = np.max(M, axis=axis, keepdims=True)
    mx = np.where(np.isfinite(mx), mx, 0.0)
    return np.squeeze(mx, axis) + np.log(np.sum(np.exp(M - mx), axis=axis))


def wasserstein2(mu: DiscreteMeasure, nu: DiscreteMeasure, metric,
                 cost: np.ndarray | None = None, steps: int = 96,
                 cache_dir: str | None = None) -> float:
    """W_2(mu, nu) = sqrt(2 x optimal d^2/2-cost)."""
    if cost is None:
        cost = cost_matrix(metric, mu.points, nu.points, steps=steps,
                           cache_dir=cache_dir)
    plan, _ = solve_exact(mu, nu, cost)
    return float(np.sqrt(max(2.0 * plan.cost_value, 0.0)))


# ---------------------------------------------------------------------------
# Monge maps and displacement interpolation
# ---------------------------------------------------------------------------


def monge_map(metric, psi, points, steps: int = 128,
              grid_potential: np.ndarray | None = None) -> np.ndarray:
    """T(x) = exp_x(-grad psi(x)) on the given support points.

    psi is an expression tree (symbolic gradient); alternatively pass
    ``grid_potential`` sampled on the metric's grid, whose gradient is
    taken by central differences and read off at the support nodes.
    """
    mf = as_metric_field(metric)
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if psi is not None:
        x, y = pts[..., 0], pts[..., 1]
        dpsi = np.stack([ex.compile_expr(psi.d(v))(x, y) for v in "xy"], axis=-1)
    elif grid_potential is not None:
        dpsi = _grid_gradient_at(grid_potential, pts)
    else:
        raise TransportError("monge_map needs a symbolic or grid potential")
    v = -mf.grad(pts, dpsi)
    return exp_map(mf, pts, v, steps=steps)


def _grid_gradient_at(values: np.ndarray, pts: np.ndarray) -> np.ndarray:
    from .grid import PeriodicGridField, finite_diff

    N = values.shape[0]
    f = PeriodicGridField(values)
    gx = finite_diff(f, "x", "central4").values
    gy = finite_diff(f, "y", "central4").values
    idx = np.round(pts * N).astype(int) % N
    on_node = np.max(np.abs(pts * N - np.round(pts * N)))
    if on_node > 1e-9:
        raise TransportError("grid potential requires support on grid nodes")
    return np.stack([gx[idx[:, 0], idx[:, 1]], gy[idx[:, 0], idx[:, 1]]], axis=-1)


@dataclass(frozen=True)
class Interpolation:
    """Displacement interpolation mu_t = (F_t)_# mu_0 with densities."""

    t: np.ndarray
    measures: list
    flow: FlowJacobian
    mass_fd: np.ndarray | None  # mass recomputed with finite-difference dets

    def measure_at(self, k: int) -> DiscreteMeasure:
        return self.measures[k]


def displacement_interpolation(metric, phi: ex.Node, mu0: DiscreteMeasure,
                               t_list, steps_per_unit: int = 256,
                               fd_mass_check: bool = True) -> Interpolation:
    """Push mu_0 through F_t(y) = exp_y(-t grad phi(y)) with densities from
    the volume Jacobian: rho_t(F_t(y)) = rho_0(y) / det_vol DF_t(y)."""
    if mu0.density is None or mu0.nu_weights is None:
        raise TransportError("mu0 must be absolutely continuous (density bookkeeping)")
    t_grid = np.asarray(sorted(set([0.0] + [float(t) for t in t_list])))
    fj = flow_jacobian(metric, phi, mu0.points, t_grid, steps_per_unit=steps_per_unit)
    measures = []
    mass_fd = None
    jac_det = np.exp(fj.log_det)  # (P, T)
    for k, t in enumerate(t_grid):
        pts = fj.positions[:, k, :] % 1.0
        dens = mu0.density / jac_det[:, k]
        nu_w = mu0.nu_weights * jac_det[:, k]
        measures.append(DiscreteMeasure(points=pts, weights=mu0.weights,
                                        reference=mu0.reference,
                                        density=dens, nu_weights=nu_w))
    if fd_mass_check:
        mass_fd = _fd_mass(metric, phi, mu0, fj, t_grid, steps_per_unit)
        if np.max(np.abs(mass_fd - 1.0)) > 1e-6:
            raise TransportError(
                f"pushforward mass check failed: |mass - 1| = "
                f"{np.max(np.abs(mass_fd - 1.0)):.2e}"
            )
    return Interpolation(t=t_grid, measures=measures, flow=fj, mass_fd=mass_fd)


def _fd_mass(metric, phi, mu0, fj: FlowJacobian, t_grid, steps_per_unit,
             offset: float = 1e-5) -> np.ndarray:
    """Pushforward mass with the density taken from finite-difference flow
    Jacobians against the variational-J quadrature: equals 1 exactly when
    the two determinants agree."""
    mf = as_metric_field(metric)
    from .geodesic import _flow_on_grid, gradient_field

    grad, _ = gradient_field(mf, phi)
    cols = [None, None]
    for c in range(2):
        sides = []
        for sign in (+1, -1):
            yp = mu0.points.copy()
            yp[:, c] += sign * offset
            pos, _, _ = _flow_on_grid(mf, yp, -grad(yp), None, None, t_grid,
                                      steps_per_unit)
            sides.append(pos)
        cols[c] = (sides[0] - sides[1]) / (2 * offset)  # (P, T, 2)
    det_fd = (cols[0][..., 0] * cols[1][..., 1] - cols[0][..., 1] * cols[1][..., 0])
    sq0 = mf.sqrt_det(mu0.points)
    sqt = mf.sqrt_det(fj.positions)
    det_vol_fd = det_fd * sqt / sq0[:, None]
    ratio = np.exp(fj.log_det) / det_vol_fd
    return np.einsum("p,pt->t", mu0.weights, ratio)

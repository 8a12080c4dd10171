"""Geodesic flow, exponential/log maps, distance, flow Jacobians, and the
Riccati comparison machinery.

All integrators are classical RK4 on batched states; positions live in the
universal cover (plain R^2 coordinates, metric periodic), so winding
classes are tracked by lifting targets rather than wrapping positions.

The flow Jacobian J(t) is the coordinate differential of y -> F_t(y),
cross-validated against finite differences of the integrated map (the
finite-difference oracle is authoritative for sign conventions; for
F_t(y) = exp_y(-t grad phi(y)) it fixes J'(0) = -D(grad phi)).  The
reported log-determinant is the volume Jacobian, i.e. the determinant in
parallel orthonormal frames:

    log_det(t) = log det J(t) + (log det g(gamma(t)) - log det g(y)) / 2,

which is the quantity entering pushforward densities and entropies.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import expr as ex
from .metric import _det2, _inv2
from .metricfield import MetricField, as_metric_field


class GeodesicError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# batched RK4 flow
# ---------------------------------------------------------------------------


def _rhs(mf: MetricField, x, v, A=None, B=None, E=None, need_dgamma=False):
    """Time derivatives of the geodesic / variational / frame state."""
    if need_dgamma:
        gamma, dgamma = mf.gamma_and_dgamma(x)
    else:
        gamma = mf.christoffel(x)
        dgamma = None
    dx = v
    dv = -np.einsum("...kij,...i,...j->...k", gamma, v, v)
    dA = dB = dE = None
    if A is not None:
        dA = B
        dB = (-np.einsum("...mkij,...mc,...i,...j->...kc", dgamma, A, v, v)
              - 2.0 * np.einsum("...kij,...i,...jc->...kc", gamma, v, B))
    if E is not None:
        dE = -np.einsum("...kij,...i,...ja->...ka", gamma, v, E)
    return dx, dv, dA, dB, dE


def _rk4_flow(mf: MetricField, y, w, steps: int, t_end: float = 1.0,
              jacobi_init=None, with_frame=False, record=True):
    """Integrate the geodesic flow from (y, w) to t_end.

    Returns dict of arrays with leading time axis when record=True, else
    final state only. Batched over arbitrary leading shape of y/w.
    """
    if steps < 16:
        raise GeodesicError("step count must be at least 16")
    x = np.array(y, dtype=float)
    v = np.array(w, dtype=float)
    A = B = E = None
    if jacobi_init is not None:
        A = np.array(jacobi_init[0], dtype=float)
        B = np.array(jacobi_init[1], dtype=float)
    if with_frame:
        E = _orthonormal_frame(mf, x, v)
    h = t_end / steps
    need_dg = A is not None

    def pack():
        return (x.copy(), v.copy(),
                None if A is None else A.copy(),
                None if B is None else B.copy(),
                None if E is None else E.copy())

    states = [pack()] if record else None
    for _ in range(steps):
        k1 = _rhs(mf, x, v, A, B, E, need_dg)
        x2 = x + 0.5 * h * k1[0]
        v2 = v + 0.5 * h * k1[1]
        A2 = None if A is None else A + 0.5 * h * k1[2]
        B2 = None if B is None else B + 0.5 * h * k1[3]
        E2 = None if E is None else E + 0.5 * h * k1[4]
        k2 = _rhs(mf, x2, v2, A2, B2, E2, need_dg)
        x3 = x + 0.5 * h * k2[0]
        v3 = v + 0.5 * h * k2[1]
        A3 = None if A is None else A + 0.5 * h * k2[2]
        B3 = None if B is None else B + 0.5 * h * k2[3]
        E3 = None if E is None else E + 0.5 * h * k2[4]
        k3 = _rhs(mf, x3, v3, A3, B3, E3, need_dg)
        x4 = x + h * k3[0]
        v4 = v + h * k3[1]
        A4 = None if A is None else A + h * k3[2]
        B4 = None if B is None else B + h * k3[3]
        E4 = None if E is None else E + h * k3[4]
        k4 = _rhs(mf, x4, v4, A4, B4, E4, need_dg)
        x = x + (h / 6) * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
        v = v + (h / 6) * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
        if A is not None:
            A = A + (h / 6) * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2])
            B = B + (h / 6) * (k1[3] + 2 * k2[3] + 2 * k3[3] + k4[3])
        if E is not None:
            E = E + (h / 6) * (k1[4] + 2 * k2[4] + 2 * k3[4] + k4[4])
        if not np.all(np.isfinite(x)) or not np.all(np.isfinite(v)):
            raise GeodesicError("trajectory left numerical sanity (non-finite state)")
        if record:
            states.append(pack())

    if not record:
        return {"x": x, "v": v, "A": A, "B": B, "E": E}
    out = {"t": np.linspace(0.0, t_end, steps + 1)}
    out["x"] = np.stack([s[0] for s in states])
    out["v"] = np.stack([s[1] for s in states])
    if A is not None:
        out["A"] = np.stack([s[2] for s in states])
        out["B"] = np.stack([s[3] for s in states])
    if E is not None:
        out["E"] = np.stack([s[4] for s in states])
    return out


def _orthonormal_frame(mf: MetricField, x, v):
    """g-orthonormal frame at x with e1 along v (or along d/dx if v = 0)."""
    g = mf.g(x)
    e1 = np.array(v, dtype=float)
    nrm = np.sqrt(np.einsum("...ij,...i,...j->...", g, e1, e1))
    fallback = np.zeros_like(e1)
    fallback[..., 0] = 1.0
    small = nrm < 1e-14
    e1 = np.where(small[..., None], fallback, e1 / np.where(small, 1.0, nrm)[..., None])
    # orthogonal complement by Gram-Schmidt under g
    e2 = np.zeros_like(e1)
    e2[..., 1] = 1.0
    proj = np.einsum("...ij,...i,...j->...", g, e1, e2)
    e2 = e2 - proj[..., None] * e1
    nrm2 = np.sqrt(np.einsum("...ij,...i,...j->...", g, e2, e2))
    e2 = e2 / nrm2[..., None]
    return np.stack([e1, e2], axis=-1)  # columns are frame vectors


# ---------------------------------------------------------------------------
# single-geodesic interface
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GeodesicSolution:
    y: np.ndarray
    w: np.ndarray
    t: np.ndarray
    positions: np.ndarray   # (K+1, 2)
    velocities: np.ndarray  # (K+1, 2)
    jacobi: np.ndarray      # (K+1, 2, 2), J(0) = I (variations of y, fixed w)
    energies: np.ndarray    # g(γ̇, γ̇) along the trajectory

    def energy_drift(self) -> float:
        e0 = self.energies[0]
        scale = abs(e0) if e0 != 0 else 1.0
        return float(np.max(np.abs(self.energies - e0)) / scale)


def integrate_geodesic(metric, y, w, steps: int = 256) -> GeodesicSolution:
    """RK4 geodesic through (y, w) on [0, 1] with the variational propagator."""
    mf = as_metric_field(metric)
    y = np.asarray(y, dtype=float)
    w = np.asarray(w, dtype=float)
    ident = np.eye(2)
    out = _rk4_flow(mf, y, w, steps, jacobi_init=(ident, np.zeros((2, 2))))
    g = mf.g(out["x"])
    energies = np.einsum("...ij,...i,...j->...", g, out["v"], out["v"])
    return GeodesicSolution(y=y, w=w, t=out["t"], positions=out["x"],
                            velocities=out["v"], jacobi=out["A"], energies=energies)


def exp_map(metric, y, v, steps: int = 128) -> np.ndarray:
    """exp_y(v): endpoint of the unit-time geodesic (batched)."""
    mf = as_metric_field(metric)
    y = np.asarray(y, dtype=float)
    v = np.asarray(v, dtype=float)
    if mf.is_flat:
        return y + v
    return _rk4_flow(mf, y, v, steps, record=False)["x"]


def _wrap(d):
    return d - np.floor(d + 0.5)


def log_map(metric, y, x, steps: int = 128, max_iter: int = 50,
            tol: float = 1e-9, initial=None) -> np.ndarray:
    """Solve exp_y(v) = x (damped Gauss-Newton; batched).

    The target is lifted to the nearest representative of x in the cover of
    y unless ``initial`` supplies a lift/initial guess. Raises when the
    residual does not reach ``tol`` (leaving the normal neighbourhood).
    """
    mf = as_metric_field(metric)
    y = np.asarray(y, dtype=float)
    x = np.asarray(x, dtype=float)
    target = y + _wrap(x - y) if initial is None else y + np.asarray(initial, dtype=float)
    single = y.ndim == 1
    v, resid, ok = _shoot(mf, y, target, steps, max_iter, tol)
    if not np.all(ok):
        worst = float(np.max(resid))
        raise GeodesicError(
            f"log map did not converge within {max_iter} iterations "
            f"(best residual {worst:.3e}); points may leave the normal neighbourhood"
        )
    return v[0] if single and v.ndim == 2 else v


def _shoot(mf: MetricField, y, target, steps, max_iter, tol):
    """Batched damped Gauss-Newton for exp_y(v) = target (lifted coords).

    Converged rows are dropped from subsequent integrations (flat leading
    batch shape only).
    """
    if mf.is_flat:
        v = target - y
        return v, np.zeros(v.shape[:-1]), np.ones(v.shape[:-1], dtype=bool)
    y = np.atleast_2d(y)
    target = np.atleast_2d(target)
    P = y.shape[0]
    v = target - y
    rn = np.full(P, np.inf)
    ident = np.eye(2)

    def endpoint(ys, vel):
        return _rk4_flow(mf, ys, vel, steps, record=False)["x"]

    def endpoint_jac(ys, vel):
        zeros = np.zeros(ys.shape + (2,))
        ids = np.broadcast_to(ident, ys.shape + (2,)).copy()
        out = _rk4_flow(mf, ys, vel, steps, jacobi_init=(zeros, ids), record=False)
        return out["x"], out["A"]

    active = np.arange(P)
    end, J = endpoint_jac(y, v)
    r = target - end
    rn = np.linalg.norm(r, axis=-1)
    for _ in range(max_iter):
        live = np.nonzero(rn > tol)[0]
        if live.size == 0:
            break
        ys = y[live]
        ts = target[live]
        vs = v[live]
        end_live, Js = endpoint_jac(ys, vs)
        delta = _solve2(Js, ts - end_live)
        alpha = np.ones(live.size)
        rn_live = rn[live]
        for _ in range(8):
            trial = vs + alpha[..., None] * delta
            rn_t = np.linalg.norm(ts - endpoint(ys, trial), axis=-1)
            worse = (rn_t > rn_live) & (alpha > 1.0 / 256)
            if not np.any(worse):
                break
            alpha = np.where(worse, alpha / 2, alpha)
        vs = vs + alpha[..., None] * delta
        v[live] = vs
        rn[live] = np.linalg.norm(ts - endpoint(ys, vs), axis=-1)
    return v, rn, rn <= tol


def _solve2(J, r):
    det = J[..., 0, 0] * J[..., 1, 1] - J[..., 0, 1] * J[..., 1, 0]
    det = np.where(np.abs(det) < 1e-300, 1e-300, det)
    out = np.empty_like(r)
    out[..., 0] = (J[..., 1, 1] * r[..., 0] - J[..., 0, 1] * r[..., 1]) / det
    out[..., 1] = (-J[..., 1, 0] * r[..., 0] + J[..., 0, 0] * r[..., 1]) / det
    return out


# ---------------------------------------------------------------------------
# distance
# ---------------------------------------------------------------------------

_WINDING = np.array([(a, b) for a in (-1, 0, 1) for b in (-1, 0, 1)], dtype=float)


def distance(metric, x, y, steps: int = 96) -> float:
    """Riemannian distance by shooting over the 9 winding classes."""
    d = distance_pairs(metric, np.asarray(x, float)[None, :], np.asarray(y, float)[None, :],
                       steps=steps)
    return float(d[0])


def distance_pairs(metric, xs, ys, steps: int = 96) -> np.ndarray:
    """Batched distance for (P, 2) point arrays (pairwise by row)."""
    mf = as_metric_field(metric)
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    disp = _wrap(xs - ys)
    if mf.is_flat:
        return np.linalg.norm(disp, axis=-1)
    lam_min, lam_max = mf.eig_range()
    # candidate targets per winding class, pruned by the metric bounds
    cand = disp[:, None, :] + _WINDING[None, :, :]
    flat_len = np.linalg.norm(cand, axis=-1)
    ub = np.sqrt(lam_max) * flat_len.min(axis=1)
    keep = np.sqrt(lam_min) * flat_len <= ub[:, None] * (1 + 1e-12)

    P = xs.shape[0]
    best = np.full(P, np.inf)
    rows, classes = np.nonzero(keep)
    y_b = ys[rows]
    t_b = ys[rows] + cand[rows, classes]
    v, resid, ok = _shoot(mf, y_b, t_b, steps, max_iter=50, tol=1e-9)
    g = mf.g(y_b)
    lengths = np.sqrt(np.einsum("...ij,...i,...j->...", g, v, v))
    lengths = np.where(ok, lengths, np.inf)
    np.minimum.at(best, rows, lengths)
    bad = ~np.isfinite(best)
    if np.any(bad):
        dg = _dijkstra_distances(mf, xs[bad], ys[bad])
        best[bad] = dg
    return best


def distance_matrix(metric, points, steps: int = 96) -> np.ndarray:
    """Symmetric matrix of pairwise distances."""
    points = np.asarray(points, dtype=float)
    n = points.shape[0]
    iu, ju = np.triu_indices(n, k=1)
    d = distance_pairs(metric, points[iu], points[ju], steps=steps)
    out = np.zeros((n, n))
    out[iu, ju] = d
    out[ju, iu] = d
    return out


def _dijkstra_distances(mf: MetricField, xs, ys, n_grid: int = 64):
    """Coarse 16-neighbour graph fallback (accuracy-limited)."""
    from scipy.sparse import coo_matrix
    from scipy.sparse.csgraph import dijkstra

    t = np.arange(n_grid) / n_grid
    X, Y = np.meshgrid(t, t, indexing="ij")
    nodes = np.stack([X.ravel(), Y.ravel()], axis=-1)
    offsets = [(1, 0), (0, 1), (1, 1), (1, -1), (2, 1), (1, 2), (2, -1), (1, -2)]
    rows, cols, vals = [], [], []
    idx = np.arange(n_grid * n_grid).reshape(n_grid, n_grid)
    for (da, db) in offsets:
        nbr = np.roll(np.roll(idx, -da, axis=0), -db, axis=1)
        seg = np.array([da, db]) / n_grid
        mid = nodes + 0.5 * seg
        a = np.sqrt(np.einsum("...ij,...i,...j->...", mf.g(nodes), seg, seg))
        b = np.sqrt(np.einsum("...ij,...i,...j->...", mf.g(mid), seg, seg))
        w = (a + 4 * b + np.sqrt(np.einsum(
            "...ij,...i,...j->...", mf.g(nodes + seg), seg, seg))) / 6
        rows.append(idx.ravel())
        cols.append(nbr.ravel())
        vals.append(w.ravel())
    graph = coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n_grid**2, n_grid**2),
    )
    out = np.empty(xs.shape[0])
    for k, (x, y) in enumerate(zip(xs, ys)):
        si = idx[int(round(x[0] * n_grid)) % n_grid, int(round(x[1] * n_grid)) % n_grid]
        ti = idx[int(round(y[0] * n_grid)) % n_grid, int(round(y[1] * n_grid)) % n_grid]
        out[k] = dijkstra(graph, directed=False, indices=si)[ti]
    return out


def grad_half_dist_sq(metric, y, x, steps: int = 128) -> np.ndarray:
    """Gradient at x of z -> d^2(z, y)/2: the position vector sigma'(1)."""
    mf = as_metric_field(metric)
    y = np.asarray(y, dtype=float)
    x = np.asarray(x, dtype=float)
    v = log_map(mf, y, x, steps=steps)
    if mf.is_flat:
        return _wrap(x - y)
    out = _rk4_flow(mf, y, v, steps, record=False)
    return out["v"]


# ---------------------------------------------------------------------------
# flow Jacobians for F_t(y) = exp_y(-t grad phi(y))
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FlowJacobian:
    t: np.ndarray             # (T,)
    positions: np.ndarray     # (..., T, 2)
    velocities: np.ndarray    # (..., T, 2)
    jacobians: np.ndarray     # (..., T, 2, 2) coordinate DF_t
    log_det: np.ndarray       # (..., T) volume log-Jacobian
    fd_deviation: float | None = None


def gradient_field(metric, phi: ex.Node):
    """Callables p -> grad phi(p) and p -> D(grad phi)(p) (coordinate)."""
    mf = as_metric_field(metric)
    dphi = [phi.d("x"), phi.d("y")]
    d2phi = [[dphi[0].d("x"), dphi[0].d("y")], [dphi[1].d("x"), dphi[1].d("y")]]

    def grad(p):
        dp = np.stack([ex.compile_expr(t)(p[..., 0], p[..., 1]) for t in dphi], axis=-1)
        return mf.grad(p, dp)

    def dgrad(p):
        x, y = p[..., 0], p[..., 1]
        dp = np.stack([ex.compile_expr(t)(x, y) for t in dphi], axis=-1)
        hess = np.empty(p.shape[:-1] + (2, 2))
        for i in range(2):
            for j in range(2):
                hess[..., i, j] = ex.compile_expr(d2phi[i][j])(x, y)
        g_inv = mf.g_inv(p)
        dg = mf.dg(p)
        dg_inv = -np.einsum("...ka,...cab,...bm->...ckm", g_inv, dg, g_inv)
        # D(grad phi)^k_c = d_c(g^{km} d_m phi)
        return (np.einsum("...ckm,...m->...kc", dg_inv, dp)
                + np.einsum("...km,...mc->...kc", g_inv, hess))

    return grad, dgrad


def flow_jacobian(metric, phi: ex.Node, y, t_grid, steps_per_unit: int = 256,
                  fd_check: bool = False, fd_offset: float = 1e-5) -> FlowJacobian:
    """J(t) = D_y F_t and the volume log-determinant along the witness flow.

    ``t_grid`` must be a uniform grid containing 0 (negative times allowed).
    Raises when det J <= 0 anywhere on the grid (flow leaves the
    bi-Lipschitz regime).
    """
    mf = as_metric_field(metric)
    y = np.asarray(y, dtype=float)
    t_grid = np.asarray(t_grid, dtype=float)
    grad, dgrad = gradient_field(mf, phi)
    w = -grad(y)
    b0 = -dgrad(y)
    ident = np.broadcast_to(np.eye(2), y.shape + (2,)).copy()

    pos, vel, jac = _flow_on_grid(mf, y, w, b0, ident, t_grid, steps_per_unit)
    det = _det2(jac)
    if np.any(det <= 0):
        bad_t = t_grid[np.argwhere(det <= 0)[0][-1]]
        raise GeodesicError(f"flow Jacobian loses invertibility at t = {bad_t:g}")
    log_det = (np.log(det)
               + 0.5 * (np.log(_det2(mf.g(pos))) - np.log(_det2(mf.g(y)))[..., None]))

    fd_dev = None
    if fd_check:
        fd_dev = 0.0
        for c in range(2):
            for sign in (+1, -1):
                yp = y.copy()
                yp[..., c] += sign * fd_offset
                wp = -grad(yp)
                pos_p, _, _ = _flow_on_grid(mf, yp, wp, None, None, t_grid, steps_per_unit)
                if sign > 0:
                    plus = pos_p
                else:
                    fd_col = (plus - pos_p) / (2 * fd_offset)
                    fd_dev = max(fd_dev, float(np.max(np.abs(fd_col - jac[..., :, c]))))
    return FlowJacobian(t=t_grid, positions=pos, velocities=vel, jacobians=jac,
                        log_det=log_det, fd_deviation=fd_dev)


def _flow_on_grid(mf, y, w, b0, a0, t_grid, steps_per_unit):
    """Record the geodesic flow at the exact nodes of a uniform t_grid."""
    T = len(t_grid)
    shape = y.shape[:-1]
    pos = np.empty(shape + (T, 2))
    vel = np.empty(shape + (T, 2))
    jac = np.empty(shape + (T, 2, 2)) if a0 is not None else None
    for part in (t_grid[t_grid >= 0], t_grid[t_grid < 0][::-1]):
        if len(part) == 0:
            continue
        x_cur = y.copy()
        v_cur = w.copy()
        A_cur = None if a0 is None else a0.copy()
        B_cur = None if b0 is None else b0.copy()
        prev = 0.0
        for t_node in part:
            seg = float(t_node - prev)
            if seg != 0.0:
                sub = max(16, int(np.ceil(steps_per_unit * abs(seg))))
                init = None if A_cur is None else (A_cur, B_cur)
                out = _rk4_flow(mf, x_cur, v_cur, sub, t_end=seg,
                                jacobi_init=init, record=False)
                x_cur, v_cur = out["x"], out["v"]
                if A_cur is not None:
                    A_cur, B_cur = out["A"], out["B"]
            prev = float(t_node)
            j = int(np.nonzero(t_grid == t_node)[0][0])
            pos[..., j, :] = x_cur
            vel[..., j, :] = v_cur
            if jac is not None:
                jac[..., j, :, :] = A_cur
    return pos, vel, jac


# ---------------------------------------------------------------------------
# Riccati comparison
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RiccatiEnvelope:
    H: float
    s0: np.ndarray            # initial eigenvalues (n,)
    t: np.ndarray             # (T,), truncated at blow-up when needed
    lower: np.ndarray         # (n, T): tan branch per eigenvalue
    upper: np.ndarray         # (n, T): tanh branch per eigenvalue
    blow_up_time: float | None
    truncated: bool


def _tau_tan(t, H):
    theta = t * np.sqrt(H)
    small = np.abs(theta) < 1e-4
    with np.errstate(invalid="ignore", divide="ignore"):
        full = np.tan(theta) / np.sqrt(H) if H > 0 else np.full_like(t, np.nan)
    series = t * (1.0 + theta**2 / 3.0)
    return np.where(small | (H == 0.0), series, full)


def _tau_tanh(t, H):
    theta = t * np.sqrt(H)
    small = np.abs(theta) < 1e-4
    with np.errstate(invalid="ignore", divide="ignore"):
        full = np.tanh(theta) / np.sqrt(H) if H > 0 else np.full_like(t, np.nan)
    series = t * (1.0 - theta**2 / 3.0)
    return np.where(small | (H == 0.0), series, full)


def riccati_envelope(H: float, s0, t_grid) -> RiccatiEnvelope:
    """Explicit solutions of s' + s^2 +/- H = 0 with s(0) = s0 entries.

    The tan (lower) branch solves s' + s^2 + H = 0, the tanh (upper) branch
    s' + s^2 - H = 0; the shared Moebius form covers all s0 and the H -> 0
    limit s0 / (1 + t s0).
    """
    if H < 0:
        raise GeodesicError("curvature band H must be nonnegative")
    s0 = np.atleast_1d(np.asarray(s0, dtype=float))
    t_grid = np.asarray(t_grid, dtype=float)

    t_star = None
    for s in s0:
        if H > 0:
            ts = (np.pi / 2 + np.arctan(s / np.sqrt(H))) / np.sqrt(H)
        elif s < 0:
            ts = -1.0 / s
        else:
            continue
        t_star = ts if t_star is None else min(t_star, ts)

    truncated = False
    t_use = t_grid
    if t_star is not None and np.any(t_grid >= t_star):
        t_use = t_grid[t_grid < t_star * (1 - 1e-12)]
        truncated = True

    tau_t = _tau_tan(t_use, H)
    tau_h = _tau_tanh(t_use, H)
    lower = (s0[:, None] - H * tau_t[None, :]) / (1.0 + s0[:, None] * tau_t[None, :])
    upper = (s0[:, None] + H * tau_h[None, :]) / (1.0 + s0[:, None] * tau_h[None, :])
    return RiccatiEnvelope(H=float(H), s0=s0, t=t_use, lower=lower, upper=upper,
                           blow_up_time=t_star, truncated=truncated)


def riccati_integrate(K_path: np.ndarray, U0: np.ndarray, t_grid) -> tuple[np.ndarray, np.ndarray]:
    """RK4 for U' = -U^2 - K(t) on a uniform grid; returns U(t) and tr U(t).

    K_path holds K at the grid nodes; midpoint values are interpolated
    linearly. Raises on blow-up before the end of the grid.
    """
    t_grid = np.asarray(t_grid, dtype=float)
    K_path = np.asarray(K_path, dtype=float)
    U = np.array(U0, dtype=float)
    out = np.empty((len(t_grid), 2, 2))
    out[0] = U
    for k in range(len(t_grid) - 1):
        h = t_grid[k + 1] - t_grid[k]
        K0, K1 = K_path[k], K_path[k + 1]
        Km = 0.5 * (K0 + K1)

        def f(u, Kv):
            return -(u @ u) - Kv

        k1 = f(U, K0)
        k2 = f(U + 0.5 * h * k1, Km)
        k3 = f(U + 0.5 * h * k2, Km)
        k4 = f(U + h * k3, K1)
        U = U + (h / 6) * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(U)) or np.max(np.abs(U)) > 1e8:
            raise GeodesicError(f"Riccati solution blows up before t = {t_grid[k + 1]:g}")
        out[k + 1] = U
    return out, np.einsum("tii->t", out)


def curvature_along(metric, positions, velocities, frames) -> np.ndarray:
    """K_ij(t) = <R(e_i, v) v, e_j> in the parallel frame along a geodesic."""
    mf = as_metric_field(metric)
    _, riem, _ = mf.curvature(positions)
    g = mf.g(positions)
    # R(X, Y)Z^m = Riem[m, z, x, y] Z^z X^x Y^y with X = e_i, Y = Z = v
    rv = np.einsum("...mzxy,...z,...xi,...y->...mi", riem, velocities, frames, velocities)
    return np.einsum("...mn,...mi,...nj->...ij", g, rv, frames)


def geodesic_with_frame(metric, y, w, steps: int = 256):
    """Trajectory plus parallel orthonormal frame (for Riccati comparisons)."""
    mf = as_metric_field(metric)
    out = _rk4_flow(mf, np.asarray(y, float), np.asarray(w, float), steps,
                    with_frame=True)
    return out

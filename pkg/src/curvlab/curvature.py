"""Christoffel symbols, curvature tensors, and the mollified lower-bound checker.

Index conventions (arrays carry two leading grid axes):
    dg[k, i, j]      = d_k g_ij
    d2g[m, k, i, j]  = d_m d_k g_ij
    gamma[k, i, j]   = Gamma^k_ij
    riem[m, i, j, k] = R^m_ijk = d_j Gamma^m_ik - d_k Gamma^m_ij
                       + Gamma^m_js Gamma^s_ik - Gamma^m_ks Gamma^s_ij
    ric[i, j]        = R^m_imj
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import expr as ex
from .grid import PeriodicGridField, convolve_array, integrate, mollifier_kernel, node_coordinates
from .metric import MetricError, MetricModel, SmoothedMetric, _det2, _fd4, _inv2, smooth


# ---------------------------------------------------------------------------
# tensor algebra on component arrays (leading axes arbitrary)
# ---------------------------------------------------------------------------


def christoffel_arrays(g_inv: np.ndarray, dg: np.ndarray) -> np.ndarray:
    """Gamma^k_ij = 1/2 g^{kl} (d_i g_jl + d_j g_il - d_l g_ij)."""
    S = np.einsum("...ijl->...lij", dg) + np.einsum("...jil->...lij", dg) - dg
    return 0.5 * np.einsum("...kl,...lij->...kij", g_inv, S)


def dgamma_arrays(g_inv: np.ndarray, dg: np.ndarray, d2g: np.ndarray) -> np.ndarray:
    """d_m Gamma^k_ij from dg and d2g (derivative of the inverse included)."""
    S = np.einsum("...ijl->...lij", dg) + np.einsum("...jil->...lij", dg) - dg
    dginv = -np.einsum("...ka,...mab,...bl->...mkl", g_inv, dg, g_inv)
    dS = (np.einsum("...mijl->...mlij", d2g) + np.einsum("...mjil->...mlij", d2g) - d2g)
    return 0.5 * (np.einsum("...mkl,...lij->...mkij", dginv, S)
                  + np.einsum("...kl,...mlij->...mkij", g_inv, dS))


def riemann_arrays(gamma: np.ndarray, dgamma: np.ndarray) -> np.ndarray:
    return (np.einsum("...jmik->...mijk", dgamma)
            - np.einsum("...kmij->...mijk", dgamma)
            + np.einsum("...mjs,...sik->...mijk", gamma, gamma)
            - np.einsum("...mks,...sij->...mijk", gamma, gamma))


def ricci_from_riemann(riem: np.ndarray) -> np.ndarray:
    return np.einsum("...aiaj->...ij", riem)


def curvature_arrays(g: np.ndarray, dg: np.ndarray, d2g: np.ndarray):
    """(gamma, riem, ric) from pointwise metric data."""
    g_inv = _inv2(g)
    gamma = christoffel_arrays(g_inv, dg)
    riem = riemann_arrays(gamma, dgamma_arrays(g_inv, dg, d2g))
    return gamma, riem, ricci_from_riemann(riem)


# ---------------------------------------------------------------------------
# grid curvature fields
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CurvatureFields:
    gamma: np.ndarray
    riem: np.ndarray | None
    ric: np.ndarray | None
    g: np.ndarray
    source: str

    @property
    def k_scalar(self) -> np.ndarray:
        """Gauss curvature K_g = (1/2) g^{ij} Ric_ij (2D)."""
        return 0.5 * np.einsum("...ij,...ij->...", _inv2(self.g), self.ric)

    def proportionality_residual(self) -> float:
        """sup |Ric - K_g g| / sup |Ric| (2D structural identity)."""
        resid = self.ric - self.k_scalar[..., None, None] * self.g
        scale = np.max(np.abs(self.ric))
        if scale == 0.0:
            return float(np.max(np.abs(resid)))
        return float(np.max(np.abs(resid)) / scale)


def _metric_data(metric):
    """(g, dg, d2g | None, tag) for SmoothedMetric or sampled MetricModel."""
    if isinstance(metric, SmoothedMetric):
        return metric.g, metric.dg, metric.d2g, f"g_eps(eps={metric.eps:g})"
    if isinstance(metric, MetricModel):
        metric.require_sampled()
        if metric.regularity == "C1":
            raise MetricError(
                "direct curvature of a C1-tagged metric is unsupported; "
                "only the smoothed path applies"
            )
        X, Y = node_coordinates(metric.N)
        return metric.g, metric.dg, metric.eval_d2g(X, Y), "g a.e. (symbolic)"
    raise TypeError(f"unsupported metric object {type(metric).__name__}")


def christoffel(metric) -> CurvatureFields:
    """Christoffel symbols only (first derivatives suffice)."""
    g, dg, _, tag = _metric_data_first_order(metric)
    gamma = christoffel_arrays(_inv2(g), dg)
    _check_gamma_symmetry(gamma)
    return CurvatureFields(gamma=gamma, riem=None, ric=None, g=g, source=tag)


def _metric_data_first_order(metric):
    if isinstance(metric, SmoothedMetric):
        return metric.g, metric.dg, None, f"g_eps(eps={metric.eps:g})"
    if isinstance(metric, MetricModel):
        metric.require_sampled()
        return metric.g, metric.dg, None, "g a.e. (symbolic)"
    raise TypeError(f"unsupported metric object {type(metric).__name__}")


def _check_gamma_symmetry(gamma, tol=1e-12):
    err = np.max(np.abs(gamma - np.einsum("...kij->...kji", gamma)))
    if err > tol:
        raise MetricError(f"Christoffel symmetry violated: {err:.2e}")


def riemann_ricci(metric) -> CurvatureFields:
    """Full curvature fields; needs second derivatives (smoothed or a.e.)."""
    g, dg, d2g, tag = _metric_data(metric)
    gamma, riem, ric = curvature_arrays(g, dg, d2g)
    _check_gamma_symmetry(gamma)
    return CurvatureFields(gamma=gamma, riem=riem, ric=ric, g=g, source=tag)


# ---------------------------------------------------------------------------
# mollified distributional Ricci (derivatives kept on kernel/convolved fields)
# ---------------------------------------------------------------------------


def mollified_distributional_ricci(model: MetricModel, eps: float,
                                   oversample: int = 1,
                                   vector: tuple[ex.Node, ex.Node] | None = None,
                                   vector2: tuple[ex.Node, ex.Node] | None = None,
                                   use_conformal_identity: bool = True) -> np.ndarray:
    """Ric(g) * rho_eps on the N-grid, computed in the distributional form.

    The a.e. Ricci of a C^{1,1} metric contains products with jumps; writing
    Ric = d(Gamma-terms) + Gamma*Gamma and moving the outer derivatives onto
    the convolved continuous Christoffel fields keeps every quadrature
    integrand Lipschitz. With ``vector`` (and optionally ``vector2``) the
    scalar distribution Ric(X, Y) is mollified instead, via the product rule.
    """
    model.require_sampled()
    N = model.N
    S = int(oversample)
    NF = S * N
    XF, YF = node_coordinates(NF)
    kernel = mollifier_kernel(eps, NF)
    kernel_d = [mollifier_kernel(eps, NF, kind="dx"),
                mollifier_kernel(eps, NF, kind="dy")]
    sl = (slice(None, None, S), slice(None, None, S))

    if model.conformal_u is not None and use_conformal_identity:
        # 2D conformal identity: Ric(g) = -(Lap u) * delta as distributions,
        # so the mollification needs only d(grad u * rho) on the kernel.
        u = model.conformal_u
        du = [ex.compile_expr(u.d(v))(XF, YF) for v in "xy"]
        if vector is None:
            lap_c = (convolve_array(du[0], kernel_d[0])
                     + convolve_array(du[1], kernel_d[1]))
            out = np.zeros((N, N, 2, 2))
            out[..., 0, 0] = -lap_c[sl]
            out[..., 1, 1] = out[..., 0, 0]
            return out
        Xv, dX = _eval_vector(vector, XF, YF)
        Yv, dY = (Xv, dX) if vector2 is None else _eval_vector(vector2, XF, YF)
        s = np.einsum("...i,...i->...", Xv, Yv)
        ds = (np.einsum("...mi,...i->...m", dX, Yv)
              + np.einsum("...i,...mi->...m", Xv, dY))
        out = -(convolve_array(du[0] * s, kernel_d[0])
                + convolve_array(du[1] * s, kernel_d[1])
                - convolve_array(du[0] * ds[..., 0] + du[1] * ds[..., 1], kernel))
        return out[sl]

    gam = _christoffel_components(model, XF, YF)  # dict (k, i, j) -> (NF, NF)

    def tr_gamma(i):  # Gamma^m_im
        return gam[(0, i, 0)] + gam[(1, i, 1)]

    def prod_ij(i, j):  # Gamma^m_ms Gamma^s_ij - Gamma^m_js Gamma^s_im
        out = np.zeros((NF, NF))
        for s in range(2):
            out += tr_gamma(s) * gam[(s, i, j)]
            for m in range(2):
                out -= gam[(m, j, s)] * gam[(s, i, m)]
        return out

    if vector is None:
        # all fields sharing a kernel are stacked into one convolution call
        out = np.zeros((N, N, 2, 2))
        prod_c = convolve_array(
            np.stack([prod_ij(i, j) for i in range(2) for j in range(2)], axis=-1),
            kernel,
        )
        packs = []
        for m in range(2):
            stack = np.stack(
                [gam[(m, i, j)] for i in range(2) for j in range(2)]
                + [tr_gamma(0), tr_gamma(1)], axis=-1)
            packs.append(convolve_array(stack, kernel_d[m]))
            del stack
        for i in range(2):
            for j in range(2):
                t = packs[0][..., 2 * i + j] + packs[1][..., 2 * i + j]
                t -= packs[j][..., 4 + i]
                out[..., i, j] = (t + prod_c[..., 2 * i + j])[sl]
        return out

    # scalar distribution Ric(X, Y) via the product rule:
    # (d_m T) h = d_m(T h) - T d_m h for each first-order piece T.
    Xv, dX = _eval_vector(vector, XF, YF)
    Yv, dY = (Xv, dX) if vector2 is None else _eval_vector(vector2, XF, YF)
    h = np.einsum("...i,...j->...ij", Xv, Yv)
    dh = (np.einsum("...mi,...j->...mij", dX, Yv)
          + np.einsum("...i,...mj->...mij", Xv, dY))

    def gam_dot_h(m):  # Gamma^m_ij h^{ij}
        return sum(gam[(m, i, j)] * h[..., i, j] for i in range(2) for j in range(2))

    packs = [convolve_array(
        np.stack([gam_dot_h(m),
                  tr_gamma(0) * h[..., 0, m] + tr_gamma(1) * h[..., 1, m]], axis=-1),
        kernel_d[m]) for m in range(2)]
    gam_dh = sum(gam[(m, i, j)] * dh[..., m, i, j]
                 for m in range(2) for i in range(2) for j in range(2))
    trg_dh = sum(tr_gamma(i) * dh[..., j, i, j] for i in range(2) for j in range(2))
    prod_h = sum(prod_ij(i, j) * h[..., i, j] for i in range(2) for j in range(2))
    rest_c = convolve_array(np.stack([gam_dh, trg_dh, prod_h], axis=-1), kernel)
    a = packs[0][..., 0] + packs[1][..., 0] - rest_c[..., 0]
    b = packs[0][..., 1] + packs[1][..., 1] - rest_c[..., 1]
    out = a - b + rest_c[..., 2]
    return out[sl]


def _christoffel_components(model: MetricModel, X, Y) -> dict:
    """Christoffel symbols as a dict of scalar arrays (memory-lean for large
    oversampled grids: no (.., 2, 2, 2) intermediates; shared trees are
    evaluated once)."""
    evaluated: dict[int, np.ndarray] = {}

    def ev(tree):
        key = id(tree)
        if key not in evaluated:
            evaluated[key] = ex.compile_expr(tree)(X, Y)
        return evaluated[key]

    comp = {k: ev(t) for k, t in model.components().items()}
    det = comp[(0, 0)] * comp[(1, 1)] - comp[(0, 1)] ** 2
    ginv = {
        (0, 0): comp[(1, 1)] / det,
        (1, 1): comp[(0, 0)] / det,
        (0, 1): -comp[(0, 1)] / det,
    }
    ginv[(1, 0)] = ginv[(0, 1)]
    del comp, det
    dg = {}
    for (k, i, j), tree in model.d_components().items():
        v = ev(tree)
        dg[(k, i, j)] = v
        dg[(k, j, i)] = v
    evaluated.clear()

    out = {}
    for k in range(2):
        for i in range(2):
            for j in range(i, 2):
                acc = np.zeros_like(ginv[(0, 0)])
                for l in range(2):
                    S_lij = dg[(i, j, l)] + dg[(j, i, l)] - dg[(l, i, j)]
                    acc += ginv[(k, l)] * S_lij
                out[(k, i, j)] = 0.5 * acc
                out[(k, j, i)] = out[(k, i, j)]
    return out


def _eval_vector(vector, X, Y):
    """Components and coordinate Jacobian of a vector of expression trees."""
    comp = np.stack([ex.compile_expr(t)(X, Y) for t in vector], axis=-1)
    jac = np.empty(np.shape(X) + (2, 2))
    for m, var in enumerate("xy"):
        for i, t in enumerate(vector):
            jac[..., m, i] = ex.compile_expr(t.d(var))(X, Y)
    return comp, jac


# ---------------------------------------------------------------------------
# generalized-eigenvalue bound machinery
# ---------------------------------------------------------------------------


def pencil_min_eig(ric: np.ndarray, g: np.ndarray):
    """Smallest generalized eigenvalue of (Ric, g) per node (closed form)."""
    a = _det2(g)
    b = (ric[..., 0, 0] * g[..., 1, 1] + ric[..., 1, 1] * g[..., 0, 0]
         - 2.0 * ric[..., 0, 1] * g[..., 0, 1])
    c = _det2(ric)
    disc = np.sqrt(np.maximum(b * b - 4.0 * a * c, 0.0))
    return (b - disc) / (2.0 * a)


def pencil_min_vector(ric: np.ndarray, g: np.ndarray, lam: float) -> np.ndarray:
    """A g-unit eigenvector for the smallest generalized eigenvalue."""
    A = ric - lam * g
    v1 = np.array([-A[0, 1], A[0, 0]])
    v2 = np.array([-A[1, 1], A[1, 0]])
    v = v1 if np.linalg.norm(v1) >= np.linalg.norm(v2) else v2
    if np.linalg.norm(v) == 0.0:
        v = np.array([1.0, 0.0])
    return v / np.sqrt(v @ g @ v)


@dataclass(frozen=True)
class BoundEntry:
    eps: float
    k_eff: float
    argmin_node: tuple[int, int]
    argmin_vector: tuple[float, float]


@dataclass(frozen=True)
class BoundVerdict:
    delta: float
    holds: bool
    eps0: float | None = None
    witness: dict | None = None


@dataclass(frozen=True)
class BoundReport:
    K: float
    entries: list[BoundEntry]
    verdicts: list[BoundVerdict]
    tail_length: int

    def to_dict(self) -> dict:
        return {
            "K": self.K,
            "tail_length": self.tail_length,
            "entries": [
                {"eps": e.eps, "K_eff": e.k_eff,
                 "argmin_node": list(e.argmin_node),
                 "argmin_vector": list(e.argmin_vector)}
                for e in self.entries
            ],
            "verdicts": [
                {"delta": v.delta, "holds": v.holds}
                | ({"eps0": v.eps0} if v.holds else {"witness": v.witness})
                for v in self.verdicts
            ],
        }


def k_eff_entry(sm: SmoothedMetric) -> BoundEntry:
    fields = riemann_ricci(sm)
    lam = pencil_min_eig(fields.ric, sm.g)
    idx = np.unravel_index(int(np.argmin(lam)), lam.shape)
    vec = pencil_min_vector(fields.ric[idx], sm.g[idx], float(lam[idx]))
    return BoundEntry(eps=sm.eps, k_eff=float(lam[idx]),
                      argmin_node=(int(idx[0]), int(idx[1])),
                      argmin_vector=(float(vec[0]), float(vec[1])))


def bound_check(model: MetricModel, K: float, delta_list, eps_list,
                oversample: int = 1, tail_length: int = 3) -> BoundReport:
    """Check Ric >= K via the regularized family: for each delta, do the
    last ``tail_length`` sampled eps all satisfy K_eff(eps) >= K - delta?

    eps_list must be decreasing (a dyadic sweep); failure produces a witness
    (node, vector, eps), not an exception.
    """
    eps_list = list(eps_list)
    if any(b >= a for a, b in zip(eps_list, eps_list[1:])):
        raise MetricError("eps_list must be strictly decreasing")
    if any(d <= 0 for d in delta_list):
        raise MetricError("delta_list entries must be positive")
    entries = [k_eff_entry(smooth(model, eps, oversample=oversample)) for eps in eps_list]

    verdicts = []
    tail = entries[-tail_length:] if tail_length <= len(entries) else entries
    for delta in delta_list:
        failing = [e for e in tail if e.k_eff < K - delta]
        if not failing:
            # eps0: the largest eps opening the maximal all-passing suffix
            eps0 = tail[0].eps
            for e in reversed(entries[: len(entries) - len(tail)]):
                if e.k_eff >= K - delta:
                    eps0 = e.eps
                else:
                    break
            verdicts.append(BoundVerdict(delta=float(delta), holds=True, eps0=float(eps0)))
        else:
            w = failing[-1]  # smallest failing eps: the most asymptotic evidence
            verdicts.append(BoundVerdict(
                delta=float(delta), holds=False,
                witness={"eps": w.eps, "K_eff": w.k_eff,
                         "node": list(w.argmin_node), "vector": list(w.argmin_vector)},
            ))
    return BoundReport(K=float(K), entries=entries, verdicts=verdicts,
                       tail_length=min(tail_length, len(entries)))


# ---------------------------------------------------------------------------
# distributional pairing <Ric(X,X), omega>
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PairingTable:
    eps_list: list[float]
    values: list[float]
    extrapolated: float
    converged: bool
    direct_value: float | None

    def spread(self) -> float:
        return abs(self.values[-1] - self.values[-2]) if len(self.values) > 1 else np.inf


def distributional_pairing(model: MetricModel, X, omega, eps_list,
                           oversample: int = 1, tol: float = 1e-3) -> PairingTable:
    """Integrals of Ric_{g_eps}(X,X) against the coordinate density omega,
    with Richardson extrapolation; for smooth/C11 models also the direct
    a.e. value, computed with the outer derivatives moved onto omega.
    """
    model.require_sampled()
    N = model.N
    Xg, Yg = node_coordinates(N)
    Xv = np.stack([ex.compile_expr(t)(Xg, Yg) for t in X], axis=-1)
    w = ex.compile_expr(omega)(Xg, Yg)
    values = []
    for eps in eps_list:
        sm = smooth(model, eps, oversample=oversample)
        ric = riemann_ricci(sm).ric
        ricXX = np.einsum("...ij,...i,...j->...", ric, Xv, Xv)
        values.append(integrate(PeriodicGridField(ricXX * w)))

    extrapolated, converged = _richardson(values, tol)

    direct = None
    if model.regularity in ("smooth", "C11"):
        direct = _direct_pairing(model, X, omega)
    return PairingTable(eps_list=list(map(float, eps_list)), values=values,
                        extrapolated=extrapolated, converged=converged,
                        direct_value=direct)


def _richardson(values, tol):
    if len(values) < 3:
        return float(values[-1]), False
    v1, v2, v3 = values[-3:]
    d1, d2 = v2 - v1, v3 - v2
    if d1 == 0.0 or abs(d2) >= abs(d1):
        return float(v3), abs(d2) <= tol
    r = d2 / d1
    limit = v3 + d2 * r / (1.0 - r)
    return float(limit), abs(d2) <= tol * max(1.0, abs(limit))


def _direct_pairing(model: MetricModel, X, omega) -> float:
    """<Ric(X,X), omega> from a.e. curvature, derivatives moved onto the
    smooth test objects by parts (integrands stay Lipschitz)."""
    N = model.N
    Xg, Yg = node_coordinates(N)
    gamma = christoffel_arrays(_inv2(model.g), model.dg)
    Xv, dX = _eval_vector(X, Xg, Yg)
    w = ex.compile_expr(omega)(Xg, Yg)
    dw = np.stack([ex.compile_expr(omega.d(var))(Xg, Yg) for var in "xy"], axis=-1)
    h = np.einsum("...i,...j->...ij", Xv, Xv)
    dh = (np.einsum("...mi,...j->...mij", dX, Xv)
          + np.einsum("...i,...mj->...mij", Xv, dX))

    # int d_m(Gamma^m_ij) h^{ij} w = -int Gamma^m_ij d_m(h^{ij} w)
    t1 = -np.einsum("...mij,...mij->...", gamma, dh) * w
    t1 -= np.einsum("...mij,...ij,...m->...", gamma, h, dw)
    tr_gamma = gamma[..., 0, :, 0] + gamma[..., 1, :, 1]
    t2 = -np.einsum("...i,...jij->...", tr_gamma, dh) * w
    t2 -= np.einsum("...i,...ij,...j->...", tr_gamma, h, dw)
    prod = (np.einsum("...mms,...sij->...ij", gamma, gamma)
            - np.einsum("...mjs,...sim->...ij", gamma, gamma))
    t3 = np.einsum("...ij,...ij->...", prod, h) * w
    return integrate(PeriodicGridField(t1 - t2 + t3))

"""Friedrichs-commutator diagnostics: the quantitative convergence
measurements behind the regularized curvature-bound checker.

Each diagnostic evaluates a commutator between multiplication and
mollification on a dyadic eps-sweep and reports sup-norms (and difference
norms where the claim is C^1 or C^2). Convergence is asserted as a finite
criterion: the final norm must not exceed a quarter of the first, with at
most one inversion along the sweep.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import expr as ex
from .curvature import mollified_distributional_ricci, riemann_ricci
from .grid import PeriodicGridField, convolve_array, finite_diff, mollifier_kernel, node_coordinates
from .metric import MetricError, MetricModel, _fd4, smooth

DECAY_FACTOR = 0.25
MAX_INVERSIONS = 1


def sweep_verdict(norms) -> bool:
    """final <= DECAY_FACTOR * first, allowing one inversion for noise."""
    norms = list(norms)
    if len(norms) < 2:
        return False
    if norms[0] == 0.0:
        return all(v == 0.0 for v in norms)
    inversions = sum(1 for a, b in zip(norms, norms[1:]) if b > a)
    return norms[-1] <= DECAY_FACTOR * norms[0] and inversions <= MAX_INVERSIONS


def auto_oversample(eps: float, N: int, target: int = 32, cap: int = 16) -> int:
    """Quadrature refinement keeping eps * N_fine >= target (capped)."""
    return max(1, min(cap, int(np.ceil(target / (eps * N)))))


def _resolve_oversample(oversample, eps_list, N):
    if oversample == "auto":
        return [auto_oversample(e, N) for e in eps_list]
    if np.isscalar(oversample):
        return [int(oversample)] * len(eps_list)
    if len(oversample) != len(eps_list):
        raise MetricError("oversample list must match eps_list")
    return [int(s) for s in oversample]


@dataclass(frozen=True)
class CommutatorReport:
    label: str
    expressions: dict
    eps_list: list
    norms_c0: list
    norms_c1: list | None = None
    norms_c2: list | None = None
    oversample: list | None = None

    @property
    def decreasing(self) -> bool:
        seqs = [self.norms_c0]
        if self.norms_c1 is not None:
            seqs.append(self.norms_c1)
        if self.norms_c2 is not None:
            seqs.append(self.norms_c2)
        return all(sweep_verdict(s) for s in seqs)

    def rows(self):
        for k, eps in enumerate(self.eps_list):
            yield {
                "eps": eps,
                "norm_C0": self.norms_c0[k],
                "norm_C1": self.norms_c1[k] if self.norms_c1 is not None else "",
                "norm_C2": self.norms_c2[k] if self.norms_c2 is not None else "",
            }


def _diff_norms(values: np.ndarray, N: int, order: int):
    """Sup-norms of a field and its first (and second) central differences."""
    f = PeriodicGridField(values)
    c0 = float(np.max(np.abs(values)))
    if order < 1:
        return c0, None, None
    dx = finite_diff(f, "x", "central4")
    dy = finite_diff(f, "y", "central4")
    c1 = float(max(np.max(np.abs(dx.values)), np.max(np.abs(dy.values))))
    if order < 2:
        return c0, c1, None
    c2 = 0.0
    for g, axes in ((dx, ("x", "y")), (dy, ("y",))):
        for ax in axes:
            c2 = max(c2, float(np.max(np.abs(finite_diff(g, ax, "central4").values))))
    return c0, c1, c2


def friedrichs_norms(a, f, eps_list, N: int = 256) -> CommutatorReport:
    """Norms of (a * rho_eps)(f * rho_eps) - (a f) * rho_eps in C^0 and C^1.

    a must be continuously differentiable, f continuous; both periodic.
    """
    a_tree = ex.parse_field(a) if isinstance(a, str) else a
    f_tree = ex.parse_field(f) if isinstance(f, str) else f
    for tree in (a_tree, f_tree):
        ex.check_periodicity(tree, with_derivatives=tree is a_tree)
    X, Y = node_coordinates(N)
    av = ex.compile_expr(a_tree)(X, Y)
    fv = ex.compile_expr(f_tree)(X, Y)
    c0s, c1s = [], []
    for eps in eps_list:
        kernel = mollifier_kernel(eps, N)
        stack = convolve_array(np.stack([av, fv, av * fv], axis=-1), kernel)
        comm = stack[..., 0] * stack[..., 1] - stack[..., 2]
        c0, c1, _ = _diff_norms(comm, N, order=1)
        c0s.append(c0)
        c1s.append(c1)
    return CommutatorReport(
        label="friedrichs",
        expressions={
            "a": a_tree.emit(), "f": f_tree.emit(),
            "commutator": "(a*rho_eps)(f*rho_eps) - (a f)*rho_eps",
        },
        eps_list=[float(e) for e in eps_list], norms_c0=c0s, norms_c1=c1s,
    )


def ricci_commutator_norms(model: MetricModel, eps_list,
                           oversample="auto") -> CommutatorReport:
    """C^0 norms of Ric(g_eps) - Ric(g) * rho_eps over the sweep.

    The direct term needs a.e. second derivatives: smooth or C11 models
    only. Both sides are evaluated on an oversampled quadrature grid when
    eps approaches the grid spacing.
    """
    model.require_sampled()
    if model.regularity not in ("smooth", "C11"):
        raise MetricError(
            "ricci commutator needs a.e. curvature: smooth or C11 regularity only"
        )
    S_list = _resolve_oversample(oversample, eps_list, model.N)
    norms = []
    for eps, S in zip(eps_list, S_list):
        sm = smooth(model, eps, oversample=S)
        ric_eps = riemann_ricci(sm).ric
        del sm
        dist = mollified_distributional_ricci(model, eps, oversample=S)
        norms.append(float(np.max(np.abs(ric_eps - dist))))
    return CommutatorReport(
        label="ricci",
        expressions={"commutator": "Ric(g * rho_eps) - Ric(g) * rho_eps"},
        eps_list=[float(e) for e in eps_list], norms_c0=norms,
        oversample=S_list,
    )


def pairing_commutator_norms(model: MetricModel, X, Y, eps_list,
                             oversample="auto") -> tuple[CommutatorReport, CommutatorReport]:
    """Contracted commutators against periodic vector fields X, Y:

    (a) Ric_g(X,Y) * rho_eps - Ric_{g_eps}(X,Y) in C^0, and
    (b) g(X,Y) * rho_eps - g_eps(X,Y) in C^0, C^1, and C^2.
    """
    model.require_sampled()
    N = model.N
    X_tree = tuple(ex.parse_field(t) if isinstance(t, str) else t for t in X)
    Y_tree = tuple(ex.parse_field(t) if isinstance(t, str) else t for t in Y)
    for t in (*X_tree, *Y_tree):
        ex.check_periodicity(t)
    S_list = _resolve_oversample(oversample, eps_list, N)
    Xg, Yg = node_coordinates(N)
    Xv = np.stack([ex.compile_expr(t)(Xg, Yg) for t in X_tree], axis=-1)
    Yv = np.stack([ex.compile_expr(t)(Xg, Yg) for t in Y_tree], axis=-1)

    ric_norms = []
    g_c0, g_c1, g_c2 = [], [], []
    for eps, S in zip(eps_list, S_list):
        sm = smooth(model, eps, oversample=S)
        ric_eps = riemann_ricci(sm).ric
        ric_eps_xy = np.einsum("...ij,...i,...j->...", ric_eps, Xv, Yv)
        dist_xy = mollified_distributional_ricci(model, eps, oversample=S,
                                                 vector=X_tree, vector2=Y_tree)
        ric_norms.append(float(np.max(np.abs(dist_xy - ric_eps_xy))))

        # (b) on the fine grid, restricted after differencing
        NF = S * N
        XF, YF = node_coordinates(NF)
        XvF = np.stack([ex.compile_expr(t)(XF, YF) for t in X_tree], axis=-1)
        YvF = np.stack([ex.compile_expr(t)(XF, YF) for t in Y_tree], axis=-1)
        gF = model.eval_g(XF, YF)
        gXY = np.einsum("...ij,...i,...j->...", gF, XvF, YvF)
        kernel = mollifier_kernel(eps, NF)
        lhs = convolve_array(gXY, kernel)
        g_conv = convolve_array(gF, kernel)
        rhs = np.einsum("...ij,...i,...j->...", g_conv, XvF, YvF)
        del gF, g_conv
        comm = lhs - rhs
        d0 = _fd4(comm, 0, NF)
        d1 = _fd4(comm, 1, NF)
        sl = (slice(None, None, S), slice(None, None, S))
        c0 = float(np.max(np.abs(comm[sl])))
        c1 = float(max(np.max(np.abs(d0[sl])), np.max(np.abs(d1[sl]))))
        c2 = float(max(np.max(np.abs(_fd4(d0, 0, NF)[sl])),
                       np.max(np.abs(_fd4(d0, 1, NF)[sl])),
                       np.max(np.abs(_fd4(d1, 1, NF)[sl]))))
        g_c0.append(c0)
        g_c1.append(c1)
        g_c2.append(c2)

    exprs = {"X": [t.emit() for t in X_tree], "Y": [t.emit() for t in Y_tree]}
    rep_ric = CommutatorReport(
        label="pairing-ricci",
        expressions=exprs | {"commutator": "Ric_g(X,Y) * rho_eps - Ric_{g_eps}(X,Y)"},
        eps_list=[float(e) for e in eps_list], norms_c0=ric_norms,
        oversample=S_list,
    )
    rep_g = CommutatorReport(
        label="pairing-metric",
        expressions=exprs | {"commutator": "g(X,Y) * rho_eps - g_eps(X,Y)"},
        eps_list=[float(e) for e in eps_list], norms_c0=g_c0, norms_c1=g_c1,
        norms_c2=g_c2, oversample=S_list,
    )
    return rep_ric, rep_g


def inverse_metric_rate(model: MetricModel, eps_list, oversample=1) -> list:
    """Measured sup |g_eps^{-1} - g^{-1}| per eps (reported, not asserted:
    the linear-rate constant is model-dependent)."""
    from .metric import _inv2

    model.require_sampled()
    inv = _inv2(model.g)
    out = []
    for eps in eps_list:
        sm = smooth(model, eps, oversample=oversample)
        out.append(float(np.max(np.abs(sm.g_inv - inv))))
    return out

"""Metric families on the torus: expression-backed models, grid sampling,
and mollifier smoothing.

A model carries the three components g11, g12, g22 as expression trees
(or the conformal special form e^{2u} * identity), their symbolic first
and second derivatives, and -- after sample() -- grid fields of g and dg.
smooth() produces the mollified metric g_eps together with derivative
fields; for rough metrics the derivatives are taken by high-order central
differences of the convolved field, evaluated on an oversampled quadrature
grid and restricted back to the N-grid (the difference stencil composed
with the mollifier is itself a differentiated kernel, and commutes exactly
with the convolution).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import expr as ex
from .grid import (
    GridError,
    Kernel,
    PeriodicGridField,
    convolve_array,
    integrate,
    mollifier_kernel,
    node_coordinates,
)

DEFAULT_DET_FLOOR = 1e-6

_COMPS = ((0, 0), (0, 1), (1, 1))


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class MetricModel:
    """Symbolic metric with regularity tag and (optional) sampled fields."""

    g11: ex.Node
    g12: ex.Node
    g22: ex.Node
    regularity: str  # 'smooth' | 'C11' | 'C1'
    conformal_u: ex.Node | None = None
    det_floor: float = DEFAULT_DET_FLOOR
    # populated by sample()
    N: int | None = None
    g: np.ndarray | None = None      # (N, N, 2, 2)
    dg: np.ndarray | None = None     # (N, N, k, i, j) = d_k g_ij

    # -- symbolic accessors -------------------------------------------------

    def _memo(self, key, build):
        cached = self.__dict__.get(key)
        if cached is None:
            cached = build()
            object.__setattr__(self, key, cached)
        return cached

    def components(self):
        return {(0, 0): self.g11, (0, 1): self.g12, (1, 1): self.g22}

    def d_components(self):
        """First-derivative trees: dict (k, i, j) -> Node (memoized; shared
        component trees differentiate once and share derivative trees)."""

        def build():
            derived: dict[int, tuple] = {}
            out = {}
            for (i, j), tree in self.components().items():
                if id(tree) not in derived:
                    derived[id(tree)] = (tree.d("x"), tree.d("y"))
                for k in range(2):
                    out[(k, i, j)] = derived[id(tree)][k]
            return out

        return self._memo("_d1_trees", build)

    def d2_components(self):
        """Second-derivative trees: dict (m, k, i, j) -> Node, m <= k."""

        def build():
            out = {}
            for (k, i, j), tree in self.d_components().items():
                for m, var in enumerate("xy"):
                    if m <= k:
                        out[(m, k, i, j)] = tree.d(var)
            return out

        return self._memo("_d2_trees", build)

    # -- pointwise evaluation ------------------------------------------------

    def eval_g(self, x, y) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape + (2, 2))
        for (i, j), tree in self.components().items():
            v = ex.compile_expr(tree)(x, y)
            out[..., i, j] = v
            out[..., j, i] = v
        return out

    def eval_dg(self, x, y) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape + (2, 2, 2))
        for (k, i, j), tree in self.d_components().items():
            v = ex.compile_expr(tree)(x, y)
            out[..., k, i, j] = v
            out[..., k, j, i] = v
        return out

    def eval_d2g(self, x, y) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape + (2, 2, 2, 2))
        for (m, k, i, j), tree in self.d2_components().items():
            v = ex.compile_expr(tree)(x, y)
            for a, b in ((m, k), (k, m)):
                out[..., a, b, i, j] = v
                out[..., a, b, j, i] = v
        return out

    # -- sampled-field helpers ------------------------------------------------

    def require_sampled(self) -> "MetricModel":
        if self.g is None:
            raise MetricError("metric model has not been sampled; call sample() first")
        return self

    @property
    def sqrt_det(self) -> np.ndarray:
        self.require_sampled()
        return np.sqrt(_det2(self.g))

    def volume(self) -> float:
        """vol_g(M) by rectangle rule."""
        self.require_sampled()
        return integrate(PeriodicGridField(self.sqrt_det))

    def is_flat(self) -> bool:
        probe = (np.arange(13) + 0.37) / 13
        X, Y = np.meshgrid(probe, probe, indexing="ij")
        g = self.eval_g(X, Y)
        dg = self.eval_dg(X, Y)
        ident = np.zeros_like(g)
        ident[..., 0, 0] = 1.0
        ident[..., 1, 1] = 1.0
        return bool(np.all(g == ident) and np.all(dg == 0.0))


def _det2(g: np.ndarray) -> np.ndarray:
    return g[..., 0, 0] * g[..., 1, 1] - g[..., 0, 1] * g[..., 1, 0]


def _inv2(g: np.ndarray) -> np.ndarray:
    det = _det2(g)
    inv = np.empty_like(g)
    inv[..., 0, 0] = g[..., 1, 1] / det
    inv[..., 1, 1] = g[..., 0, 0] / det
    inv[..., 0, 1] = -g[..., 0, 1] / det
    inv[..., 1, 0] = inv[..., 0, 1]
    return inv


# ---------------------------------------------------------------------------
# constructors
# ---------------------------------------------------------------------------


def build_conformal(u, regularity: str | None = None, det_floor: float = DEFAULT_DET_FLOOR) -> MetricModel:
    """g = e^{2u} * identity. Regularity inferred from kinks in u's tree."""
    if isinstance(u, str):
        u = ex.parse_field(u)
    ex.check_periodicity(u)
    if regularity is None:
        regularity = "C11" if ex.has_kinks(u) else "smooth"
    e2u = ex.Call("exp", (ex.simplify(ex.Bin("*", ex.Num(2.0), u)),))
    return MetricModel(
        g11=e2u, g12=ex.Num(0.0), g22=e2u,
        regularity=regularity, conformal_u=u, det_floor=det_floor,
    )


def build_components(g11, g12, g22, regularity: str | None = None,
                     det_floor: float = DEFAULT_DET_FLOOR) -> MetricModel:
    trees = []
    for comp in (g11, g12, g22):
        tree = ex.parse_field(comp) if isinstance(comp, str) else comp
        ex.check_periodicity(tree)
        trees.append(tree)
    if regularity is None:
        regularity = "C11" if any(ex.has_kinks(t) for t in trees) else "smooth"
    return MetricModel(g11=trees[0], g12=trees[1], g22=trees[2],
                       regularity=regularity, det_floor=det_floor)


def load_metric_spec(spec: dict) -> MetricModel:
    """Build a model from the JSON metric spec {"kind": ..., ...}."""
    kind = spec.get("kind")
    regularity = spec.get("regularity")
    if kind == "conformal":
        return build_conformal(spec["u"], regularity=regularity)
    if kind == "components":
        return build_components(spec["g11"], spec["g12"], spec["g22"], regularity=regularity)
    raise MetricError(f"metric spec kind must be 'conformal' or 'components', got {kind!r}")


def metric_spec_dict(model: MetricModel) -> dict:
    """Canonical JSON-able description (used for hashing and manifests)."""
    if model.conformal_u is not None:
        return {"kind": "conformal", "u": model.conformal_u.emit(),
                "regularity": model.regularity}
    return {"kind": "components", "g11": model.g11.emit(), "g12": model.g12.emit(),
            "g22": model.g22.emit(), "regularity": model.regularity}


# standard test family used across scenarios
STANDARD_METRICS = {
    "flat": {"kind": "conformal", "u": "0"},
    "conformal-smooth": {"kind": "conformal", "u": "0.05*sin(2*pi*x)*sin(2*pi*y)"},
    "glued-c11": {"kind": "conformal", "u": "2.0*max(0, 0.04 - persq(x, y, 0.5, 0.5))^2"},
}


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------


def sample(model: MetricModel, N: int) -> MetricModel:
    """Sample g and dg on the N x N grid, verifying SPD and nondegeneracy."""
    if N < 16:
        raise MetricError("sampling needs N >= 16")
    X, Y = node_coordinates(N)
    g = model.eval_g(X, Y)
    dg = model.eval_dg(X, Y)
    _check_spd(g, model.det_floor, what="metric")
    return replace(model, N=N, g=g, dg=dg)


def _check_spd(g: np.ndarray, det_floor: float, what: str, eps: float | None = None):
    det = _det2(g)
    bad = (g[..., 0, 0] <= 0) | (det < det_floor)
    if np.any(bad):
        nodes = np.argwhere(bad)[:10]
        where = ", ".join(f"({i},{j})" for i, j in nodes)
        msg = (f"{what} is not SPD above the nondegeneracy floor {det_floor:g} "
               f"(min det {det.min():.3e}) at nodes {where}")
        if eps is not None:
            msg += f" [eps={eps:g}]"
        raise MetricError(msg)


# ---------------------------------------------------------------------------
# smoothing
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SmoothedMetric:
    """Mollified metric g_eps with derivative and inverse fields."""

    eps: float
    N: int
    oversample: int
    g: np.ndarray       # (N, N, 2, 2)
    dg: np.ndarray      # (N, N, k, i, j)
    d2g: np.ndarray     # (N, N, m, k, i, j)
    g_inv: np.ndarray   # (N, N, 2, 2)
    model: MetricModel

    @property
    def sqrt_det(self) -> np.ndarray:
        return np.sqrt(_det2(self.g))

    def volume(self) -> float:
        return integrate(PeriodicGridField(self.sqrt_det))


def _fd4(values: np.ndarray, axis: int, N: int) -> np.ndarray:
    r = lambda s: np.roll(values, -s, axis=axis)
    return (r(2) * (-1 / 12) + r(1) * (8 / 12) + r(-1) * (-8 / 12) + r(-2) * (1 / 12)) * N


_C4 = ((-2, 1 / 12), (-1, -8 / 12), (1, 8 / 12), (2, -1 / 12))
_C4SQ = {}
for _s1, _a in _C4:
    for _s2, _b in _C4:
        _C4SQ[_s1 + _s2] = _C4SQ.get(_s1 + _s2, 0.0) + _a * _b
_C4SQ = tuple((s, c) for s, c in sorted(_C4SQ.items()) if c != 0.0)


def _coarse_derivatives(v: np.ndarray, S: int) -> dict:
    """Central-difference derivatives of a fine-grid field, evaluated only
    at the coarse nodes (composed stencils gathered by fancy indexing)."""
    NF = v.shape[0]
    N = NF // S
    base = S * np.arange(N)

    def gather(ox, oy):
        if ox == 0 and oy == 0 and S == 1:
            return v
        return v[np.ix_((base + ox) % NF, (base + oy) % NF)]

    out = {
        "v": gather(0, 0),
        "dx": sum(c * gather(s, 0) for s, c in _C4) * NF,
        "dy": sum(c * gather(0, s) for s, c in _C4) * NF,
        "dxx": sum(c * gather(s, 0) for s, c in _C4SQ) * NF**2,
        "dyy": sum(c * gather(0, s) for s, c in _C4SQ) * NF**2,
        "dxy": sum(a * b * gather(s1, s2) for s1, a in _C4 for s2, b in _C4) * NF**2,
    }
    return out


def smooth(model: MetricModel, eps: float, oversample: int = 1) -> SmoothedMetric:
    """Mollify: g_eps = g * rho_eps with derivative fields.

    ``oversample`` refines the quadrature grid for the convolution and the
    composed difference stencils (N_fine = oversample * N); the returned
    fields always live on the model's N-grid. Needed only when eps is a
    small multiple of the grid spacing.
    """
    model.require_sampled()
    N = model.N
    S = int(oversample)
    if S < 1:
        raise MetricError("oversample must be >= 1")
    NF = S * N
    kernel = mollifier_kernel(eps, NF)

    # deduplicate shared component trees (conformal metrics share g11 = g22)
    unique: dict[int, tuple[ex.Node, list]] = {}
    for (i, j), tree in model.components().items():
        unique.setdefault(id(tree), (tree, []))[1].append((i, j))

    g_eps = np.zeros((N, N, 2, 2))
    dg = np.zeros((N, N, 2, 2, 2))
    d2g = np.zeros((N, N, 2, 2, 2, 2))
    XF = YF = None
    for tree, pairs in unique.values():
        if isinstance(tree, ex.Num):
            for i, j in pairs:
                g_eps[..., i, j] = tree.value
                g_eps[..., j, i] = tree.value
            continue
        if S == 1:
            comp = model.g[..., pairs[0][0], pairs[0][1]]
        else:
            if XF is None:
                XF, YF = node_coordinates(NF)
            comp = ex.compile_expr(tree)(XF, YF)
        conv = convolve_array(comp, kernel)
        del comp
        d = _coarse_derivatives(conv, S)
        del conv
        for i, j in pairs:
            for tgt in ((i, j), (j, i)):
                g_eps[..., tgt[0], tgt[1]] = d["v"]
                dg[..., 0, tgt[0], tgt[1]] = d["dx"]
                dg[..., 1, tgt[0], tgt[1]] = d["dy"]
                d2g[..., 0, 0, tgt[0], tgt[1]] = d["dxx"]
                d2g[..., 1, 1, tgt[0], tgt[1]] = d["dyy"]
                d2g[..., 0, 1, tgt[0], tgt[1]] = d["dxy"]
                d2g[..., 1, 0, tgt[0], tgt[1]] = d["dxy"]

    try:
        _check_spd(g_eps, model.det_floor, what="smoothed metric", eps=eps)
    except MetricError as err:
        raise MetricError(str(err) + _eps_max_hint(model, eps)) from None
    g_inv = _inv2(g_eps)
    sm = SmoothedMetric(eps=eps, N=N, oversample=S, g=g_eps, dg=dg, d2g=d2g,
                        g_inv=g_inv, model=model)
    _check_inverse(sm)
    return sm


def _eps_max_hint(model: MetricModel, eps: float) -> str:
    for k in range(1, 5):
        trial = eps / 2**k
        try:
            sm = smooth(model, trial)
        except MetricError:
            continue
        return f"; largest tested eps that stays SPD: eps_max ~ {sm.eps:g}"
    return "; no SPD eps found down to eps/16"


def _check_inverse(sm: SmoothedMetric, tol: float = 1e-10):
    prod = np.einsum("...ij,...jk->...ik", sm.g_inv, sm.g)
    ident = np.zeros_like(prod)
    ident[..., 0, 0] = ident[..., 1, 1] = 1.0
    err = np.max(np.abs(prod - ident))
    if err > tol:
        raise MetricError(f"inverse metric check failed: |g_inv g - I| = {err:.2e}")


def equivalence_delta(model: MetricModel, sm: SmoothedMetric) -> float:
    """Measured sup of |g_eps(v,v)/g(v,v) - 1| via the 2x2 pencil (g_eps, g)."""
    model.require_sampled()
    lam_min, lam_max = _pencil_eig_range(sm.g, model.g)
    return float(max(abs(lam_min - 1.0), abs(lam_max - 1.0)))


def _pencil_eig_range(A: np.ndarray, B: np.ndarray):
    """Extreme generalized eigenvalues of (A, B), B SPD, both 2x2 fields."""
    a = _det2(B)
    b = (A[..., 0, 0] * B[..., 1, 1] + A[..., 1, 1] * B[..., 0, 0]
         - 2.0 * A[..., 0, 1] * B[..., 0, 1])
    c = _det2(A)
    disc = np.sqrt(np.maximum(b * b - 4.0 * a * c, 0.0))
    return float(((b - disc) / (2 * a)).min()), float(((b + disc) / (2 * a)).max())

"""Pointwise (off-grid) metric evaluation for flow computations.

Two backends provide g, dg, d2g at arbitrary points of the torus:

* AnalyticMetricField wraps an expression-backed model (compiled component
  evaluators); valid wherever the model has classical derivatives.
* SplineMetricField wraps a SmoothedMetric: each component of g_eps is
  interpolated by a periodic cubic B-spline, and the derivatives are the
  exact derivatives of that interpolant, so geodesic and variational
  quantities are internally consistent with a single C^2 metric field.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import expr as ex
from .curvature import christoffel_arrays, curvature_arrays, dgamma_arrays
from .metric import MetricModel, SmoothedMetric, _det2, _inv2


class MetricField:
    """Pointwise metric data; points are (..., 2) arrays in torus coords."""

    is_flat: bool = False

    def g(self, p: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def dg(self, p: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def d2g(self, p: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    # global eigenvalue range of g over the grid (distance pruning bounds)
    def eig_range(self) -> tuple[float, float]:
        raise NotImplementedError

    def g_inv(self, p):
        return _inv2(self.g(p))

    def sqrt_det(self, p):
        return np.sqrt(_det2(self.g(p)))

    def christoffel(self, p):
        return christoffel_arrays(_inv2(self.g(p)), self.dg(p))

    def gamma_and_dgamma(self, p):
        g_inv = _inv2(self.g(p))
        dg = self.dg(p)
        return (christoffel_arrays(g_inv, dg),
                dgamma_arrays(g_inv, dg, self.d2g(p)))

    def curvature(self, p):
        """(gamma, riem, ric) at the points."""
        return curvature_arrays(self.g(p), self.dg(p), self.d2g(p))

    def norm(self, p, v):
        """|v|_g at p for (..., 2) vectors."""
        return np.sqrt(np.einsum("...ij,...i,...j->...", self.g(p), v, v))

    def grad(self, p, dphi):
        """Raise an index: g^{-1} dphi."""
        return np.einsum("...ij,...j->...i", self.g_inv(p), dphi)


class AnalyticMetricField(MetricField):
    """Metric data from the model's compiled component expressions."""

    def __init__(self, model: MetricModel):
        self.model = model
        self.is_flat = model.is_flat()
        self._eig: tuple[float, float] | None = None
        self._g_fns = {k: ex.compile_expr(t) for k, t in model.components().items()}
        self._d1_fns = {k: ex.compile_expr(t) for k, t in model.d_components().items()}
        self._d2_fns = {k: ex.compile_expr(t) for k, t in model.d2_components().items()}

    def g(self, p):
        x, y = p[..., 0], p[..., 1]
        out = np.zeros(p.shape[:-1] + (2, 2))
        for (i, j), fn in self._g_fns.items():
            v = fn(x, y)
            out[..., i, j] = v
            out[..., j, i] = v
        return out

    def dg(self, p):
        x, y = p[..., 0], p[..., 1]
        out = np.zeros(p.shape[:-1] + (2, 2, 2))
        for (k, i, j), fn in self._d1_fns.items():
            v = fn(x, y)
            out[..., k, i, j] = v
            out[..., k, j, i] = v
        return out

    def d2g(self, p):
        x, y = p[..., 0], p[..., 1]
        out = np.zeros(p.shape[:-1] + (2, 2, 2, 2))
        for (m, k, i, j), fn in self._d2_fns.items():
            v = fn(x, y)
            for a, b in ((m, k), (k, m)):
                out[..., a, b, i, j] = v
                out[..., a, b, j, i] = v
        return out

    def eig_range(self):
        if self._eig is None:
            t = (np.arange(64) + 0.5) / 64
            X, Y = np.meshgrid(t, t, indexing="ij")
            g = self.model.eval_g(X, Y)
            tr = g[..., 0, 0] + g[..., 1, 1]
            disc = np.sqrt(np.maximum(tr * tr - 4 * _det2(g), 0.0))
            self._eig = (float(((tr - disc) / 2).min()), float(((tr + disc) / 2).max()))
        return self._eig


# ---------------------------------------------------------------------------
# periodic cubic B-spline interpolation
# ---------------------------------------------------------------------------


def _bspline_prefilter(samples: np.ndarray) -> np.ndarray:
    """Periodic cubic B-spline coefficients (exact FFT deconvolution)."""
    N = samples.shape[0]
    k = np.arange(N)
    b = (4.0 + 2.0 * np.cos(2 * np.pi * k / N)) / 6.0
    denom = np.outer(b, b)
    return np.real(np.fft.ifft2(np.fft.fft2(samples) / denom))


def _b3_weights(frac: np.ndarray, order: int) -> np.ndarray:
    """Cubic B-spline basis (or derivative) weights on the 4-point stencil.

    Stencil offsets are (-1, 0, 1, 2) relative to floor(t); returns
    (..., 4). ``order`` 0/1/2 selects value / d/ds / d2/ds2 in grid units.
    """
    s = frac[..., None] - np.array([-1.0, 0.0, 1.0, 2.0])
    a = np.abs(s)
    if order == 0:
        w = np.where(
            a < 1.0, (4.0 - 6.0 * a**2 + 3.0 * a**3) / 6.0,
            np.where(a < 2.0, (2.0 - a) ** 3 / 6.0, 0.0),
        )
    elif order == 1:
        mag = np.where(
            a < 1.0, (-12.0 * a + 9.0 * a**2) / 6.0,
            np.where(a < 2.0, -3.0 * (2.0 - a) ** 2 / 6.0, 0.0),
        )
        w = np.sign(s) * mag
    else:
        w = np.where(
            a < 1.0, (-12.0 + 18.0 * a) / 6.0,
            np.where(a < 2.0, (2.0 - a), 0.0),
        )
    return w


class _PeriodicSpline:
    """Scalar periodic bicubic interpolant with exact derivatives."""

    def __init__(self, samples: np.ndarray):
        self.N = samples.shape[0]
        self.coef = _bspline_prefilter(samples)

    def _stencil(self, t):
        i0 = np.floor(t).astype(int)
        frac = t - i0
        idx = (i0[..., None] + np.array([-1, 0, 1, 2])) % self.N
        return idx, frac

    def eval(self, p: np.ndarray, dx: int = 0, dy: int = 0) -> np.ndarray:
        N = self.N
        tx = p[..., 0] * N
        ty = p[..., 1] * N
        ix, fx = self._stencil(tx)
        iy, fy = self._stencil(ty)
        wx = _b3_weights(fx, dx) * N**dx
        wy = _b3_weights(fy, dy) * N**dy
        patch = self.coef[ix[..., :, None], iy[..., None, :]]
        return np.einsum("...ab,...a,...b->...", patch, wx, wy)


class SplineMetricField(MetricField):
    """C^2 interpolant of a smoothed metric's grid samples."""

    def __init__(self, sm: SmoothedMetric):
        self.sm = sm
        self._splines = {
            (i, j): _PeriodicSpline(sm.g[..., i, j]) for i, j in ((0, 0), (0, 1), (1, 1))
        }
        self._eig: tuple[float, float] | None = None

    def _assemble(self, p, dx, dy, extra_shape):
        out = np.zeros(p.shape[:-1] + extra_shape + (2, 2))
        for (i, j), sp in self._splines.items():
            v = sp.eval(p, dx, dy)
            out[..., i, j] = v
            out[..., j, i] = v
        return out

    def g(self, p):
        return self._assemble(p, 0, 0, ())

    def dg(self, p):
        out = np.zeros(p.shape[:-1] + (2, 2, 2))
        for (i, j), sp in self._splines.items():
            for k, (dx, dy) in enumerate(((1, 0), (0, 1))):
                v = sp.eval(p, dx, dy)
                out[..., k, i, j] = v
                out[..., k, j, i] = v
        return out

    def d2g(self, p):
        out = np.zeros(p.shape[:-1] + (2, 2, 2, 2))
        orders = {(0, 0): (2, 0), (0, 1): (1, 1), (1, 1): (0, 2)}
        for (i, j), sp in self._splines.items():
            for (m, k), (dx, dy) in orders.items():
                v = sp.eval(p, dx, dy)
                for a, b in ((m, k), (k, m)):
                    out[..., a, b, i, j] = v
                    out[..., a, b, j, i] = v
        return out

    def eig_range(self):
        if self._eig is None:
            g = self.sm.g
            tr = g[..., 0, 0] + g[..., 1, 1]
            disc = np.sqrt(np.maximum(tr * tr - 4 * _det2(g), 0.0))
            self._eig = (float(((tr - disc) / 2).min()), float(((tr + disc) / 2).max()))
        return self._eig


def as_metric_field(metric) -> MetricField:
    """Coerce a model / smoothed metric / field to a MetricField."""
    if isinstance(metric, MetricField):
        return metric
    if isinstance(metric, SmoothedMetric):
        return SplineMetricField(metric)
    if isinstance(metric, MetricModel):
        return AnalyticMetricField(metric)
    raise TypeError(f"cannot view {type(metric).__name__} as a metric field")

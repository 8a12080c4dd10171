"""Periodic-grid numerics on the unit 2-torus.

Fields live on a uniform N x N grid over [0,1)^2 with node (i, j) at
(i/N, j/N); axis 0 is x, axis 1 is y, and all index arithmetic is modulo N.
This module provides the field container, rectangle-rule quadrature,
periodic central differences, and periodic convolution with compactly
supported mollifier kernels.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

RANK_SHAPES = {"scalar": (), "vector": (2,), "matrix": (2, 2)}

# Direct summation costs nnz * N^2 element updates; switch to the
# (mathematically identical) FFT path once that exceeds this budget.
DIRECT_CONV_BUDGET = 2**24


class GridError(ValueError):
    """Raised when a grid operation's preconditions are violated."""


@dataclass(frozen=True)
class PeriodicGridField:
    """Scalar-, vector-, or matrix-valued samples on the periodic N x N grid."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", v)
        if v.ndim < 2 or v.shape[0] != v.shape[1]:
            raise GridError(f"field values must be (N, N, ...), got shape {v.shape}")
        if v.shape[2:] not in RANK_SHAPES.values():
            raise GridError(f"unsupported component shape {v.shape[2:]}")
        if not np.all(np.isfinite(v)):
            raise GridError("field contains non-finite values")

    @property
    def resolution(self) -> int:
        return self.values.shape[0]

    @property
    def spacing(self) -> float:
        return 1.0 / self.resolution

    @property
    def rank(self) -> str:
        for name, shape in RANK_SHAPES.items():
            if self.values.shape[2:] == shape:
                return name
        raise AssertionError

    def is_symmetric(self, tol: float = 0.0) -> bool:
        """For matrix fields: whether m12 == m21 at every node."""
        if self.rank != "matrix":
            raise GridError("symmetry is defined for matrix fields only")
        return bool(
            np.max(np.abs(self.values[..., 0, 1] - self.values[..., 1, 0])) <= tol
        )

    @classmethod
    def from_function(cls, f, N: int) -> "PeriodicGridField":
        X, Y = node_coordinates(N)
        return cls(np.asarray(f(X, Y), dtype=float))

    @classmethod
    def constant(cls, value, N: int, rank: str = "scalar") -> "PeriodicGridField":
        shape = (N, N) + RANK_SHAPES[rank]
        return cls(np.broadcast_to(np.asarray(value, dtype=float), shape).copy())


def node_coordinates(N: int):
    """Meshgrid (X, Y) of node coordinates, indexing='ij' (axis 0 = x)."""
    t = np.arange(N) / N
    return np.meshgrid(t, t, indexing="ij")


# ---------------------------------------------------------------------------
# mollifier kernels
# ---------------------------------------------------------------------------


def _bump_profile(q: np.ndarray) -> np.ndarray:
    """exp(-1/(1-q)) for q < 1, else 0, with q = |z|^2."""
    out = np.zeros_like(q)
    m = q < 1.0
    out[m] = np.exp(-1.0 / (1.0 - q[m]))
    return out


@dataclass(frozen=True)
class Kernel:
    """Discrete mollifier: cell-averaged samples of rho_eps on its support.

    ``weights`` is the (2r+1) x (2r+1) array of quadrature weights (profile
    samples times h^2), renormalized so the discrete mass is exactly 1.
    Derivative kernels (kind 'dx'/'dy') carry the same normalization factor
    and are corrected to exact zero mean so constants are annihilated.
    """

    eps: float
    resolution: int
    weights: np.ndarray
    kind: str = "value"

    @property
    def radius_nodes(self) -> int:
        return (self.weights.shape[0] - 1) // 2

    @property
    def discrete_mass(self) -> float:
        return float(self.weights.sum())

    def embedded(self) -> np.ndarray:
        """Weights scattered onto the full N x N grid (wrap layout)."""
        N = self.resolution
        r = self.radius_nodes
        K = np.zeros((N, N))
        idx = np.arange(-r, r + 1) % N
        np.add.at(
            K,
            (np.repeat(idx, 2 * r + 1), np.tile(idx, 2 * r + 1)),
            self.weights.ravel(),
        )
        return K


def mollifier_kernel(eps: float, N: int, kind: str = "value", subsamples: int = 8) -> Kernel:
    """Cell-averaged radial bump kernel at scale eps on the N-grid.

    kind 'value' gives rho_eps; 'dx'/'dy' its first derivatives (used to put
    derivatives on the kernel when mollifying rough fields).
    """
    if not 0 < eps < 0.5:
        raise GridError("kernel exceeds chart")
    h = 1.0 / N
    r = int(np.ceil(eps * N)) + 1
    n = 2 * r + 1
    s = subsamples
    t = (np.arange(n * s) - (n * s - 1) / 2.0) * (h / s) / eps
    Z1, Z2 = np.meshgrid(t, t, indexing="ij")
    q = Z1 * Z1 + Z2 * Z2
    rho = _bump_profile(q)

    def box(F):
        return F.reshape(n, s, n, s).mean(axis=(1, 3))

    W0 = box(rho) / eps**2 * h * h
    kappa = 1.0 / W0.sum()
    if kind == "value":
        W = W0 * kappa
    elif kind in ("dx", "dy"):
        A = np.zeros_like(q)
        m = q < 1.0
        A[m] = 1.0 / (1.0 - q[m])
        Z = Z1 if kind == "dx" else Z2
        W = box(-2.0 * Z * A * A * rho) / eps**3 * h * h * kappa
        W -= W.sum() / W.size
    else:
        raise GridError(f"unknown kernel kind {kind!r}")
    return Kernel(eps=eps, resolution=N, weights=W, kind=kind)


# ---------------------------------------------------------------------------
# core operations
# ---------------------------------------------------------------------------


def convolve_array(values: np.ndarray, kernel: Kernel) -> np.ndarray:
    """Periodic convolution of an (N, N, ...) component array (internal)."""
    if kernel.eps >= 0.5:
        raise GridError("kernel exceeds chart")
    N = values.shape[0]
    if kernel.resolution != N:
        raise GridError(
            f"kernel sampled at N={kernel.resolution}, field at N={N}"
        )
    flat = values.reshape(N, N, -1)
    W = kernel.weights
    r = kernel.radius_nodes
    nz = np.count_nonzero(W)
    if nz * N * N * flat.shape[-1] <= DIRECT_CONV_BUDGET and 2 * r + 1 <= N:
        out = np.zeros_like(flat)
        offs = np.arange(-r, r + 1)
        for a_i, a in enumerate(offs):
            row = W[a_i]
            for b_i, b in enumerate(offs):
                w = row[b_i]
                if w != 0.0:
                    out += w * np.roll(flat, (a, b), axis=(0, 1))
    else:
        out = np.empty_like(flat)
        Kf = np.fft.rfft2(kernel.embedded())
        for c in range(flat.shape[-1]):
            out[..., c] = np.fft.irfft2(np.fft.rfft2(flat[..., c]) * Kf, s=(N, N))
    return out.reshape(values.shape)


def convolve(field: PeriodicGridField, kernel: Kernel) -> PeriodicGridField:
    """Componentwise periodic convolution with a compact kernel.

    Direct summation over the kernel support for small kernels, FFT for
    large ones; the two agree to roundoff.
    """
    return PeriodicGridField(convolve_array(field.values, kernel))


_FD_STENCILS = {
    "central2": ((1, -1), (0.5, -0.5)),
    "central4": ((1, -1, 2, -2), (8 / 12, -8 / 12, -1 / 12, 1 / 12)),
}


def finite_diff(field: PeriodicGridField, axis: str, scheme: str = "central4") -> PeriodicGridField:
    """Periodic central difference along 'x' (axis 0) or 'y' (axis 1)."""
    N = field.resolution
    if N < 8:
        raise GridError("finite differences need N >= 8")
    try:
        ax = {"x": 0, "y": 1}[axis]
    except KeyError:
        raise GridError(f"axis must be 'x' or 'y', got {axis!r}") from None
    try:
        shifts, coeffs = _FD_STENCILS[scheme]
    except KeyError:
        raise GridError(f"unknown scheme {scheme!r}") from None
    v = field.values
    out = np.zeros_like(v)
    for s, c in zip(shifts, coeffs):
        out += c * np.roll(v, -s, axis=ax)
    return PeriodicGridField(out * N)


def integrate(field: PeriodicGridField, weight: PeriodicGridField | None = None) -> float:
    """Rectangle-rule integral sum(field * weight) * h^2 over the torus."""
    v = field.values
    if weight is not None:
        if weight.resolution != field.resolution:
            raise GridError("weight resolution mismatch")
        if v.ndim != 2 or weight.values.ndim != 2:
            raise GridError("integrate expects scalar fields")
        v = v * weight.values
    return float(v.sum()) / field.resolution**2


def shift_nodes(field: PeriodicGridField, di: int, dj: int) -> PeriodicGridField:
    """Translate a field by an integer number of nodes (exact on the torus)."""
    return PeriodicGridField(np.roll(field.values, (di, dj), axis=(0, 1)))


# ---------------------------------------------------------------------------
# serialization: CSV payload plus JSON header
# ---------------------------------------------------------------------------

FIELD_FORMAT = "curvlab-field-v1"

_COMPONENT_NAMES = {
    "scalar": ["c"],
    "vector": ["c0", "c1"],
    "matrix": ["c00", "c01", "c10", "c11"],
}


def write_field(field: PeriodicGridField, base_path: str) -> tuple[str, str]:
    """Write <base>.json (header) and <base>.csv (one row per node)."""
    names = _COMPONENT_NAMES[field.rank]
    header = {
        "format": FIELD_FORMAT,
        "resolution": field.resolution,
        "rank": field.rank,
        "components": names,
    }
    json_path = base_path + ".json"
    csv_path = base_path + ".csv"
    with open(json_path, "w") as fh:
        json.dump(header, fh, sort_keys=True, indent=2)
        fh.write("\n")
    N = field.resolution
    flat = field.values.reshape(N, N, -1)
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["i", "j"] + names)
        for i in range(N):
            for j in range(N):
                w.writerow([i, j] + [repr(float(x)) for x in flat[i, j]])
    return json_path, csv_path


def read_field(base_path: str) -> PeriodicGridField:
    with open(base_path + ".json") as fh:
        header = json.load(fh)
    if header.get("format") != FIELD_FORMAT:
        raise GridError(f"not a {FIELD_FORMAT} file: {base_path}")
    N = int(header["resolution"])
    rank = header["rank"]
    ncomp = len(_COMPONENT_NAMES[rank])
    flat = np.zeros((N, N, ncomp))
    with open(base_path + ".csv", newline="") as fh:
        rows = csv.reader(fh)
        next(rows)
        for row in rows:
            i, j = int(row[0]), int(row[1])
            flat[i, j] = [float(x) for x in row[2:]]
    return PeriodicGridField(flat.reshape((N, N) + RANK_SHAPES[rank]))

"""curvlab: numerical laboratory for lower Ricci bounds of low-regularity
metrics on the flat 2-torus.

Two notions of a lower bound Ric >= K are implemented and cross-validated:
the distributional one, checked through mollifier regularization of the
metric, and the synthetic one, checked through displacement convexity of
entropy along Wasserstein geodesics.
"""

__version__ = "0.1.0"

from .grid import (
    Kernel,
    PeriodicGridField,
    convolve,
    finite_diff,
    integrate,
    mollifier_kernel,
    node_coordinates,
)
from .expr import ExprError, parse_field
from .metric import (
    MetricModel,
    SmoothedMetric,
    STANDARD_METRICS,
    build_components,
    build_conformal,
    load_metric_spec,
    sample,
    smooth,
)
from .curvature import (
    BoundReport,
    CurvatureFields,
    bound_check,
    christoffel,
    distributional_pairing,
    riemann_ricci,
)

__all__ = [
    "Kernel",
    "PeriodicGridField",
    "convolve",
    "finite_diff",
    "integrate",
    "mollifier_kernel",
    "node_coordinates",
    "ExprError",
    "parse_field",
    "MetricModel",
    "SmoothedMetric",
    "STANDARD_METRICS",
    "build_components",
    "build_conformal",
    "load_metric_spec",
    "sample",
    "smooth",
    "BoundReport",
    "CurvatureFields",
    "bound_check",
    "christoffel",
    "distributional_pairing",
    "riemann_ricci",
    "__version__",
]

"""Set-to-set distances between tracklets viewed as probability measures.

A tracklet (a sequence of per-frame feature vectors) is summarised either as
an empirical measure or as a Gaussian, and two tracklets are compared with
the 2-Wasserstein distance: exactly, with Sinkhorn scaling, or with the
Gaussian closed form.  Mean pooling with the Euclidean distance is kept as
the baseline.
"""

from setdist.measures import (
    EmpiricalMeasure,
    GaussianMeasure,
    Tracklet,
    estimate_empirical,
    estimate_gaussian,
    moving_average,
)
from setdist.ot import (
    ConvergenceError,
    DistanceParams,
    DistanceResult,
    brute_force_w2_oracle,
    cost_matrix,
    exact_w2,
    gaussian_w2,
    grad_ot_points,
    mean_euclid,
    set_distance,
    sinkhorn_w2,
)

__version__ = "0.1.0"

__all__ = [
    "ConvergenceError",
    "DistanceParams",
    "DistanceResult",
    "EmpiricalMeasure",
    "GaussianMeasure",
    "Tracklet",
    "brute_force_w2_oracle",
    "cost_matrix",
    "estimate_empirical",
    "estimate_gaussian",
    "exact_w2",
    "gaussian_w2",
    "grad_ot_points",
    "mean_euclid",
    "moving_average",
    "set_distance",
    "sinkhorn_w2",
]

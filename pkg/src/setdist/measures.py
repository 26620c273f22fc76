"""Tracklets, the two probability estimators, and temporal smoothing."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_EPS = 1e-6


def _as_feature_matrix(features, name: str = "features") -> np.ndarray:
    arr = np.asarray(features, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be a 2-D (n x dim) matrix, got shape {arr.shape}")
    if arr.shape[0] == 0:
        raise ValueError("empty feature set")
    if arr.shape[1] == 0:
        raise ValueError(f"{name} must have dim >= 1")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


@dataclass(frozen=True)
class Tracklet:
    """One person tracklet: ``frames`` is an (n, dim) feature matrix."""

    frames: np.ndarray
    identity: int
    camera: int
    tracklet_id: str

    def __post_init__(self):
        frames = _as_feature_matrix(self.frames, "frames")
        if self.identity < 0 or self.camera < 0:
            raise ValueError("identity and camera labels must be nonnegative")
        object.__setattr__(self, "frames", frames)

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


@dataclass(frozen=True)
class EmpiricalMeasure:
    """Uniform mixture of Diracs at the rows of ``points``."""

    points: np.ndarray

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def weights(self) -> np.ndarray:
        return np.full(self.n, 1.0 / self.n)

    def mean(self) -> np.ndarray:
        return self.points.mean(axis=0)


@dataclass(frozen=True)
class GaussianMeasure:
    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        cov = np.asarray(self.covariance, dtype=np.float64)
        if mean.ndim != 1 or cov.shape != (mean.shape[0], mean.shape[0]):
            raise ValueError(f"mean {mean.shape} and covariance {cov.shape} do not agree")
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(cov))):
            raise ValueError("Gaussian parameters must be finite")
        scale = max(1.0, float(np.abs(cov).max())) if cov.size else 1.0
        if cov.size and np.abs(cov - cov.T).max() > 1e-12 * scale:
            raise ValueError("covariance is not symmetric")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", 0.5 * (cov + cov.T))

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


def estimate_empirical(features) -> EmpiricalMeasure:
    """KDE with a Dirac kernel: the points are kept exactly as given."""
    return EmpiricalMeasure(_as_feature_matrix(features))


def estimate_gaussian(features, eps: float = DEFAULT_EPS) -> GaussianMeasure:
    """Fit N(mean, cov + eps*I) with the population (1/n) covariance.

    ``eps`` is always added, so the covariance is strictly positive definite
    even for a single frame.
    """
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    x = _as_feature_matrix(features)
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / x.shape[0]
    cov = 0.5 * (cov + cov.T)
    cov[np.diag_indices_from(cov)] += eps
    return GaussianMeasure(mean=mean, covariance=cov)


def moving_average(frames, window: int) -> np.ndarray:
    """Trailing-window mean over consecutive frames.

    Row ``k`` of the result is the mean of input rows ``k .. k+window-1``, so
    the output has ``n - window + 1`` rows.  ``window == 1`` returns an
    unmodified copy of the input.
    """
    x = _as_feature_matrix(frames, "frames")
    window = int(window)
    if window < 1:
        raise ValueError(f"window must be >= 1, got {window}")
    if window > x.shape[0]:
        raise ValueError(
            f"window exceeds sequence length ({window} > {x.shape[0]})"
        )
    if window == 1:
        return x.copy()
    views = np.lib.stride_tricks.sliding_window_view(x, window, axis=0)
    return views.mean(axis=-1)

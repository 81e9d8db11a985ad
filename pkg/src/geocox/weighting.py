"""Distance-decay kernels and per-subject geographic weights."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graph import DistanceMatrix
from .survival import Cohort

KERNELS = ("indicator", "exponential", "gaussian", "bisquare", "stochastic-neighborhood")
DISTANCE_SOURCES = ("graph", "greatcircle")

# weights below this are treated as exact zeros
UNDERFLOW = 1e-12

_SOURCE_ALIASES = {
    "graph": "graph",
    "greatcircle": "greatcircle",
    "great-circle": "greatcircle",
    "great-circle-normalized": "greatcircle",
}


class SchemeError(ValueError):
    pass


@dataclass(frozen=True)
class WeightScheme:
    """How a between-location distance turns into a weight.

    Parameters
    ----------
    kernel : str
        One of ``KERNELS``.
    bandwidth : float, optional
        Decay scale ``h``; required by exponential, gaussian and
        stochastic-neighborhood.
    threshold : float, optional
        Cut-off distance for indicator and bisquare, or the full-weight
        radius ``d_l`` for stochastic-neighborhood. Graph-distance
        stochastic-neighborhood schemes use ``d_l = 1``.
    distance_source : {"graph", "greatcircle"}
    """

    kernel: str = "stochastic-neighborhood"
    bandwidth: float | None = None
    threshold: float | None = None
    distance_source: str = "graph"

    def __post_init__(self):
        if self.kernel not in KERNELS:
            raise SchemeError(f"unknown kernel {self.kernel!r}; choose from {KERNELS}")
        source = _SOURCE_ALIASES.get(self.distance_source)
        if source is None:
            raise SchemeError(f"unknown distance source {self.distance_source!r}")
        object.__setattr__(self, "distance_source", source)
        if self.kernel in ("exponential", "gaussian", "stochastic-neighborhood"):
            if self.bandwidth is None or not self.bandwidth > 0:
                raise SchemeError(f"{self.kernel} kernel needs a positive bandwidth")
        threshold = self.threshold
        if self.kernel == "stochastic-neighborhood" and source == "graph":
            if threshold is not None and threshold != 1:
                raise SchemeError("graph-distance stochastic-neighborhood fixes threshold = 1")
            threshold = 1.0
        if self.kernel in ("indicator", "bisquare", "stochastic-neighborhood"):
            if threshold is None or not threshold >= 0:
                raise SchemeError(f"{self.kernel} kernel needs a nonnegative threshold")
        if self.kernel == "bisquare" and threshold == 0:
            raise SchemeError("bisquare threshold must be positive")
        object.__setattr__(self, "threshold", None if threshold is None else float(threshold))
        if self.bandwidth is not None:
            object.__setattr__(self, "bandwidth", float(self.bandwidth))

    def with_bandwidth(self, h: float) -> "WeightScheme":
        return WeightScheme(self.kernel, h, self.threshold, self.distance_source)

    def accepts(self, dmat: DistanceMatrix) -> bool:
        if self.distance_source == "graph":
            return dmat.source == "graph"
        return dmat.source in ("great-circle", "normalized")


def county_weight(d, scheme: WeightScheme):
    """Weight for distance(s) ``d``; infinite distance maps to 0."""
    d = np.asarray(d, dtype=float)
    h, thr = scheme.bandwidth, scheme.threshold
    finite = np.isfinite(d)
    dd = np.where(finite, d, 0.0)
    with np.errstate(over="ignore", invalid="ignore"):
        if scheme.kernel == "indicator":
            w = (dd < thr).astype(float)
        elif scheme.kernel == "exponential":
            w = np.exp(-dd / h)
        elif scheme.kernel == "gaussian":
            w = np.exp(-((dd / h) ** 2))
        elif scheme.kernel == "bisquare":
            w = np.where(dd < thr, 1.0 - (dd / thr) ** 2, 0.0)
        else:
            w = np.where(dd <= thr, 1.0, np.exp(-dd / h))
    w = np.where(finite, w, 0.0)
    w = np.where(w < UNDERFLOW, 0.0, w)
    return float(w) if w.ndim == 0 else w


def location_weights(dmat: DistanceMatrix, focal: int, scheme: WeightScheme) -> np.ndarray:
    """Length-J weights of every location when fitting at ``focal``."""
    if not scheme.accepts(dmat):
        raise SchemeError(
            f"{scheme.distance_source} scheme cannot use a {dmat.source} distance matrix")
    if not 0 <= focal < dmat.size:
        raise IndexError(f"focal location {focal} out of range")
    w = np.array(county_weight(dmat.values[focal], scheme), dtype=float).reshape(-1)
    w[focal] = 1.0
    return w


def weight_matrix(dmat: DistanceMatrix, scheme: WeightScheme) -> np.ndarray:
    """Row ``s`` holds ``location_weights(dmat, s, scheme)``."""
    if not scheme.accepts(dmat):
        raise SchemeError(
            f"{scheme.distance_source} scheme cannot use a {dmat.source} distance matrix")
    w = np.array(county_weight(dmat.values, scheme), dtype=float).reshape(dmat.size, dmat.size)
    np.fill_diagonal(w, 1.0)
    return w


def expand_to_subjects(county_weights, cohort: Cohort) -> np.ndarray:
    """Give every subject the weight of its location.

    Accepts a length-J vector, or a (k, J) stack yielding (k, n).
    """
    cw = np.asarray(county_weights, dtype=float)
    if cw.shape[-1] != cohort.n_locations:
        raise SchemeError(
            f"expected {cohort.n_locations} location weights, got {cw.shape[-1]}")
    return cw[..., cohort.location]

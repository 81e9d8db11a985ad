"""scikit-learn style wrapper around the per-location fitting routines."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .cox import FitError, FitOptions, _Prepared, fit_weight_rows
from .graph import DistanceMatrix
from .survival import Cohort
from .tic import _location_terms, select_bandwidth, tic_components
from .weighting import WeightScheme, weight_matrix


def check_survival_y(y):
    """Split ``y`` into float times and boolean event flags.

    Accepts an (n, 2) array of ``(time, status)`` pairs, a pair of
    sequences, or a structured array with fields ``time`` and ``event``.
    """
    if isinstance(y, np.ndarray) and y.dtype.names:
        time = np.asarray(y["time"], dtype=float)
        status = np.asarray(y["event"])
    elif isinstance(y, tuple) and len(y) == 2:
        time = np.asarray(y[0], dtype=float).reshape(-1)
        status = np.asarray(y[1]).reshape(-1)
    else:
        arr = check_array(y, ensure_2d=True, dtype=float)
        if arr.shape[1] != 2:
            raise ValueError(f"y must have two columns (time, status), got {arr.shape[1]}")
        time, status = arr[:, 0], arr[:, 1]
    if time.shape != status.shape:
        raise ValueError("time and status have different lengths")
    if not np.all(np.isfinite(time)) or np.any(time < 0):
        raise ValueError("survival times must be finite and nonnegative")
    status = np.asarray(status, dtype=float)
    if not np.all(np.isin(status, (0.0, 1.0))):
        raise ValueError("status must be 0 or 1")
    return time, status.astype(bool)


def check_locations(locations, n_samples: int, labels=None):
    """Map location labels or codes to integer indices.

    With ``labels`` the entries are looked up by name (integers also
    accepted as indices); without, they must already be codes ``0..J-1``.
    """
    loc = np.asarray(locations).reshape(-1)
    if loc.size != n_samples:
        raise ValueError(f"locations has {loc.size} entries, expected {n_samples}")
    if labels is not None:
        lookup = {str(lab): i for i, lab in enumerate(labels)}
        if loc.dtype.kind in "iu":
            codes = loc.astype(int)
        else:
            try:
                codes = np.array([lookup[str(v)] for v in loc], dtype=int)
            except KeyError as exc:
                raise ValueError(f"unknown location {exc.args[0]!r}") from None
        n = len(labels)
    else:
        if loc.dtype.kind not in "iu":
            raise ValueError("locations must be integer codes when the distances carry no labels")
        codes = loc.astype(int)
        n = None
    if codes.size and (codes.min() < 0 or (n is not None and codes.max() >= n)):
        raise ValueError("location code out of range")
    return codes


def _as_distance(distances, source):
    if isinstance(distances, DistanceMatrix):
        return distances
    return DistanceMatrix(np.asarray(distances, dtype=float), source)


class GeographicallyWeightedCox(BaseEstimator):
    """Geographically weighted Cox proportional-hazards model.

    One coefficient vector is estimated per location by maximising a
    partial likelihood in which every subject is weighted by a kernel of the
    distance between its location and the focal one.

    Parameters
    ----------
    kernel : str, default="stochastic-neighborhood"
        Distance-decay kernel, see ``geocox.weighting.KERNELS``.
    bandwidth : float, default=1.0
        Kernel scale. Ignored when ``bandwidth_grid`` is given.
    threshold : float, optional
        Indicator / bisquare cut-off, or full-weight radius of the
        stochastic-neighborhood kernel on great-circle distances.
    distance : {"graph", "greatcircle"}, default="graph"
        Kind of distance matrix passed to :meth:`fit`.
    bandwidth_grid : sequence of float, optional
        When set, ``bandwidth_`` is chosen on this grid by minimum TIC.
    max_iter : int, default=25
    tol : float, default=1e-6
        Gradient tolerance of the Newton iterations.
    contribution : {"weighted", "unweighted"}, default="weighted"
        Whether event terms of the partial likelihood are multiplied by the
        subject weight.
    allow_failures : bool, default=False
        Keep locations whose fit did not converge (coefficients NaN)
        instead of raising.

    Attributes
    ----------
    coef_ : ndarray of shape (n_locations, n_features)
    se_ : ndarray of shape (n_locations, n_features)
    converged_ : ndarray of bool
    bandwidth_ : float
    tic_ : float
        TIC of the fitted model, NaN if some location failed.
    fit_results_ : list of FitResult
    tic_trace_ : TicTrace or None
    """

    def __init__(self, kernel="stochastic-neighborhood", bandwidth=1.0, threshold=None,
                 distance="graph", bandwidth_grid=None, max_iter=25, tol=1e-6,
                 contribution="weighted", allow_failures=False):
        self.kernel = kernel
        self.bandwidth = bandwidth
        self.threshold = threshold
        self.distance = distance
        self.bandwidth_grid = bandwidth_grid
        self.max_iter = max_iter
        self.tol = tol
        self.contribution = contribution
        self.allow_failures = allow_failures

    def _options(self):
        return FitOptions(max_iterations=self.max_iter, grad_tol=self.tol,
                          contribution=self.contribution)

    def _scheme(self, h):
        needs_h = self.kernel in ("exponential", "gaussian", "stochastic-neighborhood")
        return WeightScheme(self.kernel, h if needs_h else None, self.threshold, self.distance)

    def _cohort(self, X, y, locations, n_locations, labels):
        X = check_array(X, dtype=float)
        time, event = check_survival_y(y)
        if time.size != X.shape[0]:
            raise ValueError(f"X has {X.shape[0]} rows but y has {time.size}")
        codes = check_locations(locations, X.shape[0], labels)
        if codes.size and codes.max() >= n_locations:
            raise ValueError("location code out of range")
        names = tuple(f"x{m}" for m in range(X.shape[1]))
        locs = tuple(labels) if labels is not None else tuple(str(j) for j in range(n_locations))
        return Cohort(np.arange(X.shape[0]).astype(str), time, event, X, codes, locs, names)

    def fit(self, X, y, locations, distances):
        """Fit one model per location.

        Parameters
        ----------
        X : array-like of shape (n_samples, n_features)
        y : array-like of shape (n_samples, 2) or (time, status) pair
        locations : array-like of shape (n_samples,)
            Location label or integer code of every subject.
        distances : DistanceMatrix or array-like of shape (J, J)

        Returns
        -------
        self
        """
        dmat = _as_distance(distances, "graph" if self.distance == "graph" else "great-circle")
        labels = dmat.labels
        cohort = self._cohort(X, y, locations, dmat.size, labels)
        opts = self._options()
        self.tic_trace_ = None
        if self.bandwidth_grid is not None:
            self.tic_trace_ = select_bandwidth(cohort, dmat, self._scheme(1.0),
                                               self.bandwidth_grid, opts, keep_fits=True)
            self.bandwidth_ = self.tic_trace_.selected
            fits = self.tic_trace_.fits[self.tic_trace_.selected_index]
        else:
            self.bandwidth_ = self.bandwidth
            fits = fit_weight_rows(cohort, weight_matrix(dmat, self._scheme(self.bandwidth)), opts)

        self.converged_ = np.array([f.converged for f in fits])
        if not self.allow_failures and not self.converged_.all():
            bad = np.flatnonzero(~self.converged_).tolist()
            raise FitError(f"fit failed at locations {bad}: "
                           + ", ".join(sorted({fits[j].status for j in bad})))
        self.fit_results_ = fits
        self.coef_ = np.vstack([f.beta if f.converged else np.full(cohort.p, np.nan) for f in fits])
        self.se_ = np.vstack([f.se for f in fits])
        self.locations_ = cohort.locations
        self.n_features_in_ = cohort.p
        self.distances_ = dmat
        self.tic_ = (tic_components(cohort, fits).tic if self.converged_.all() else np.nan)
        return self

    def _codes(self, X, locations):
        check_is_fitted(self, "coef_")
        X = check_array(X, dtype=float)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        labels = self.locations_ if self.distances_.labels is not None else None
        codes = check_locations(locations, X.shape[0], labels)
        if codes.size and codes.max() >= len(self.locations_):
            raise ValueError("location code out of range")
        return X, codes

    def transform(self, X, locations):
        """Local coefficient vector of each subject's location, shape (n, p)."""
        _, codes = self._codes(X, locations)
        return self.coef_[codes]

    def predict_log_hazard(self, X, locations):
        X, codes = self._codes(X, locations)
        return np.einsum("ij,ij->i", X, self.coef_[codes])

    def predict(self, X, locations):
        """Relative hazard ``exp(x' beta(s))`` at each subject's location."""
        return np.exp(self.predict_log_hazard(X, locations))

    def score(self, X, y, locations):
        """Sum over locations of the unweighted within-location log partial
        likelihood at the fitted coefficients. Larger is better."""
        X, codes = self._codes(X, locations)
        labels = self.locations_ if self.distances_.labels is not None else None
        cohort = self._cohort(X, y, codes, len(self.locations_),
                              None if labels is None else list(labels))
        ll, _ = _location_terms(_Prepared(cohort), cohort.n_locations, np.nan_to_num(self.coef_))
        events = np.bincount(cohort.location[cohort.event], minlength=cohort.n_locations)
        return float(ll[events > 0].sum())

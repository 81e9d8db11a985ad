"""Partial-likelihood TIC and grid-search bandwidth selection."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .cox import FitOptions, FitResult, _cox_terms, _Prepared, fit_weight_rows
from .graph import DistanceMatrix
from .survival import Cohort
from .weighting import WeightScheme, weight_matrix


class TicError(ValueError):
    pass


@dataclass
class TicValue:
    tic: float
    loglik_term: float
    trace_term: float
    pinv_locations: list[int] = field(default_factory=list)


@dataclass
class TicTrace:
    grid: np.ndarray
    tic: np.ndarray
    loglik_term: np.ndarray
    trace_term: np.ndarray
    n_failed_locations: np.ndarray
    selected: float
    fits: list = field(default_factory=list, repr=False)

    @property
    def selected_index(self) -> int:
        return int(np.flatnonzero(self.grid == self.selected)[0])

    def to_frame(self):
        import pandas as pd

        return pd.DataFrame({
            "h": self.grid,
            "tic": self.tic,
            "loglik_term": self.loglik_term,
            "trace_term": self.trace_term,
            "n_failed_locations": self.n_failed_locations,
            "selected": self.grid == self.selected,
        })


def _location_terms(prep: _Prepared, n_locations: int, betas: np.ndarray,
                    risk_set: str = "location"):
    """Unweighted per-location log partial likelihood and score.

    Row j uses only events at location j. With ``risk_set="location"`` the
    risk sets are also restricted to location j; ``"global"`` keeps every
    subject in them.
    """
    at = prep.location[None, :] == np.arange(n_locations)[:, None]
    C = (at & prep.event[None, :]).astype(float)
    if risk_set == "location":
        W = at.astype(float)
    elif risk_set == "global":
        W = np.ones_like(C)
    else:
        raise ValueError("risk_set must be 'location' or 'global'")
    return _cox_terms(prep, W, C, np.asarray(betas, dtype=float), 1)


def location_score(cohort: Cohort, location: int, beta_hat) -> np.ndarray:
    """Score of the unweighted Cox model fitted to one location's subjects alone."""
    beta_hat = np.asarray(beta_hat, dtype=float).reshape(-1)
    if beta_hat.size != cohort.p:
        raise ValueError(f"beta_hat has length {beta_hat.size}, expected {cohort.p}")
    prep = _Prepared(cohort)
    betas = np.zeros((cohort.n_locations, cohort.p))
    betas[location] = beta_hat
    _, grad = _location_terms(prep, cohort.n_locations, betas)
    return grad[location]


def _quad_form(info: np.ndarray, u: np.ndarray) -> tuple[float, bool]:
    """u' I^{-1} u, falling back to the pseudo-inverse for singular I."""
    with np.errstate(all="ignore"):
        cond = np.linalg.cond(info)
    if np.isfinite(cond) and cond < 1e12:
        return float(u @ np.linalg.solve(info, u)), False
    return float(u @ np.linalg.pinv(info) @ u), True


def tic_components(cohort: Cohort, fits: Sequence[FitResult], infos=None,
                   risk_set: str = "location", prep: _Prepared | None = None) -> TicValue:
    """TIC(h) = -2 * sum_j loglik_j(b_j) + 2 * sum_j U_j' I_j^{-1} U_j.

    ``loglik_j`` and ``U_j`` are the unweighted log partial likelihood and
    score of location j's own subjects at that location's estimate ``b_j``;
    ``I_j`` is the weighted observed information the fit maximised
    (``infos`` overrides ``fit.information``).
    """
    J = cohort.n_locations
    if len(fits) != J:
        raise TicError(f"expected {J} fits, got {len(fits)}")
    bad = [f.location if f.location is not None else j
           for j, f in enumerate(fits) if not f.converged]
    if bad:
        raise TicError(f"fit did not converge at locations {bad}")
    infos = [f.information for f in fits] if infos is None else list(infos)
    prep = prep or _Prepared(cohort)
    betas = np.vstack([f.beta for f in fits])
    ll, grad = _location_terms(prep, J, betas, risk_set)
    events = np.bincount(prep.location[prep.event], minlength=J)
    trace, flagged = 0.0, []
    for j in range(J):
        if events[j] == 0:
            continue
        q, used_pinv = _quad_form(np.asarray(infos[j]), grad[j])
        trace += q
        if used_pinv:
            flagged.append(j)
    if flagged:
        warnings.warn(f"singular information at locations {flagged}; used pseudo-inverse",
                      RuntimeWarning, stacklevel=2)
    loglik_term = -2.0 * float(np.sum(ll[events > 0]))
    trace_term = 2.0 * trace
    return TicValue(loglik_term + trace_term, loglik_term, trace_term, flagged)


def tic(cohort: Cohort, fits: Sequence[FitResult], infos=None, risk_set: str = "location") -> float:
    return tic_components(cohort, fits, infos, risk_set).tic


def global_tic(cohort: Cohort, fit: FitResult, risk_set: str = "location") -> TicValue:
    """TIC of a single global fit, using its estimate at every location."""
    return tic_components(cohort, [fit] * cohort.n_locations, risk_set=risk_set)


def select_bandwidth(cohort: Cohort, dmat: DistanceMatrix, scheme: WeightScheme,
                     grid: Sequence[float], opts: FitOptions | None = None,
                     risk_set: str = "location", keep_fits: bool = False) -> TicTrace:
    """Evaluate TIC over ``grid`` and pick the minimiser.

    Bandwidths at which any location fails to converge are recorded with a
    NaN TIC and excluded. Ties go to the smaller bandwidth.
    """
    grid = np.asarray(list(grid), dtype=float)
    if grid.size == 0:
        raise TicError("empty bandwidth grid")
    if np.any(grid <= 0):
        raise TicError("bandwidths must be positive")
    prep = _Prepared(cohort)
    n = grid.size
    tics, lls, trs = np.full(n, np.nan), np.full(n, np.nan), np.full(n, np.nan)
    failed = np.zeros(n, dtype=int)
    all_fits = []
    for g, h in enumerate(grid):
        fits = fit_weight_rows(cohort, weight_matrix(dmat, scheme.with_bandwidth(h)), opts, prep)
        failed[g] = sum(not f.converged for f in fits)
        if failed[g] == 0:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                v = tic_components(cohort, fits, risk_set=risk_set, prep=prep)
            tics[g], lls[g], trs[g] = v.tic, v.loglik_term, v.trace_term
        if keep_fits:
            all_fits.append(fits)
    if np.all(np.isnan(tics)):
        raise TicError("no bandwidth in the grid produced converged fits at every location")
    selected = float(grid[select_index(tics, grid)])
    return TicTrace(grid, tics, lls, trs, failed, selected, all_fits)


def select_index(tics, grid) -> int:
    """Index of the smallest finite TIC, ties broken toward the smaller bandwidth."""
    tics = np.asarray(tics, dtype=float)
    grid = np.asarray(grid, dtype=float)
    finite = np.flatnonzero(np.isfinite(tics))
    best = tics[finite].min()
    cands = finite[tics[finite] == best]
    return int(cands[np.argmin(grid[cands])])

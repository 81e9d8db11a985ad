"""Weighted Cox partial likelihood and per-location Newton-Raphson fits.

All evaluations go through :func:`_cox_terms`, which works on a stack of k
weight vectors at once so that every location of a study area can be fitted
in one vectorised Newton loop. Tied event times use the Breslow convention
(tied events share one risk-set denominator).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .graph import DistanceMatrix
from .survival import Cohort
from .weighting import WeightScheme, expand_to_subjects, weight_matrix

CONTRIBUTIONS = ("weighted", "unweighted")


class FitError(RuntimeError):
    pass


class NoWeightedEvents(FitError):
    pass


@dataclass(frozen=True)
class FitOptions:
    """Newton-Raphson controls.

    ``contribution`` selects how a subject's weight enters its own event
    term: ``"weighted"`` multiplies each event's log factor by its weight
    (the usual case-weighted Cox likelihood); ``"unweighted"`` counts every
    positively weighted event once, weights acting only inside risk sets.
    """

    max_iterations: int = 25
    ll_tol: float = 1e-9
    grad_tol: float = 1e-6
    beta_bound: float = 15.0
    max_halvings: int = 10
    step_tol: float = 1e-2
    contribution: str = "weighted"

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if min(self.ll_tol, self.grad_tol, self.beta_bound, self.step_tol) <= 0:
            raise ValueError("tolerances must be positive")
        if self.contribution not in CONTRIBUTIONS:
            raise ValueError(f"contribution must be one of {CONTRIBUTIONS}")


@dataclass
class FitResult:
    location: int | None
    beta: np.ndarray
    covariance: np.ndarray
    se: np.ndarray
    z: np.ndarray
    converged: bool
    status: str
    iterations: int
    loglik: float
    effective_events: float
    information: np.ndarray = field(repr=False)
    history: list = field(default_factory=list, repr=False)


class _Prepared:
    """Cohort in descending time order with Breslow tie groups.

    With this ordering the risk set of position i is the prefix ending at
    ``grp_end[i]``, the last position sharing its time.
    """

    def __init__(self, cohort: Cohort):
        order = cohort.order[::-1].copy()
        self.order = order
        self.n, self.p = cohort.n, cohort.p
        self.Z = np.ascontiguousarray(cohort.covariates[order])
        self.Zt = np.ascontiguousarray(self.Z.T)
        self.event = cohort.event[order]
        self.event_idx = np.flatnonzero(self.event)
        self.location = cohort.location[order]
        t = -cohort.time[order]
        _, first, inverse, counts = np.unique(
            t, return_index=True, return_inverse=True, return_counts=True)
        inverse = inverse.reshape(-1)
        # first position of each tie group (earliest in this order = same time)
        self.grp_start = first[inverse]
        self.grp_end = (first + counts - 1)[inverse]
        self.ZZ = np.einsum("np,nq->npq", self.Z, self.Z).reshape(self.n, -1)

    def sort_weights(self, w) -> np.ndarray:
        w = np.asarray(w, dtype=float)
        if w.shape[-1] != self.n:
            raise ValueError(f"weight vector length {w.shape[-1]} != n = {self.n}")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite and nonnegative")
        return np.atleast_2d(w)[:, self.order]

    def event_coef(self, W: np.ndarray, contribution: str) -> np.ndarray:
        if contribution == "weighted":
            return W * self.event
        return (W > 0) * self.event.astype(float)


def _cox_terms(prep: _Prepared, W, C, B, order: int = 2):
    """Log-likelihood (k,), and optionally score (k,p) and information (k,p,p).

    ``W`` (k,n) are risk-set weights and ``C`` (k,n) event coefficients, both
    in the prepared order; rows of ``B`` (k,p) are coefficient vectors.
    ``C`` may be nonzero only at event columns.
    """
    k = W.shape[0]
    E = prep.event_idx
    end = prep.grp_end[E]
    eta = B @ prep.Z.T
    shift = eta.max(axis=1, keepdims=True)
    a = W * np.exp(eta - shift)
    S0 = np.cumsum(a, axis=1)[:, end]
    Ce = C[:, E]
    ev = Ce > 0
    S0 = np.where(ev, S0, 1.0)
    We = np.where(ev, W[:, E], 1.0)
    ll = np.sum(Ce * (np.log(We) + eta[:, E] - np.log(S0) - shift), axis=1)
    if order == 0:
        return ll
    # sum_i C_i f(R(T_i)) = sum_j a_j H_j f_j with H_j = sum_{i: T_i <= T_j} C_i / S0_i
    r = np.zeros_like(W)
    r[:, E] = Ce / S0
    H = np.cumsum(r[:, ::-1], axis=1)[:, ::-1][:, prep.grp_start]
    aH = a * H
    grad = Ce @ prep.Z[E] - aH @ prep.Z
    if order == 1:
        return ll, grad
    second = (aH @ prep.ZZ).reshape(k, prep.p, prep.p)
    S1 = np.cumsum(a[None] * prep.Zt[:, None, :], axis=2)[:, :, end]
    zbar = (S1 / S0[None]).transpose(1, 0, 2).copy()
    outer = (zbar * Ce[:, None, :]) @ zbar.transpose(0, 2, 1)
    info = second - outer
    info = (info + np.swapaxes(info, 1, 2)) / 2
    return ll, grad, info


def _single(cohort: Cohort, w, beta, contribution: str, order: int):
    prep = _Prepared(cohort)
    W = prep.sort_weights(w)
    C = prep.event_coef(W, contribution)
    if not np.any(C > 0):
        raise NoWeightedEvents("no weighted events")
    beta = np.asarray(beta, dtype=float).reshape(1, -1)
    if beta.shape[1] != cohort.p:
        raise ValueError(f"beta has length {beta.shape[1]}, expected {cohort.p}")
    return _cox_terms(prep, W, C, beta, order)


def log_weighted_pl(cohort: Cohort, w, beta, contribution: str = "weighted") -> float:
    """Weighted log partial likelihood at ``beta``.

    Sums, over events with positive weight, the log of
    ``w_i exp(Z_i'b) / sum_{j in R(T_i)} w_j exp(Z_j'b)``; with
    ``contribution="weighted"`` each term is also multiplied by ``w_i``.
    """
    return float(_single(cohort, w, beta, contribution, 0)[0])


def score(cohort: Cohort, w, beta, contribution: str = "weighted") -> np.ndarray:
    """Gradient of :func:`log_weighted_pl` with respect to ``beta``."""
    return _single(cohort, w, beta, contribution, 1)[1][0]


def observed_information(cohort: Cohort, w, beta, contribution: str = "weighted",
                         as_printed: bool = False) -> np.ndarray:
    """Negative Hessian of :func:`log_weighted_pl`.

    ``as_printed=True`` instead evaluates the literal expression
    ``sum_i [sum_R w^2 e^{2 eta} ZZ' / S0^2 - S2 / S0]`` summed over every
    subject i (censored included). It is kept for reproducibility checks
    only and is not the curvature of the objective; fitting never uses it.
    """
    if as_printed:
        return _information_as_printed(cohort, w, beta)
    return _single(cohort, w, beta, contribution, 2)[2][0]


def _information_as_printed(cohort: Cohort, w, beta) -> np.ndarray:
    prep = _Prepared(cohort)
    W = prep.sort_weights(w)[0]
    beta = np.asarray(beta, dtype=float)
    a = W * np.exp(prep.Z @ beta)
    risk = lambda x: np.cumsum(x, axis=0)[prep.grp_end]
    S0 = risk(a)
    S2 = risk(a[:, None] * prep.ZZ)
    Q = risk((a ** 2)[:, None] * prep.ZZ)
    keep = S0 > 0
    total = (Q[keep] / S0[keep, None] ** 2 - S2[keep] / S0[keep, None]).sum(axis=0)
    return total.reshape(prep.p, prep.p)


def _solve_rows(info: np.ndarray, grad: np.ndarray):
    """Newton directions per row; NaN rows where the information is singular."""
    k, p, _ = info.shape
    delta = np.full((k, p), np.nan)
    ok = np.zeros(k, dtype=bool)
    if k == 0:
        return delta, ok
    with np.errstate(all="ignore"):
        cond = np.linalg.cond(info)
    good = np.isfinite(cond) & (cond < 1e12)
    if np.any(good):
        delta[good] = np.linalg.solve(info[good], grad[good][..., None])[..., 0]
        ok[good] = True
    return delta, ok


def _newton(prep: _Prepared, W: np.ndarray, opts: FitOptions, locations=None):
    """Vectorised Newton-Raphson with step halving over the rows of ``W``."""
    k, p = W.shape[0], prep.p
    C = prep.event_coef(W, opts.contribution)
    B = np.zeros((k, p))
    status = np.array(["running"] * k, dtype=object)
    iterations = np.zeros(k, dtype=int)
    has_events = np.any(C > 0, axis=1)
    status[~has_events] = "no_events"
    active = has_events.copy()

    ll = np.full(k, np.nan)
    grad = np.zeros((k, p))
    info = np.zeros((k, p, p))
    delta = np.zeros((k, p))
    prev_ll = np.full(k, np.nan)
    history = [[] for _ in range(k)]

    def refresh(rows):
        if rows.size == 0:
            return
        l, g, i = _cox_terms(prep, W[rows], C[rows], B[rows], 2)
        ll[rows], grad[rows], info[rows] = l, g, i
        d, ok = _solve_rows(i, g)
        delta[rows] = d
        bad = rows[~ok]
        status[bad] = "singular"
        active[bad] = False
        for r, v in zip(rows, l):
            history[r].append(float(v))

    refresh(np.flatnonzero(active))
    for it in range(opts.max_iterations + 1):
        rows = np.flatnonzero(active)
        if rows.size:
            with np.errstate(invalid="ignore", divide="ignore"):
                rel = np.abs(ll[rows] - prev_ll[rows]) / np.maximum(np.abs(prev_ll[rows]), 1e-300)
            small_grad = np.max(np.abs(grad[rows]), axis=1) < opts.grad_tol
            small_change = np.nan_to_num(rel, nan=np.inf) < opts.ll_tol
            # a tiny gradient with a large Newton step is a flattening (monotone) likelihood
            small_step = np.max(np.abs(delta[rows]), axis=1) < opts.step_tol
            done = rows[(small_grad | small_change) & small_step]
            status[done] = "converged"
            active[done] = False
        rows = np.flatnonzero(active)
        if rows.size == 0 or it == opts.max_iterations:
            break

        step = np.ones(rows.size)
        trial = B[rows] + delta[rows]
        base = ll[rows]
        tol = 1e-12 * (1.0 + np.abs(base))
        new_ll = _cox_terms(prep, W[rows], C[rows], trial, 0)
        need = ~(new_ll >= base - tol)
        for _ in range(opts.max_halvings):
            if not need.any():
                break
            step[need] /= 2
            sub = np.flatnonzero(need)
            trial[sub] = B[rows[sub]] + step[sub, None] * delta[rows[sub]]
            new_ll[sub] = _cox_terms(prep, W[rows[sub]], C[rows[sub]], trial[sub], 0)
            need[sub] = ~(new_ll[sub] >= base[sub] - tol[sub])
        stalled = rows[need]
        moved = rows[~need]
        B[moved] = trial[~need]
        prev_ll[moved] = ll[moved]
        iterations[moved] += 1
        # no ascent direction left: accept the current point only if it is stationary
        stationary = np.max(np.abs(grad[stalled]), axis=1, initial=0.0) < np.sqrt(opts.grad_tol)
        status[stalled] = np.where(stationary, "converged", "stalled")
        active[stalled] = False

        diverged = moved[np.any(np.abs(B[moved]) > opts.beta_bound, axis=1)]
        status[diverged] = "diverged"
        active[diverged] = False
        refresh(moved[np.isin(moved, diverged, invert=True)])

    status[active] = "max_iterations"

    results = []
    for r in range(k):
        conv = status[r] == "converged"
        if conv:
            cov = np.linalg.inv(info[r])
            cov = (cov + cov.T) / 2
            se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
        else:
            cov = np.full((p, p), np.nan)
            se = np.full(p, np.nan)
        with np.errstate(divide="ignore", invalid="ignore"):
            z = np.where(se > 0, B[r] / se, np.nan)
        results.append(FitResult(
            location=None if locations is None else int(locations[r]),
            beta=B[r].copy(),
            covariance=cov,
            se=se,
            z=z,
            converged=bool(conv),
            status=str(status[r]),
            iterations=int(iterations[r]),
            loglik=float(ll[r]),
            effective_events=float(np.sum(W[r] * prep.event)),
            information=info[r].copy(),
            history=history[r],
        ))
    return results


def fit_location(cohort: Cohort, w, opts: FitOptions | None = None,
                 location: int | None = None, raise_on_failure: bool = False) -> FitResult:
    """Maximise the weighted partial likelihood for one weight vector.

    Newton-Raphson from zero with step halving. The returned result carries
    ``status`` in {"converged", "diverged", "singular", "no_events",
    "stalled", "max_iterations"}; with ``raise_on_failure`` any status other
    than "converged" raises :class:`FitError` instead.
    """
    opts = opts or FitOptions()
    prep = _Prepared(cohort)
    W = prep.sort_weights(w)
    res = _newton(prep, W, opts, None if location is None else [location])[0]
    if raise_on_failure and not res.converged:
        if res.status == "no_events":
            raise NoWeightedEvents("no weighted events")
        raise FitError(res.status)
    return res


def fit_weight_rows(cohort: Cohort, county_weights: np.ndarray, opts: FitOptions | None = None,
                    prep: _Prepared | None = None) -> list[FitResult]:
    """Fit one model per row of a (J, J) location-weight matrix.

    Identical rows are fitted once and shared.
    """
    opts = opts or FitOptions()
    prep = prep or _Prepared(cohort)
    cw = np.asarray(county_weights, dtype=float)
    uniq, inverse = np.unique(cw, axis=0, return_inverse=True)
    inverse = np.asarray(inverse).reshape(-1)
    W = expand_to_subjects(uniq, cohort)[:, prep.order]
    fitted = _newton(prep, W, opts)
    out = []
    for j, u in enumerate(inverse):
        f = fitted[u]
        out.append(FitResult(j, f.beta.copy(), f.covariance.copy(), f.se.copy(), f.z.copy(),
                             f.converged, f.status, f.iterations, f.loglik,
                             f.effective_events, f.information.copy(), list(f.history)))
    return out


def fit_all_locations(cohort: Cohort, dmat: DistanceMatrix, scheme: WeightScheme,
                      opts: FitOptions | None = None) -> list[FitResult]:
    """One fit per registry location; failures are reported per result."""
    if dmat.size != cohort.n_locations:
        raise ValueError(
            f"distance matrix has {dmat.size} locations, cohort has {cohort.n_locations}")
    return fit_weight_rows(cohort, weight_matrix(dmat, scheme), opts)

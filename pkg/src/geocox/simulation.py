"""Synthetic spatial survival cohorts and replicated estimator studies."""

from __future__ import annotations

import os
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import pandas as pd

from .cox import FitOptions, _Prepared, fit_weight_rows
from .graph import (DistanceMatrix, SpatialGraph, graph_distance_matrix, great_circle_matrix,
                    normalize_to_max)
from .survival import Cohort
from .tic import _location_terms, _quad_form, select_index
from .weighting import WeightScheme, weight_matrix

BASE_BETA = (0.7, 0.5, -0.8)
COVARIATE_NAMES = ("Age", "Black", "Married")
COARSE_GRID = (0.5, 1.0, 5.0, 10.0, 25.0, 50.0)
FULL_GRID = tuple(np.round(np.arange(1, 101) * 0.5, 10))
SCENARIOS = ("null", "coordinate", "graphdist")


@dataclass(frozen=True)
class SimScenario:
    kind: str = "null"
    base_beta: tuple[float, ...] = BASE_BETA
    gradient: float | None = None
    baseline_label: str = "St. Charles"
    baseline_hazard: float = 0.03
    censor_time: float = 60.0
    censor_point_mass: float = 0.9
    size_range: tuple[int, int] = (30, 40)
    p_black: float = 0.3
    p_married: float = 0.7

    def __post_init__(self):
        if self.kind not in SCENARIOS:
            raise ValueError(f"scenario kind must be one of {SCENARIOS}")
        if self.gradient is None:
            object.__setattr__(self, "gradient", 0.12 if self.kind == "graphdist" else 0.15)
        for prob in (self.censor_point_mass, self.p_black, self.p_married):
            if not 0 <= prob <= 1:
                raise ValueError("probabilities must lie in [0, 1]")
        lo, hi = self.size_range
        if not 1 <= lo <= hi:
            raise ValueError("size range must be nonempty and positive")
        if not self.baseline_hazard > 0:
            raise ValueError("baseline hazard must be positive")


def scenario_betas(scenario: SimScenario, graph: SpatialGraph,
                   dmat: DistanceMatrix | None = None) -> np.ndarray:
    """J x 3 true coefficients for each location.

    The coordinate and graph-distance scenarios add one scalar offset per
    location to every component of the base vector.
    """
    J = graph.n_nodes
    base = np.asarray(scenario.base_beta, dtype=float)
    if scenario.kind == "null":
        offset = np.zeros(J)
    elif scenario.kind == "coordinate":
        if not graph.has_centroids:
            raise ValueError("coordinate scenario needs centroids for every location")
        latlon = np.array(graph.centroids, dtype=float)
        offset = scenario.gradient * ((latlon[:, 0] - latlon[:, 0].mean())
                                      + (latlon[:, 1] - latlon[:, 1].mean()))
    else:
        if scenario.baseline_label not in graph.labels:
            raise ValueError(f"baseline location {scenario.baseline_label!r} not in graph")
        dmat = dmat if dmat is not None else graph_distance_matrix(graph)
        b = graph.index(scenario.baseline_label)
        d = dmat.values[b]
        if not np.all(np.isfinite(d)):
            raise ValueError("graph-distance scenario needs a connected graph")
        others = np.arange(J) != b
        offset = scenario.gradient * (d - d[others].mean())
    return base[None, :] + offset[:, None]


def draw_county_sizes(rng: np.random.Generator, J: int, size_range=(30, 40)) -> np.ndarray:
    lo, hi = size_range
    return rng.integers(lo, hi, endpoint=True, size=J)


def simulate_cohort(truths, scenario: SimScenario, seed: int,
                    labels: Sequence[str] | None = None,
                    county_sizes: Sequence[int] | None = None) -> Cohort:
    """Draw one cohort from the proportional-hazards data generator.

    Per location: a size from ``scenario.size_range`` (unless
    ``county_sizes`` is given), then per subject Age ~ N(0,1),
    Black ~ Bern(p_black), Married ~ Bern(p_married), an exponential event
    time with rate ``baseline_hazard * exp(Z'beta_loc)``, and censoring at
    ``censor_time`` with probability ``censor_point_mass``, otherwise
    Uniform(0, censor_time).
    """
    truths = np.asarray(truths, dtype=float)
    J = truths.shape[0]
    rng = np.random.default_rng(seed)
    if county_sizes is None:
        sizes = draw_county_sizes(rng, J, scenario.size_range)
    else:
        sizes = np.asarray(county_sizes, dtype=int)
        if sizes.shape != (J,) or np.any(sizes < 0):
            raise ValueError("county_sizes must give a nonnegative count per location")
    loc = np.repeat(np.arange(J), sizes)
    n = loc.size
    Z = np.column_stack([
        rng.standard_normal(n),
        (rng.random(n) < scenario.p_black).astype(float),
        (rng.random(n) < scenario.p_married).astype(float),
    ])
    eta = np.einsum("np,np->n", Z, truths[loc])
    u = 1.0 - rng.random(n)
    t_true = -np.log(u) / (scenario.baseline_hazard * np.exp(eta))
    point_mass = rng.random(n) < scenario.censor_point_mass
    c = np.where(point_mass, scenario.censor_time, rng.uniform(0.0, scenario.censor_time, n))
    event = t_true <= c
    time = np.minimum(t_true, c)
    assert np.array_equal(event, t_true <= c)
    labels = tuple(labels) if labels is not None else tuple(f"loc{j}" for j in range(J))
    return Cohort(np.arange(n), time, event, Z, loc, labels, COVARIATE_NAMES)


@dataclass
class MetricsTable:
    """Long-format study metrics: one row per (variant, h, coefficient)."""

    frame: pd.DataFrame
    replicates: int
    archive: pd.DataFrame | None = None

    def get(self, variant: str, coefficient: int | str, h: float | None = None) -> pd.Series:
        f = self.frame[self.frame.variant == variant]
        if h is not None:
            f = f[np.isclose(f.h.astype(float), h)]
        if isinstance(coefficient, int):
            coefficient = f.coefficient.unique()[coefficient] if f.coefficient.dtype == object \
                else coefficient
        row = f[f.coefficient == coefficient]
        if len(row) != 1:
            raise KeyError((variant, coefficient, h))
        return row.iloc[0]


def compute_metrics(estimates, ses, truths) -> pd.DataFrame:
    """MAB, MSD, MMSE and MCP per coefficient.

    ``estimates`` and ``ses`` have shape (replicates, locations, p); NaN
    marks a failed fit, which is left out of that location's averages.
    Locations with no usable replicate are left out of the location mean.
    """
    est = np.asarray(estimates, dtype=float)
    se = np.asarray(ses, dtype=float)
    truths = np.asarray(truths, dtype=float)
    if est.ndim != 3 or est.shape != se.shape or est.shape[1:] != truths.shape:
        raise ValueError("estimates, ses and truths shapes disagree")
    if est.shape[0] < 2:
        raise ValueError("need at least 2 replicates")
    err = est - truths[None]
    valid = np.isfinite(est)
    counts = valid.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        mab_l = np.nansum(np.abs(err), axis=0) / counts
        mmse_l = np.nansum(err ** 2, axis=0) / counts
        mean_l = np.nansum(est, axis=0) / counts
        msd_l = np.sqrt(np.nansum((est - mean_l[None]) ** 2, axis=0) / (counts - 1))
        covered = np.abs(err) <= 1.96 * se
        mcp_l = np.sum(covered & valid & np.isfinite(se), axis=0) / counts
    msd_l = np.where(counts >= 2, msd_l, np.nan)
    used = counts > 0
    out = {
        "coefficient": np.arange(truths.shape[1]),
        "MAB": np.nanmean(np.where(used, mab_l, np.nan), axis=0),
        "MSD": np.nanmean(msd_l, axis=0),
        "MMSE": np.nanmean(np.where(used, mmse_l, np.nan), axis=0),
        "MCP": np.nanmean(np.where(used, mcp_l, np.nan), axis=0),
        "n_failed": (~valid).sum(axis=(0, 1)),
    }
    return pd.DataFrame(out)


@dataclass(frozen=True)
class ModelVariant:
    """A named weighting rule fitted in the study.

    ``bandwidth_free`` variants (local, global) do not depend on ``h`` and
    are fitted once per replicate.
    """

    name: str
    scheme: WeightScheme
    bandwidth_free: bool = False


def matched_threshold(graph_dmat: DistanceMatrix, gc_dmat: DistanceMatrix) -> float:
    """Great-circle radius giving as many unit weights as graph distance <= 1.

    Returns the midpoint between the matching order statistic and the next
    larger distance.
    """
    target = int(np.sum(graph_dmat.values <= 1))
    s = np.sort(gc_dmat.values.ravel())
    if target >= s.size:
        return float(s[-1])
    return float((s[target - 1] + s[target]) / 2)


def default_variants(graph: SpatialGraph, normalize_max: float | None = None,
                     thresholds=(0.5, 1.0, 2.0), include_great_circle: bool = True):
    """Local, global, graph-distance and great-circle variants.

    The great-circle matrix is normalized to the maximum graph distance
    unless ``normalize_max`` is given. A matched threshold variant is added
    whose unit-weight count equals the graph scheme's.
    """
    gd = graph_distance_matrix(graph)
    variants = [
        ModelVariant("local", WeightScheme("indicator", threshold=0.5), True),
        ModelVariant("global", WeightScheme("indicator", threshold=np.inf), True),
        ModelVariant("gd", WeightScheme("stochastic-neighborhood", bandwidth=1.0)),
    ]
    dmats = {"graph": gd}
    if include_great_circle and graph.has_centroids:
        gc = normalize_to_max(great_circle_matrix(graph), normalize_max or gd.max_finite())
        dmats["greatcircle"] = gc
        dls = list(thresholds) + [matched_threshold(gd, gc)]
        for dl in dls:
            name = f"gcd-{dl:g}" if dl in thresholds else f"gcd-matched-{dl:.4g}"
            variants.append(ModelVariant(name, WeightScheme(
                "stochastic-neighborhood", bandwidth=1.0, threshold=dl,
                distance_source="greatcircle")))
    return variants, dmats


def _replicate(task):
    """Fit every variant on one replicate; pure function of its arguments."""
    (r, seed, truths, scenario, labels, variants, dmats, grid, opts) = task
    cohort = simulate_cohort(truths, scenario, seed, labels)
    prep = _Prepared(cohort)
    J, p = truths.shape
    events = np.bincount(prep.location[prep.event], minlength=J)
    out = {}
    for v in variants:
        dmat = dmats[v.scheme.distance_source]
        hs = [None] if v.bandwidth_free else list(grid)
        est = np.full((len(hs), J, p), np.nan)
        se = np.full((len(hs), J, p), np.nan)
        tic = np.full(len(hs), np.nan)
        for g, h in enumerate(hs):
            scheme = v.scheme if h is None else v.scheme.with_bandwidth(h)
            fits = fit_weight_rows(cohort, weight_matrix(dmat, scheme), opts, prep)
            ok = np.array([f.converged for f in fits])
            est[g, ok] = np.vstack([f.beta for f in fits])[ok]
            se[g, ok] = np.vstack([f.se for f in fits])[ok]
            if ok.all():
                betas = np.vstack([f.beta for f in fits])
                ll, U = _location_terms(prep, J, betas)
                trace = sum(_quad_form(fits[j].information, U[j])[0]
                            for j in range(J) if events[j] > 0)
                tic[g] = -2.0 * ll[events > 0].sum() + 2.0 * trace
        out[v.name] = (est, se, tic)
    censored = 1.0 - cohort.event.mean()
    return r, out, censored, cohort.n


@dataclass
class StudyResult:
    metrics: MetricsTable
    by_bandwidth: pd.DataFrame
    selection: pd.DataFrame
    modal_bandwidth: dict
    truths: np.ndarray
    estimates: dict = field(repr=False, default_factory=dict)
    ses: dict = field(repr=False, default_factory=dict)
    tics: dict = field(repr=False, default_factory=dict)
    censoring: np.ndarray = field(repr=False, default=None)

    def archive(self, grid) -> pd.DataFrame:
        """Per replicate, location and coefficient estimates at each variant's modal h."""
        frames = []
        for name, est in self.estimates.items():
            g = 0 if est.shape[1] == 1 else list(grid).index(self.modal_bandwidth[name])
            R, _, J, p = est.shape
            rr, jj, mm = np.meshgrid(np.arange(R), np.arange(J), np.arange(p), indexing="ij")
            frames.append(pd.DataFrame({
                "variant": name,
                "replicate": rr.ravel(),
                "county": jj.ravel(),
                "coefficient": mm.ravel(),
                "estimate": est[:, g].ravel(),
                "se": self.ses[name][:, g].ravel(),
            }))
        return pd.concat(frames, ignore_index=True)


def run_study(scenario: SimScenario, graph: SpatialGraph, replicates: int, base_seed: int = 0,
              grid: Sequence[float] = COARSE_GRID, variants=None, dmats=None,
              opts: FitOptions | None = None, n_jobs: int = 1) -> StudyResult:
    """Replicated simulation: generate, fit each variant over ``grid``, select by TIC.

    Replicate r uses seed ``base_seed + r``, so results do not depend on
    ``n_jobs``. Metrics are reported for every (variant, h) and at each
    variant's most frequently TIC-selected bandwidth.
    """
    if replicates < 2:
        raise ValueError("need at least 2 replicates")
    grid = [float(h) for h in grid]
    if variants is None or dmats is None:
        dv, dd = default_variants(graph)
        variants = variants or dv
        dmats = dmats or dd
    truths = scenario_betas(scenario, graph, dmats.get("graph"))
    opts = opts or FitOptions()
    tasks = [(r, base_seed + r, truths, scenario, graph.labels, variants, dmats, grid, opts)
             for r in range(replicates)]
    if n_jobs == 1:
        results = [_replicate(t) for t in tasks]
    else:
        workers = n_jobs if n_jobs and n_jobs > 0 else os.cpu_count()
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_replicate, tasks, chunksize=max(1, replicates // (4 * workers))))
    results.sort(key=lambda t: t[0])

    J, p = truths.shape
    estimates, ses, tics = {}, {}, {}
    for v in variants:
        estimates[v.name] = np.stack([res[1][v.name][0] for res in results])
        ses[v.name] = np.stack([res[1][v.name][1] for res in results])
        tics[v.name] = np.stack([res[1][v.name][2] for res in results])
    censoring = np.array([res[2] for res in results])

    rows, sel_rows, modal, best_rows = [], [], {}, []
    for v in variants:
        est, se, tic = estimates[v.name], ses[v.name], tics[v.name]
        hs = [np.nan] if v.bandwidth_free else grid
        for g, h in enumerate(hs):
            m = compute_metrics(est[:, g], se[:, g], truths)
            m.insert(0, "h", h)
            m.insert(0, "variant", v.name)
            rows.append(m)
        if v.bandwidth_free:
            modal[v.name] = None
            continue
        chosen = [grid[select_index(t, grid)] for t in tic if np.any(np.isfinite(t))]
        counts = Counter(chosen)
        for h in grid:
            sel_rows.append({"variant": v.name, "h": h, "times_selected": counts.get(h, 0)})
        if counts:
            top = max(counts.values())
            modal[v.name] = min(h for h, c in counts.items() if c == top)
        else:
            modal[v.name] = None
    by_h = pd.concat(rows, ignore_index=True)
    for v in variants:
        h = modal[v.name]
        sub = by_h[by_h.variant == v.name]
        if h is not None:
            sub = sub[sub.h == h]
        elif not v.bandwidth_free:
            continue
        best_rows.append(sub)
    best = pd.concat(best_rows, ignore_index=True)
    selection = pd.DataFrame(sel_rows, columns=["variant", "h", "times_selected"])
    return StudyResult(MetricsTable(best, replicates), by_h, selection, modal, truths,
                       estimates, ses, tics, censoring)

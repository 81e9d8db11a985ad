"""Cohort data model, risk sets and the Kaplan-Meier estimator."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Sequence

import numpy as np


class CohortError(ValueError):
    """Raised when survival records fail validation."""


@dataclass(frozen=True)
class Subject:
    id: Any
    time: float
    event: bool
    covariates: tuple[float, ...]
    location: int


@dataclass(frozen=True, eq=False)
class Cohort:
    """Immutable column-oriented table of right-censored subjects.

    Attributes
    ----------
    ids : ndarray of object, shape (n,)
    time : ndarray of float, shape (n,)
    event : ndarray of bool, shape (n,)
        True when the event was observed, False when right-censored.
    covariates : ndarray of float, shape (n, p)
    location : ndarray of int, shape (n,)
        0-based index into ``locations``.
    locations : tuple of str
        Location registry; every matrix in the package indexes locations
        in this order.
    covariate_names : tuple of str
    """

    ids: np.ndarray
    time: np.ndarray
    event: np.ndarray
    covariates: np.ndarray
    location: np.ndarray
    locations: tuple[str, ...]
    covariate_names: tuple[str, ...]
    order: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        time = np.asarray(self.time, dtype=float)
        event = np.asarray(self.event, dtype=bool)
        cov = np.asarray(self.covariates, dtype=float)
        loc = np.asarray(self.location, dtype=np.intp)
        ids = np.asarray(self.ids, dtype=object)
        n = time.shape[0]
        if n == 0:
            raise CohortError("no subjects")
        if cov.ndim == 1:
            cov = cov.reshape(n, -1) if n else cov.reshape(0, 1)
        if not (event.shape == loc.shape == ids.shape == (n,)) or cov.shape[0] != n:
            raise CohortError("column lengths differ")
        if not np.all(np.isfinite(time)):
            raise CohortError("non-finite time")
        if np.any(time < 0):
            raise CohortError("negative time")
        if not np.all(np.isfinite(cov)):
            raise CohortError("non-finite covariate")
        if len(self.locations) < 1 or len(set(self.locations)) != len(self.locations):
            raise CohortError("location registry must be nonempty with unique labels")
        if np.any(loc < 0) or np.any(loc >= len(self.locations)):
            raise CohortError("location index out of registry bounds")
        if len(self.covariate_names) != cov.shape[1]:
            raise CohortError("covariate_names length differs from covariate count")
        # events sort ahead of censorings at tied times
        order = np.lexsort((~event, time))
        for name, arr in [("time", time), ("event", event), ("covariates", cov),
                          ("location", loc), ("ids", ids), ("order", order)]:
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "locations", tuple(str(s) for s in self.locations))
        object.__setattr__(self, "covariate_names", tuple(self.covariate_names))

    @property
    def n(self) -> int:
        return self.time.shape[0]

    @property
    def p(self) -> int:
        return self.covariates.shape[1]

    @property
    def n_locations(self) -> int:
        return len(self.locations)

    @property
    def subjects(self) -> list[Subject]:
        return [
            Subject(self.ids[i], float(self.time[i]), bool(self.event[i]),
                    tuple(self.covariates[i]), int(self.location[i]))
            for i in range(self.n)
        ]

    def subset(self, index) -> "Cohort":
        """Cohort restricted to ``index``, keeping the full location registry."""
        index = np.asarray(index)
        return Cohort(self.ids[index], self.time[index], self.event[index],
                      self.covariates[index], self.location[index],
                      self.locations, self.covariate_names)

    def at_location(self, j: int) -> np.ndarray:
        return np.flatnonzero(self.location == j)

    def location_counts(self) -> np.ndarray:
        return np.bincount(self.location, minlength=self.n_locations)

    @classmethod
    def from_subjects(cls, subjects: Sequence[Subject], locations, covariate_names=None):
        subjects = list(subjects)
        if not subjects:
            raise CohortError("no subjects")
        p = len(subjects[0].covariates)
        if covariate_names is None:
            covariate_names = tuple(f"x{k}" for k in range(p))
        return cls(
            ids=np.array([s.id for s in subjects], dtype=object),
            time=[s.time for s in subjects],
            event=[s.event for s in subjects],
            covariates=np.array([s.covariates for s in subjects], dtype=float).reshape(-1, p),
            location=[s.location for s in subjects],
            locations=tuple(locations),
            covariate_names=tuple(covariate_names),
        )


def _parse_status(value) -> bool:
    if isinstance(value, str):
        value = value.strip()
    try:
        f = float(value)
    except (TypeError, ValueError):
        raise CohortError(f"status {value!r} not in {{0,1}}") from None
    if f == 1:
        return True
    if f == 0:
        return False
    raise CohortError(f"status {value!r} not in {{0,1}}")


def validate_cohort(
    raw_records: Iterable[Mapping[str, Any]],
    p: int,
    covariate_names: Sequence[str] | None = None,
    locations: Sequence[str] | None = None,
) -> Cohort:
    """Build a :class:`Cohort` from parsed rows.

    Each row maps ``time``, ``status`` and ``location`` to values, plus
    either a ``covariates`` sequence of length ``p`` or one key per name in
    ``covariate_names``. Locations not in ``locations`` are registered in
    order of first appearance; pass ``locations`` to pin the registry to an
    existing ordering (e.g. the nodes of a spatial graph).
    """
    records = list(raw_records)
    if not records:
        raise CohortError("no subjects")
    if covariate_names is not None and len(covariate_names) != p:
        raise CohortError(f"expected {p} covariate names, got {len(covariate_names)}")
    fixed_registry = locations is not None
    registry: dict[str, int] = {}
    for lab in locations or ():
        registry.setdefault(str(lab), len(registry))

    ids, times, events, covs, locs = [], [], [], [], []
    for k, row in enumerate(records):
        where = f"row {k + 1}"
        try:
            t = float(row["time"])
        except (KeyError, TypeError, ValueError):
            raise CohortError(f"{where}: missing or malformed time") from None
        if not np.isfinite(t):
            raise CohortError(f"{where}: non-finite time")
        if t < 0:
            raise CohortError(f"{where}: negative time")
        try:
            status = _parse_status(row["status"])
        except KeyError:
            raise CohortError(f"{where}: missing status") from None
        except CohortError as exc:
            raise CohortError(f"{where}: {exc}") from None
        if "covariates" in row:
            x = list(row["covariates"])
        elif covariate_names is not None:
            x = [row.get(name) for name in covariate_names]
        else:
            raise CohortError(f"{where}: no covariates")
        if len(x) != p or any(v is None or v == "" for v in x):
            raise CohortError(f"{where}: covariate count mismatch (expected {p})")
        try:
            x = [float(v) for v in x]
        except (TypeError, ValueError):
            raise CohortError(f"{where}: malformed covariate") from None
        if "location" not in row:
            raise CohortError(f"{where}: missing location")
        label = str(row["location"])
        if label not in registry:
            if fixed_registry:
                raise CohortError(f"{where}: unknown location {label!r}")
            registry[label] = len(registry)
        ids.append(row.get("id", k))
        times.append(t)
        events.append(status)
        covs.append(x)
        locs.append(registry[label])

    if covariate_names is None:
        covariate_names = [f"x{k}" for k in range(p)]
    return Cohort(
        ids=np.array(ids, dtype=object),
        time=np.array(times),
        event=np.array(events),
        covariates=np.array(covs, dtype=float).reshape(len(records), p),
        location=np.array(locs),
        locations=tuple(registry),
        covariate_names=tuple(covariate_names),
    )


def risk_set(cohort: Cohort, t: float) -> np.ndarray:
    """Indices of subjects still under observation at ``t`` (time >= t)."""
    return np.flatnonzero(cohort.time >= t)


@dataclass(frozen=True)
class KmCurve:
    times: np.ndarray
    survival: np.ndarray
    at_risk: np.ndarray
    events: np.ndarray

    def __call__(self, t):
        return km_survival_at(self, t)


def kaplan_meier(cohort: Cohort, subset=None) -> KmCurve:
    """Product-limit estimate over the distinct event times of ``subset``."""
    if subset is None:
        time, event = cohort.time, cohort.event
    else:
        subset = np.asarray(subset, dtype=np.intp)
        if subset.size == 0:
            raise CohortError("empty subset")
        time, event = cohort.time[subset], cohort.event[subset]
    uniq, d = np.unique(time[event], return_counts=True)
    # risk set at t counts time >= t, so censorings tied with t stay at risk
    at_risk = time.size - np.searchsorted(np.sort(time), uniq, side="left")
    surv = np.cumprod(1.0 - d / at_risk)
    return KmCurve(uniq, surv, at_risk.astype(int), d.astype(int))


def km_survival_at(curve: KmCurve, t):
    """Right-continuous step evaluation; 1 before the first event time."""
    t = np.asarray(t, dtype=float)
    k = np.searchsorted(curve.times, t, side="right")
    out = np.where(k == 0, 1.0, curve.survival[np.maximum(k - 1, 0)] if curve.times.size else 1.0)
    return float(out) if out.ndim == 0 else out

"""CSV readers and writers, and the bundled Louisiana parish fixture."""

from __future__ import annotations

import csv
import io
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .cox import FitResult
from .graph import DistanceMatrix, SpatialGraph, build_graph
from .survival import Cohort, CohortError, validate_cohort

COHORT_FIXED = ("id", "time", "status", "location")
FIT_COLUMNS = ("location", "covariate", "estimate", "se", "z", "converged", "iterations", "loglik")


class DataFormatError(ValueError):
    pass


def fmt(x) -> str:
    """Fixed 9-significant-digit rendering used by every writer."""
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if np.isnan(x):
        return "nan"
    if np.isinf(x):
        return "inf" if x > 0 else "-inf"
    return f"{x:.9g}"


def _reader(path):
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DataFormatError(f"{path}: {exc.strerror}") from None
    return fh


def read_cohort(path, locations: Sequence[str] | None = None) -> Cohort:
    """Read ``id,time,status,location,<covariates...>``; status 1 = event."""
    with _reader(path) as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise CohortError(f"{path}: no subjects")
    header = [h.strip() for h in rows[0]]
    if tuple(header[:4]) != COHORT_FIXED:
        raise DataFormatError(
            f"{path}: header must start with {','.join(COHORT_FIXED)}, got {','.join(header[:4])}")
    names = header[4:]
    if not names:
        raise DataFormatError(f"{path}: no covariate columns")
    records = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise DataFormatError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        rec = dict(zip(header, (c.strip() for c in row)))
        rec["_line"] = lineno
        records.append(rec)
    if not records:
        raise CohortError(f"{path}: no subjects")
    try:
        return validate_cohort(records, len(names), names, locations)
    except CohortError as exc:
        msg = str(exc)
        if msg.startswith("row "):
            k = int(msg.split(":")[0].split()[1]) - 1
            msg = f"line {records[k]['_line']}:" + msg.split(":", 1)[1]
        raise CohortError(f"{path}: {msg}") from None


def write_cohort(path, cohort: Cohort) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(COHORT_FIXED) + list(cohort.covariate_names))
        for i in range(cohort.n):
            w.writerow([cohort.ids[i], fmt(cohort.time[i]), int(cohort.event[i]),
                        cohort.locations[cohort.location[i]]]
                       + [fmt(v) for v in cohort.covariates[i]])


def _parse_nodes(rows, path):
    header = [h.strip() for h in rows[0]] if rows else []
    if not header or header[0] != "label":
        raise DataFormatError(f"{path}: header must be label[,latitude,longitude]")
    nodes = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        rec = dict(zip(header, (c.strip() for c in row)))
        try:
            lat = float(rec["latitude"]) if rec.get("latitude") else None
            lon = float(rec["longitude"]) if rec.get("longitude") else None
        except ValueError:
            raise DataFormatError(f"{path}:{lineno}: malformed coordinate") from None
        nodes.append((rec["label"], lat, lon))
    return nodes


def _parse_edges(rows, path):
    header = [h.strip() for h in rows[0]] if rows else []
    if header[:2] != ["label_a", "label_b"]:
        raise DataFormatError(f"{path}: header must be label_a,label_b")
    edges = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) < 2:
            raise DataFormatError(f"{path}:{lineno}: expected two labels")
        edges.append((row[0].strip(), row[1].strip()))
    return edges


def read_graph(nodes_path, edges_path) -> SpatialGraph:
    with _reader(nodes_path) as fh:
        nodes = _parse_nodes(list(csv.reader(fh)), nodes_path)
    with _reader(edges_path) as fh:
        edges = _parse_edges(list(csv.reader(fh)), edges_path)
    return build_graph(nodes, edges)


def load_louisiana() -> SpatialGraph:
    """The 64 Louisiana parishes with shared-boundary adjacency and centroids.

    Derived from the US Census Bureau 2016 cartographic boundary county file
    (1:500k); see ``fixtures/README.md``.
    """
    base = resources.files("geocox") / "fixtures"
    nodes = _parse_nodes(list(csv.reader(io.StringIO(
        (base / "louisiana_nodes.csv").read_text(encoding="utf-8")))), "louisiana_nodes.csv")
    edges = _parse_edges(list(csv.reader(io.StringIO(
        (base / "louisiana_edges.csv").read_text(encoding="utf-8")))), "louisiana_edges.csv")
    return build_graph(nodes, edges)


def fixture_paths() -> tuple[Path, Path]:
    base = Path(str(resources.files("geocox") / "fixtures"))
    return base / "louisiana_nodes.csv", base / "louisiana_edges.csv"


def write_matrix(path, dmat: DistanceMatrix, labels: Sequence[str] | None = None) -> None:
    labels = list(labels or dmat.labels or range(dmat.size))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label"] + labels)
        for lab, row in zip(labels, dmat.values):
            w.writerow([lab] + [fmt(v) for v in row])


def read_matrix(path, source: str) -> DistanceMatrix:
    with _reader(path) as fh:
        rows = list(csv.reader(fh))
    labels = rows[0][1:]
    values = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
    if [r[0] for r in rows[1:]] != labels:
        raise DataFormatError(f"{path}: row and column labels differ")
    return DistanceMatrix(values, source, tuple(labels))


def write_fits(path, fits: Iterable[FitResult], locations: Sequence[str],
               covariate_names: Sequence[str]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(FIT_COLUMNS)
        for k, f in enumerate(fits):
            j = f.location if f.location is not None else k
            for m, name in enumerate(covariate_names):
                w.writerow([locations[j], name, fmt(f.beta[m]), fmt(f.se[m]), fmt(f.z[m]),
                            fmt(bool(f.converged)), f.iterations, fmt(f.loglik)])


def read_fits(path):
    """Read a fits CSV back as a list of row dicts with numeric fields parsed."""
    with _reader(path) as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for r in rows:
        out.append({
            "location": r["location"],
            "covariate": r["covariate"],
            "estimate": float(r["estimate"]),
            "se": float(r["se"]),
            "z": float(r["z"]),
            "converged": r["converged"] == "1",
            "iterations": int(r["iterations"]),
            "loglik": float(r["loglik"]),
        })
    return out


def write_frame(path, frame) -> None:
    """Deterministic CSV for a DataFrame: fixed float formatting, no index."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(frame.columns))
        for row in frame.itertuples(index=False):
            w.writerow([v if isinstance(v, str) else fmt(v) for v in row])

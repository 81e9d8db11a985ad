"""Command-line entry point: ``geocox <subcommand> ...``.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from .cox import FitOptions, fit_weight_rows
from .graph import (DistanceMatrix, GraphError, graph_distance_matrix, great_circle_matrix,
                    normalize_to_max)
from .io import (DataFormatError, fixture_paths, read_cohort, read_graph, write_fits,
                 write_frame, write_matrix)
from .simulation import COARSE_GRID, COVARIATE_NAMES, SimScenario, default_variants, run_study
from .survival import CohortError, kaplan_meier, km_survival_at
from .tic import TicError, select_bandwidth
from .weighting import KERNELS, SchemeError, WeightScheme, weight_matrix

log = logging.getLogger("geocox")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class NumericalFailure(RuntimeError):
    pass


def parse_grid(spec: str) -> list[float]:
    """``"a:b:step"`` (inclusive) or a comma list such as ``"0.5,1,5"``."""
    spec = spec.strip()
    try:
        if ":" in spec:
            parts = [float(x) for x in spec.split(":")]
            if len(parts) != 3:
                raise ValueError
            a, b, step = parts
            if step <= 0 or b < a:
                raise ValueError
            n = int(np.floor((b - a) / step + 1e-9)) + 1
            values = [round(a + k * step, 10) for k in range(n)]
        else:
            values = [float(x) for x in spec.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"malformed grid spec {spec!r}") from None
    if not values or any(not np.isfinite(v) or v <= 0 for v in values):
        raise argparse.ArgumentTypeError(f"malformed grid spec {spec!r}")
    return values


def _positive(x: str) -> float:
    v = float(x)
    if not v > 0:
        raise argparse.ArgumentTypeError(f"expected a positive number, got {x}")
    return v


def _graph_args(p, need_data=False):
    if need_data:
        p.add_argument("--data", required=True, help="cohort CSV: id,time,status,location,<covariates>")
    p.add_argument("--nodes", help="nodes CSV (default: bundled Louisiana parishes)")
    p.add_argument("--edges", help="edges CSV (default: bundled Louisiana parishes)")


def _scheme_args(p, bandwidth=True):
    p.add_argument("--kernel", choices=KERNELS, default="stochastic-neighborhood")
    if bandwidth:
        p.add_argument("--bandwidth", type=_positive)
    p.add_argument("--threshold", type=float)
    p.add_argument("--distance", choices=("graph", "greatcircle"), default="graph")
    p.add_argument("--normalize-max", type=_positive,
                   help="rescale great-circle distances to this maximum "
                        "(default: the maximum graph distance)")
    p.add_argument("--max-iter", type=int, default=25)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="geocox",
                                     description="Geographically weighted Cox regression.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("distances", help="write a location distance matrix")
    _graph_args(p)
    p.add_argument("--metric", choices=("graph", "greatcircle"), default="graph")
    p.add_argument("--normalize-max", type=_positive)
    p.add_argument("--out", required=True)

    p = sub.add_parser("fit", help="fit one weighted Cox model per location")
    _graph_args(p, need_data=True)
    _scheme_args(p)
    p.add_argument("--out", required=True)

    p = sub.add_parser("select-bandwidth", help="TIC over a bandwidth grid")
    _graph_args(p, need_data=True)
    _scheme_args(p, bandwidth=False)
    p.add_argument("--grid", type=parse_grid, default=list(COARSE_GRID))
    p.add_argument("--risk-set", choices=("location", "global"), default="location",
                   help="risk sets in the TIC likelihood term")
    p.add_argument("--out", required=True)

    p = sub.add_parser("simulate", help="replicated simulation study")
    _graph_args(p)
    p.add_argument("--scenario", choices=("null", "coordinate", "graphdist"), required=True)
    p.add_argument("--replicates", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--grid", type=parse_grid, default=list(COARSE_GRID))
    p.add_argument("--workers", type=int, default=1, help="processes; 0 = all cores")
    p.add_argument("--no-great-circle", action="store_true",
                   help="only fit the local, global and graph-distance variants")
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("km", help="Kaplan-Meier survival per location at time t")
    _graph_args(p, need_data=True)
    p.add_argument("--at", type=float, required=True)
    p.add_argument("--out", help="output CSV (default: stdout)")
    return parser


def parse_cli(argv=None) -> argparse.Namespace:
    """Parse and validate arguments; usage errors exit with status 2."""
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "fit":
        try:
            _scheme(args, args.bandwidth)
        except SchemeError as exc:
            parser.error(str(exc))
    elif args.command == "select-bandwidth":
        try:
            _scheme(args, 1.0)
        except SchemeError as exc:
            parser.error(str(exc))
    elif args.command == "simulate" and args.replicates < 2:
        parser.error("--replicates must be at least 2")
    if getattr(args, "max_iter", 1) < 1:
        parser.error("--max-iter must be positive")
    if (args.nodes is None) != (args.edges is None):
        parser.error("--nodes and --edges must be given together")
    return args


def _scheme(args, h) -> WeightScheme:
    needs_h = args.kernel in ("exponential", "gaussian", "stochastic-neighborhood")
    return WeightScheme(args.kernel, h if needs_h else None, args.threshold, args.distance)


def _load_graph(args):
    if args.nodes is None:
        return read_graph(*fixture_paths())
    return read_graph(args.nodes, args.edges)


def _distances(graph, metric, normalize_max=None) -> DistanceMatrix:
    gd = graph_distance_matrix(graph)
    if metric == "graph":
        return gd
    gc = great_circle_matrix(graph)
    return normalize_to_max(gc, normalize_max or gd.max_finite())


def _cmd_distances(args):
    graph = _load_graph(args)
    if args.metric == "greatcircle" and args.normalize_max is None:
        dmat = great_circle_matrix(graph)
    else:
        dmat = _distances(graph, args.metric, args.normalize_max)
    write_matrix(args.out, dmat, graph.labels)
    log.info("wrote %d x %d %s distances to %s", dmat.size, dmat.size, dmat.source, args.out)


def _cmd_fit(args):
    graph = _load_graph(args)
    cohort = read_cohort(args.data, graph.labels)
    dmat = _distances(graph, args.distance, args.normalize_max)
    fits = fit_weight_rows(cohort, weight_matrix(dmat, _scheme(args, args.bandwidth)),
                           FitOptions(max_iterations=args.max_iter))
    write_fits(args.out, fits, cohort.locations, cohort.covariate_names)
    failed = [cohort.locations[j] for j, f in enumerate(fits) if not f.converged]
    if failed:
        log.warning("%d location(s) did not converge: %s", len(failed), ", ".join(failed))
    if len(failed) == len(fits):
        raise NumericalFailure("no location converged")


def _cmd_select(args):
    graph = _load_graph(args)
    cohort = read_cohort(args.data, graph.labels)
    dmat = _distances(graph, args.distance, args.normalize_max)
    trace = select_bandwidth(cohort, dmat, _scheme(args, 1.0), args.grid,
                             FitOptions(max_iterations=args.max_iter), risk_set=args.risk_set)
    write_frame(args.out, trace.to_frame())
    log.info("selected h = %g", trace.selected)


def _cmd_simulate(args):
    graph = _load_graph(args)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    variants, dmats = default_variants(graph, include_great_circle=not args.no_great_circle)
    result = run_study(SimScenario(args.scenario), graph, args.replicates, args.seed,
                       args.grid, variants, dmats, n_jobs=args.workers)
    names = dict(enumerate(COVARIATE_NAMES))

    metrics = result.metrics.frame.copy()
    metrics["coefficient"] = metrics["coefficient"].map(names)
    write_frame(out / "metrics.csv", metrics[["variant", "coefficient", "MAB", "MSD", "MMSE", "MCP"]])

    by_h = result.by_bandwidth.copy()
    by_h["coefficient"] = by_h["coefficient"].map(names)
    write_frame(out / "metrics_by_bandwidth.csv", by_h)
    write_frame(out / "bandwidth_selection.csv", result.selection)

    arch = result.archive(args.grid)
    arch["county"] = np.asarray(graph.labels, dtype=object)[arch["county"].to_numpy()]
    arch["coefficient"] = arch["coefficient"].map(names)
    write_frame(out / "estimates.csv", arch)
    log.info("censoring fraction %.3f over %d replicates", result.censoring.mean(), args.replicates)


def _cmd_km(args):
    graph = _load_graph(args) if args.nodes else None
    cohort = read_cohort(args.data, graph.labels if graph else None)
    rows = []
    for j, label in enumerate(cohort.locations):
        idx = cohort.at_location(j)
        s = km_survival_at(kaplan_meier(cohort, idx), args.at) if idx.size else np.nan
        rows.append({"location": label, "n": idx.size, "events": int(cohort.event[idx].sum()),
                     "survival": s})
    frame = pd.DataFrame(rows, columns=["location", "n", "events", "survival"])
    if args.out:
        write_frame(args.out, frame)
    else:
        sys.stdout.write(frame.to_csv(index=False, float_format="%.9g", lineterminator="\n"))


COMMANDS = {
    "distances": _cmd_distances,
    "fit": _cmd_fit,
    "select-bandwidth": _cmd_select,
    "simulate": _cmd_simulate,
    "km": _cmd_km,
}


def main(argv=None) -> int:
    try:
        args = parse_cli(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="geocox: %(message)s")
    try:
        COMMANDS[args.command](args)
    except (CohortError, DataFormatError, GraphError) as exc:
        print(f"geocox: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except SchemeError as exc:
        print(f"geocox: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalFailure, TicError) as exc:
        print(f"geocox: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"geocox: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

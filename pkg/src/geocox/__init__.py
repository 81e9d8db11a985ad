"""Geographically weighted Cox proportional-hazards regression for areal survival data."""

from .cox import (FitError, FitOptions, FitResult, NoWeightedEvents, fit_all_locations,
                  fit_location, fit_weight_rows, log_weighted_pl, observed_information, score)
from .estimator import GeographicallyWeightedCox, check_locations, check_survival_y
from .graph import (DistanceMatrix, GraphError, SpatialGraph, build_graph, graph_distance_matrix,
                    great_circle_matrix, haversine, normalize_to_max)
from .io import load_louisiana, read_cohort, read_graph
from .simulation import SimScenario, compute_metrics, run_study, scenario_betas, simulate_cohort
from .survival import Cohort, CohortError, kaplan_meier, km_survival_at, risk_set, validate_cohort
from .tic import TicTrace, global_tic, select_bandwidth, tic, tic_components
from .weighting import WeightScheme, county_weight, location_weights, weight_matrix

__version__ = "0.1.0"

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import minimize

from geocox import (Cohort, DistanceMatrix, FitOptions, NoWeightedEvents, WeightScheme,
                    fit_all_locations, fit_location, fit_weight_rows, log_weighted_pl,
                    observed_information, score)
from geocox.cox import FitError
from conftest import naive_loglik, random_cohort


def cohort_from(time, event, Z, loc=None):
    Z = np.asarray(Z, dtype=float).reshape(len(time), -1)
    loc = np.zeros(len(time), int) if loc is None else np.asarray(loc)
    J = int(loc.max()) + 1
    return Cohort(np.arange(len(time)).astype(str), np.asarray(time, float), np.asarray(event, bool),
                  Z, loc, tuple(f"L{j}" for j in range(J)), tuple(f"z{m}" for m in range(Z.shape[1])))


def test_single_event_equal_hazards():
    c = cohort_from([1, 2, 3, 4], [1, 0, 0, 0], np.zeros(4))
    assert log_weighted_pl(c, np.ones(4), [0.0]) == pytest.approx(np.log(1 / 4))


def test_two_subjects_by_hand():
    c = cohort_from([1, 2], [1, 1], [1, 0])
    assert log_weighted_pl(c, [1, 1], [0.0]) == pytest.approx(-0.693147, abs=1e-6)


def test_zero_score_and_zero_information():
    # event covariate equals the risk-set mean
    c = cohort_from([1, 2, 3], [1, 0, 0], [1.0, 0.0, 2.0])
    assert score(c, np.ones(3), [0.0]) == pytest.approx([0.0])
    same = cohort_from([1, 2, 3], [1, 0, 0], [0.7, 0.7, 0.7])
    assert abs(observed_information(same, np.ones(3), [0.3])[0, 0]) < 1e-14


@pytest.mark.parametrize("ties", [False, True])
@pytest.mark.parametrize("contribution", ["weighted", "unweighted"])
def test_matches_naive_loop(ties, contribution):
    rng = np.random.default_rng(3)
    for _ in range(10):
        c = random_cohort(rng, n=25, p=2, ties=ties)
        w = rng.uniform(0.1, 2, c.n)
        w[rng.random(c.n) < 0.2] = 0.0
        w[0] = 1.0
        beta = rng.normal(size=2) * 0.5
        ours = log_weighted_pl(c, w, beta, contribution)
        ref = naive_loglik(c, w, beta, weighted=contribution == "weighted")
        assert ours == pytest.approx(ref, rel=1e-11, abs=1e-11)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 3), st.booleans())
def test_finite_differences(seed, p, ties):
    rng = np.random.default_rng(seed)
    c = random_cohort(rng, n=int(rng.integers(4, 30)), p=p, ties=ties)
    w = rng.uniform(0.2, 3.0, c.n)
    beta = rng.normal(size=p) * 0.5
    eps = 1e-5
    g = score(c, w, beta)
    I = observed_information(c, w, beta)
    fd_g = np.array([(log_weighted_pl(c, w, beta + eps * e) - log_weighted_pl(c, w, beta - eps * e))
                     / (2 * eps) for e in np.eye(p)])
    fd_I = -np.array([(score(c, w, beta + eps * e) - score(c, w, beta - eps * e)) / (2 * eps)
                      for e in np.eye(p)])
    assert np.allclose(g, fd_g, rtol=1e-6, atol=1e-7)
    assert np.allclose(I, fd_I, rtol=1e-5, atol=1e-7)
    assert np.all(np.linalg.eigvalsh(I) > -1e-10)


def test_matches_nelder_mead():
    rng = np.random.default_rng(11)
    c = random_cohort(rng, n=120, p=2)
    w = rng.uniform(0.5, 1.5, c.n)
    fit = fit_location(c, w)
    assert fit.converged
    ref = minimize(lambda b: -log_weighted_pl(c, w, b), np.zeros(2), method="Nelder-Mead",
                   options=dict(xatol=1e-10, fatol=1e-14, maxiter=20000, maxfev=40000))
    assert np.allclose(fit.beta, ref.x, atol=1e-5)


@pytest.mark.parametrize("ties", [False, True])
def test_matches_statsmodels(ties):
    sm = pytest.importorskip("statsmodels.duration.hazard_regression")
    rng = np.random.default_rng(5)
    c = random_cohort(rng, n=150, p=3, ties=ties)
    fit = fit_location(c, np.ones(c.n))
    ref = sm.PHReg(c.time, c.covariates, status=c.event.astype(int), ties="breslow").fit()
    assert np.allclose(fit.beta, ref.params, atol=1e-8)
    assert np.allclose(fit.se, ref.bse, rtol=1e-6)
    assert fit.loglik == pytest.approx(ref.llf, rel=1e-10)


def test_fit_result_contract():
    rng = np.random.default_rng(8)
    c = random_cohort(rng, n=80, p=3)
    fit = fit_location(c, rng.uniform(0.2, 1.0, c.n))
    assert fit.converged and fit.status == "converged"
    assert np.allclose(fit.covariance, fit.covariance.T)
    assert np.all(np.linalg.eigvalsh(fit.covariance) > 0)
    assert np.allclose(fit.z, fit.beta / fit.se)
    assert np.all(np.diff(fit.history) >= -1e-10)


def test_weight_scale_invariance():
    rng = np.random.default_rng(9)
    c = random_cohort(rng, n=80, p=2)
    w = rng.uniform(0.2, 1.0, c.n)
    a, b = fit_location(c, w), fit_location(c, 7.5 * w)
    assert np.allclose(a.beta, b.beta, atol=1e-8)


def test_null_model_near_zero():
    rng = np.random.default_rng(2)
    n = 400
    Z = rng.choice([-1.0, 1.0], size=(n, 2))
    c = cohort_from(rng.exponential(1, n), rng.random(n) < 0.8, Z)
    fit = fit_location(c, np.ones(n))
    assert fit.converged
    assert np.all(np.abs(fit.beta) < 3 * fit.se)


def test_perfect_separation_diverges():
    # every event has x=1, every censoring x=0, censorings outlive all events
    time = np.array([1, 2, 3, 4, 5, 6, 7, 8.0])
    event = np.array([1, 1, 1, 1, 0, 0, 0, 0], bool)
    c = cohort_from(time, event, event.astype(float))
    fit = fit_location(c, np.ones(8))
    assert fit.status == "diverged"
    assert not fit.converged
    with pytest.raises(FitError):
        fit_location(c, np.ones(8), raise_on_failure=True)


def test_no_weighted_events():
    c = cohort_from([1, 2, 3], [1, 0, 0], [0.1, 0.2, 0.3])
    w = np.array([0.0, 1.0, 1.0])
    assert fit_location(c, w).status == "no_events"
    with pytest.raises(NoWeightedEvents):
        fit_location(c, w, raise_on_failure=True)
    with pytest.raises(NoWeightedEvents):
        log_weighted_pl(c, w, [0.0])


def test_all_ones_scheme_gives_global():
    rng = np.random.default_rng(4)
    c = random_cohort(rng, n=90, p=2, n_locations=3)
    d = DistanceMatrix(np.array([[0, 1, 2], [1, 0, 1], [2, 1, 0.0]]), "graph")
    fits = fit_all_locations(c, d, WeightScheme("indicator", threshold=np.inf))
    glob = fit_location(c, np.ones(c.n))
    for f in fits:
        assert np.allclose(f.beta, glob.beta, atol=1e-10)


def test_indicator_degenerates_to_local():
    rng = np.random.default_rng(6)
    c = random_cohort(rng, n=90, p=1, n_locations=3)
    # location 2 loses its events
    event = c.event.copy()
    event[c.location == 2] = False
    c = Cohort(c.ids, c.time, event, c.covariates, c.location, c.locations, c.covariate_names)
    d = DistanceMatrix(np.array([[0, 1, 2], [1, 0, 1], [2, 1, 0.0]]), "graph")
    fits = fit_all_locations(c, d, WeightScheme("indicator", threshold=0.5))
    for j in range(2):
        sub = c.at_location(j)
        local = fit_location(c.subset(sub), np.ones(sub.size))
        assert np.allclose(fits[j].beta, local.beta, atol=1e-10)
    assert fits[2].status == "no_events"


def test_as_printed_information_formula():
    rng = np.random.default_rng(1)
    c = random_cohort(rng, n=12, p=2)
    w = rng.uniform(0.5, 1.5, c.n)
    beta = np.array([0.2, -0.1])
    ours = observed_information(c, w, beta, as_printed=True)
    a = w * np.exp(c.covariates @ beta)
    ref = np.zeros((2, 2))
    for i in range(c.n):
        r = c.time >= c.time[i]
        zz = np.einsum("n,np,nq->pq", a[r] ** 2, c.covariates[r], c.covariates[r])
        s2 = np.einsum("n,np,nq->pq", a[r], c.covariates[r], c.covariates[r])
        ref += zz / a[r].sum() ** 2 - s2 / a[r].sum()
    assert np.allclose(ours, ref)


def test_weight_rows_dedup_matches_individual():
    rng = np.random.default_rng(12)
    c = random_cohort(rng, n=60, p=2, n_locations=3)
    cw = np.array([[1, 0.5, 0.2], [1, 0.5, 0.2], [0.3, 0.3, 1.0]])
    fits = fit_weight_rows(c, cw)
    for j in range(3):
        single = fit_location(c, cw[j][c.location])
        assert np.allclose(fits[j].beta, single.beta, atol=1e-12)
        assert fits[j].location == j


def test_options_validation():
    with pytest.raises(ValueError):
        FitOptions(max_iterations=0)
    with pytest.raises(ValueError):
        FitOptions(contribution="other")

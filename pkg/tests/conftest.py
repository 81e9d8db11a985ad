import numpy as np
import pytest

from geocox import Cohort, load_louisiana


def random_cohort(rng, n=60, p=3, n_locations=1, ties=False, censor=0.3):
    time = rng.exponential(10.0, n)
    if ties:
        time = np.ceil(time)
    event = rng.random(n) > censor
    event[0] = True
    Z = rng.normal(size=(n, p))
    loc = rng.integers(0, n_locations, n)
    loc[:n_locations] = np.arange(min(n, n_locations))
    labels = tuple(f"L{j}" for j in range(n_locations))
    names = tuple(f"z{m}" for m in range(p))
    return Cohort(np.arange(n).astype(str), time, event, Z, loc, labels, names)


def naive_loglik(cohort, w, beta, weighted=True):
    """Direct double loop over events and their risk sets (Breslow)."""
    eta = cohort.covariates @ beta
    total = 0.0
    for i in range(cohort.n):
        if not cohort.event[i] or w[i] <= 0:
            continue
        risk = cohort.time >= cohort.time[i]
        denom = np.sum(w[risk] * np.exp(eta[risk]))
        term = np.log(w[i]) + eta[i] - np.log(denom)
        total += w[i] * term if weighted else term
    return total


@pytest.fixture(scope="session")
def louisiana():
    return load_louisiana()


# filled by test_acceptance.py, echoed after the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

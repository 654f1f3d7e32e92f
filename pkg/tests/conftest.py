import numpy as np
import pytest

from trialforge import phantom as ph
from trialforge import profiler as pf

COHORT_SEED = 0
COHORT_SIZE = 50


@pytest.fixture(scope="session")
def cohort():
    return ph.phantom_cohort(COHORT_SEED, COHORT_SIZE)


@pytest.fixture(scope="session")
def profiles(cohort):
    return pf.profile_cohort(cohort)


@pytest.fixture(scope="session")
def hosts(cohort):
    return [pf.host_record(p) for p in cohort]


@pytest.fixture(scope="session")
def small_patient():
    return ph.make_patient(7, 0, ph.CohortConfig(dims=(64, 56, 64)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

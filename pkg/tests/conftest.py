import numpy as np
import pytest

from diracweyl.commute import commute_left_phi
from diracweyl.ode import PotentialSpec
from diracweyl.radial import iterate_reduction, radial_weyl_data
from diracweyl.weyl import WeylData, build_fundamental_system


@pytest.fixture(scope="session")
def free_wd():
    return WeylData(build_fundamental_system(PotentialSpec.free(), 1e-12))


@pytest.fixture(scope="session")
def free_commuted(free_wd):
    return commute_left_phi(free_wd, np.pi, 1.0)


@pytest.fixture(scope="session")
def radial_wd():
    cache = {}

    def get(kappa):
        if kappa not in cache:
            cache[kappa] = radial_weyl_data(kappa)
        return cache[kappa]

    return get


@pytest.fixture(scope="session")
def ledger(radial_wd):
    cache = {}

    def get(kappa):
        if kappa not in cache:
            cache[kappa] = iterate_reduction(radial_wd(kappa))
        return cache[kappa]

    return get

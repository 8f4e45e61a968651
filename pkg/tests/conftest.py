import numpy as np
import pytest

from epiinfer.models import build_model


@pytest.fixture(scope="session")
def sir():
    return build_model("sir")


@pytest.fixture(scope="session")
def sirs():
    return build_model(
        "sirs_seasonal", {"T_per": 365.0, "mu": 1.0 / (50 * 365), "eta": 1e-6}
    )


@pytest.fixture(scope="session")
def all_jump_models(sir, sirs):
    return [
        (sir, np.array([0.5, 1.0 / 3.0])),
        (sirs, np.array([0.5, 0.15, 1.0 / 3.0, 1.0 / (2 * 365)])),
        (build_model("seir_ebola"), np.array([0.4, 0.2, 1.0 / 3.0])),
        (
            build_model("seirs_demography", {"mu": 1.0 / (50 * 365)}),
            np.array([0.5, 0.2, 1.0 / 3.0, 1.0 / (2 * 365)]),
        ),
    ]


def random_admissible_state(model, rng):
    if model.p == 2:
        s = rng.uniform(0.05, 0.9)
        i = rng.uniform(0.01, 1.0 - s)
        return np.array([s, i])
    s = rng.uniform(0.05, 0.7)
    e = rng.uniform(0.01, (1.0 - s) / 2)
    i = rng.uniform(0.01, 1.0 - s - e)
    return np.array([s, e, i])


def random_theta(model, rng):
    vals = []
    for tr in model.transforms:
        if tr == "log":
            vals.append(rng.uniform(0.05, 2.0))
        elif tr == "logit":
            vals.append(rng.uniform(0.05, 0.95))
        else:
            vals.append(rng.uniform(-1.0, 1.0))
    return np.array(vals)

import numpy as np
import pandas as pd
import pytest
from scipy.special import expit

from services.estimator_service import EstimatorService
from services.inference_service import InferenceService
from services.model_service import Dataset, model_from_family
from services.profile_service import ProfileService


def _design(rng, n, k):
    return np.column_stack([np.ones(n), rng.standard_normal((n, k))])


def make_logistic(n=300, seed=20240601, beta=(0.5, 0.8, -0.6)):
    rng = np.random.default_rng(seed)
    X = _design(rng, n, len(beta) - 1)
    y = (rng.random(n) < expit(X @ np.asarray(beta))).astype(float)
    return Dataset(y, X, ("(intercept)",) + tuple(f"x{j}" for j in range(1, len(beta))))


def make_locscale(n=150, seed=7, beta=(1.0, 0.7, -0.4), sigma=1.5, df=None):
    rng = np.random.default_rng(seed)
    X = _design(rng, n, len(beta) - 1)
    if df is None:
        eps = rng.standard_normal(n)
    else:
        eps = rng.standard_t(df, n)
    y = X @ np.asarray(beta) + sigma * eps
    return Dataset(y, X, ("(intercept)",) + tuple(f"x{j}" for j in range(1, len(beta))))


def make_inference(family, interest_index=1, **kwargs):
    estimator = EstimatorService(model_from_family(family), interest_index=interest_index, **kwargs)
    return InferenceService(ProfileService(estimator))


def write_dataset_csv(path, data: Dataset):
    frame = pd.DataFrame(data.X[:, 1:], columns=list(data.columns[1:]))
    frame.insert(0, "y", data.y)
    frame.to_csv(path, index=False)
    return path


@pytest.fixture(scope="session")
def logistic_data():
    return make_logistic()


@pytest.fixture(scope="session")
def t5_data():
    return make_locscale(df=5.0)


@pytest.fixture(scope="session")
def normal_data():
    return make_locscale(n=60, seed=11)


@pytest.fixture(scope="session")
def logistic_inference():
    return make_inference("logistic")


@pytest.fixture(scope="session")
def logistic_analysis(logistic_inference, logistic_data):
    return logistic_inference.analyse(logistic_data)


@pytest.fixture(scope="session")
def t5_inference():
    return make_inference("locscale-t:5")


@pytest.fixture(scope="session")
def t5_analysis(t5_inference, t5_data):
    return t5_inference.analyse(t5_data)


@pytest.fixture(scope="session")
def known_inference():
    return make_inference("normal-known:1.5")


@pytest.fixture(scope="session")
def known_analysis(known_inference, normal_data):
    return known_inference.analyse(normal_data)

"""Regression model families and their analytic log-likelihood derivatives.

Two families are supported:

* linear exponential family, realised as Bernoulli-logistic regression with
  canonical link, theta = beta;
* location-scale regression y = X beta + sigma * eps with a known error
  density (normal, Student t with fixed nu, logistic), theta = (beta, sigma).
  A known-scale variant fixes sigma and keeps theta = beta.

All derivatives are with respect to theta on the (beta, sigma) scale. The
estimator optimises an internal parametrisation with log(sigma) in place of
sigma; ``internal_derivatives`` applies the chain rule for it.
"""

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit, gammaln, log_expit

from services.errors import ConfigError, DataError, DivergenceError, InvalidParameterError

logger = logging.getLogger(__name__)

LINEAR_EXPONENTIAL = "linear-exponential"
LOCATION_SCALE = "location-scale"

SEPARATION_ETA = 15.0
SCALE_FLOOR = 1e-8
# information condition number beyond which pinned observations mean separation
SEPARATION_CONDITION = 1e8


@dataclass
class ParameterVector:
    psi: float
    lam: np.ndarray
    interest_index: int

    def __post_init__(self):
        self.psi = float(self.psi)
        self.lam = np.asarray(self.lam, dtype=float).reshape(-1)
        if not 0 <= self.interest_index < self.p:
            raise InvalidParameterError(
                f"interest_index {self.interest_index} outside [0, {self.p})"
            )

    @property
    def p(self) -> int:
        return 1 + self.lam.size

    @property
    def theta(self) -> np.ndarray:
        return np.insert(self.lam, self.interest_index, self.psi)

    @classmethod
    def from_theta(cls, theta, interest_index: int) -> "ParameterVector":
        theta = np.asarray(theta, dtype=float).reshape(-1)
        if not 0 <= interest_index < theta.size:
            raise InvalidParameterError(
                f"interest_index {interest_index} outside [0, {theta.size})"
            )
        return cls(theta[interest_index], np.delete(theta, interest_index), interest_index)


@dataclass
class Dataset:
    y: np.ndarray
    X: np.ndarray
    columns: Sequence[str] = field(default_factory=tuple)
    response: str = "y"

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float).reshape(-1)
        self.X = np.asarray(self.X, dtype=float)
        if self.X.ndim == 1:
            self.X = self.X.reshape(-1, 1)
        if self.X.shape[0] != self.y.size:
            raise DataError(f"X has {self.X.shape[0]} rows but y has {self.y.size} entries")
        if not self.columns:
            self.columns = tuple(f"x{j}" for j in range(self.X.shape[1]))
        self.columns = tuple(self.columns)
        if len(self.columns) != self.X.shape[1]:
            raise DataError("column names do not match the number of covariates")
        if not (np.all(np.isfinite(self.y)) and np.all(np.isfinite(self.X))):
            raise InvalidParameterError("data contain non-finite values")

    @property
    def n(self) -> int:
        return self.y.size

    @property
    def k(self) -> int:
        return self.X.shape[1]

    def column_index(self, name_or_index) -> int:
        if isinstance(name_or_index, (int, np.integer)):
            index = int(name_or_index)
        elif str(name_or_index).lstrip("-").isdigit():
            index = int(name_or_index)
        elif name_or_index in self.columns:
            return self.columns.index(name_or_index)
        else:
            raise DataError(f"unknown covariate column {name_or_index!r}")
        if not 0 <= index < self.k:
            raise DataError(f"covariate index {index} outside [0, {self.k})")
        return index

    def concat(self, other: "Dataset") -> "Dataset":
        return Dataset(
            np.concatenate([self.y, other.y]),
            np.vstack([self.X, other.X]),
            self.columns,
            self.response,
        )

    def head(self, n: int) -> "Dataset":
        return Dataset(self.y[:n], self.X[:n], self.columns, self.response)

    def check_design(self, p: int):
        if self.n < p + 1:
            raise DataError(f"need n >= p + 1 observations, got n={self.n}, p={p}")
        rank = np.linalg.matrix_rank(self.X)
        if rank < self.k:
            raise DataError(f"design matrix is rank deficient (rank {rank} < {self.k})")


class ErrorDensity:
    """Standardised error density; ``g`` is log f and d1/d2 its derivatives."""

    name = "error"

    def g(self, e):
        raise NotImplementedError

    def d1(self, e):
        raise NotImplementedError

    def d2(self, e):
        raise NotImplementedError

    def sample(self, rng, size):
        raise NotImplementedError


class NormalError(ErrorDensity):
    name = "normal"

    def g(self, e):
        return -0.5 * np.log(2.0 * np.pi) - 0.5 * e * e

    def d1(self, e):
        return -e

    def d2(self, e):
        return -np.ones_like(e)

    def sample(self, rng, size):
        return rng.standard_normal(size)


class StudentTError(ErrorDensity):
    def __init__(self, nu: float):
        if not nu > 0:
            raise ConfigError(f"Student t degrees of freedom must be positive, got {nu}")
        self.nu = float(nu)
        self.name = f"t:{self.nu:g}"
        self._const = (
            gammaln((self.nu + 1.0) / 2.0)
            - gammaln(self.nu / 2.0)
            - 0.5 * np.log(self.nu * np.pi)
        )

    def g(self, e):
        return self._const - 0.5 * (self.nu + 1.0) * np.log1p(e * e / self.nu)

    def d1(self, e):
        return -(self.nu + 1.0) * e / (self.nu + e * e)

    def d2(self, e):
        denom = self.nu + e * e
        return -(self.nu + 1.0) * (self.nu - e * e) / (denom * denom)

    def sample(self, rng, size):
        # normal over sqrt(chi2/nu), both drawn from the same stream
        z = rng.standard_normal(size)
        chi2 = rng.chisquare(self.nu, size)
        return z / np.sqrt(chi2 / self.nu)


class LogisticError(ErrorDensity):
    name = "logistic"

    def g(self, e):
        a = np.abs(e)
        return -a - 2.0 * np.log1p(np.exp(-a))

    def d1(self, e):
        return -np.tanh(0.5 * e)

    def d2(self, e):
        th = np.tanh(0.5 * e)
        return -0.5 * (1.0 - th * th)

    def sample(self, rng, size):
        return rng.logistic(0.0, 1.0, size)


class ModelSpec:
    family = None
    name = "model"

    def n_params(self, data: Dataset) -> int:
        raise NotImplementedError

    def param_names(self, data: Dataset):
        return list(data.columns)

    def scale_index(self, data: Dataset) -> Optional[int]:
        return None

    def loglik(self, data: Dataset, theta) -> float:
        raise NotImplementedError

    def grad(self, data: Dataset, theta) -> np.ndarray:
        raise NotImplementedError

    def hessian(self, data: Dataset, theta) -> np.ndarray:
        raise NotImplementedError

    def initial_theta(self, data: Dataset) -> np.ndarray:
        raise NotImplementedError

    def initial_nuisance(self, data: Dataset, psi: float, interest_index: int) -> np.ndarray:
        raise NotImplementedError

    def check_divergence(self, data: Dataset, theta):
        pass

    def check_estimate(self, data: Dataset, theta, info: np.ndarray):
        pass

    def simulate_response(self, rng, eta: np.ndarray, sigma: float = 1.0) -> np.ndarray:
        raise NotImplementedError

    def _theta(self, data, theta) -> np.ndarray:
        if isinstance(theta, ParameterVector):
            theta = theta.theta
        theta = np.asarray(theta, dtype=float).reshape(-1)
        p = self.n_params(data)
        if theta.size != p:
            raise InvalidParameterError(f"{self.name} expects {p} parameters, got {theta.size}")
        if not np.all(np.isfinite(theta)):
            raise InvalidParameterError("parameter vector contains non-finite values")
        return theta

    def to_internal(self, data: Dataset, theta) -> np.ndarray:
        z = self._theta(data, theta).copy()
        k = self.scale_index(data)
        if k is not None:
            z[k] = np.log(z[k])
        return z

    def from_internal(self, data: Dataset, z) -> np.ndarray:
        theta = np.array(z, dtype=float)
        k = self.scale_index(data)
        if k is not None:
            theta[k] = np.exp(theta[k])
        return theta

    def internal_derivatives(self, data: Dataset, z):
        """Log-likelihood, gradient and Hessian in the internal parametrisation."""
        theta = self.from_internal(data, z)
        value = self.loglik(data, theta)
        g = self.grad(data, theta)
        H = self.hessian(data, theta)
        k = self.scale_index(data)
        if k is not None:
            sigma = theta[k]
            gk = g[k]
            g = g.copy()
            g[k] = sigma * gk
            H = H.copy()
            H[:, k] *= sigma
            H[k, :] *= sigma
            H[k, k] += sigma * gk
        return value, g, H


class LogisticRegression(ModelSpec):
    family = LINEAR_EXPONENTIAL
    name = "logistic"

    def n_params(self, data):
        return data.k

    def _check_response(self, data):
        if np.any((data.y < 0.0) | (data.y > 1.0)):
            raise InvalidParameterError("logistic responses must lie in [0, 1]")

    def loglik(self, data, theta):
        beta = self._theta(data, theta)
        self._check_response(data)
        eta = data.X @ beta
        return float(np.sum(data.y * eta + log_expit(-eta)))

    def grad(self, data, theta):
        beta = self._theta(data, theta)
        eta = data.X @ beta
        # y - mu without cancellation when mu rounds to 0 or 1
        resid = data.y * expit(-eta) - (1.0 - data.y) * expit(eta)
        return data.X.T @ resid

    def hessian(self, data, theta):
        beta = self._theta(data, theta)
        eta = data.X @ beta
        w = expit(eta) * expit(-eta)
        H = -(data.X.T * w) @ data.X
        return 0.5 * (H + H.T)

    def initial_theta(self, data):
        return np.zeros(data.k)

    def initial_nuisance(self, data, psi, interest_index):
        return np.zeros(data.k - 1)

    def check_divergence(self, data, theta):
        eta = data.X @ np.asarray(theta, dtype=float)
        labels = data.y > 0.5
        if np.all(np.abs(eta) > SEPARATION_ETA) and np.all((eta > 0) == labels):
            raise DivergenceError(
                "complete separation: every observation is fitted with probability "
                "near its label, no finite maximum likelihood estimate",
                theta=np.asarray(theta, dtype=float),
            )

    def check_estimate(self, data, theta, info):
        """Quasi-complete separation: some observations are fitted to their label with
        probability one and the information has lost a direction."""
        eta = data.X @ np.asarray(theta, dtype=float)
        pinned = (np.abs(eta) > SEPARATION_ETA) & ((eta > 0) == (data.y > 0.5))
        if not pinned.any():
            return
        eigenvalues = np.linalg.eigvalsh(0.5 * (info + info.T))
        smallest, largest = eigenvalues[0], eigenvalues[-1]
        if smallest <= 0 or largest / smallest > SEPARATION_CONDITION:
            raise DivergenceError(
                f"quasi-complete separation: {int(pinned.sum())} observations are fitted "
                "with probability one, no finite maximum likelihood estimate",
                theta=np.asarray(theta, dtype=float),
            )

    def simulate_response(self, rng, eta, sigma=1.0):
        return (rng.random(eta.size) < expit(eta)).astype(float)


class LocationScaleRegression(ModelSpec):
    family = LOCATION_SCALE

    def __init__(self, error: ErrorDensity, scale: Optional[float] = None):
        self.error = error
        if scale is not None and not scale > 0:
            raise ConfigError(f"known scale must be positive, got {scale}")
        self.scale = None if scale is None else float(scale)
        self.name = f"locscale-{error.name}" if scale is None else f"{error.name}-known:{self.scale:g}"

    def n_params(self, data):
        return data.k + (1 if self.scale is None else 0)

    def param_names(self, data):
        names = list(data.columns)
        if self.scale is None:
            names.append("sigma")
        return names

    def scale_index(self, data):
        return data.k if self.scale is None else None

    def _split(self, data, theta):
        theta = self._theta(data, theta)
        if self.scale is None:
            beta, sigma = theta[:-1], theta[-1]
        else:
            beta, sigma = theta, self.scale
        if not sigma > 0:
            raise InvalidParameterError(f"scale must be positive, got sigma={sigma}")
        return beta, sigma

    def loglik(self, data, theta):
        beta, sigma = self._split(data, theta)
        e = (data.y - data.X @ beta) / sigma
        return float(np.sum(self.error.g(e)) - data.n * np.log(sigma))

    def grad(self, data, theta):
        beta, sigma = self._split(data, theta)
        e = (data.y - data.X @ beta) / sigma
        d1 = self.error.d1(e)
        g_beta = -(data.X.T @ d1) / sigma
        if self.scale is not None:
            return g_beta
        g_sigma = -(np.sum(d1 * e) + data.n) / sigma
        return np.append(g_beta, g_sigma)

    def hessian(self, data, theta):
        beta, sigma = self._split(data, theta)
        e = (data.y - data.X @ beta) / sigma
        d1 = self.error.d1(e)
        d2 = self.error.d2(e)
        s2 = sigma * sigma
        H_bb = (data.X.T * d2) @ data.X / s2
        if self.scale is not None:
            return 0.5 * (H_bb + H_bb.T)
        H_bs = data.X.T @ (d2 * e + d1) / s2
        H_ss = (np.sum(d2 * e * e + 2.0 * d1 * e) + data.n) / s2
        k = data.k
        H = np.empty((k + 1, k + 1))
        H[:k, :k] = H_bb
        H[:k, k] = H_bs
        H[k, :k] = H_bs
        H[k, k] = H_ss
        return 0.5 * (H + H.T)

    def _least_squares(self, y, X):
        if X.shape[1] == 0:
            return np.zeros(0), y
        coef, *_ = np.linalg.lstsq(X, y, rcond=None)
        return coef, y - X @ coef

    def initial_theta(self, data):
        beta, resid = self._least_squares(data.y, data.X)
        if self.scale is not None:
            return beta
        sigma = float(np.sqrt(np.mean(resid * resid)))
        theta = np.append(beta, sigma)
        self.check_divergence(data, theta)
        return theta

    def initial_nuisance(self, data, psi, interest_index):
        if interest_index >= data.k:
            raise InvalidParameterError("the interest parameter must be a regression coefficient")
        others = np.delete(data.X, interest_index, axis=1)
        beta, resid = self._least_squares(data.y - psi * data.X[:, interest_index], others)
        if self.scale is not None:
            return beta
        sigma = float(np.sqrt(np.mean(resid * resid)))
        return np.append(beta, max(sigma, self._scale_floor(data) * 10.0))

    def _scale_floor(self, data):
        return SCALE_FLOOR * (1.0 + float(np.std(data.y)))

    def check_divergence(self, data, theta):
        if self.scale is None and theta[-1] <= self._scale_floor(data):
            raise DivergenceError(
                f"scale estimate collapsed to {theta[-1]:.3g}: residuals vanish, "
                "the likelihood is unbounded",
                theta=np.asarray(theta, dtype=float),
            )

    def simulate_response(self, rng, eta, sigma: float = 1.0):
        scale = self.scale if self.scale is not None else sigma
        return eta + scale * self.error.sample(rng, eta.size)


def model_from_family(family: str) -> ModelSpec:
    """Build a model from a family string such as ``logistic`` or ``locscale-t:5``."""
    text = str(family).strip().lower()
    if text == "logistic":
        return LogisticRegression()
    if text == "locscale-normal":
        return LocationScaleRegression(NormalError())
    if text == "locscale-logistic":
        return LocationScaleRegression(LogisticError())
    if text.startswith("locscale-t:"):
        return LocationScaleRegression(StudentTError(_parse_positive(text, "locscale-t:")))
    if text.startswith("normal-known:"):
        return LocationScaleRegression(NormalError(), scale=_parse_positive(text, "normal-known:"))
    raise ConfigError(
        f"unknown family {family!r}; expected logistic, locscale-normal, "
        "locscale-t:<nu>, locscale-logistic or normal-known:<sigma>"
    )


def _parse_positive(text, prefix):
    try:
        value = float(text[len(prefix):])
    except ValueError:
        raise ConfigError(f"cannot parse the number in family {text!r}") from None
    if not value > 0:
        raise ConfigError(f"family parameter must be positive in {text!r}")
    return value


def _as_theta(model, data, theta):
    return model._theta(data, theta)


def loglik(model: ModelSpec, data: Dataset, theta) -> float:
    return model.loglik(data, _as_theta(model, data, theta))


def grad(model: ModelSpec, data: Dataset, theta) -> np.ndarray:
    return model.grad(data, _as_theta(model, data, theta))


def hessian(model: ModelSpec, data: Dataset, theta) -> np.ndarray:
    return model.hessian(data, _as_theta(model, data, theta))

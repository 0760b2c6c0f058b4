import logging
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from services.errors import (
    ConditioningError,
    ConvergenceError,
    DivergenceError,
    InvalidParameterError,
    RStarError,
)
from services.model_service import Dataset, ModelSpec, ParameterVector

logger = logging.getLogger(__name__)

TOL_GRAD = 1e-10
MAX_ITER = 200
BOUND = 1e6
MAX_HALVINGS = 60
LINE_SLACK = 1e-13
NOISE_FLOOR = 1e-6


def cholesky_logdet(matrix: np.ndarray) -> float:
    """log|A| for a positive definite A, as twice the summed log of the Cholesky diagonal."""
    matrix = np.asarray(matrix, dtype=float)
    if matrix.size == 0:
        return 0.0
    try:
        factor, _ = cho_factor(matrix, lower=True)
    except LinAlgError:
        raise ConditioningError("information matrix is not positive definite") from None
    return float(2.0 * np.sum(np.log(np.diag(factor))))


@dataclass
class FitResult:
    theta_hat: ParameterVector
    loglik_at_max: float
    observed_info: np.ndarray
    logdet_nuisance: float
    iterations: int
    converged: bool
    names: List[str] = field(default_factory=list)

    @property
    def psi_hat(self) -> float:
        return self.theta_hat.psi

    @property
    def interest_index(self) -> int:
        return self.theta_hat.interest_index

    def profile_information(self) -> float:
        """j_p(psi_hat) as the Schur complement of the nuisance block of j(theta_hat)."""
        idx = self.interest_index
        j = self.observed_info
        j_pp = j[idx, idx]
        j_pl = np.delete(j[idx], idx)
        j_ll = np.delete(np.delete(j, idx, axis=0), idx, axis=1)
        if j_ll.size == 0:
            return float(j_pp)
        return float(j_pp - j_pl @ np.linalg.solve(j_ll, j_pl))

    def standard_error(self) -> float:
        return float(self.profile_information() ** -0.5)

    def to_dict(self) -> dict:
        return {
            "parameters": dict(zip(self.names, self.theta_hat.theta.tolist())),
            "interest": self.names[self.interest_index] if self.names else self.interest_index,
            "psi_hat": self.psi_hat,
            "standard_error": self.standard_error(),
            "loglik_at_max": self.loglik_at_max,
            "observed_info": self.observed_info.tolist(),
            "logdet_nuisance": self.logdet_nuisance,
            "iterations": self.iterations,
            "converged": self.converged,
        }


@dataclass
class ConstrainedFit:
    psi: float
    lambda_hat_psi: np.ndarray
    loglik_profile: float
    nuisance_info: np.ndarray
    cross_info: np.ndarray
    logdet_nuisance: float
    interest_index: int
    iterations: int = 0
    converged: bool = True

    @property
    def theta(self) -> np.ndarray:
        return np.insert(self.lambda_hat_psi, self.interest_index, self.psi)


class EstimatorService:
    """Full and constrained maximum likelihood by damped Newton iterations.

    Steps are halved until the log-likelihood does not decrease; when the
    Hessian on the free coordinates is not negative definite the step falls
    back to gradient ascent scaled by the diagonal of the information.
    """

    def __init__(self, model: ModelSpec, interest_index: int = 0, tol_grad=TOL_GRAD,
                 max_iter=MAX_ITER, bound=BOUND):
        self.model = model
        self.interest_index = interest_index
        self.tol_grad = tol_grad
        self.max_iter = max_iter
        self.bound = bound

    def fit_mle(self, data: Dataset, init: Optional[ParameterVector] = None) -> FitResult:
        p = self.model.n_params(data)
        data.check_design(p)
        if not 0 <= self.interest_index < data.k:
            raise InvalidParameterError(
                f"interest index {self.interest_index} is not a regression coefficient"
            )

        theta0 = init.theta if init is not None else self.model.initial_theta(data)
        z0 = self.model.to_internal(data, theta0)
        free = np.arange(p)
        z, value, iterations, converged = self._maximize(data, z0, free)

        theta = self.model.from_internal(data, z)
        info = -self.model.hessian(data, theta)
        self.model.check_estimate(data, theta, info)
        try:
            cho_factor(info, lower=True)
        except LinAlgError:
            raise ConditioningError(
                "observed information at the maximum is not positive definite", theta=theta
            ) from None
        nuisance = np.delete(np.delete(info, self.interest_index, axis=0), self.interest_index, axis=1)

        result = FitResult(
            theta_hat=ParameterVector.from_theta(theta, self.interest_index),
            loglik_at_max=value,
            observed_info=info,
            logdet_nuisance=cholesky_logdet(nuisance),
            iterations=iterations,
            converged=converged,
            names=self.model.param_names(data),
        )
        logger.debug("MLE converged in %d iterations, loglik %.12g", iterations, value)
        return result

    def fit_constrained(self, data: Dataset, psi0: float, warm_start=None) -> ConstrainedFit:
        idx = self.interest_index
        psi0 = float(psi0)
        if not np.isfinite(psi0):
            raise InvalidParameterError(f"interest value must be finite, got {psi0}")

        if isinstance(warm_start, ConstrainedFit):
            lam0 = warm_start.lambda_hat_psi
        elif isinstance(warm_start, FitResult):
            lam0 = warm_start.theta_hat.lam
        elif warm_start is not None:
            lam0 = np.asarray(warm_start, dtype=float)
        else:
            lam0 = self.model.initial_nuisance(data, psi0, idx)

        try:
            z0 = self.model.to_internal(data, np.insert(lam0, idx, psi0))
            free = np.delete(np.arange(z0.size), idx)
            z, value, iterations, converged = self._maximize(data, z0, free)
            theta = self.model.from_internal(data, z)
            info = -self.model.hessian(data, theta)
            nuisance = np.delete(np.delete(info, idx, axis=0), idx, axis=1)
            logdet = cholesky_logdet(nuisance)
        except RStarError as e:
            raise e.at_psi(psi0)

        return ConstrainedFit(
            psi=psi0,
            lambda_hat_psi=np.delete(theta, idx),
            loglik_profile=value,
            nuisance_info=nuisance,
            cross_info=np.delete(info[idx], idx),
            logdet_nuisance=logdet,
            interest_index=idx,
            iterations=iterations,
            converged=converged,
        )

    def _maximize(self, data, z, free):
        trace = []
        value, g, H = self.model.internal_derivatives(data, z)

        for iteration in range(self.max_iter + 1):
            theta = self.model.from_internal(data, z)
            self._check_divergence(data, theta, trace)

            g_free = g[free]
            g_norm = float(np.max(np.abs(g_free))) if free.size else 0.0
            trace.append((iteration, value, g_norm))
            logger.debug("iteration %d: loglik %.15g, |grad| %.3g", iteration, value, g_norm)
            if g_norm <= self.tol_grad * (1.0 + abs(value)):
                return z, value, iteration, True
            if iteration == self.max_iter:
                break

            step = self._ascent_direction(H[np.ix_(free, free)], g_free)
            t = 1.0
            accepted = False
            for _ in range(MAX_HALVINGS):
                candidate = z.copy()
                candidate[free] = z[free] + t * step
                try:
                    c_value, c_g, c_H = self.model.internal_derivatives(data, candidate)
                except InvalidParameterError:
                    c_value = -np.inf
                if np.isfinite(c_value) and c_value >= value - LINE_SLACK * (1.0 + abs(value)):
                    accepted = True
                    break
                t *= 0.5

            if not accepted:
                if g_norm <= NOISE_FLOOR * (1.0 + abs(value)):
                    logger.warning(
                        "Line search stalled at the noise floor, |grad| %.3g above tolerance %.3g",
                        g_norm, self.tol_grad * (1.0 + abs(value)),
                    )
                    return z, value, iteration, False
                raise ConvergenceError(
                    f"line search failed at iteration {iteration} (|grad| {g_norm:.3g})",
                    theta=theta, trace=trace,
                )
            z, value, g, H = candidate, c_value, c_g, c_H

        raise ConvergenceError(
            f"no convergence after {self.max_iter} iterations",
            theta=self.model.from_internal(data, z), trace=trace,
        )

    def _ascent_direction(self, H_free, g_free):
        if g_free.size == 0:
            return g_free
        try:
            factor = cho_factor(-H_free, lower=True)
            return cho_solve(factor, g_free)
        except LinAlgError:
            scale = np.maximum(np.abs(np.diag(H_free)), 1e-8)
            logger.debug("Hessian not negative definite, using scaled gradient ascent")
            return g_free / scale

    def _check_divergence(self, data, theta, trace):
        if np.max(np.abs(theta)) > self.bound:
            raise DivergenceError(
                f"parameter estimates escaped the bound {self.bound:g}; "
                "the likelihood has no finite maximum",
                theta=theta, trace=trace,
            )
        self.model.check_divergence(data, theta)


def constrained_slope(fit: ConstrainedFit) -> np.ndarray:
    """d(lambda_hat_psi)/d(psi) = -j_ll^{-1} j_psi_l, solved through a Cholesky factor."""
    if fit.nuisance_info.size == 0:
        return np.zeros(0)
    try:
        factor = cho_factor(fit.nuisance_info, lower=True)
    except LinAlgError:
        raise ConditioningError(
            "nuisance information is singular at the constrained fit", psi=fit.psi
        ) from None
    return -cho_solve(factor, fit.cross_info)

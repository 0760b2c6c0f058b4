import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from services.errors import ConditioningError, CurvatureError, PreconditionError
from services.estimator_service import (
    ConstrainedFit,
    EstimatorService,
    FitResult,
    constrained_slope,
)
from services.model_service import Dataset

logger = logging.getLogger(__name__)

RADIUS = 4
PILOT_SCALE = 1e-3
STEP_FACTOR = 0.5
RETRY_SHRINK = 4.0
SLOPE_TOLERANCE = 1e-5

# 9-point central difference weights for derivative orders 1-4, offsets -4..4.
STENCILS = {
    1: np.array([1 / 280, -4 / 105, 1 / 5, -4 / 5, 0.0, 4 / 5, -1 / 5, 4 / 105, -1 / 280]),
    2: np.array([-1 / 560, 8 / 315, -1 / 5, 8 / 5, -205 / 72, 8 / 5, -1 / 5, 8 / 315, -1 / 560]),
    3: np.array([-7 / 240, 3 / 10, -169 / 120, 61 / 30, 0.0, -61 / 30, 169 / 120, -3 / 10, 7 / 240]),
    4: np.array([7 / 240, -2 / 5, 169 / 60, -122 / 15, 91 / 8, -122 / 15, 169 / 60, -2 / 5, 7 / 240]),
}


def stencil_derivative(values, step: float, order: int):
    """Derivative of the given order at the middle of nine equally spaced values.

    ``values`` may carry trailing axes (e.g. a stack of matrices); the stencil
    contracts the first one.
    """
    values = np.asarray(values, dtype=float)
    if values.shape[0] != 9:
        raise PreconditionError(f"stencil needs 9 values, got {values.shape[0]}")
    return np.tensordot(STENCILS[order], values, axes=(0, 0)) / step ** order


def quasi_cumulant(zeta_k: float, zeta2: float, k: int) -> float:
    """kappa_k = zeta_k / (-zeta_2)^(k/2)."""
    return float(zeta_k / (-zeta2) ** (k / 2.0))


@dataclass
class ProfileCurve:
    psi_hat: float
    zeta: np.ndarray
    j_p: float
    kappa3: float
    kappa4: float
    gamma1: float
    gamma2: float
    step: float
    psi_grid: np.ndarray = field(default_factory=lambda: np.zeros(0))
    loglik_grid: np.ndarray = field(default_factory=lambda: np.zeros(0))
    logdet_grid: np.ndarray = field(default_factory=lambda: np.zeros(0))
    slope_ok: bool = True

    @property
    def kappa2(self) -> float:
        return quasi_cumulant(self.zeta[1], self.zeta[1], 2)

    @property
    def standard_error(self) -> float:
        return float(self.j_p ** -0.5)

    def to_dict(self) -> dict:
        return {
            "psi_hat": self.psi_hat,
            "zeta": [float(z) for z in self.zeta],
            "j_p": self.j_p,
            "kappa3": self.kappa3,
            "kappa4": self.kappa4,
            "gamma1": self.gamma1,
            "gamma2": self.gamma2,
            "step": self.step,
            "slope_ok": self.slope_ok,
        }


class ProfileService:
    """Finite-difference derivatives of the profile log-likelihood and of
    log|j_ll(psi, lambda_hat_psi)| along the interest parameter."""

    def __init__(self, estimator: EstimatorService, radius: int = RADIUS, parallel: bool = False):
        if radius < RADIUS:
            raise PreconditionError(f"profile radius must be at least {RADIUS}, got {radius}")
        self.estimator = estimator
        self.radius = radius
        self.parallel = parallel

    def profile_grid(self, data: Dataset, center: float, step: float, radius: Optional[int] = None,
                     warm_start=None) -> List[ConstrainedFit]:
        radius = self.radius if radius is None else radius
        if not step > 0:
            raise PreconditionError(f"profile step must be positive, got {step}")
        if radius < 0:
            raise PreconditionError(f"profile radius must be non-negative, got {radius}")

        middle = self.estimator.fit_constrained(data, center, warm_start=warm_start)
        if radius == 0:
            return [middle]

        def arm(direction):
            fits = []
            previous = middle
            for k in range(1, radius + 1):
                previous = self.estimator.fit_constrained(data, center + direction * k * step,
                                                          warm_start=previous)
                fits.append(previous)
            return fits

        if self.parallel:
            with ThreadPoolExecutor(max_workers=2) as executor:
                left, right = executor.map(arm, (-1, 1))
        else:
            left, right = arm(-1), arm(1)
        return left[::-1] + [middle] + right

    def profile_derivs(self, grid: List[ConstrainedFit]) -> ProfileCurve:
        if len(grid) < 2 * RADIUS + 1 or len(grid) % 2 == 0:
            raise PreconditionError(
                f"profile derivatives need an odd grid of at least {2 * RADIUS + 1} points, got {len(grid)}"
            )
        mid = len(grid) // 2
        window = grid[mid - RADIUS: mid + RADIUS + 1]
        psi = np.array([fit.psi for fit in grid])
        loglik = np.array([fit.loglik_profile for fit in grid])
        logdet = np.array([fit.logdet_nuisance for fit in grid])
        step = float(window[RADIUS + 1].psi - window[RADIUS].psi)

        lp = np.array([fit.loglik_profile for fit in window])
        ld = np.array([fit.logdet_nuisance for fit in window])
        lp = lp - lp[RADIUS]
        ld = ld - ld[RADIUS]
        zeta = np.array([stencil_derivative(lp, step, k) for k in range(1, 5)])
        j_p = float(-zeta[1])
        if not np.isfinite(j_p) or j_p <= 0:
            raise CurvatureError(
                f"profile is not locally concave at psi={window[RADIUS].psi:.10g} (zeta2={zeta[1]:.6g})",
                psi=window[RADIUS].psi,
            )

        slope_ok = abs(zeta[0]) <= SLOPE_TOLERANCE * j_p * step
        if not slope_ok:
            logger.debug("Profile slope %.3g at the centre exceeds the stationarity tolerance", zeta[0])

        return ProfileCurve(
            psi_hat=float(window[RADIUS].psi),
            zeta=zeta,
            j_p=j_p,
            kappa3=quasi_cumulant(zeta[2], zeta[1], 3),
            kappa4=quasi_cumulant(zeta[3], zeta[1], 4),
            gamma1=float(stencil_derivative(ld, step, 1)),
            gamma2=float(stencil_derivative(ld, step, 2)),
            step=step,
            psi_grid=psi,
            loglik_grid=loglik,
            logdet_grid=logdet,
            slope_ok=bool(slope_ok),
        )

    def pilot_step(self, data: Dataset, fit: FitResult) -> float:
        """Curvature-scaled step from a 3-point second difference around psi_hat."""
        psi_hat = fit.psi_hat
        h0 = PILOT_SCALE * (1.0 + abs(psi_hat))
        lower = self.estimator.fit_constrained(data, psi_hat - h0, warm_start=fit)
        upper = self.estimator.fit_constrained(data, psi_hat + h0, warm_start=fit)
        curvature = -(upper.loglik_profile - 2.0 * fit.loglik_at_max + lower.loglik_profile) / h0 ** 2
        if not np.isfinite(curvature) or curvature <= 0:
            curvature = fit.profile_information()
            logger.debug("Pilot curvature not positive, using the profile information %.6g", curvature)
        if curvature <= 0:
            raise CurvatureError("profile information is not positive at the maximum", psi=psi_hat)
        return STEP_FACTOR / np.sqrt(curvature)

    def profile_curve(self, data: Dataset, fit: Optional[FitResult] = None,
                      step: Optional[float] = None) -> ProfileCurve:
        fit = fit or self.estimator.fit_mle(data)
        step = step or self.pilot_step(data, fit)
        try:
            grid = self.profile_grid(data, fit.psi_hat, step, warm_start=fit)
            return self.profile_derivs(grid)
        except CurvatureError as e:
            logger.warning("%s; retrying with step %.6g", e, step / RETRY_SHRINK)
        grid = self.profile_grid(data, fit.psi_hat, step / RETRY_SHRINK, warm_start=fit)
        return self.profile_derivs(grid)

    def profile_slope(self, data: Dataset, psi0: float, step: float, warm_start=None):
        """l_p'(psi0) by the 9-point stencil centred at psi0.

        Returns the derivative together with the constrained fit at psi0.
        """
        grid = self.profile_grid(data, psi0, step, radius=RADIUS, warm_start=warm_start)
        lp = np.array([fit.loglik_profile for fit in grid])
        return float(stencil_derivative(lp - lp[RADIUS], step, 1)), grid[RADIUS]

    def stability(self, data: Dataset, fit: FitResult, curve: ProfileCurve) -> dict:
        """Relative change of kappa3 when the step is halved."""
        half = self.profile_derivs(self.profile_grid(data, fit.psi_hat, curve.step / 2.0, warm_start=fit))
        scale = max(abs(curve.kappa3), abs(half.kappa3), np.finfo(float).tiny)
        return {
            "step": curve.step,
            "kappa3": curve.kappa3,
            "kappa3_half_step": half.kappa3,
            "relative_change": abs(curve.kappa3 - half.kappa3) / scale,
        }

    def gamma_trace_identity(self, data: Dataset, fit: FitResult, curve: ProfileCurve):
        """gamma_1, gamma_2 from trace identities of the nuisance information.

        The first derivative of j_ll is taken along the tangent of the
        constrained path (direction (1, d lambda_hat/d psi)); the second comes
        from the constrained fits on the profile grid.
        """
        idx = self.estimator.interest_index
        centre = self.estimator.fit_constrained(data, fit.psi_hat, warm_start=fit)
        if centre.nuisance_info.size == 0:
            return 0.0, 0.0

        slope = constrained_slope(centre)
        direction = np.insert(slope, idx, 1.0)
        h = curve.step / RETRY_SHRINK
        blocks = []
        for k in range(-RADIUS, RADIUS + 1):
            info = -self.estimator.model.hessian(data, centre.theta + k * h * direction)
            blocks.append(np.delete(np.delete(info, idx, axis=0), idx, axis=1))
        d_info = stencil_derivative(np.stack(blocks), h, 1)

        grid = self.profile_grid(data, fit.psi_hat, curve.step, warm_start=fit)
        mid = len(grid) // 2
        window = np.stack([g.nuisance_info for g in grid[mid - RADIUS: mid + RADIUS + 1]])
        d2_info = stencil_derivative(window, curve.step, 2)

        try:
            factor = cho_factor(centre.nuisance_info, lower=True)
        except LinAlgError:
            raise ConditioningError("nuisance information is singular at psi_hat", psi=fit.psi_hat) from None
        first = cho_solve(factor, d_info)
        second = cho_solve(factor, d2_info)
        gamma1 = float(np.trace(first))
        gamma2 = float(np.trace(second) - np.trace(first @ first))
        return gamma1, gamma2

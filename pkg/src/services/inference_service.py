import logging
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Tuple

import numpy as np
from scipy.optimize import brentq
from scipy.special import ndtr, ndtri

from services.errors import (
    BracketError,
    ConfigError,
    CurvatureError,
    ProfileInconsistencyError,
    SignInconsistencyError,
)
from services.estimator_service import FitResult
from services.expansion_service import LinearRepr, linear_repr, predicted_adjustments
from services.model_service import LINEAR_EXPONENTIAL, LOCATION_SCALE, Dataset
from services.profile_service import ProfileCurve, ProfileService

logger = logging.getLogger(__name__)

EPSILON0 = 0.05
PROFILE_SLACK = 1e-8
BRACKET_LIMIT = 10


def likelihood_root(lp_hat: float, lp_psi0: float, psi_hat: float, psi0: float) -> float:
    difference = lp_hat - lp_psi0
    if difference < -PROFILE_SLACK:
        raise ProfileInconsistencyError(
            f"constrained fit exceeds the global maximum by {-difference:.3g}", psi=psi0
        )
    return float(np.sign(psi_hat - psi0) * np.sqrt(2.0 * max(difference, 0.0)))


def _check_information(j_p):
    if not j_p > 0:
        raise CurvatureError(f"profile information must be positive, got {j_p}")


def wald_stat(psi_hat: float, psi0: float, j_p: float) -> float:
    _check_information(j_p)
    return float((psi_hat - psi0) * np.sqrt(j_p))


def score_stat(zeta1_at_psi0: float, j_p: float) -> float:
    _check_information(j_p)
    return float(zeta1_at_psi0 / np.sqrt(j_p))


def rho_stat(logdet_hat: float, logdet_psi0: float) -> float:
    return float(np.exp(0.5 * (logdet_hat - logdet_psi0)))


def q_stat(family: str, t_or_s: float, rho: float) -> float:
    if family == LINEAR_EXPONENTIAL:
        return float(t_or_s * rho)
    if family == LOCATION_SCALE:
        return float(t_or_s / rho)
    raise ConfigError(f"unknown model family {family!r}")


def r_star(r: float, q: float, coeffs: LinearRepr, epsilon0: float = EPSILON0) -> Tuple[float, bool]:
    """Modified likelihood root; near r = 0 the linear representation stands in."""
    if abs(r) < epsilon0:
        return float(coeffs.predict(r)), True
    ratio = q / r
    if not ratio > 0:
        raise SignInconsistencyError(f"q={q:.6g} and r={r:.6g} disagree in sign")
    return float(r + np.log(ratio) / r), False


def decompose(r: float, rho: float, t_or_s: float, family: str,
              epsilon0: float = EPSILON0) -> Tuple[float, float]:
    """Split r* - r into the nuisance adjustment r_np and the information adjustment r_inf."""
    if abs(r) < epsilon0:
        raise SignInconsistencyError(f"r={r:.3g} is inside the near-zero band, no decomposition")
    ratio = t_or_s / r
    if not ratio > 0:
        raise SignInconsistencyError(f"statistic {t_or_s:.6g} and r={r:.6g} disagree in sign")
    r_np = np.log(rho) / r
    if family == LOCATION_SCALE:
        r_np = -r_np
    elif family != LINEAR_EXPONENTIAL:
        raise ConfigError(f"unknown model family {family!r}")
    return float(r_np), float(np.log(ratio) / r)


def p_values(stat: float) -> Tuple[float, float]:
    return float(ndtr(-stat)), float(min(1.0, 2.0 * ndtr(-abs(stat))))


class Analysis(NamedTuple):
    fit: FitResult
    curve: ProfileCurve
    linear: LinearRepr


@dataclass
class InferenceReport:
    psi0: float
    r: float
    wald_t: Optional[float]
    score_s: Optional[float]
    rho: float
    q: float
    r_star: float
    r_np: float
    r_inf: float
    p_one_sided: float
    p_two_sided: float
    near_zero_patched: bool
    psi_hat: float = 0.0
    w: float = 0.0
    p_star_one_sided: float = 0.5
    p_star_two_sided: float = 1.0
    family: str = ""
    n: int = 0
    linear: Optional[LinearRepr] = None
    curve: Optional[ProfileCurve] = None
    extras: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        payload = {
            "family": self.family,
            "n": self.n,
            "psi_hat": self.psi_hat,
            "psi0": self.psi0,
            "r": self.r,
            "w": self.w,
            "wald_t": self.wald_t,
            "score_s": self.score_s,
            "rho": self.rho,
            "q": self.q,
            "r_star": self.r_star,
            "r_np": self.r_np,
            "r_inf": self.r_inf,
            "p_one_sided": self.p_one_sided,
            "p_two_sided": self.p_two_sided,
            "p_star_one_sided": self.p_star_one_sided,
            "p_star_two_sided": self.p_star_two_sided,
            "near_zero_patched": self.near_zero_patched,
        }
        if self.linear is not None:
            payload["linear_representation"] = self.linear.to_dict()
            payload["r_star_linear"] = float(self.linear.predict(self.r))
            payload["r_star_ratio_form"] = float(self.linear.ratio_form(self.r))
        if self.curve is not None:
            payload["profile"] = self.curve.to_dict()
        payload.update(self.extras)
        return payload


class InferenceService:
    """Tests and confidence intervals for the interest parameter based on r and r*."""

    def __init__(self, profiles: ProfileService, epsilon0: float = EPSILON0):
        self.profiles = profiles
        self.estimator = profiles.estimator
        self.model = profiles.estimator.model
        self.epsilon0 = epsilon0

    def analyse(self, data: Dataset, fit: Optional[FitResult] = None) -> Analysis:
        fit = fit or self.estimator.fit_mle(data)
        curve = self.profiles.profile_curve(data, fit)
        return Analysis(fit, curve, linear_repr(curve, self.model.family, data.n))

    def test(self, data: Dataset, psi0: float, analysis: Optional[Analysis] = None,
             score: Optional[bool] = None) -> InferenceReport:
        """Evaluate every statistic at psi0.

        The score statistic needs a stencil of constrained fits around psi0; it
        is computed by default only where q is built from it.
        """
        fit, curve, linear = analysis or self.analyse(data)
        family = self.model.family
        if score is None:
            score = family == LOCATION_SCALE

        if score:
            zeta1, constrained = self.profiles.profile_slope(data, psi0, curve.step, warm_start=fit)
            s = score_stat(zeta1, curve.j_p)
        else:
            constrained = self.estimator.fit_constrained(data, psi0, warm_start=fit)
            s = None

        r = likelihood_root(fit.loglik_at_max, constrained.loglik_profile, fit.psi_hat, psi0)
        t = wald_stat(fit.psi_hat, psi0, curve.j_p)
        rho = rho_stat(fit.logdet_nuisance, constrained.logdet_nuisance)
        base = t if family == LINEAR_EXPONENTIAL else s
        q = q_stat(family, base, rho)

        value, patched = r_star(r, q, linear, self.epsilon0)
        if patched:
            logger.info("r=%.3g is within %.3g of zero, using the linear representation", r, self.epsilon0)
            r_np, r_inf = predicted_adjustments(curve, family, r)
        else:
            r_np, r_inf = decompose(r, rho, base, family, self.epsilon0)

        # first-order p-values from r; the r*-based ones carry the p_star prefix
        p_one, p_two = p_values(r)
        p_star_one, p_star_two = p_values(value)
        return InferenceReport(
            psi0=float(psi0), r=r, wald_t=t, score_s=s, rho=rho, q=q, r_star=value,
            r_np=r_np, r_inf=r_inf, p_one_sided=p_one, p_two_sided=p_two,
            near_zero_patched=patched, psi_hat=fit.psi_hat, w=r * r,
            p_star_one_sided=p_star_one, p_star_two_sided=p_star_two, family=family, n=data.n,
            linear=linear, curve=curve,
        )

    def confidence_interval(self, data: Dataset, which: str = "r_star", level: float = 0.95,
                            analysis: Optional[Analysis] = None) -> Tuple[float, float]:
        if which not in ("r", "r_star"):
            raise ConfigError(f"interval statistic must be 'r' or 'r_star', got {which!r}")
        if not 0 < level < 1:
            raise ConfigError(f"confidence level must lie in (0, 1), got {level}")

        analysis = analysis or self.analyse(data)
        psi_hat = analysis.fit.psi_hat
        se = analysis.curve.standard_error
        z = float(ndtri(0.5 * (1.0 + level)))

        def statistic(psi):
            if psi == psi_hat and which == "r":
                return 0.0
            report = self.test(data, psi, analysis)
            return report.r if which == "r" else report.r_star

        lower = self._endpoint(statistic, psi_hat, se, -1, z)
        upper = self._endpoint(statistic, psi_hat, se, 1, -z)
        return lower, upper

    def _endpoint(self, statistic, psi_hat, se, direction, target):
        inner = psi_hat
        for k in range(1, BRACKET_LIMIT + 1):
            outer = psi_hat + direction * k * se
            value = statistic(outer) - target
            if value == 0:
                return outer
            # the statistic decreases in psi, so the sign changes once the target is passed
            if direction * value < 0:
                root = brentq(lambda psi: statistic(psi) - target, min(inner, outer), max(inner, outer),
                              xtol=1e-6 * se)
                return float(root)
            inner = outer
        raise BracketError(
            f"no interval endpoint within {BRACKET_LIMIT} standard errors of psi_hat={psi_hat:.6g}"
        )

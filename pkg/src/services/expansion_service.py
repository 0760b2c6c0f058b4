"""Second-order expansion of r* in powers of r.

Coefficients are evaluated at psi_hat from the quasi-cumulants and the
log-determinant derivatives of a ProfileCurve.
"""
import logging
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np

from services.errors import ConfigError, PreconditionError
from services.model_service import LINEAR_EXPONENTIAL, LOCATION_SCALE
from services.profile_service import ProfileCurve

logger = logging.getLogger(__name__)

Q_MIN = 1e-3


@dataclass
class LemmaCoeffs:
    A1: float
    B1: float
    A2: float
    B2: float

    def to_dict(self) -> dict:
        return {"A1": self.A1, "B1": self.B1, "A2": self.A2, "B2": self.B2}


@dataclass
class LinearRepr:
    c0: float
    c1: float
    family: str
    n: int

    @property
    def A_star(self) -> float:
        return self.c0 * np.sqrt(self.n)

    @property
    def B_star(self) -> float:
        return self.c1 * self.n

    def predict(self, r):
        """A*/sqrt(n) + (1 + B*/n) r."""
        return self.c0 + (1.0 + self.c1) * r

    def ratio_form(self, r):
        """(r - A~/sqrt(n)) / (1 + B~/n) with A~/sqrt(n) = -c0 and B~/n = -c1."""
        return (r + self.c0) / (1.0 - self.c1)

    def to_dict(self) -> dict:
        return {
            "c0": self.c0,
            "c1": self.c1,
            "A_star": self.A_star,
            "B_star": self.B_star,
            "family": self.family,
            "n": self.n,
        }


def _family_sign(family: str) -> float:
    if family == LINEAR_EXPONENTIAL:
        return 1.0
    if family == LOCATION_SCALE:
        return -1.0
    raise ConfigError(f"unknown model family {family!r}")


def lemma1_coeffs(curve: ProfileCurve, n: int) -> LemmaCoeffs:
    root_n = np.sqrt(n)
    k3, k4 = curve.kappa3, curve.kappa4
    return LemmaCoeffs(
        A1=-root_n * k3 / 6.0,
        B1=n * k4 / 24.0 + 5.0 * n * k3 * k3 / 72.0,
        A2=root_n * k3 / 2.0,
        B2=-n * k4 / 6.0,
    )


def lemma1_residual(r: float, t: float, coeffs: LemmaCoeffs, n: int) -> float:
    """|t - r (1 + A1 r / sqrt(n) + B1 r^2 / n)|."""
    return abs(t - r * (1.0 + coeffs.A1 * r / np.sqrt(n) + coeffs.B1 * r * r / n))


def score_residual(s: float, t: float, coeffs: LemmaCoeffs, n: int) -> float:
    """|s - t (1 + A2 t / sqrt(n) + B2 t^2 / n)|."""
    return abs(s - t * (1.0 + coeffs.A2 * t / np.sqrt(n) + coeffs.B2 * t * t / n))


def predicted_adjustments(curve: ProfileCurve, family: str, r: float) -> Tuple[float, float]:
    """Leading terms of (r_np, r_inf) as linear functions of r."""
    sign = _family_sign(family)
    k3, k4 = curve.kappa3, curve.kappa4
    root_j = np.sqrt(curve.j_p)

    r_np = sign * (
        curve.gamma1 / (2.0 * root_j)
        - (k3 * curve.gamma1 / (12.0 * root_j) + curve.gamma2 / (4.0 * curve.j_p)) * r
    )
    if family == LINEAR_EXPONENTIAL:
        r_inf = -k3 / 6.0 + (k4 / 24.0 + 4.0 * k3 * k3 / 72.0) * r
    else:
        r_inf = k3 / 3.0 - (3.0 * k4 / 24.0 + 11.0 * k3 * k3 / 72.0) * r
    return float(r_np), float(r_inf)


def linear_repr(curve: ProfileCurve, family: str, n: int) -> LinearRepr:
    _family_sign(family)
    k3, k4 = curve.kappa3, curve.kappa4
    root_j = np.sqrt(curve.j_p)
    nuisance0 = curve.gamma1 / (2.0 * root_j)
    nuisance1 = -k3 * curve.gamma1 / (12.0 * root_j) - curve.gamma2 / (4.0 * curve.j_p)
    if family == LINEAR_EXPONENTIAL:
        c0 = -k3 / 6.0 + nuisance0
        c1 = k4 / 24.0 + 4.0 * k3 * k3 / 72.0 + nuisance1
    else:
        c0 = k3 / 3.0 - nuisance0
        c1 = -3.0 * k4 / 24.0 - 11.0 * k3 * k3 / 72.0 - nuisance1
    logger.debug("Linear representation for %s: c0=%.6g c1=%.6g", family, c0, c1)
    return LinearRepr(c0=float(c0), c1=float(c1), family=family, n=int(n))


def log_log_slope(n_values: Sequence[float], values: Sequence[float]) -> Tuple[float, float]:
    """Least-squares slope and intercept of log|value| on log n.

    Zero and non-finite values are dropped; with fewer than two usable points
    both results are NaN.
    """
    n_values = np.asarray(n_values, dtype=float)
    values = np.abs(np.asarray(values, dtype=float))
    keep = np.isfinite(values) & (values > 0) & (n_values > 0)
    if np.unique(n_values[keep]).size < 2:
        return float("nan"), float("nan")
    slope, intercept = np.polyfit(np.log(n_values[keep]), np.log(values[keep]), 1)
    return float(slope), float(intercept)


@dataclass
class Theorem3Report:
    n: np.ndarray
    r: np.ndarray
    q: np.ndarray
    A_hat: np.ndarray
    B_hat: np.ndarray
    residual: np.ndarray
    A_mean: float
    spread: float
    residual_slope: float
    excluded: List[Tuple[float, float, int]] = field(default_factory=list)

    def rows(self):
        for i in range(self.n.size):
            yield (int(self.n[i]), float(self.r[i]), float(self.q[i]), float(self.A_hat[i]),
                   float(self.B_hat[i]), float(self.residual[i]))

    def to_dict(self) -> dict:
        return {
            "A_mean": self.A_mean,
            "spread": self.spread,
            "residual_slope": self.residual_slope,
            "points": [dict(zip(("n", "r", "q", "A_hat", "B_hat", "residual"), row)) for row in self.rows()],
            "excluded": [{"r": r, "q": q, "n": n} for r, q, n in self.excluded],
        }


def theorem3_diagnostic(pairs: Sequence[Tuple[float, float, int]]) -> Theorem3Report:
    """Fit r = q + (A / sqrt(n)) q^2 + (B / n) q^3 pointwise across sample sizes."""
    if len({int(n) for _, _, n in pairs}) < 3:
        raise PreconditionError("the r/q diagnostic needs at least 3 distinct sample sizes")

    kept = [(r, q, n) for r, q, n in pairs if abs(q) >= Q_MIN]
    excluded = [(float(r), float(q), int(n)) for r, q, n in pairs if abs(q) < Q_MIN]
    for r, q, n in excluded:
        logger.info("Excluding n=%d from the r/q diagnostic: q=%.3g is too close to zero", n, q)
    if not kept:
        raise PreconditionError("every point of the r/q diagnostic has q too close to zero")

    r = np.array([p[0] for p in kept], dtype=float)
    q = np.array([p[1] for p in kept], dtype=float)
    n = np.array([p[2] for p in kept], dtype=float)
    root_n = np.sqrt(n)

    A_hat = root_n * (r - q) / q ** 2
    A_mean = float(np.mean(A_hat))
    remainder = r - q - A_mean * q ** 2 / root_n
    B_hat = n * remainder / q ** 3

    per_n = np.array([np.mean(A_hat[n == value]) for value in np.unique(n)])
    magnitude = np.abs(per_n)
    if np.all(magnitude == 0):
        spread = 1.0
    elif np.any(np.sign(per_n) != np.sign(per_n[0])) or np.min(magnitude) == 0:
        spread = float("inf")
    else:
        spread = float(np.max(magnitude) / np.min(magnitude))

    slope, _ = log_log_slope(n, remainder)
    return Theorem3Report(
        n=n.astype(int), r=r, q=q, A_hat=A_hat, B_hat=B_hat, residual=np.abs(remainder),
        A_mean=A_mean, spread=spread, residual_slope=slope, excluded=excluded,
    )

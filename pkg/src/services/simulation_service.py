"""Monte Carlo studies of the residual r* - A*/sqrt(n) - (1 + B*/n) r.

Every replication draws from its own counter-based stream keyed by
(seed, n, replication), so results do not depend on how work is scheduled.
"""
import logging
import multiprocessing as mp
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from services.errors import ConfigError, PreconditionError, RStarError
from services.estimator_service import BOUND, MAX_ITER, TOL_GRAD, EstimatorService
from services.expansion_service import (
    Theorem3Report,
    lemma1_coeffs,
    lemma1_residual,
    log_log_slope,
    score_residual,
    theorem3_diagnostic,
)
from services.inference_service import EPSILON0, InferenceService
from services.model_service import Dataset, model_from_family
from services.profile_service import RADIUS, ProfileService
from utils.common import available_workers, parse_float_list, parse_int_list

logger = logging.getLogger(__name__)

REFERENCE_SLOPE = -1.5
MAX_FAILED_FRACTION = 0.05
DEGENERATE_TOLERANCE = 1e-8
MIN_BOOTSTRAP_VALUES = 10
BOOTSTRAP_STREAM = 2 ** 32


def replication_rng(seed: int, n: int, rep_index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(n, rep_index))))


def draw_seed() -> int:
    return int(np.random.SeedSequence().entropy % 2 ** 64)


@dataclass
class SimConfig:
    family: str = "logistic"
    n_grid: List[int] = field(default_factory=lambda: [150, 300, 600, 1200, 2400])
    p: int = 5
    beta_true: List[float] = field(default_factory=lambda: [0.0, 1.0, 1.0, 1.0, 1.0])
    intercept: float = 1.0
    psi0: float = 0.0
    interest_index: int = 0
    sigma: float = 1.0
    reps: int = 2000
    bootstrap_reps: int = 1000
    level: float = 0.95
    seed: Optional[int] = None
    error_df: Optional[float] = None
    workers: int = 0
    offset_se: float = -1.5
    engine: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.seed is None:
            self.seed = draw_seed()
            logger.info("No seed given, drew %d from entropy", self.seed)
        self.validate()

    @property
    def model_family(self) -> str:
        family = self.family.strip().lower()
        if family in ("locscale-t", "t") and self.error_df is not None:
            return f"locscale-t:{self.error_df:g}"
        return family

    @property
    def worker_count(self) -> int:
        return self.workers if self.workers > 0 else available_workers()

    def validate(self):
        model_from_family(self.model_family)
        if self.reps < 100:
            raise ConfigError(f"reps must be at least 100, got {self.reps}")
        if self.bootstrap_reps < 100:
            raise ConfigError(f"bootstrap_reps must be at least 100, got {self.bootstrap_reps}")
        if not self.n_grid or any(b <= a for a, b in zip(self.n_grid, self.n_grid[1:])):
            raise ConfigError(f"n_grid must be non-empty and strictly increasing, got {self.n_grid}")
        if self.p != len(self.beta_true):
            raise ConfigError(f"p={self.p} but beta_true has {len(self.beta_true)} entries")
        if not 0 <= self.interest_index < self.p:
            raise ConfigError(f"interest_index must lie in [0, {self.p}), got {self.interest_index}")
        if self.n_grid[0] < self.p + 2:
            raise ConfigError(f"sample sizes must exceed the number of parameters, got {self.n_grid[0]}")
        if not 0 < self.level < 1:
            raise ConfigError(f"level must lie in (0, 1), got {self.level}")
        if not self.sigma > 0:
            raise ConfigError(f"sigma must be positive, got {self.sigma}")
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError(f"seed must be an unsigned 64-bit integer, got {self.seed}")
        if self.engine.get("radius", RADIUS) < RADIUS:
            raise ConfigError(f"profile radius must be at least {RADIUS}, got {self.engine['radius']}")
        if not self.engine.get("epsilon0", EPSILON0) >= 0:
            raise ConfigError(f"epsilon0 must be non-negative, got {self.engine['epsilon0']}")

    @classmethod
    def from_mapping(cls, values: dict, engine: Optional[dict] = None) -> "SimConfig":
        """Study settings from text values; ``engine`` carries the fitting and profiling settings."""
        known = set(cls.__dataclass_fields__) - {"engine"}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigError(f"unknown simulation keys: {', '.join(unknown)}")
        parsed = {}
        try:
            for key, value in values.items():
                if key in ("n_grid",):
                    parsed[key] = parse_int_list(value)
                elif key == "beta_true":
                    parsed[key] = parse_float_list(value)
                elif key in ("p", "interest_index", "reps", "bootstrap_reps", "workers", "seed"):
                    parsed[key] = None if value in (None, "") else int(value)
                elif key in ("intercept", "psi0", "sigma", "level", "offset_se"):
                    parsed[key] = float(value)
                elif key == "error_df":
                    parsed[key] = None if value in (None, "") else float(value)
                else:
                    parsed[key] = str(value)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"bad simulation value for {key!r}: {e}") from None
        if "beta_true" in parsed and "p" not in parsed:
            parsed["p"] = len(parsed["beta_true"])
        return cls(**parsed, engine=dict(engine or {}))

    def to_dict(self) -> dict:
        return asdict(self)


def generate_dataset(config: SimConfig, n: int, rep_index: int) -> Dataset:
    if rep_index < 0:
        raise PreconditionError(f"replication index must be non-negative, got {rep_index}")
    rng = replication_rng(config.seed, n, rep_index)
    model = model_from_family(config.model_family)
    covariates = rng.standard_normal((n, config.p))
    eta = config.intercept + covariates @ np.asarray(config.beta_true, dtype=float)
    y = model.simulate_response(rng, eta, config.sigma)
    columns = ("(intercept)",) + tuple(f"x{j + 1}" for j in range(config.p))
    return Dataset(y, np.column_stack([np.ones(n), covariates]), columns, "y")


def bootstrap_ci(values: Sequence[float], B: int, level: float, seed: int,
                 statistic=np.mean, spawn_key: Tuple[int, ...] = ()) -> Tuple[float, float]:
    """Percentile interval of ``statistic`` over B resamples of ``values``."""
    values = np.asarray(values, dtype=float)
    if values.size < MIN_BOOTSTRAP_VALUES:
        raise PreconditionError(f"bootstrap needs at least {MIN_BOOTSTRAP_VALUES} values, got {values.size}")
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=spawn_key)))
    index = rng.integers(0, values.size, size=(B, values.size))
    stats = statistic(values[index], axis=1)
    lo, hi = np.quantile(stats, [0.5 * (1.0 - level), 0.5 * (1.0 + level)])
    return float(lo), float(hi)


def _sample_sd(values, axis=None):
    return np.std(values, axis=axis, ddof=1)


def _build_inference(config: SimConfig) -> InferenceService:
    engine = config.engine
    model = model_from_family(config.model_family)
    estimator = EstimatorService(
        model,
        interest_index=config.interest_index + 1,
        tol_grad=engine.get("tol_grad", TOL_GRAD),
        max_iter=engine.get("max_iter", MAX_ITER),
        bound=engine.get("bound", BOUND),
    )
    profiles = ProfileService(estimator, radius=engine.get("radius", RADIUS))
    return InferenceService(profiles, epsilon0=engine.get("epsilon0", EPSILON0))


class Outcome(NamedTuple):
    n: int
    rep: int
    d: float
    r: float
    r_star: float
    patched: bool
    error: Optional[str]


def _replicate(task) -> Outcome:
    config, n, rep = task
    inference = _build_inference(config)
    try:
        data = generate_dataset(config, n, rep)
        analysis = inference.analyse(data)
        report = inference.test(data, config.psi0, analysis)
        d = report.r_star - analysis.linear.predict(report.r)
        return Outcome(n, rep, d, report.r, report.r_star, report.near_zero_patched, None)
    except RStarError as e:
        return Outcome(n, rep, float("nan"), float("nan"), float("nan"), False, f"{type(e).__name__}: {e}")


def _run_tasks(worker, tasks, workers: int):
    if workers <= 1 or len(tasks) <= 1:
        return [worker(task) for task in tasks]
    context = mp.get_context("spawn")
    chunksize = max(1, len(tasks) // (8 * workers))
    with ProcessPoolExecutor(max_workers=workers, mp_context=context) as pool:
        return list(pool.map(worker, tasks, chunksize=chunksize))


@dataclass
class SimRow:
    n: int
    mean_d: float
    sd_d: float
    mean_ci: Tuple[float, float]
    sd_ci: Tuple[float, float]
    n_failed: int
    patched_fraction: float = 0.0
    sign_flip: bool = False
    unreliable: bool = False
    degenerate: bool = False


@dataclass
class SimResult:
    rows: List[SimRow]
    slope_mean: float
    slope_sd: float
    intercept_mean: float = float("nan")
    intercept_sd: float = float("nan")
    degenerate: bool = False

    TABLE_HEADER = ("n", "mean", "mean_lo", "mean_hi", "sd", "sd_lo", "sd_hi",
                    "n_failed", "patched_fraction", "sign_flip", "unreliable")
    PLOT_HEADER = ("n", "abs_mean", "sd", "fit_mean", "fit_sd", "ref_mean", "ref_sd")

    def table_rows(self):
        return [
            (row.n, row.mean_d, row.mean_ci[0], row.mean_ci[1], row.sd_d, row.sd_ci[0], row.sd_ci[1],
             row.n_failed, row.patched_fraction, row.sign_flip, row.unreliable)
            for row in self.rows
        ]

    def plot_rows(self):
        """Observed magnitudes, fitted log-log lines and the slope -3/2 reference lines."""
        n = np.array([row.n for row in self.rows], dtype=float)
        abs_mean = np.abs([row.mean_d for row in self.rows])
        sd = np.array([row.sd_d for row in self.rows])
        ref_mean = reference_line(n, abs_mean)
        ref_sd = reference_line(n, sd)
        fit_mean = np.exp(self.intercept_mean) * n ** self.slope_mean
        fit_sd = np.exp(self.intercept_sd) * n ** self.slope_sd
        return [
            (int(n[i]), float(abs_mean[i]), float(sd[i]), float(fit_mean[i]), float(fit_sd[i]),
             float(ref_mean[i]), float(ref_sd[i]))
            for i in range(n.size)
        ]

    def summary(self) -> dict:
        return {
            "slope_mean": self.slope_mean,
            "slope_sd": self.slope_sd,
            "intercept_mean": self.intercept_mean,
            "intercept_sd": self.intercept_sd,
            "degenerate": self.degenerate,
            "unreliable_n": [row.n for row in self.rows if row.unreliable],
            "sign_flip_n": [row.n for row in self.rows if row.sign_flip],
        }


def reference_line(n, values, slope: float = REFERENCE_SLOPE) -> np.ndarray:
    """Line of the given slope on the log-log scale with a least-squares intercept."""
    n = np.asarray(n, dtype=float)
    values = np.abs(np.asarray(values, dtype=float))
    keep = np.isfinite(values) & (values > 0)
    if not keep.any():
        return np.full(n.shape, np.nan)
    intercept = np.mean(np.log(values[keep]) - slope * np.log(n[keep]))
    return np.exp(intercept) * n ** slope


def _summarise(config: SimConfig, n: int, outcomes: List[Outcome]) -> SimRow:
    d = np.array([o.d for o in outcomes if o.error is None])
    n_failed = len(outcomes) - d.size
    for o in outcomes:
        if o.error is not None:
            logger.debug("n=%d rep=%d failed: %s", o.n, o.rep, o.error)
    if n_failed:
        logger.warning("n=%d: %d of %d replications failed", n, n_failed, len(outcomes))

    patched = sum(o.patched for o in outcomes if o.error is None)
    unreliable = n_failed / len(outcomes) > MAX_FAILED_FRACTION
    if d.size < MIN_BOOTSTRAP_VALUES:
        logger.warning("n=%d: only %d usable replications", n, d.size)
        nan_pair = (float("nan"), float("nan"))
        mean = float(np.mean(d)) if d.size else float("nan")
        sd = float(_sample_sd(d)) if d.size > 1 else float("nan")
        return SimRow(n, mean, sd, nan_pair, nan_pair, n_failed, 0.0, False, True, False)

    mean_ci = bootstrap_ci(d, config.bootstrap_reps, config.level, config.seed,
                           np.mean, spawn_key=(n, BOOTSTRAP_STREAM))
    sd_ci = bootstrap_ci(d, config.bootstrap_reps, config.level, config.seed,
                         _sample_sd, spawn_key=(n, BOOTSTRAP_STREAM + 1))
    mean, sd = float(np.mean(d)), float(_sample_sd(d))
    return SimRow(
        n=n,
        mean_d=mean,
        sd_d=sd,
        mean_ci=(min(mean_ci[0], mean), max(mean_ci[1], mean)),
        sd_ci=(min(sd_ci[0], sd), max(sd_ci[1], sd)),
        n_failed=n_failed,
        patched_fraction=patched / d.size,
        unreliable=unreliable,
        degenerate=bool(np.max(np.abs(d)) <= DEGENERATE_TOLERANCE),
    )


def run_study(config: SimConfig) -> SimResult:
    tasks = [(config, n, rep) for n in config.n_grid for rep in range(config.reps)]
    logger.info("Running %d replications on %d workers", len(tasks), config.worker_count)
    outcomes = _run_tasks(_replicate, tasks, config.worker_count)

    rows = [_summarise(config, n, [o for o in outcomes if o.n == n]) for n in config.n_grid]
    reference_sign = np.sign(rows[0].mean_d)
    for row in rows:
        row.sign_flip = bool(np.sign(row.mean_d) != reference_sign and row.mean_d != 0)
        if row.unreliable:
            logger.warning("n=%d is unreliable: %d failed replications", row.n, row.n_failed)

    degenerate = all(row.degenerate for row in rows)
    if degenerate:
        logger.warning("Residuals vanish at every n; slopes are undefined")
        return SimResult(rows, float("nan"), float("nan"), degenerate=True)

    n = [row.n for row in rows]
    slope_mean, intercept_mean = log_log_slope(n, [row.mean_d for row in rows])
    slope_sd, intercept_sd = log_log_slope(n, [row.sd_d for row in rows])
    return SimResult(rows, slope_mean, slope_sd, intercept_mean, intercept_sd)


@dataclass
class VerificationRow:
    n: int
    psi_hat: float
    psi0: float
    r: float
    t: float
    s: float
    q: float
    A1: float
    B1: float
    lemma1_residual: float
    score_residual: float
    A_hat: float
    r_star: float
    linear_prediction: float
    ratio_prediction: float

    HEADER = ("n", "psi_hat", "psi0", "r", "t", "s", "q", "A1", "B1", "lemma1_residual",
              "score_residual", "A_hat", "r_star", "linear_prediction", "ratio_prediction")

    def values(self):
        return tuple(getattr(self, name) for name in self.HEADER)


@dataclass
class VerificationResult:
    rows: List[VerificationRow]
    theorem3: Theorem3Report
    lemma1_slope: float
    score_slope: float
    linear_slope: float

    SUMMARY_HEADER = ("statistic", "value")

    def summary_rows(self):
        return [
            ("lemma1_residual_slope", self.lemma1_slope),
            ("score_residual_slope", self.score_slope),
            ("linear_residual_slope", self.linear_slope),
            ("A_hat_mean", self.theorem3.A_mean),
            ("A_hat_spread", self.theorem3.spread),
            ("theorem3_residual_slope", self.theorem3.residual_slope),
        ]


def _verify_one(task) -> VerificationRow:
    config, full, n = task
    inference = _build_inference(config)
    data = full.head(n)
    analysis = inference.analyse(data)
    psi0 = analysis.fit.psi_hat + config.offset_se * analysis.curve.standard_error
    report = inference.test(data, psi0, analysis, score=True)
    coeffs = lemma1_coeffs(analysis.curve, n)
    q = report.q
    return VerificationRow(
        n=n,
        psi_hat=analysis.fit.psi_hat,
        psi0=psi0,
        r=report.r,
        t=report.wald_t,
        s=report.score_s,
        q=q,
        A1=coeffs.A1,
        B1=coeffs.B1,
        lemma1_residual=lemma1_residual(report.r, report.wald_t, coeffs, n),
        score_residual=score_residual(report.score_s, report.wald_t, coeffs, n),
        A_hat=float(np.sqrt(n) * (report.r - q) / q ** 2) if q != 0 else float("nan"),
        r_star=report.r_star,
        linear_prediction=analysis.linear.predict(report.r),
        ratio_prediction=analysis.linear.ratio_form(report.r),
    )


def run_verification(config: SimConfig) -> VerificationResult:
    """Expansion residuals of t and s and the r/q fit along one nested data sequence.

    Each sample size uses the leading rows of a single dataset drawn at the
    largest n, with psi0 placed ``offset_se`` standard errors from psi_hat.
    """
    if len(config.n_grid) < 3:
        raise PreconditionError("verification needs at least 3 sample sizes")
    full = generate_dataset(config, config.n_grid[-1], 0)
    tasks = [(config, full, n) for n in config.n_grid]
    rows = _run_tasks(_verify_one, tasks, min(config.worker_count, len(tasks)))

    n = [row.n for row in rows]
    lemma1_slope, _ = log_log_slope(n, [row.lemma1_residual for row in rows])
    score_slope, _ = log_log_slope(n, [row.score_residual for row in rows])
    linear_slope, _ = log_log_slope(n, [row.r_star - row.linear_prediction for row in rows])
    return VerificationResult(
        rows=rows,
        theorem3=theorem3_diagnostic([(row.r, row.q, row.n) for row in rows]),
        lemma1_slope=lemma1_slope,
        score_slope=score_slope,
        linear_slope=linear_slope,
    )

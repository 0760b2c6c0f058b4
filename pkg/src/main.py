import argparse
import json
import logging
import os
import platform
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

CONFIG_FILE = "rstar_config.json"

ENGINE_DEFAULTS = {
    "tol_grad": 1e-10,
    "max_iter": 200,
    "bound": 1e6,
    "epsilon0": 0.05,
    "radius": 4,
    "workers": 0,
    "response": "y",
    "intercept": True,
}

# engine settings that shape the fits inside simulate and verify
STUDY_ENGINE_KEYS = ("tol_grad", "max_iter", "bound", "epsilon0", "radius")

logger = logging.getLogger(__name__)


def setup_paths():
    app_path = os.path.dirname(os.path.abspath(__file__))
    cwd = os.getcwd()

    for path in [cwd, app_path]:
        if path not in sys.path:
            sys.path.insert(0, path)

    return app_path, cwd


@dataclass
class RunConfig:
    subcommand: str
    input_path: Optional[str] = None
    output_path: Optional[str] = None
    family: str = "logistic"
    interest: Optional[str] = None
    psi0: Optional[float] = None
    level: float = 0.95
    seed: Optional[int] = None
    format: Optional[str] = None
    config_path: Optional[str] = None
    reps: Optional[int] = None
    boot: Optional[int] = None
    workers: Optional[int] = None
    interval: bool = False
    verbosity: int = 0
    engine: dict = field(default_factory=lambda: dict(ENGINE_DEFAULTS))

    def canonical(self) -> dict:
        payload = asdict(self)
        payload.pop("verbosity")
        return payload


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rstar-lab",
        description="Likelihood root and modified likelihood root inference for regression models.",
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)

    def common(p, needs_input=True):
        p.add_argument("--input", dest="input_path", required=needs_input, help="CSV dataset with a header row")
        p.add_argument("--output", dest="output_path", required=True, help="artifact path")
        p.add_argument("--family", default="logistic",
                       help="logistic, locscale-normal, locscale-t:<nu>, locscale-logistic or normal-known:<sigma>")
        p.add_argument("--interest", help="interest covariate, by column name or index")
        p.add_argument("--format", choices=("csv", "json"))
        p.add_argument("--seed", type=int)
        p.add_argument("-v", "--verbose", dest="verbosity", action="count", default=0)

    common(sub.add_parser("fit", help="maximum likelihood fit"))

    test = sub.add_parser("test", help="r and r* for H0: psi = psi0")
    common(test)
    test.add_argument("--psi0", type=float, default=0.0)
    test.add_argument("--level", type=float, default=0.95)
    test.add_argument("--interval", action="store_true", help="also invert r and r* into confidence intervals")

    common(sub.add_parser("profile", help="profile log-likelihood grid around psi_hat"))

    for name, text in (("simulate", "Monte Carlo scaling study"), ("verify", "r/t expansion and r/q diagnostics")):
        p = sub.add_parser(name, help=text)
        common(p, needs_input=False)
        p.add_argument("--config", dest="config_path", help="study settings, key = value or JSON")
        p.add_argument("--reps", type=int)
        p.add_argument("--boot", type=int)
        p.add_argument("--workers", type=int)
        p.set_defaults(family=None)
    return parser


def load_engine_settings(cwd) -> dict:
    from services.errors import ConfigError
    from utils.common import load_json_file

    settings = dict(ENGINE_DEFAULTS)
    overrides = load_json_file(Path(cwd) / CONFIG_FILE, {})
    unknown = sorted(set(overrides) - set(ENGINE_DEFAULTS))
    if unknown:
        raise ConfigError(f"{CONFIG_FILE}: unknown keys {', '.join(unknown)}")
    for key, value in overrides.items():
        expected = type(ENGINE_DEFAULTS[key])
        if expected is float and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        if not isinstance(value, expected) or (expected is int and isinstance(value, bool)):
            raise ConfigError(f"{CONFIG_FILE}: {key} must be {expected.__name__}, got {value!r}")
        settings[key] = value
    logger.debug("Engine settings: %s", settings)
    return settings


def parse_args(argv=None) -> RunConfig:
    args = vars(build_parser().parse_args(argv))
    return RunConfig(**{k: v for k, v in args.items() if k in RunConfig.__dataclass_fields__})


def _versions() -> dict:
    import numpy
    import pandas
    import scipy

    from services import __version__

    return {
        "rstar-lab": __version__,
        "python": platform.python_version(),
        "numpy": numpy.__version__,
        "scipy": scipy.__version__,
        "pandas": pandas.__version__,
    }


def _build_inference(config: RunConfig, family: str, interest_index: int):
    from services.estimator_service import EstimatorService
    from services.inference_service import InferenceService
    from services.model_service import model_from_family
    from services.profile_service import ProfileService

    engine = config.engine
    estimator = EstimatorService(
        model_from_family(family),
        interest_index=interest_index,
        tol_grad=engine["tol_grad"],
        max_iter=engine["max_iter"],
        bound=engine["bound"],
    )
    profiles = ProfileService(estimator, radius=engine["radius"])
    return InferenceService(profiles, epsilon0=engine["epsilon0"])


def _load_data(config: RunConfig):
    from services.data_service import DataManager

    manager = DataManager(response=config.engine["response"], intercept=config.engine["intercept"])
    data = manager.load_dataset(config.input_path)
    if config.interest is None:
        interest = 1 if config.engine["intercept"] and data.k > 1 else 0
    else:
        interest = data.column_index(config.interest)
    return manager, data, interest


def _sibling(path, suffix: str) -> Path:
    path = Path(path)
    return path.with_name(path.stem + suffix)


def run_fit(config: RunConfig):
    manager, data, interest = _load_data(config)
    inference = _build_inference(config, config.family, interest)
    fit = inference.estimator.fit_mle(data)
    if (config.format or "json") == "csv":
        header = ("parameter", "estimate")
        rows = [(name, float(value)) for name, value in zip(fit.names, fit.theta_hat.theta)]
        return [(config.output_path, lambda: manager.save_table(config.output_path, header, rows))], {}
    payload = fit.to_dict()
    payload["family"] = config.family
    payload["n"] = data.n
    return [(config.output_path, lambda: manager.save_report(config.output_path, payload))], {}


def run_test(config: RunConfig):
    manager, data, interest = _load_data(config)
    inference = _build_inference(config, config.family, interest)
    analysis = inference.analyse(data)
    psi0 = 0.0 if config.psi0 is None else config.psi0
    report = inference.test(data, psi0, analysis)
    payload = report.to_dict()
    payload["interest"] = data.columns[interest]
    if config.interval:
        payload["level"] = config.level
        payload["interval_r"] = list(inference.confidence_interval(data, "r", config.level, analysis))
        payload["interval_r_star"] = list(inference.confidence_interval(data, "r_star", config.level, analysis))

    if (config.format or "json") == "csv":
        rows = [(key, value) for key, value in payload.items() if isinstance(value, (int, float, str, bool))]
        return [(config.output_path, lambda: manager.save_table(config.output_path, ("statistic", "value"), rows))], {}
    return [(config.output_path, lambda: manager.save_report(config.output_path, payload))], {}


def run_profile(config: RunConfig):
    manager, data, interest = _load_data(config)
    inference = _build_inference(config, config.family, interest)
    fit = inference.estimator.fit_mle(data)
    curve = inference.profiles.profile_curve(data, fit)
    if (config.format or "csv") == "json":
        payload = curve.to_dict()
        payload["grid"] = [
            {"psi": float(p), "l_p": float(l), "logdet_nuisance": float(d)}
            for p, l, d in zip(curve.psi_grid, curve.loglik_grid, curve.logdet_grid)
        ]
        return [(config.output_path, lambda: manager.save_report(config.output_path, payload))], {}
    rows = list(zip(curve.psi_grid.tolist(), curve.loglik_grid.tolist(), curve.logdet_grid.tolist()))
    header = ("psi", "l_p", "logdet_nuisance")
    return [(config.output_path, lambda: manager.save_table(config.output_path, header, rows))], curve.to_dict()


def _sim_config(config: RunConfig):
    from services.simulation_service import SimConfig
    from utils.common import load_key_value_file

    values = load_key_value_file(config.config_path) if config.config_path else {}
    overrides = {"family": config.family, "reps": config.reps, "bootstrap_reps": config.boot,
                 "seed": config.seed, "workers": config.workers}
    for key, value in overrides.items():
        if value is not None:
            values[key] = value
    if "workers" not in values and config.engine["workers"]:
        values["workers"] = config.engine["workers"]
    engine = {key: config.engine[key] for key in STUDY_ENGINE_KEYS}
    return SimConfig.from_mapping(values, engine=engine)


def run_simulate(config: RunConfig):
    from services.data_service import DataManager
    from services.simulation_service import SimResult, run_study

    sim = _sim_config(config)
    config.seed = sim.seed
    result = run_study(sim)
    manager = DataManager()
    plot_path = _sibling(config.output_path, ".plot.csv")
    outputs = [
        (config.output_path, lambda: manager.save_table(config.output_path, SimResult.TABLE_HEADER, result.table_rows())),
        (plot_path, lambda: manager.save_table(plot_path, SimResult.PLOT_HEADER, result.plot_rows())),
    ]
    return outputs, {"study": sim.to_dict(), "summary": result.summary()}


def run_verify(config: RunConfig):
    from services.data_service import DataManager
    from services.simulation_service import VerificationResult, VerificationRow, run_verification

    sim = _sim_config(config)
    config.seed = sim.seed
    result = run_verification(sim)
    manager = DataManager()
    summary_path = _sibling(config.output_path, ".summary.csv")
    outputs = [
        (config.output_path, lambda: manager.save_table(
            config.output_path, VerificationRow.HEADER, [row.values() for row in result.rows])),
        (summary_path, lambda: manager.save_table(
            summary_path, VerificationResult.SUMMARY_HEADER, result.summary_rows())),
    ]
    return outputs, {"study": sim.to_dict(), "theorem3": result.theorem3.to_dict()}


HANDLERS = {
    "fit": run_fit,
    "test": run_test,
    "profile": run_profile,
    "simulate": run_simulate,
    "verify": run_verify,
}


def run(config: RunConfig) -> int:
    """Execute one subcommand; artifacts are only written once every computation succeeded."""
    from services.errors import ConfigError, RStarError
    from utils.common import config_hash, save_json_file

    try:
        if config.subcommand not in HANDLERS:
            raise ConfigError(f"unknown subcommand {config.subcommand!r}")
        if config.subcommand in ("fit", "test", "profile") and not config.input_path:
            raise ConfigError(f"{config.subcommand} requires --input")
        if not 0 < config.level < 1:
            raise ConfigError(f"--level must lie in (0, 1), got {config.level}")

        outputs, results = HANDLERS[config.subcommand](config)
        for path, write in outputs:
            write()

        canonical = config.canonical()
        manifest = {
            "subcommand": config.subcommand,
            "config": canonical,
            "config_hash": config_hash(dict(canonical, study=results.get("study"))),
            "seed": config.seed,
            "versions": _versions(),
            "outputs": [str(path) for path, _ in outputs],
            "results": results,
        }
        save_json_file(_sibling(config.output_path, ".manifest.json"), manifest)
        print(json.dumps(manifest, sort_keys=True, default=str))
        return 0
    except RStarError as e:
        logger.error("%s: %s", type(e).__name__, e)
        return e.exit_code


def main(argv=None) -> int:
    app_path, cwd = setup_paths()

    from services.errors import RStarError
    from utils.common import setup_logging

    config = parse_args(argv)
    setup_logging(config.verbosity)
    try:
        config.engine = load_engine_settings(cwd)
    except RStarError as e:
        logger.error("%s", e)
        return e.exit_code
    return run(config)


if __name__ == "__main__":
    sys.exit(main())

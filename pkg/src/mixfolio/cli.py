"""Batch command line: simulate, estimate, and backtest.

Exit codes: 0 success, 1 runtime failure, 2 usage or validation error.
All randomness flows from a single root seed, so re-running a command
with the same config and seed reproduces the primary outputs byte for
byte.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np
import pandas as pd

from .backtest import BacktestConfig, load_market_dataset, run_backtest
from .equilibrium import EquilibriumObservation, MarketParams, noise_sigma_from_ci
from .estimator import (
    EstimationProblem,
    make_linear_case,
    result_to_dict,
    solve_backward,
    solve_combined,
    solve_combined_linear,
    solve_forward,
)
from .gmm import MixtureWeights, PriorSpec, mixture_from_dict
from .io import (
    ConfigError,
    atomic_write_text,
    json_dumps,
    load_config,
    require,
    resolve_input,
    write_manifest,
)
from .simulation import ScenarioSpec, default_scenario, run_experiment_grid

MODES = ("backward", "forward", "combined")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mixfolio",
        description="Weight estimation experiments, one-off estimations, "
        "and mean-variance backtests.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    common = {
        "--config": dict(required=True, help="JSON run configuration"),
        "--out": dict(required=True, help="output directory"),
        "--seed": dict(type=int, default=None, help="root seed (overrides config)"),
    }

    p_sim = sub.add_parser("simulate", help="run a Monte Carlo experiment grid")
    for flag, kw in common.items():
        p_sim.add_argument(flag, **kw)
    p_sim.add_argument(
        "--replications", type=int, default=None, help="override replication count"
    )
    p_sim.add_argument(
        "--strict",
        action="store_true",
        help="fail (exit 1) when any estimator date did not converge",
    )
    p_sim.add_argument("--jobs", type=int, default=1, help="parallel replications")

    p_est = sub.add_parser("estimate", help="solve estimation problems from files")
    for flag, kw in common.items():
        p_est.add_argument(flag, **kw)
    p_est.add_argument(
        "--mode",
        choices=MODES + ("all",),
        default=None,
        help="which estimations to run (overrides config)",
    )

    p_back = sub.add_parser("backtest", help="backtest the three strategies on CSVs")
    for flag, kw in common.items():
        p_back.add_argument(flag, **kw)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handlers = {
        "simulate": cmd_simulate,
        "estimate": cmd_estimate,
        "backtest": cmd_backtest,
    }
    try:
        return handlers[args.command](args)
    except ConfigError as exc:
        print(f"mixfolio: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"mixfolio: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


# -- simulate ----------------------------------------------------------------


def _scenario_from_config(doc: dict) -> ScenarioSpec:
    if "scenario" not in doc:
        return default_scenario()
    sc = doc["scenario"]
    require(isinstance(sc, dict), "scenario must be an object")
    base = default_scenario()
    segments = sc.get("segments")
    if segments is not None:
        require(
            isinstance(segments, list) and segments,
            "scenario.segments must be a nonempty list of [days, weights]",
        )
        parsed = []
        for item in segments:
            require(
                isinstance(item, list) and len(item) == 2,
                "each segment must be [days, weights]",
            )
            days, lam = item
            parsed.append((int(days), MixtureWeights(np.asarray(lam, dtype=float))))
        segments = tuple(parsed)
    else:
        segments = base.segments
    return ScenarioSpec(
        segments=segments,
        n_assets=int(sc.get("n_assets", base.n_assets)),
        start_day=int(sc.get("start_day", base.start_day)),
        rebalance_every_days=int(
            sc.get("rebalance_every_days", base.rebalance_every_days)
        ),
        em_window_days=int(sc.get("em_window_days", base.em_window_days)),
        r_f_annual=float(sc.get("r_f_annual", base.r_f_annual)),
    )


def cmd_simulate(args) -> int:
    doc, raw = load_config(args.config)
    which = doc.get("experiment")
    require(which in (1, 2, 3), "experiment must be 1, 2, or 3")
    seed = args.seed if args.seed is not None else int(doc.get("seed", 0))
    replications = (
        args.replications
        if args.replications is not None
        else int(doc.get("replications", 20))
    )
    require(replications >= 1, "replications must be >= 1")
    grid = doc.get("grid")
    if grid is not None:
        require(isinstance(grid, list), "grid must be a list")
        require(len(grid) > 0, "the grid is empty")
        if which == 1:
            for row in grid:
                require(
                    isinstance(row, list) and len(row) == 3,
                    "experiment 1 grid entries must be [alpha_I, alpha_U, alpha_N]",
                )
    scenario = _scenario_from_config(doc)

    started = time.perf_counter()
    result = run_experiment_grid(
        which,
        grid_values=grid,
        replications=replications,
        seed=seed,
        scenario=scenario,
        n_jobs=getattr(args, "jobs", 1),
    )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_text = result.table.to_csv(index=False, float_format="%.10g")
    atomic_write_text(out_dir / "experiment.csv", csv_text)
    trajectories = {
        _grid_label(value): report.to_dict()
        for value, report in result.reports.items()
    }
    atomic_write_text(out_dir / "trajectories.json", json_dumps(trajectories))
    write_manifest(
        out_dir,
        config_bytes=raw,
        seed=seed,
        outputs=["experiment.csv", "trajectories.json"],
        wall_clock_seconds=time.perf_counter() - started,
    )
    if args.strict and result.n_nonconverged > 0:
        print(
            f"mixfolio: {result.n_nonconverged} estimator dates did not converge",
            file=sys.stderr,
        )
        return 1
    return 0


def _grid_label(value: float) -> str:
    return f"{value:.10g}"


# -- estimate ----------------------------------------------------------------


def _load_json_file(path: Path, name: str) -> dict:
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{name} file is not valid JSON: {exc}") from exc
    require(isinstance(doc, dict), f"{name} file must hold a JSON object")
    return doc


def cmd_estimate(args) -> int:
    doc, raw = load_config(args.config)
    base_dir = Path(args.config).resolve().parent
    model_path = resolve_input(base_dir, doc.get("model"), "model")
    prior_path = resolve_input(base_dir, doc.get("prior"), "prior")
    obs_path = resolve_input(base_dir, doc.get("observation"), "observation")

    mode = args.mode or doc.get("mode", "all")
    require(mode in MODES + ("all",), f"mode must be one of {MODES + ('all',)}")
    modes = MODES if mode == "all" else (mode,)

    model, _ = mixture_from_dict(_load_json_file(model_path, "model"))
    prior_doc = _load_json_file(prior_path, "prior")
    require(
        "lambda_hat_minus" in prior_doc and "phi" in prior_doc,
        "prior file needs lambda_hat_minus and phi",
    )
    prior = PriorSpec(
        np.asarray(prior_doc["lambda_hat_minus"], dtype=float),
        np.asarray(prior_doc["phi"], dtype=float),
    )
    obs_doc = _load_json_file(obs_path, "observation")
    for key in ("x_M", "x_U_star", "params"):
        require(key in obs_doc, f"observation file needs {key}")
    pdoc = obs_doc["params"]
    for key in ("alpha_I", "alpha_U", "alpha_N", "sigma_noise", "delta_I", "delta_U"):
        require(key in pdoc, f"observation params need {key}")
    params = MarketParams(
        alpha_I=float(pdoc["alpha_I"]),
        alpha_U=float(pdoc["alpha_U"]),
        alpha_N=float(pdoc["alpha_N"]),
        sigma_noise=np.asarray(pdoc["sigma_noise"], dtype=float),
        delta_I=float(pdoc["delta_I"]),
        delta_U=float(pdoc["delta_U"]),
    )
    observation = EquilibriumObservation(
        x_M=np.asarray(obs_doc["x_M"], dtype=float),
        x_U_star=np.asarray(obs_doc["x_U_star"], dtype=float),
        params=params,
    )
    special_case = bool(doc.get("special_case", False))
    fixed_sigma = None
    if special_case:
        require(
            "fixed_sigma" in doc,
            "special_case runs need fixed_sigma (the shared return covariance)",
        )
        fixed_sigma = np.asarray(doc["fixed_sigma"], dtype=float)

    started = time.perf_counter()
    solvers = {
        "backward": solve_backward,
        "forward": solve_forward,
        "combined": solve_combined,
    }
    results = []
    for m in modes:
        problem = EstimationProblem(
            model, prior, observation, m, fixed_sigma=fixed_sigma
        )
        results.append(result_to_dict(solvers[m](problem)))
    payload: dict = {"results": results}
    if special_case:
        linear_case = make_linear_case(
            model, params, observation.x_U_star, fixed_sigma
        )
        closed = solve_combined_linear(
            linear_case, prior, observation.x_M, params.omega()
        )
        numeric = solve_combined(
            EstimationProblem(
                model, prior, observation, "combined", fixed_sigma=fixed_sigma
            )
        )
        diff = float(
            np.abs(
                closed.weights.lambda_full - numeric.weights.lambda_full
            ).max()
        )
        payload["special_case"] = {
            "closed_form": result_to_dict(closed),
            "numeric": result_to_dict(numeric),
            "max_difference": diff,
        }

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out_dir / "estimates.json", json_dumps(payload))
    write_manifest(
        out_dir,
        config_bytes=raw,
        seed=None,
        outputs=["estimates.json"],
        wall_clock_seconds=time.perf_counter() - started,
    )
    return 0


# -- backtest ----------------------------------------------------------------


def cmd_backtest(args) -> int:
    doc, raw = load_config(args.config)
    base_dir = Path(args.config).resolve().parent
    paths = {
        name: resolve_input(base_dir, doc.get(name), name)
        for name in ("returns", "market_caps", "vol_index", "risk_free")
    }
    windows = doc.get("rebalance_weeks", [4, 13, 26])
    require(
        isinstance(windows, list) and windows,
        "rebalance_weeks must be a nonempty list",
    )
    market = doc.get("market")
    require(isinstance(market, dict), "config needs a market object")
    for key in ("alpha_I", "alpha_U", "alpha_N"):
        require(key in market, f"market needs {key}")
    require(
        ("noise_sigma" in market) != ("noise_ci_half_width" in market),
        "market needs exactly one of noise_sigma (a std) or noise_ci_half_width",
    )

    dataset = load_market_dataset(
        paths["returns"], paths["market_caps"], paths["vol_index"], paths["risk_free"]
    )
    if "noise_sigma" in market:
        sigma = market["noise_sigma"]
    else:
        sigma = noise_sigma_from_ci(
            float(market["noise_ci_half_width"]),
            float(market.get("noise_ci_confidence", 0.95)),
        )
    sigma_noise = (
        np.full(dataset.n_assets, float(sigma))
        if np.isscalar(sigma)
        else np.asarray(sigma, dtype=float)
    )
    params = MarketParams(
        alpha_I=float(market["alpha_I"]),
        alpha_U=float(market["alpha_U"]),
        alpha_N=float(market["alpha_N"]),
        sigma_noise=sigma_noise,
        delta_I=float(market.get("delta_I", 2.5)),
        delta_U=float(market.get("delta_U", 2.5)),
    )

    started = time.perf_counter()
    frames = []
    wealth: dict[str, dict[str, list[float]]] = {}
    for window in windows:
        config = BacktestConfig(
            market_params=params,
            window_weeks=int(doc.get("window_weeks", 100)),
            rebalance_weeks=int(window),
            delta0=float(doc.get("delta0", 2.5)),
            risk_multiplier=float(doc.get("risk_multiplier", 1.0)),
            cost_ratio=float(doc.get("cost_ratio", 0.005)),
            calibration_weeks=(
                int(doc["calibration_weeks"])
                if doc.get("calibration_weeks") is not None
                else None
            ),
        )
        report = run_backtest(dataset, config)
        frames.append(report.to_frame())
        for name, path_values in report.wealth_paths.items():
            wealth.setdefault(name, {})[str(window)] = [
                float(v) for v in path_values
            ]
    table = pd.concat(frames, ignore_index=True)
    averages = (
        table.groupby("strategy", sort=False)[["SR", "TRN", "MDD"]]
        .mean()
        .reset_index()
    )
    averages.insert(1, "rebalance_weeks", "average")
    table = pd.concat([table, averages], ignore_index=True)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    atomic_write_text(
        out_dir / "performance.csv",
        table.to_csv(index=False, float_format="%.10g"),
    )
    atomic_write_text(out_dir / "wealth.json", json_dumps(wealth))
    write_manifest(
        out_dir,
        config_bytes=raw,
        seed=args.seed,
        outputs=["performance.csv", "wealth.json"],
        wall_clock_seconds=time.perf_counter() - started,
    )
    return 0


if __name__ == "__main__":
    sys.exit(main())

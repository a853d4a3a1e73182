"""Monte Carlo market experiments comparing the three weight estimators.

A scenario strings together regime segments with known state weights,
simulates daily returns from the mixture, and at every rebalance date
clears a three-investor market whose informed trader knows the current
weights while the less-informed trader refits them by EM on a trailing
window.  The observed market portfolio then feeds the backward, forward,
and combined estimators, and estimation error is summarized as RMSE over
the investment period and at regime turning points.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .equilibrium import (
    MarketParams,
    WealthState,
    clear_market,
    mv_unconstrained,
    noise_sigma_from_ci,
    sample_noise,
    update_wealth,
)
from .estimator import (
    EstimationProblem,
    solve_backward,
    solve_combined,
    solve_forward,
)
from .gmm import (
    EMFit,
    GaussianComponent,
    MixtureModel,
    MixtureWeights,
    em_fit_weights,
    mixture_moments,
    sample_returns,
)

TRADING_DAYS_PER_YEAR = 250

#: Idiosyncratic variance entries below this are raised to it.
IDIO_FLOOR = 1e-8

#: How many rebalance dates after each segment boundary count as turning points.
TURNING_DATES_PER_BOUNDARY = 2

ESTIMATORS = ("backward", "combined", "forward")


@dataclass(frozen=True)
class FactorSpec:
    """Single-factor description of one market state.

    Asset excess returns in the state are alpha + beta * r_market + eps with
    alpha drawn as alpha_scale * N(0,1), beta as beta_base - beta_scale *
    N(0,1), and idiosyncratic variances as idio_scale * U(0,1).
    """

    market_mean: float
    market_var: float
    alpha_scale: float = 1e-5
    beta_base: float = 1.2
    beta_scale: float = 0.6
    idio_scale: float = 0.002

    def __post_init__(self):
        if self.market_var <= 0.0:
            raise ValueError("market_var must be strictly positive")
        if self.idio_scale < 0.0:
            raise ValueError("idio_scale must be nonnegative")


#: Bull, oscillating, and bear states used throughout the experiments.
DEFAULT_STATE_SPECS = (
    FactorSpec(market_mean=0.004, market_var=0.001),
    FactorSpec(market_mean=0.0, market_var=0.0002),
    FactorSpec(market_mean=-0.008, market_var=0.002),
)


@dataclass(frozen=True)
class ScenarioSpec:
    """Regime schedule and trading conventions for one experiment.

    ``segments`` lists (length_in_days, true_weights) pairs; days are
    1-based in reports, so ``start_day`` = 111 means the first rebalance
    happens on the 111th simulated day.
    """

    segments: tuple[tuple[int, MixtureWeights], ...]
    n_assets: int = 10
    start_day: int = 111
    rebalance_every_days: int = 5
    em_window_days: int = 30
    r_f_annual: float = 0.035

    def __post_init__(self):
        segments = tuple((int(length), w) for length, w in self.segments)
        if not segments:
            raise ValueError("scenario needs at least one segment")
        if any(length < 1 for length, _ in segments):
            raise ValueError("segment lengths must be >= 1")
        m = segments[0][1].m
        if any(w.m != m for _, w in segments):
            raise ValueError("all segments must share the number of states")
        if self.start_day <= self.em_window_days:
            raise ValueError("start_day must exceed em_window_days")
        if self.rebalance_every_days < 1:
            raise ValueError("rebalance_every_days must be >= 1")
        object.__setattr__(self, "segments", segments)

    @property
    def total_days(self) -> int:
        return sum(length for length, _ in self.segments)

    @property
    def m(self) -> int:
        return self.segments[0][1].m

    @property
    def r_f_daily(self) -> float:
        return self.r_f_annual / TRADING_DAYS_PER_YEAR

    def boundaries(self) -> np.ndarray:
        """0-based day indices on which a new segment begins."""
        lengths = np.array([length for length, _ in self.segments])
        return np.cumsum(lengths)[:-1]

    def rebalance_days(self) -> np.ndarray:
        """0-based day indices of the rebalance dates."""
        first = self.start_day - 1
        return np.arange(first, self.total_days, self.rebalance_every_days)

    def lambda_true_by_day(self) -> np.ndarray:
        """(total_days, m) array of the segment weights in force each day."""
        rows = []
        for length, w in self.segments:
            rows.append(np.tile(w.lambda_full, (length, 1)))
        return np.vstack(rows)


def default_scenario() -> ScenarioSpec:
    """Four-segment regime schedule used by the stock experiments."""
    seg = lambda days, lam: (days, MixtureWeights(np.array(lam)))
    return ScenarioSpec(
        segments=(
            seg(200, [0.0, 0.5, 0.5]),
            seg(80, [0.7, 0.3, 0.0]),
            seg(50, [0.0, 0.5, 0.5]),
            seg(70, [0.2, 0.8, 0.0]),
        )
    )


def build_components(specs, n: int, rng) -> MixtureModel:
    """Draw one Gaussian state per factor spec.

    State moments are mu = alpha + E(r_mkt) * beta and
    sigma = Var(r_mkt) * beta beta' + diag(idio), with the idiosyncratic
    diagonal floored at ``IDIO_FLOOR`` (a warning reports when the floor
    was binding).
    """
    if n < 2:
        raise ValueError("need at least two assets")
    rng = np.random.default_rng(rng)
    components = []
    floored = 0
    for spec in specs:
        alpha = spec.alpha_scale * rng.standard_normal(n)
        beta = spec.beta_base - spec.beta_scale * rng.standard_normal(n)
        idio = spec.idio_scale * rng.uniform(size=n)
        floored += int(np.count_nonzero(idio < IDIO_FLOOR))
        idio = np.maximum(idio, IDIO_FLOOR)
        mu = alpha + spec.market_mean * beta
        sigma = spec.market_var * np.outer(beta, beta) + np.diag(idio)
        components.append(GaussianComponent(mu, sigma))
    if floored:
        warnings.warn(
            f"floored {floored} idiosyncratic variance entries at {IDIO_FLOOR:g}",
            RuntimeWarning,
            stacklevel=2,
        )
    return MixtureModel(tuple(components))


def rmse(true_traj, est_traj, dates) -> float:
    """Mean over states of the per-state RMSE across the selected dates.

    ``dates`` indexes rows of the (D, m) trajectories; it must be nonempty.
    """
    true_traj = np.atleast_2d(np.asarray(true_traj, dtype=float))
    est_traj = np.atleast_2d(np.asarray(est_traj, dtype=float))
    if true_traj.shape != est_traj.shape:
        raise ValueError("trajectories must share one shape")
    dates = np.asarray(dates)
    if dates.size == 0:
        raise ValueError("the date selection is empty")
    err = est_traj[dates] - true_traj[dates]
    return float(np.mean(np.sqrt(np.mean(err**2, axis=0))))


@dataclass(frozen=True)
class ScenarioPath:
    """Deterministic part of a scenario run: returns, truth, and EM fits.

    Reusable across market configurations so that comparisons across
    market parameters see the identical return history.
    """

    returns: np.ndarray
    lambda_true_by_day: np.ndarray
    rebalance_days: np.ndarray
    em_fits: tuple[EMFit, ...]


@dataclass(frozen=True)
class ExperimentReport:
    """Estimator trajectories and error summaries for one scenario run."""

    days: np.ndarray  # 1-based day numbers of the rebalance dates
    turning_days: np.ndarray
    lambda_true: np.ndarray  # (D, m)
    estimates: dict[str, np.ndarray]  # estimator -> (D, m)
    eta_turning: dict[str, float]
    eta_full: dict[str, float]
    shares: np.ndarray  # (D, 3) market shares in force at each date
    seed: int | None
    nonconverged: dict[str, np.ndarray]  # estimator -> (D,) bool per date
    n_wealth_clamps: int

    @property
    def n_nonconverged(self) -> int:
        return int(sum(flags.sum() for flags in self.nonconverged.values()))

    def to_dict(self) -> dict:
        """JSON-ready trajectory dump for plotting."""
        return {
            "days": self.days.tolist(),
            "turning_days": self.turning_days.tolist(),
            "lambda_true": self.lambda_true.tolist(),
            "estimates": {k: v.tolist() for k, v in self.estimates.items()},
            "eta_turning": self.eta_turning,
            "eta_full": self.eta_full,
            "seed": self.seed,
            "nonconverged": {k: v.tolist() for k, v in self.nonconverged.items()},
            "n_wealth_clamps": self.n_wealth_clamps,
        }


def _spawn_children(seed) -> tuple[np.random.SeedSequence, np.random.SeedSequence]:
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    returns_ss, market_ss = ss.spawn(2)
    return returns_ss, market_ss


def simulate_path(model: MixtureModel, scenario: ScenarioSpec, seed) -> ScenarioPath:
    """Simulate the return history and fit the rolling EM priors.

    Everything here is independent of the market parameters, so one path
    can back several market configurations.
    """
    if model.m != scenario.m or model.n != scenario.n_assets:
        raise ValueError("model and scenario disagree on dimensions")
    returns_ss, _ = _spawn_children(seed)
    rng = np.random.default_rng(returns_ss)
    blocks = [
        sample_returns(model, w, length, rng) for length, w in scenario.segments
    ]
    returns = np.vstack(blocks)

    days = scenario.rebalance_days()
    fits = tuple(
        em_fit_weights(model, returns[d - scenario.em_window_days : d])
        for d in days
    )
    return ScenarioPath(
        returns=returns,
        lambda_true_by_day=scenario.lambda_true_by_day(),
        rebalance_days=days,
        em_fits=fits,
    )


def turning_point_mask(scenario: ScenarioSpec) -> np.ndarray:
    """Boolean mask over rebalance dates marking regime turning points.

    The first ``TURNING_DATES_PER_BOUNDARY`` rebalance dates at or after
    each segment boundary qualify.
    """
    days = scenario.rebalance_days()
    mask = np.zeros(days.size, dtype=bool)
    for boundary in scenario.boundaries():
        after = np.nonzero(days >= boundary)[0]
        mask[after[:TURNING_DATES_PER_BOUNDARY]] = True
    return mask


def run_scenario(
    model: MixtureModel,
    scenario: ScenarioSpec,
    market0: MarketParams,
    seed,
    path: ScenarioPath | None = None,
    evolve_shares: bool = True,
) -> ExperimentReport:
    """Run one scenario: market clearing plus all three estimators per date.

    At each rebalance date the informed investor trades on the segment's
    true weights, the less-informed investor on its rolling EM estimate,
    and the noise trader on a fresh random position; market shares then
    evolve with realized wealth until the next date.  ``path`` may carry a
    precomputed return history (from :func:`simulate_path` with the same
    seed) to share across market configurations.

    ``evolve_shares=False`` freezes the shares at their initial values, the
    reading under which extreme leverage or noise cannot erase an investor
    class from the market.
    """
    _, market_ss = _spawn_children(seed)
    if path is None:
        path = simulate_path(model, scenario, seed)
    market_rng = np.random.default_rng(market_ss)

    days = path.rebalance_days
    lam_true_day = path.lambda_true_by_day
    returns = path.returns
    r_f = scenario.r_f_daily

    state = WealthState(
        w_I=market0.alpha_I, w_U=market0.alpha_U, w_N=market0.alpha_N
    )
    params = market0
    estimates = {name: np.empty((days.size, model.m)) for name in ESTIMATORS}
    nonconverged = {name: np.zeros(days.size, dtype=bool) for name in ESTIMATORS}
    shares = np.empty((days.size, 3))
    lam_true = np.empty((days.size, model.m))
    n_clamps = 0

    solvers = {
        "backward": solve_backward,
        "forward": solve_forward,
        "combined": solve_combined,
    }
    for j, day in enumerate(days):
        fit = path.em_fits[j]
        mu_u, sigma_u = mixture_moments(model, fit.weights)
        x_U = mv_unconstrained(mu_u, sigma_u, params.delta_U)
        w_true = MixtureWeights(lam_true_day[day])
        mu_i, sigma_i = mixture_moments(model, w_true)
        x_I = mv_unconstrained(mu_i, sigma_i, params.delta_I)
        x_N = sample_noise(params, market_rng)
        observation = clear_market(x_U, x_I, x_N, params)

        for name, solver in solvers.items():
            problem = EstimationProblem(model, fit.prior, observation, name)
            result = solver(problem)
            estimates[name][j] = result.weights.lambda_full
            nonconverged[name][j] = not result.converged

        lam_true[j] = w_true.lambda_full
        shares[j] = (params.alpha_I, params.alpha_U, params.alpha_N)

        if evolve_shares:
            hold_until = min(day + scenario.rebalance_every_days, returns.shape[0])
            for t in range(day, hold_until):
                state, clamped = update_wealth(
                    state, x_I, x_U, x_N, returns[t], r_f
                )
                n_clamps += int(clamped)
            params = params.with_shares(*state.shares)

    mask = turning_point_mask(scenario)
    full = np.arange(days.size)
    turning = np.nonzero(mask)[0]
    if turning.size:
        eta_turning = {
            name: rmse(lam_true, estimates[name], turning) for name in ESTIMATORS
        }
    else:  # a single-regime scenario has no turning points
        eta_turning = {name: float("nan") for name in ESTIMATORS}
    eta_full = {name: rmse(lam_true, estimates[name], full) for name in ESTIMATORS}
    return ExperimentReport(
        days=days + 1,
        turning_days=days[mask] + 1,
        lambda_true=lam_true,
        estimates=estimates,
        eta_turning=eta_turning,
        eta_full=eta_full,
        shares=shares,
        seed=seed if isinstance(seed, int) else None,
        nonconverged=nonconverged,
        n_wealth_clamps=n_clamps,
    )


#: Default grid of (alpha_I, alpha_U, alpha_N) for the market-share experiment.
DEFAULT_SHARE_GRID = (
    (0.001, 0.009, 0.990),
    (0.100, 0.800, 0.100),
    (0.200, 0.700, 0.100),
    (0.300, 0.600, 0.100),
    (0.400, 0.500, 0.100),
    (0.500, 0.400, 0.100),
    (0.600, 0.300, 0.100),
    (0.700, 0.200, 0.100),
    (0.800, 0.100, 0.100),
    (0.990, 0.009, 0.001),
)

#: Default noise-intensity grid: stds whose 95% band is [-10^k, 10^k].
DEFAULT_NOISE_GRID = tuple(
    noise_sigma_from_ci(10.0**k, 0.95) for k in (2, 1, 0, -1, -2)
)

#: Default informed-investor risk-aversion grid.
DEFAULT_RISK_AVERSION_GRID = (2.250e3, 7.500e1, 2.500e0, 8.333e-2, 2.777e-3)

_BASE_SHARES = (0.400, 0.500, 0.100)
_BASE_DELTA = 2.500


def _default_grid(which: int):
    return {
        1: DEFAULT_SHARE_GRID,
        2: DEFAULT_NOISE_GRID,
        3: DEFAULT_RISK_AVERSION_GRID,
    }[which]


def _market_for(which: int, value, n: int) -> tuple[MarketParams, float]:
    """Market parameters for one grid cell; returns (params, scalar label)."""
    base_sigma = noise_sigma_from_ci(1.0, 0.95)
    if which == 1:
        a_i, a_u, a_n = (float(v) for v in value)
        params = MarketParams(
            a_i, a_u, a_n, np.full(n, base_sigma), _BASE_DELTA, _BASE_DELTA
        )
        return params, a_i
    if which == 2:
        sigma = float(value)
        params = MarketParams(
            *_BASE_SHARES, np.full(n, sigma), _BASE_DELTA, _BASE_DELTA
        )
        return params, sigma
    if which == 3:
        delta_i = float(value)
        params = MarketParams(
            *_BASE_SHARES, np.full(n, base_sigma), delta_i, _BASE_DELTA
        )
        return params, delta_i
    raise ValueError("which must be 1, 2, or 3")


@dataclass(frozen=True)
class GridResult:
    """Replication-averaged error table plus per-cell sample trajectories."""

    which: int
    table: pd.DataFrame
    reports: dict[float, ExperimentReport] = field(repr=False)
    seed: int | None = None
    n_nonconverged: int = 0


def _replicate_once(which, grid_values, scenario, state_specs, rep_ss, evolve_shares):
    """One replication: fresh states and return path, swept over the grid."""
    comp_ss, path_ss = rep_ss.spawn(2)
    model = build_components(
        state_specs, scenario.n_assets, np.random.default_rng(comp_ss)
    )
    path = simulate_path(model, scenario, path_ss)
    reports = []
    for value in grid_values:
        market0, _ = _market_for(which, value, scenario.n_assets)
        reports.append(
            run_scenario(
                model, scenario, market0, path_ss, path=path,
                evolve_shares=evolve_shares,
            )
        )
    return reports


def run_experiment_grid(
    which: int,
    grid_values=None,
    replications: int = 20,
    seed: int = 0,
    scenario: ScenarioSpec | None = None,
    state_specs=DEFAULT_STATE_SPECS,
    n_jobs: int = 1,
    evolve_shares: bool = True,
) -> GridResult:
    """Sweep one market characteristic and average errors over replications.

    ``which`` selects the swept parameter: 1 market shares (grid entries
    are (alpha_I, alpha_U, alpha_N) triples), 2 noise intensity (stds),
    3 informed risk aversion.  Every replication draws fresh states and a
    fresh return path, shared across the grid so that only the market
    configuration differs within a replication.  Replications run in
    parallel when ``n_jobs`` allows; seeds are pre-split per replication,
    so the output does not depend on scheduling.
    """
    if which not in (1, 2, 3):
        raise ValueError("which must be 1, 2, or 3")
    if grid_values is None:
        grid_values = _default_grid(which)
    grid_values = list(grid_values)
    if not grid_values:
        raise ValueError("the grid is empty")
    if replications < 1:
        raise ValueError("replications must be >= 1")
    scenario = scenario or default_scenario()

    root = np.random.SeedSequence(seed)
    rep_seeds = root.spawn(replications)

    if n_jobs == 1 or replications == 1:
        per_rep = [
            _replicate_once(
                which, grid_values, scenario, state_specs, rep_ss, evolve_shares
            )
            for rep_ss in rep_seeds
        ]
    else:
        from joblib import Parallel, delayed

        per_rep = Parallel(n_jobs=n_jobs)(
            delayed(_replicate_once)(
                which, grid_values, scenario, state_specs, rep_ss, evolve_shares
            )
            for rep_ss in rep_seeds
        )

    cells = {i: [] for i in range(len(grid_values))}
    sample_reports: dict[float, ExperimentReport] = {}
    for rep, reports in enumerate(per_rep):
        for i, (value, report) in enumerate(zip(grid_values, reports)):
            cells[i].append(report)
            if rep == 0:
                _, label = _market_for(which, value, scenario.n_assets)
                sample_reports[label] = report

    rows = []
    for i, value in enumerate(grid_values):
        _, label = _market_for(which, value, scenario.n_assets)
        reports = cells[i]
        row = {"grid_value": label}
        for name, short in (("backward", "B"), ("combined", "C"), ("forward", "F")):
            tp = np.array([r.eta_turning[name] for r in reports])
            fu = np.array([r.eta_full[name] for r in reports])
            row[f"eta_{short}_tp"] = tp.mean()
            row[f"eta_{short}_full"] = fu.mean()
            row[f"se_{short}_tp"] = tp.std(ddof=1) / np.sqrt(len(tp)) if len(tp) > 1 else 0.0
            row[f"se_{short}_full"] = fu.std(ddof=1) / np.sqrt(len(fu)) if len(fu) > 1 else 0.0
        rows.append(row)
    columns = [
        "grid_value",
        "eta_B_tp", "eta_C_tp", "eta_F_tp",
        "eta_B_full", "eta_C_full", "eta_F_full",
        "se_B_tp", "se_C_tp", "se_F_tp",
        "se_B_full", "se_C_full", "se_F_full",
    ]
    table = pd.DataFrame(rows, columns=columns)
    total_nonconverged = sum(
        report.n_nonconverged for reports in per_rep for report in reports
    )
    return GridResult(
        which=which,
        table=table,
        reports=sample_reports,
        seed=seed,
        n_nonconverged=total_nonconverged,
    )

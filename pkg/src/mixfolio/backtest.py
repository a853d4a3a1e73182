"""Out-of-sample mean-variance backtests on weekly sector data.

The pipeline mirrors the estimation workflow on real data: three market
states calibrated on pre-investment history plus one market-implied state
rebuilt every rebalance from the capitalization-weighted portfolio, a
rolling EM prior, the three weight estimators, and long-only mean-variance
portfolios rolled forward under proportional transaction costs.  Reported
metrics are the annualized Sharpe ratio, turnover, and maximum drawdown.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
import pandas as pd

from .equilibrium import EquilibriumObservation, MarketParams, mv_unconstrained
from .estimator import (
    EstimationProblem,
    estimate_moments,
    solve_backward,
    solve_combined,
    solve_forward,
)
from .gmm import GaussianComponent, MixtureModel, em_fit_weights, mixture_moments

logger = logging.getLogger(__name__)

WEEKS_PER_YEAR = 52

#: Trading days per rebalance window, used by the Sharpe annualization 250/dt.
TRADING_DAYS_PER_WINDOW = {4: 21, 13: 63, 26: 126}

STRATEGIES = ("backward", "combined", "forward")


@dataclass(frozen=True)
class MarketDataset:
    """Aligned weekly market history for one market.

    ``excess_returns`` are weekly decimals net of the risk-free rate;
    ``r_f`` holds the per-week risk-free rate so raw returns can be
    reconstructed.  ``market_caps`` are the sector capitalizations used
    for the observed market portfolio.
    """

    dates: tuple[str, ...]
    excess_returns: np.ndarray
    market_caps: np.ndarray
    vol_index: np.ndarray
    r_f: np.ndarray
    asset_names: tuple[str, ...]

    def __post_init__(self):
        er = np.asarray(self.excess_returns, dtype=float)
        caps = np.asarray(self.market_caps, dtype=float)
        vol = np.asarray(self.vol_index, dtype=float)
        r_f = np.asarray(self.r_f, dtype=float)
        T, n = er.shape
        if caps.shape != (T, n) or vol.shape != (T,) or r_f.shape != (T,):
            raise ValueError("dataset arrays disagree on shape")
        if len(self.dates) != T or len(self.asset_names) != n:
            raise ValueError("dates or asset names disagree with the arrays")
        for name, arr in (("returns", er), ("caps", caps), ("vol", vol), ("r_f", r_f)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contain non-finite values after ingestion")
        if list(self.dates) != sorted(set(self.dates)):
            raise ValueError("dates must be strictly increasing")
        if vol.min() <= 0.0:
            raise ValueError("volatility index must be strictly positive")
        if caps.min() <= 0.0:
            raise ValueError("market capitalizations must be strictly positive")
        object.__setattr__(self, "dates", tuple(self.dates))
        object.__setattr__(self, "asset_names", tuple(self.asset_names))
        object.__setattr__(self, "excess_returns", er)
        object.__setattr__(self, "market_caps", caps)
        object.__setattr__(self, "vol_index", vol)
        object.__setattr__(self, "r_f", r_f)

    @property
    def n_weeks(self) -> int:
        return self.excess_returns.shape[0]

    @property
    def n_assets(self) -> int:
        return self.excess_returns.shape[1]

    def raw_returns(self) -> np.ndarray:
        """Weekly raw (non-excess) returns."""
        return self.excess_returns + self.r_f[:, None]

    def market_weights(self, t: int) -> np.ndarray:
        caps = self.market_caps[t]
        return caps / caps.sum()


def load_market_dataset(
    returns_csv, caps_csv, vol_csv, rf_csv
) -> MarketDataset:
    """Read the four CSV inputs and align them on common dates.

    Expected layouts, all comma-delimited with a header row and ISO-8601
    dates: returns and market caps as (date, one column per asset),
    volatility index as (date, value), risk-free as (date, annualized
    decimal).  Returns are raw weekly decimals; the weekly risk-free rate
    (annual / 52) is subtracted to form excess returns.  Rows with any
    missing value are dropped and counted in the log.
    """
    returns = pd.read_csv(returns_csv, index_col=0)
    caps = pd.read_csv(caps_csv, index_col=0)
    vol = pd.read_csv(vol_csv, index_col=0)
    rf = pd.read_csv(rf_csv, index_col=0)
    if list(returns.columns) != list(caps.columns):
        raise ValueError("returns and market caps must list the same assets")
    if vol.shape[1] != 1 or rf.shape[1] != 1:
        raise ValueError("vol index and risk-free files must have one value column")

    frame = pd.concat(
        {
            "ret": returns,
            "cap": caps,
            "vol": vol.iloc[:, 0],
            "rf": rf.iloc[:, 0],
        },
        axis=1,
        join="inner",
    )
    n_before = len(frame)
    frame = frame.dropna()
    dropped = n_before - len(frame)
    if dropped:
        logger.info("dropped %d rows with missing values", dropped)
    frame = frame.sort_index()
    if len(frame) == 0:
        raise ValueError("no complete rows remain after alignment")

    rf_weekly = frame["rf"].to_numpy().ravel() / WEEKS_PER_YEAR
    raw = frame["ret"].to_numpy()
    return MarketDataset(
        dates=tuple(str(d) for d in frame.index),
        excess_returns=raw - rf_weekly[:, None],
        market_caps=frame["cap"].to_numpy(),
        vol_index=frame["vol"].to_numpy().ravel(),
        r_f=rf_weekly,
        asset_names=tuple(returns.columns),
    )


@dataclass(frozen=True)
class RegimeRules:
    """Thresholds of the bull/bear segmentation on an index level series.

    An up-leg qualifies as a bull market once the rise from the running
    trough exceeds ``rise``; a down-leg as a bear market once the fall
    from the running peak exceeds ``fall``.  Everything else is
    oscillating.
    """

    rise: float = 0.90
    fall: float = 0.50

    def __post_init__(self):
        if not (self.rise > 0.0 and 0.0 < self.fall < 1.0):
            raise ValueError("rise must be positive and fall in (0, 1)")


@dataclass(frozen=True)
class BacktestConfig:
    """Controls for one backtest run."""

    market_params: MarketParams
    window_weeks: int = 100
    rebalance_weeks: int = 4
    delta0: float = 2.5
    risk_multiplier: float = 1.0
    cost_ratio: float = 0.005
    calibration_weeks: int | None = None
    allow_short: bool = False

    def __post_init__(self):
        if self.rebalance_weeks not in TRADING_DAYS_PER_WINDOW:
            raise ValueError(
                f"rebalance_weeks must be one of {sorted(TRADING_DAYS_PER_WINDOW)}"
            )
        if not 0.0 <= self.cost_ratio < 1.0:
            raise ValueError("cost_ratio must lie in [0, 1)")
        if self.window_weeks < 2 or self.delta0 <= 0 or self.risk_multiplier <= 0:
            raise ValueError("window_weeks, delta0, risk_multiplier must be positive")
        if self.allow_short:
            raise ValueError("short positions are not supported")


def risk_aversion_path(vol_index, delta0: float = 2.5, window: int = 100) -> np.ndarray:
    """Time-varying risk aversion: delta0 scaled by the volatility index
    relative to its trailing ``window``-period mean (current value
    included).  Entries before the first full window are NaN."""
    vol = np.asarray(vol_index, dtype=float)
    if vol.min() <= 0.0:
        raise ValueError("volatility index must be strictly positive")
    out = np.full(vol.size, np.nan)
    if vol.size < window:
        return out
    csum = np.concatenate([[0.0], np.cumsum(vol)])
    trailing_mean = (csum[window:] - csum[:-window]) / window
    out[window - 1 :] = delta0 * vol[window - 1 :] / trailing_mean
    return out


def build_bl_component(cov_hat, x_M, delta_t: float) -> GaussianComponent:
    """Market-implied state: mean delta * cov * market weights, covariance
    the rolling estimate itself."""
    cov_hat = np.asarray(cov_hat, dtype=float)
    x_M = np.asarray(x_M, dtype=float)
    return GaussianComponent(delta_t * cov_hat @ x_M, cov_hat)


def segment_regimes(index_level, rules: RegimeRules = RegimeRules()) -> np.ndarray:
    """Label each period of an index level series 0 bull, 1 oscillating,
    2 bear, by zig-zag detection of confirmed up- and down-legs."""
    level = np.asarray(index_level, dtype=float)
    if level.ndim != 1 or level.size < 2:
        raise ValueError("index level must be a series of at least two points")
    if level.min() <= 0.0:
        raise ValueError("index level must be strictly positive")

    labels = np.ones(level.size, dtype=int)  # oscillating by default
    legs: list[tuple[int, int, int]] = []  # (start, end, label)
    direction = None
    lo = hi = 0  # running extremes before the first confirmation
    pivot = extreme = 0  # current leg: start pivot and running extreme
    for t in range(level.size):
        if direction is None:
            if level[t] > level[hi]:
                hi = t
            if level[t] < level[lo]:
                lo = t
            if level[t] >= level[lo] * (1.0 + rules.rise):
                direction = "up"
                pivot = lo
                extreme = lo + int(np.argmax(level[lo : t + 1]))
            elif level[t] <= level[hi] * (1.0 - rules.fall):
                direction = "down"
                pivot = hi
                extreme = hi + int(np.argmin(level[hi : t + 1]))
        elif direction == "up":
            if level[t] > level[extreme]:
                extreme = t
            if level[t] <= level[extreme] * (1.0 - rules.fall):
                legs.append((pivot, extreme, 0))
                direction = "down"
                pivot = extreme
                extreme = pivot + int(np.argmin(level[pivot : t + 1]))
        else:
            if level[t] < level[extreme]:
                extreme = t
            if level[t] >= level[extreme] * (1.0 + rules.rise):
                legs.append((pivot, extreme, 2))
                direction = "up"
                pivot = extreme
                extreme = pivot + int(np.argmax(level[pivot : t + 1]))
    # the trailing leg is confirmed in direction; close it at its extreme
    if direction == "up":
        legs.append((pivot, extreme, 0))
    elif direction == "down":
        legs.append((pivot, extreme, 2))
    for start, end, label in legs:
        labels[start : end + 1] = label
    return labels


def calibrate_state_components(
    index_level,
    sector_excess,
    rules: RegimeRules = RegimeRules(),
) -> tuple[GaussianComponent, GaussianComponent, GaussianComponent]:
    """Estimate bull / oscillating / bear states from pre-investment history.

    Regimes are segmented on ``index_level``; each state's mean and
    covariance are the sample moments of ``sector_excess`` over that
    regime's periods.  A regime with fewer than n+2 observations gets its
    covariance shrunk halfway toward its diagonal (with a warning); a
    missing regime raises, since the history is then too short to
    calibrate.
    """
    sector_excess = np.asarray(sector_excess, dtype=float)
    labels = segment_regimes(index_level, rules)
    if labels.size != sector_excess.shape[0]:
        raise ValueError("index level and sector returns disagree on length")
    n = sector_excess.shape[1]
    components = []
    for label, name in ((0, "bull"), (1, "oscillating"), (2, "bear")):
        rows = sector_excess[labels == label]
        if rows.shape[0] == 0:
            raise ValueError(
                f"history contains no {name} regime under the segmentation rule; "
                "provide a longer calibration history"
            )
        if rows.shape[0] < 2:
            raise ValueError(
                f"{name} regime has a single observation; provide longer history"
            )
        mean = rows.mean(axis=0)
        cov = np.cov(rows, rowvar=False, ddof=1)
        if rows.shape[0] < n + 2:
            warnings.warn(
                f"{name} regime has only {rows.shape[0]} observations; "
                "shrinking covariance toward its diagonal",
                RuntimeWarning,
                stacklevel=2,
            )
            cov = 0.5 * cov + 0.5 * np.diag(np.diag(cov))
        smallest = float(np.linalg.eigvalsh(cov)[0])
        if smallest < 1e-8:
            cov = cov + (1e-8 - smallest) * np.eye(n)
        components.append(GaussianComponent(mean, cov))
    return tuple(components)


def mv_long_only(mu, sigma, delta: float) -> np.ndarray:
    """Long-only fully-invested mean-variance weights.

    Solves max x'mu - (delta/2) x'Sigma x over the unit simplex by a
    primal active-set method on the equality-constrained KKT system; the
    KKT residual of the returned point is verified below 1e-8.
    """
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    n = mu.size
    if delta <= 0.0:
        raise ValueError("delta must be strictly positive")
    if sigma.shape != (n, n):
        raise ValueError("sigma must be n x n")

    Q = delta * sigma
    x = np.full(n, 1.0 / n)
    zero_set: set[int] = set()
    for _ in range(50 * (n + 1)):
        free = np.array(sorted(set(range(n)) - zero_set))
        grad = Q @ x - mu
        kkt = np.zeros((free.size + 1, free.size + 1))
        kkt[: free.size, : free.size] = Q[np.ix_(free, free)]
        kkt[: free.size, -1] = 1.0
        kkt[-1, : free.size] = 1.0
        rhs = np.concatenate([-grad[free], [0.0]])
        sol = np.linalg.solve(kkt, rhs)
        d_free, gamma = sol[:-1], sol[-1]

        if np.abs(d_free).max() <= 1e-13:
            # stationary on the working set; check multipliers of x_i = 0
            nu = grad + gamma
            blocked = [i for i in zero_set if nu[i] < -1e-10]
            if not blocked:
                break
            zero_set.remove(min(blocked, key=lambda i: nu[i]))
            continue
        d = np.zeros(n)
        d[free] = d_free
        step = 1.0
        blocker = None
        for i in free:
            if d[i] < -1e-16:
                ratio = -x[i] / d[i]
                if ratio < step:
                    step = ratio
                    blocker = i
        x = x + step * d
        if blocker is not None:
            x[blocker] = 0.0
            zero_set.add(blocker)
    else:
        raise RuntimeError("active-set iteration failed to terminate")

    x = np.maximum(x, 0.0)
    x = x / x.sum()
    _check_kkt(Q, mu, x)
    return x


def _check_kkt(Q, mu, x, tol: float = 1e-8) -> None:
    """Verify stationarity, dual feasibility, and complementary slackness."""
    grad = Q @ x - mu
    support = x > 1e-12
    gamma = -(grad[support]).mean()
    nu = grad + gamma
    residual = max(
        float(np.abs(nu[support]).max()),
        float(max(0.0, -nu.min())),
        float(np.abs(nu * x).max()),
        abs(float(x.sum()) - 1.0),
    )
    if residual > tol:
        raise RuntimeError(f"KKT residual {residual:.2e} exceeds {tol:g}")


@dataclass(frozen=True)
class PerfMetrics:
    """Sharpe ratio, turnover, and maximum drawdown of one strategy run."""

    sharpe: float
    turnover: float
    max_drawdown: float
    sharpe_defined: bool = True


def max_drawdown(wealth) -> float:
    """Largest peak-to-trough loss fraction of a positive wealth path."""
    wealth = np.asarray(wealth, dtype=float)
    if wealth.size < 2:
        raise ValueError("wealth path needs at least two points")
    running_max = np.maximum.accumulate(wealth)
    return float(np.max(1.0 - wealth / running_max))


def perf_metrics(
    window_returns,
    target_weights,
    drifted_weights,
    wealth,
    trading_days_per_window: float,
) -> PerfMetrics:
    """Summarize one strategy run.

    ``window_returns`` are net portfolio returns per rebalance window,
    annualized with the factor 250 / trading_days_per_window;
    ``target_weights`` row t is the allocation chosen at rebalance t and
    ``drifted_weights`` row t the buy-and-hold weights right before
    rebalance t+1, so turnover is the mean absolute reallocation;
    ``wealth`` is the full path for the drawdown.
    """
    r = np.asarray(window_returns, dtype=float)
    target = np.atleast_2d(np.asarray(target_weights, dtype=float))
    drifted = np.atleast_2d(np.asarray(drifted_weights, dtype=float))
    if r.size < 2:
        raise ValueError("need at least two rebalance windows")
    factor = 250.0 / trading_days_per_window
    mean = factor * r.mean()
    var = factor * r.var(ddof=1)
    if var <= 0.0:
        sharpe, defined = float("nan"), False
    else:
        sharpe, defined = float(mean / np.sqrt(var)), True
    turnover = float(np.abs(target[1:] - drifted[:-1]).sum(axis=1).mean())
    return PerfMetrics(
        sharpe=sharpe,
        turnover=turnover,
        max_drawdown=max_drawdown(wealth),
        sharpe_defined=defined,
    )


def roll_wealth(
    raw_returns: np.ndarray,
    target_weights: np.ndarray,
    window_starts: np.ndarray,
    cost_ratio: float,
):
    """Roll wealth forward under buy-and-hold drift and proportional costs.

    ``raw_returns`` covers the investment span week by week;
    ``window_starts`` gives the row at which each rebalance window begins
    (the first entry must be 0) and ``target_weights`` the allocation
    chosen at each start.  At every rebalance after the first, the week's
    wealth is additionally scaled by (1 - cost_ratio * sum |trade|)
    against the drifted previous allocation.  The initial purchase is
    free.

    Returns (wealth_path, window_returns, drifted_weights, turnovers);
    the wealth path has one leading entry of 1.0.
    """
    raw = np.asarray(raw_returns, dtype=float)
    target = np.atleast_2d(np.asarray(target_weights, dtype=float))
    starts = np.asarray(window_starts, dtype=int)
    if starts[0] != 0 or starts.size != target.shape[0]:
        raise ValueError("window_starts must begin at 0 and match target_weights")
    T = raw.shape[0]
    bounds = np.append(starts, T)

    wealth = [1.0]
    window_returns = []
    drifted = []
    turnovers = []
    prev_drift = None
    for k in range(starts.size):
        x = target[k]
        w_start = wealth[-1]
        cost_factor = 1.0
        if prev_drift is not None:
            trade = float(np.abs(x - prev_drift).sum())
            turnovers.append(trade)
            cost_factor = 1.0 - cost_ratio * trade
        holdings = x * w_start * cost_factor
        for t in range(bounds[k], bounds[k + 1]):
            holdings = holdings * (1.0 + raw[t])
            wealth.append(float(holdings.sum()))
        total = holdings.sum()
        prev_drift = holdings / total if total > 0 else x
        drifted.append(prev_drift)
        window_returns.append(wealth[-1] / w_start - 1.0)
    return (
        np.asarray(wealth),
        np.asarray(window_returns),
        np.asarray(drifted),
        np.asarray(turnovers),
    )


@dataclass(frozen=True)
class StrategyPerformance:
    strategy: str
    rebalance_weeks: int
    sharpe: float
    turnover: float
    max_drawdown: float
    sharpe_defined: bool
    n_failures: int


@dataclass(frozen=True)
class PerfReport:
    """Per-strategy performance plus the weekly wealth paths of one run."""

    performances: tuple[StrategyPerformance, ...]
    wealth_paths: dict[str, np.ndarray]
    target_weights: dict[str, np.ndarray]
    week_dates: tuple[str, ...]
    rebalance_weeks: int

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [
                {
                    "strategy": p.strategy,
                    "rebalance_weeks": p.rebalance_weeks,
                    "SR": p.sharpe,
                    "TRN": p.turnover,
                    "MDD": p.max_drawdown,
                }
                for p in self.performances
            ]
        )


def run_backtest(dataset: MarketDataset, config: BacktestConfig) -> PerfReport:
    """Backtest the three estimation strategies on one dataset.

    At each rebalance date: estimate the rolling covariance, rebuild the
    market-implied state, fit the EM prior on the window, invert the
    observed capitalization weights through each estimator, and map the
    estimated moments to a long-only mean-variance portfolio.  A solver
    exception at a date carries the previous weights forward and is
    counted per strategy.
    """
    window = config.window_weeks
    calibration = config.calibration_weeks or window
    start = max(window, calibration)
    T = dataset.n_weeks
    if start + 2 * config.rebalance_weeks > T:
        raise ValueError("dataset too short for the window and test span")

    raw = dataset.raw_returns()
    # market index for regime calibration: cap-weighted raw returns
    index_returns = np.array(
        [dataset.market_weights(t) @ raw[t] for t in range(calibration)]
    )
    index_level = np.cumprod(1.0 + index_returns)
    calibrated = calibrate_state_components(
        index_level, dataset.excess_returns[:calibration]
    )

    deltas = risk_aversion_path(
        dataset.vol_index, delta0=config.delta0, window=window
    )
    rebalance_idx = np.arange(start, T - 1, config.rebalance_weeks)

    weights = {name: [] for name in STRATEGIES}
    failures = {name: 0 for name in STRATEGIES}
    solvers = {
        "backward": solve_backward,
        "forward": solve_forward,
        "combined": solve_combined,
    }
    base = config.market_params
    for t in rebalance_idx:
        window_excess = dataset.excess_returns[t - window : t]
        cov_hat = np.cov(window_excess, rowvar=False, ddof=1)
        delta_t = float(deltas[t])
        x_M = dataset.market_weights(t)
        bl = build_bl_component(cov_hat, x_M, delta_t)
        model = MixtureModel(calibrated + (bl,))
        fit = em_fit_weights(model, window_excess)
        mu_u, sigma_u = mixture_moments(model, fit.weights)
        x_U = mv_unconstrained(mu_u, sigma_u, base.delta_U)
        params = MarketParams(
            alpha_I=base.alpha_I,
            alpha_U=base.alpha_U,
            alpha_N=base.alpha_N,
            sigma_noise=base.sigma_noise,
            delta_I=delta_t,
            delta_U=base.delta_U,
        )
        observation = EquilibriumObservation(
            x_M=x_M, x_U_star=x_U.weights, params=params
        )
        for name in STRATEGIES:
            try:
                problem = EstimationProblem(model, fit.prior, observation, name)
                result = solvers[name](problem)
                mu_hat, sigma_hat = estimate_moments(model, result)
                x = mv_long_only(
                    mu_hat, sigma_hat, delta_t * config.risk_multiplier
                )
            except (np.linalg.LinAlgError, RuntimeError, ValueError):
                failures[name] += 1
                x = weights[name][-1] if weights[name] else np.full(
                    dataset.n_assets, 1.0 / dataset.n_assets
                )
            weights[name].append(x)

    span = slice(int(rebalance_idx[0]), T)
    raw_span = raw[span]
    starts_local = rebalance_idx - rebalance_idx[0]
    performances = []
    wealth_paths = {}
    for name in STRATEGIES:
        wealth, window_returns, drifted, _ = roll_wealth(
            raw_span, np.array(weights[name]), starts_local, config.cost_ratio
        )
        metrics = perf_metrics(
            window_returns,
            np.array(weights[name]),
            drifted,
            wealth,
            TRADING_DAYS_PER_WINDOW[config.rebalance_weeks],
        )
        performances.append(
            StrategyPerformance(
                strategy=name,
                rebalance_weeks=config.rebalance_weeks,
                sharpe=metrics.sharpe,
                turnover=metrics.turnover,
                max_drawdown=metrics.max_drawdown,
                sharpe_defined=metrics.sharpe_defined,
                n_failures=failures[name],
            )
        )
        wealth_paths[name] = wealth
    return PerfReport(
        performances=tuple(performances),
        wealth_paths=wealth_paths,
        target_weights={name: np.array(weights[name]) for name in STRATEGIES},
        week_dates=dataset.dates[int(rebalance_idx[0]) :],
        rebalance_weeks=config.rebalance_weeks,
    )

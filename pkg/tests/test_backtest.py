import itertools

import numpy as np
import pandas as pd
import pytest

from mixfolio.backtest import (
    BacktestConfig,
    MarketDataset,
    RegimeRules,
    build_bl_component,
    calibrate_state_components,
    load_market_dataset,
    max_drawdown,
    mv_long_only,
    perf_metrics,
    risk_aversion_path,
    roll_wealth,
    run_backtest,
    segment_regimes,
)
from mixfolio.equilibrium import MarketParams

from _helpers import random_spd


def synthetic_dataset(seed=7, T=300, n=4, calibration=160):
    """Weekly dataset with planted bull / bear / oscillating history.

    The first 160 weeks hold a flat head (stays oscillating under the
    segmentation rule), a confirmed bull leg, and a confirmed bear leg.
    """
    rng = np.random.default_rng(seed)
    mkt = np.concatenate(
        [
            rng.normal(-0.001, 0.003, 35),
            rng.normal(0.02, 0.01, 65),
            rng.normal(-0.03, 0.015, 60),
            rng.normal(0.002, 0.012, max(T - 160, 0)),
        ]
    )[:T]
    beta = rng.uniform(0.8, 1.2, n)
    raw = 0.002 * rng.standard_normal((T, n)) + np.outer(mkt, beta)
    caps = np.abs(rng.normal(100.0, 10.0, (T, n))) + 1.0
    vol = 20.0 + 5.0 * np.abs(rng.standard_normal(T))
    rf_weekly = np.full(T, 0.03 / 52)
    dates = tuple(f"2010-W{i:04d}" for i in range(T))
    return MarketDataset(
        dates=dates,
        excess_returns=raw - rf_weekly[:, None],
        market_caps=caps,
        vol_index=vol,
        r_f=rf_weekly,
        asset_names=tuple(f"S{j}" for j in range(n)),
    )


def market_params(n=4):
    return MarketParams(0.5, 0.4, 0.1, np.full(n, 1.041), 2.5, 2.5)


class TestRiskAversion:
    def test_constant_vol_gives_delta0(self):
        path = risk_aversion_path(np.full(150, 17.0), delta0=2.5, window=100)
        assert np.isnan(path[:99]).all()
        np.testing.assert_allclose(path[99:], 2.5, atol=1e-14)

    def test_vol_at_twice_trailing_mean_doubles_delta(self):
        # choose the last value so that it is exactly twice the trailing
        # 100-week mean that includes it: v = 2 * (99 a + v) / 100
        a = 10.0
        v = 198.0 * a / 98.0
        vol = np.full(100, a)
        vol[-1] = v
        path = risk_aversion_path(vol, delta0=2.5, window=100)
        assert path[-1] == pytest.approx(5.0, rel=1e-12)

    def test_rejects_nonpositive_vol(self):
        with pytest.raises(ValueError):
            risk_aversion_path(np.array([1.0, 0.0, 2.0]))


class TestBlComponent:
    def test_zero_market_portfolio(self):
        comp = build_bl_component(np.eye(3) * 0.01, np.zeros(3), 2.5)
        np.testing.assert_array_equal(comp.mu, np.zeros(3))

    def test_identity_covariance_by_hand(self):
        comp = build_bl_component(np.eye(2), np.array([0.5, 0.5]), 2.0)
        np.testing.assert_allclose(comp.mu, [1.0, 1.0], atol=1e-15)
        np.testing.assert_array_equal(comp.sigma, np.eye(2))

    def test_mean_linear_in_delta(self):
        cov = random_spd(np.random.default_rng(0), 3, 0.01)
        x = np.array([0.2, 0.3, 0.5])
        a = build_bl_component(cov, x, 1.0)
        b = build_bl_component(cov, x, 3.0)
        np.testing.assert_allclose(b.mu, 3.0 * a.mu, rtol=1e-12)


class TestRegimes:
    def test_planted_regimes_recovered(self):
        lvl = np.concatenate(
            [
                np.linspace(1.0, 2.2, 50),  # bull: +120%
                np.linspace(2.2, 0.8, 40),  # bear: -64%
                np.full(30, 0.82),  # oscillating tail
            ]
        )
        labels = segment_regimes(lvl)
        assert (labels[:49] == 0).all()
        assert (labels[50:89] == 2).all()
        assert (labels[90:] == 1).all()

    def test_crash_first_series(self):
        lvl = np.concatenate(
            [np.linspace(1.0, 0.45, 30), np.linspace(0.45, 1.0, 40), np.full(20, 0.98)]
        )
        labels = segment_regimes(lvl)
        assert (labels[:29] == 2).all()
        assert (labels[31:69] == 0).all()

    def test_monotone_rise_is_single_bull_and_calibration_errors(self):
        lvl = np.linspace(1.0, 2.1, 60)
        labels = segment_regimes(lvl)
        assert (labels == 0).all()
        returns = np.random.default_rng(1).normal(0, 0.01, (60, 3))
        with pytest.raises(ValueError, match="regime"):
            calibrate_state_components(lvl, returns)

    def test_small_regime_shrinks_with_warning(self):
        rng = np.random.default_rng(3)
        # bear regime spans only 4 periods but the assets number 5
        lvl = np.concatenate(
            [np.linspace(1.0, 2.0, 40), np.linspace(2.0, 0.9, 4), np.full(40, 0.92)]
        )
        returns = rng.normal(0.0, 0.01, (84, 5))
        with pytest.warns(RuntimeWarning, match="shrinking"):
            comps = calibrate_state_components(lvl, returns)
        for comp in comps:
            assert np.linalg.eigvalsh(comp.sigma)[0] > 0.0

    def test_rules_validation(self):
        with pytest.raises(ValueError):
            RegimeRules(rise=-0.1)
        with pytest.raises(ValueError):
            RegimeRules(fall=1.5)


class TestMvLongOnly:
    def test_symmetric_assets_split_evenly(self):
        x = mv_long_only(np.array([0.1, 0.1]), np.eye(2), 1.0)
        np.testing.assert_allclose(x, [0.5, 0.5], atol=1e-12)

    def test_strong_signal_hits_the_corner(self):
        x = mv_long_only(np.array([0.5, 0.0]), np.eye(2) * 0.01, 0.1)
        np.testing.assert_allclose(x, [1.0, 0.0], atol=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_beats_brute_force_grid(self, seed):
        rng = np.random.default_rng(seed)
        n = 5
        sigma = random_spd(rng, n, 0.02)
        mu = rng.normal(0.0, 0.05, n)
        delta = 2.5
        x = mv_long_only(mu, sigma, delta)
        assert x.min() >= 0.0 and abs(x.sum() - 1.0) <= 1e-10

        def objective(w):
            return w @ mu - 0.5 * delta * w @ sigma @ w

        step = 0.02
        ticks = np.arange(0.0, 1.0 + step / 2, step)
        best = -np.inf
        for combo in itertools.product(ticks, repeat=n - 1):
            s = sum(combo)
            if s <= 1.0 + 1e-12:
                w = np.append(combo, 1.0 - s)
                value = objective(w)
                if value > best:
                    best = value
        assert objective(x) >= best - 1e-4

    def test_never_worse_than_equal_weights(self):
        rng = np.random.default_rng(11)
        for _ in range(10):
            n = int(rng.integers(2, 7))
            sigma = random_spd(rng, n, 0.05)
            mu = rng.normal(0.0, 0.05, n)
            x = mv_long_only(mu, sigma, 2.5)
            even = np.full(n, 1.0 / n)

            def objective(w):
                return w @ mu - 1.25 * w @ sigma @ w

            assert objective(x) >= objective(even) - 1e-12


class TestMetrics:
    def test_mdd_of_1_2_1_is_half(self):
        assert max_drawdown([1.0, 2.0, 1.0]) == 0.5

    def test_mdd_constant_wealth_is_zero(self):
        assert max_drawdown(np.ones(10)) == 0.0

    def test_mdd_scale_invariant(self):
        rng = np.random.default_rng(0)
        wealth = np.cumprod(1.0 + rng.normal(0.001, 0.02, 100))
        assert max_drawdown(wealth) == pytest.approx(
            max_drawdown(wealth * 37.5), rel=1e-12
        )

    def test_zero_variance_flags_sharpe(self):
        target = np.array([[0.5, 0.5]] * 3)
        metrics = perf_metrics(
            np.full(3, 0.01), target, target, [1.0, 1.01, 1.02, 1.03], 21
        )
        assert not metrics.sharpe_defined
        assert np.isnan(metrics.sharpe)

    def test_annualization_factor(self):
        rng = np.random.default_rng(5)
        r = rng.normal(0.01, 0.05, 24)
        target = np.tile([0.5, 0.5], (24, 1))
        metrics = perf_metrics(r, target, target, np.cumprod(1 + np.r_[0, r]), 21)
        factor = 250.0 / 21.0
        expected = factor * r.mean() / np.sqrt(factor * r.var(ddof=1))
        assert metrics.sharpe == pytest.approx(expected, rel=1e-12)


class TestRollWealth:
    def test_zero_cost_single_asset_tracks_cumulative_return(self):
        rng = np.random.default_rng(1)
        raw = rng.normal(0.002, 0.02, (12, 1))
        target = np.ones((3, 1))
        wealth, window_returns, _, _ = roll_wealth(
            raw, target, np.array([0, 4, 8]), 0.0
        )
        np.testing.assert_allclose(
            wealth, np.r_[1.0, np.cumprod(1.0 + raw[:, 0])], rtol=1e-12
        )

    def test_constant_weights_without_drift_have_zero_turnover(self):
        # identical per-period returns across assets leave weights in place
        raw = np.full((6, 3), 0.01)
        target = np.tile([0.2, 0.3, 0.5], (3, 1))
        _, _, _, turnovers = roll_wealth(raw, target, np.array([0, 2, 4]), 0.005)
        np.testing.assert_allclose(turnovers, 0.0, atol=1e-14)

    def test_full_reallocation_costs_one_percent(self):
        raw = np.zeros((2, 2))
        target = np.array([[1.0, 0.0], [0.0, 1.0]])
        wealth, window_returns, drifted, turnovers = roll_wealth(
            raw, target, np.array([0, 1]), 0.005
        )
        np.testing.assert_allclose(turnovers, [2.0])
        assert wealth[-1] == pytest.approx(0.99, rel=1e-14)
        assert window_returns[-1] == pytest.approx(-0.01, rel=1e-12)

    def test_costs_only_reduce_wealth(self):
        rng = np.random.default_rng(2)
        raw = rng.normal(0.001, 0.02, (20, 3))
        target = np.abs(rng.normal(size=(5, 3)))
        target /= target.sum(axis=1, keepdims=True)
        starts = np.array([0, 4, 8, 12, 16])
        free, _, _, _ = roll_wealth(raw, target, starts, 0.0)
        costly, _, _, _ = roll_wealth(raw, target, starts, 0.005)
        assert np.all(costly <= free + 1e-15)


class TestDatasetAndBacktest:
    def test_dataset_validation(self):
        ds = synthetic_dataset()
        with pytest.raises(ValueError):
            MarketDataset(
                dates=ds.dates,
                excess_returns=ds.excess_returns,
                market_caps=ds.market_caps[:-1],
                vol_index=ds.vol_index,
                r_f=ds.r_f,
                asset_names=ds.asset_names,
            )

    def test_loader_aligns_and_drops_missing(self, tmp_path, caplog):
        dates = pd.date_range("2012-01-06", periods=8, freq="W-FRI").strftime("%Y-%m-%d")
        returns = pd.DataFrame(
            {"A": np.linspace(0.01, 0.08, 8), "B": 0.01}, index=dates
        )
        returns.iloc[3, 0] = np.nan
        caps = pd.DataFrame({"A": 10.0, "B": 20.0}, index=dates)
        vol = pd.DataFrame({"v": 15.0}, index=dates)
        rf = pd.DataFrame({"rf": 0.026}, index=dates)
        for frame, name in ((returns, "r"), (caps, "c"), (vol, "v"), (rf, "f")):
            frame.rename_axis("date").to_csv(tmp_path / f"{name}.csv")
        ds = load_market_dataset(
            tmp_path / "r.csv", tmp_path / "c.csv", tmp_path / "v.csv", tmp_path / "f.csv"
        )
        assert ds.n_weeks == 7  # the NaN row is dropped
        # excess returns subtract the weekly risk-free rate
        assert ds.excess_returns[0, 1] == pytest.approx(0.01 - 0.026 / 52, rel=1e-12)
        np.testing.assert_allclose(ds.raw_returns()[0, 1], 0.01, atol=1e-15)

    def test_backtest_report_structure(self):
        ds = synthetic_dataset()
        cfg = BacktestConfig(
            market_params=market_params(),
            window_weeks=100,
            rebalance_weeks=13,
            calibration_weeks=160,
        )
        report = run_backtest(ds, cfg)
        frame = report.to_frame()
        assert list(frame["strategy"]) == ["backward", "combined", "forward"]
        assert (frame["MDD"] >= 0.0).all() and (frame["MDD"] <= 1.0).all()
        assert (frame["TRN"] >= 0.0).all()
        for path in report.wealth_paths.values():
            assert path[0] == 1.0 and np.all(path > 0.0)

    def test_cost_monotonicity_across_full_backtest(self):
        ds = synthetic_dataset()
        base = dict(
            market_params=market_params(),
            window_weeks=100,
            rebalance_weeks=13,
            calibration_weeks=160,
        )
        free = run_backtest(ds, BacktestConfig(cost_ratio=0.0, **base))
        costly = run_backtest(ds, BacktestConfig(cost_ratio=0.005, **base))
        for name in free.wealth_paths:
            assert np.all(
                costly.wealth_paths[name] <= free.wealth_paths[name] + 1e-12
            )

    def test_config_validation(self):
        with pytest.raises(ValueError):
            BacktestConfig(market_params=market_params(), rebalance_weeks=5)
        with pytest.raises(ValueError):
            BacktestConfig(market_params=market_params(), cost_ratio=1.5)
        with pytest.raises(ValueError):
            BacktestConfig(market_params=market_params(), allow_short=True)

    def test_too_short_dataset_rejected(self):
        ds = synthetic_dataset(T=110)
        with pytest.raises(ValueError, match="too short"):
            run_backtest(
                ds,
                BacktestConfig(market_params=market_params(), rebalance_weeks=13),
            )

"""Heterogeneous three-investor market: decisions, noise, clearing, wealth.

The market holds one informed mean-variance investor (knows the true
return distribution), one less-informed mean-variance investor (works off
rolling estimates), and a noise trader whose positions are random.  The
capitalization-weighted market portfolio is the share-weighted sum of the
three holdings; inverting it is what the estimators in
:mod:`mixfolio.estimator` do.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.stats import norm

from .gmm import MixtureModel, MixtureWeights, mixture_moments, _vector

SHARE_SUM_TOL = 1e-12

#: An investor whose wealth update would go nonpositive is reset to this
#: fraction of total market wealth.
WEALTH_FLOOR_FRACTION = 1e-12


@dataclass(frozen=True)
class MarketParams:
    """Market shares, noise intensities, and risk aversions.

    ``sigma_noise`` holds the standard deviation of each noise position, so
    the noise covariance is diag(sigma_noise**2).  All entries must be
    strictly positive and the shares must sum to one.
    """

    alpha_I: float
    alpha_U: float
    alpha_N: float
    sigma_noise: np.ndarray
    delta_I: float
    delta_U: float

    def __post_init__(self):
        sigma = _vector(self.sigma_noise, "sigma_noise")
        object.__setattr__(self, "sigma_noise", sigma)
        shares = (self.alpha_I, self.alpha_U, self.alpha_N)
        if abs(sum(shares) - 1.0) > SHARE_SUM_TOL:
            raise ValueError(f"market shares must sum to 1, got {sum(shares)!r}")
        smallest = min(min(shares), self.delta_I, self.delta_U, float(sigma.min()))
        if smallest <= 0.0:
            raise ValueError("all market parameters must be strictly positive")

    @property
    def n(self) -> int:
        return self.sigma_noise.size

    def omega(self) -> np.ndarray:
        """Covariance of the noise term in the market portfolio: alpha_N**2 diag(sigma**2)."""
        return np.diag((self.alpha_N * self.sigma_noise) ** 2)

    def with_shares(self, alpha_I: float, alpha_U: float, alpha_N: float) -> "MarketParams":
        return replace(self, alpha_I=alpha_I, alpha_U=alpha_U, alpha_N=alpha_N)


@dataclass(frozen=True)
class InvestorHolding:
    """Weights on the risky assets; the risk-free leg absorbs the remainder."""

    weights: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "weights", _vector(self.weights, "weights"))


@dataclass(frozen=True)
class EquilibriumObservation:
    """One observed market portfolio together with what the observer knows."""

    x_M: np.ndarray
    x_U_star: np.ndarray
    params: MarketParams

    def __post_init__(self):
        x_M = _vector(self.x_M, "x_M")
        x_U = _vector(self.x_U_star, "x_U_star")
        if x_M.size != x_U.size or x_M.size != self.params.n:
            raise ValueError("x_M, x_U_star, and params must share one dimension")
        object.__setattr__(self, "x_M", x_M)
        object.__setattr__(self, "x_U_star", x_U)


@dataclass(frozen=True)
class WealthState:
    """Wealth levels of the three investors, strictly positive."""

    w_I: float
    w_U: float
    w_N: float

    def __post_init__(self):
        if min(self.w_I, self.w_U, self.w_N) <= 0.0:
            raise ValueError("wealth levels must be strictly positive")

    @property
    def total(self) -> float:
        return self.w_I + self.w_U + self.w_N

    @property
    def shares(self) -> tuple[float, float, float]:
        """Market shares (alpha_I, alpha_U, alpha_N), normalized to sum to 1 exactly."""
        t = self.total
        a_i, a_u = self.w_I / t, self.w_U / t
        return a_i, a_u, 1.0 - a_i - a_u


def mv_unconstrained(mu, sigma, delta: float) -> InvestorHolding:
    """Unconstrained mean-variance optimum (delta * sigma)^{-1} mu."""
    if delta <= 0.0:
        raise ValueError("delta must be strictly positive")
    sigma = np.asarray(sigma, dtype=float)
    mu = np.asarray(mu, dtype=float)
    return InvestorHolding(np.linalg.solve(delta * sigma, mu))


def g_forward(model: MixtureModel, w: MixtureWeights, delta_I: float) -> np.ndarray:
    """Informed investor's optimal holding as a function of the weights.

    g(lambda) = (delta_I * Sigma(lambda))^{-1} mu(lambda) with the mixture
    moments evaluated at ``w``.  Homogeneous of degree -1 in ``delta_I``.
    """
    if delta_I <= 0.0:
        raise ValueError("delta_I must be strictly positive")
    mu, sigma = mixture_moments(model, w)
    return np.linalg.solve(delta_I * sigma, mu)


def sample_noise(params: MarketParams, rng) -> InvestorHolding:
    """Noise-trader position: independent N(0, sigma_i**2) per asset."""
    rng = np.random.default_rng(rng)
    return InvestorHolding(rng.standard_normal(params.n) * params.sigma_noise)


def clear_market(
    x_U: InvestorHolding,
    x_I: InvestorHolding,
    x_N: InvestorHolding,
    params: MarketParams,
) -> EquilibriumObservation:
    """Share-weighted aggregate portfolio x_M = a_U x_U + a_I x_I + a_N x_N."""
    x_M = (
        params.alpha_U * x_U.weights
        + params.alpha_I * x_I.weights
        + params.alpha_N * x_N.weights
    )
    return EquilibriumObservation(x_M=x_M, x_U_star=x_U.weights, params=params)


def noise_sigma_from_ci(half_width: float, confidence: float) -> float:
    """Noise std such that [-half_width, half_width] is the central
    ``confidence`` interval of one noise position."""
    if half_width <= 0.0:
        raise ValueError("half_width must be strictly positive")
    if not 0.0 < confidence < 1.0:
        raise ValueError("confidence must lie strictly between 0 and 1")
    return half_width / float(norm.ppf(0.5 * (1.0 + confidence)))


def update_wealth(
    state: WealthState,
    x_I: InvestorHolding,
    x_U: InvestorHolding,
    x_N: InvestorHolding,
    r_excess,
    r_f: float,
) -> tuple[WealthState, bool]:
    """One-period self-financing wealth update.

    Each investor's wealth is multiplied by (1 + r_f + x' r_excess): the
    risky legs earn the excess returns, the remainder sits at the risk-free
    rate.  A wealth level that would drop to zero or below is floored at
    ``WEALTH_FLOOR_FRACTION`` of total post-update wealth; the returned flag
    reports whether the floor was hit.
    """
    r = np.asarray(r_excess, dtype=float)
    if not np.all(np.isfinite(r)):
        raise ValueError("realized returns must be finite")
    raw = np.array(
        [
            state.w_I * (1.0 + r_f + x_I.weights @ r),
            state.w_U * (1.0 + r_f + x_U.weights @ r),
            state.w_N * (1.0 + r_f + x_N.weights @ r),
        ]
    )
    positive_total = float(np.clip(raw, 0.0, None).sum())
    if positive_total <= 0.0:
        raise ValueError("total market wealth was wiped out")
    floor = WEALTH_FLOOR_FRACTION * positive_total
    clamped = bool((raw < floor).any())
    w = np.maximum(raw, floor)
    return WealthState(w_I=float(w[0]), w_U=float(w[1]), w_N=float(w[2])), clamped

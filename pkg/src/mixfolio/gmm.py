"""Gaussian mixture model of asset excess returns.

Asset returns are modeled as a finite mixture of Gaussian market states
(for instance bull / oscillating / bear).  The states themselves are fixed
up front; everything that has to be learned from data is the weight vector
over states.  This module provides the mixture density, its first two
moments, sampling, and an EM fit of the weights that also produces a
Gaussian prior for the reduced weight vector (the first m-1 entries), with
the prior covariance taken from the inverse observed information at the
EM optimum.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import logsumexp

from .simplex import in_capped_simplex, project_capped_simplex

#: Minimum admissible eigenvalue for a component covariance.
PD_FLOOR = 1e-10

#: Tolerance on sum(weights) == 1.
WEIGHT_SUM_TOL = 1e-12

#: Weights are clamped here during EM so responsibilities stay defined.
WEIGHT_CLAMP = 1e-12

EM_MAX_ITER = 500
EM_TOL = 1e-8
FISHER_RIDGE = 1e-8

LOG_2PI = float(np.log(2.0 * np.pi))


def _vector(x, name: str) -> np.ndarray:
    arr = np.array(x, dtype=float)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    arr.setflags(write=False)
    return arr


def _sym_matrix(x, name: str) -> np.ndarray:
    arr = np.array(x, dtype=float)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise ValueError(f"{name} must be square, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    if arr.size:
        scale = max(1.0, float(np.abs(arr).max()))
        if np.abs(arr - arr.T).max() > 1e-8 * scale:
            raise ValueError(f"{name} is not symmetric")
        arr = 0.5 * (arr + arr.T)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class GaussianComponent:
    """One Gaussian market state for per-period excess returns.

    ``mu`` is in decimal units per period (0.004 means 0.4%), ``sigma`` in
    decimal squared.  Construction rejects covariances whose smallest
    eigenvalue does not exceed ``PD_FLOOR``.
    """

    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        mu = _vector(self.mu, "mu")
        sigma = _sym_matrix(self.sigma, "sigma")
        if sigma.shape[0] != mu.size:
            raise ValueError(
                f"mu has {mu.size} assets but sigma is {sigma.shape[0]}x{sigma.shape[1]}"
            )
        smallest = float(np.linalg.eigvalsh(sigma)[0])
        if smallest <= PD_FLOOR:
            raise ValueError(
                f"component covariance is not positive definite "
                f"(min eigenvalue {smallest:.3e} <= {PD_FLOOR:.0e})"
            )
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)

    @property
    def n(self) -> int:
        return self.mu.size

    @cached_property
    def chol(self) -> np.ndarray:
        """Lower Cholesky factor of the covariance."""
        return np.linalg.cholesky(self.sigma)


@dataclass(frozen=True)
class MixtureModel:
    """Fixed set of Gaussian states sharing one asset dimension.

    A single-state model is allowed; it makes every mixture operation
    collapse to its plain Gaussian counterpart and is useful as a
    degenerate reference case.
    """

    components: tuple[GaussianComponent, ...]

    def __post_init__(self):
        components = tuple(self.components)
        if len(components) < 1:
            raise ValueError("a mixture needs at least one component")
        n = components[0].n
        for k, comp in enumerate(components):
            if comp.n != n:
                raise ValueError(
                    f"component {k} has dimension {comp.n}, expected {n}"
                )
        object.__setattr__(self, "components", components)

    @property
    def m(self) -> int:
        return len(self.components)

    @property
    def n(self) -> int:
        return self.components[0].n

    @cached_property
    def means(self) -> np.ndarray:
        """Component means stacked as an (m, n) array."""
        out = np.stack([c.mu for c in self.components])
        out.setflags(write=False)
        return out

    @cached_property
    def covs(self) -> np.ndarray:
        """Component covariances stacked as an (m, n, n) array."""
        out = np.stack([c.sigma for c in self.components])
        out.setflags(write=False)
        return out

    def log_component_densities(self, data: np.ndarray) -> np.ndarray:
        """Log density of each component at each row of ``data``.

        Parameters
        ----------
        data : array, shape (T, n) or (n,)

        Returns
        -------
        array, shape (T, m)
        """
        data = np.atleast_2d(np.asarray(data, dtype=float))
        if data.shape[1] != self.n:
            raise ValueError(
                f"data has {data.shape[1]} columns, model expects {self.n}"
            )
        out = np.empty((data.shape[0], self.m))
        for k, comp in enumerate(self.components):
            chol = comp.chol
            z = solve_triangular(chol, (data - comp.mu).T, lower=True)
            log_det = 2.0 * np.sum(np.log(np.diag(chol)))
            out[:, k] = -0.5 * (self.n * LOG_2PI + log_det + np.sum(z * z, axis=0))
        return out


@dataclass(frozen=True)
class MixtureWeights:
    """Probability vector over the mixture states.

    The reduced form (first m-1 entries) determines the full vector; it
    must satisfy lambda_minus >= 0 and sum(lambda_minus) <= 1.
    """

    lambda_full: np.ndarray

    def __post_init__(self):
        lam = _vector(self.lambda_full, "lambda_full")
        if lam.size < 1:
            raise ValueError("weights must have at least one entry")
        if lam.min() < 0.0:
            raise ValueError(f"weights must be nonnegative, got min {lam.min():.3e}")
        if abs(lam.sum() - 1.0) > WEIGHT_SUM_TOL:
            raise ValueError(f"weights must sum to 1, got {lam.sum()!r}")
        object.__setattr__(self, "lambda_full", lam)

    @classmethod
    def from_reduced(cls, lambda_minus, tol: float = 1e-9) -> "MixtureWeights":
        """Build full weights from the reduced vector, the last entry absorbing
        the remainder.  Entries within ``tol`` of the feasible set are snapped
        onto it."""
        lam_minus = np.asarray(lambda_minus, dtype=float)
        if not in_capped_simplex(lam_minus, tol=tol):
            raise ValueError("reduced weights lie outside the feasible set")
        lam_minus = np.clip(lam_minus, 0.0, None)
        s = lam_minus.sum()
        if s > 1.0:
            lam_minus = lam_minus / s
            s = 1.0
        full = np.append(lam_minus, 1.0 - s)
        return cls(full)

    @property
    def m(self) -> int:
        return self.lambda_full.size

    @property
    def lambda_minus(self) -> np.ndarray:
        """Reduced weight vector (first m-1 entries)."""
        return self.lambda_full[:-1]


@dataclass(frozen=True)
class PriorSpec:
    """Gaussian prior on the reduced weight vector, learned from history.

    The mean is allowed to sit outside the feasible weight region: the
    backward estimator is defined as its projection back onto it, which is
    only nontrivial in exactly that situation.
    """

    lambda_hat_minus: np.ndarray
    phi: np.ndarray

    def __post_init__(self):
        lam = _vector(self.lambda_hat_minus, "lambda_hat_minus")
        phi = _sym_matrix(self.phi, "phi")
        if phi.shape[0] != lam.size:
            raise ValueError(
                f"phi is {phi.shape[0]}x{phi.shape[1]} but lambda_hat_minus has "
                f"{lam.size} entries"
            )
        if lam.size > 0 and float(np.linalg.eigvalsh(phi)[0]) <= 0.0:
            raise ValueError("phi must be positive definite")
        object.__setattr__(self, "lambda_hat_minus", lam)
        object.__setattr__(self, "phi", phi)

    def feasible(self, tol: float = 1e-9) -> bool:
        return in_capped_simplex(self.lambda_hat_minus, tol=tol)

    @property
    def dim(self) -> int:
        return self.lambda_hat_minus.size


def _check_weights(model: MixtureModel, w: MixtureWeights) -> None:
    if w.m != model.m:
        raise ValueError(f"weights have {w.m} entries, model has {model.m} components")


def mixture_density(model: MixtureModel, w: MixtureWeights, r) -> float:
    """Mixture density sum_k lambda_k N(r; mu_k, sigma_k) at a single point."""
    _check_weights(model, w)
    r = np.asarray(r, dtype=float)
    if r.ndim != 1 or r.size != model.n:
        raise ValueError(f"r must be a vector of length {model.n}")
    log_p = model.log_component_densities(r)[0]
    with np.errstate(divide="ignore"):
        log_lam = np.log(w.lambda_full)
    return float(np.exp(logsumexp(log_p + log_lam)))


def mixture_log_density(model: MixtureModel, w: MixtureWeights, data) -> np.ndarray:
    """Row-wise log mixture density, shape (T,)."""
    _check_weights(model, w)
    log_p = model.log_component_densities(data)
    with np.errstate(divide="ignore"):
        log_lam = np.log(w.lambda_full)
    return logsumexp(log_p + log_lam, axis=1)


def mixture_moments(
    model: MixtureModel, w: MixtureWeights
) -> tuple[np.ndarray, np.ndarray]:
    """Mean and covariance implied by the mixture.

    mu = sum_k lambda_k mu_k and
    sigma = sum_k lambda_k sigma_k
          + sum_k lambda_k (mu_k - mu)(mu_k - mu)'.
    """
    _check_weights(model, w)
    lam = w.lambda_full
    mu = lam @ model.means
    centered = model.means - mu
    sigma = np.einsum("k,kij->ij", lam, model.covs) + centered.T @ (
        lam[:, None] * centered
    )
    return mu, 0.5 * (sigma + sigma.T)


def sample_returns(
    model: MixtureModel, w: MixtureWeights, count: int, rng
) -> np.ndarray:
    """Draw ``count`` return vectors: pick a state by weight, then sample it.

    ``rng`` may be an integer seed or a ``numpy.random.Generator``; a fixed
    seed reproduces the draw exactly.
    """
    _check_weights(model, w)
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(rng)
    ks = rng.choice(model.m, size=count, p=w.lambda_full)
    out = np.empty((count, model.n))
    for k in range(model.m):
        idx = np.nonzero(ks == k)[0]
        if idx.size == 0:
            continue
        comp = model.components[k]
        z = rng.standard_normal((idx.size, model.n))
        out[idx] = comp.mu + z @ comp.chol.T
    return out


@dataclass(frozen=True)
class EMFit:
    """Outcome of the fixed-component EM weight fit.

    ``prior`` packages the reduced weight estimate together with the
    inverse observed information as its covariance.  ``converged`` is False
    when the iteration hit ``max_iter`` first; the best iterate is still
    returned.  ``fisher_ridged`` records that the information matrix needed
    a diagonal ridge before inversion.
    """

    weights: MixtureWeights
    prior: PriorSpec
    converged: bool
    n_iter: int
    log_likelihoods: np.ndarray
    fisher_ridged: bool


def em_fit_weights(
    model: MixtureModel,
    data,
    *,
    max_iter: int = EM_MAX_ITER,
    tol: float = EM_TOL,
) -> EMFit:
    """Fit mixture weights to return history by EM, components held fixed.

    Each iteration replaces the weights with the average responsibility per
    state; means and covariances are never re-estimated.  Iteration stops
    when the largest weight change falls below ``tol``.

    Parameters
    ----------
    model : MixtureModel
    data : array, shape (T, n)
        Return history, T >= m rows.
    max_iter, tol : EM stopping controls.

    Returns
    -------
    EMFit
    """
    data = np.atleast_2d(np.asarray(data, dtype=float))
    if data.shape[0] < model.m:
        raise ValueError(
            f"need at least m={model.m} observations, got {data.shape[0]}"
        )
    log_p = model.log_component_densities(data)
    # responsibilities are invariant to a per-row shift of the log densities,
    # so iterate on shifted plain-space densities and add the shift back into
    # the log-likelihood
    shift = log_p.max(axis=1)
    p = np.exp(log_p - shift[:, None])
    shift_total = float(shift.sum())

    lam = np.full(model.m, 1.0 / model.m)
    lls: list[float] = []
    converged = False
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        q = p @ lam
        lls.append(float(np.log(q).sum()) + shift_total)
        new_lam = (p / q[:, None]).mean(axis=0) * lam
        new_lam = np.clip(new_lam, WEIGHT_CLAMP, None)
        new_lam /= new_lam.sum()
        delta = float(np.abs(new_lam - lam).max())
        lam = new_lam
        if delta < tol:
            converged = True
            break
    lls.append(float(np.log(p @ lam).sum()) + shift_total)

    phi, ridged = _inverse_observed_information(log_p, lam)
    lam_minus = project_capped_simplex(lam[:-1])
    prior = PriorSpec(lam_minus, phi)
    weights = MixtureWeights.from_reduced(lam_minus)
    return EMFit(
        weights=weights,
        prior=prior,
        converged=converged,
        n_iter=n_iter,
        log_likelihoods=np.asarray(lls),
        fisher_ridged=ridged,
    )


def _inverse_observed_information(
    log_p: np.ndarray, lam: np.ndarray
) -> tuple[np.ndarray, bool]:
    """Inverse of the observed information of the reduced log-likelihood.

    With q_t the mixture density and d_t the vector of component-density
    differences against state m, the Hessian of the log-likelihood in the
    reduced weights is -sum_t d_t d_t' / q_t**2, so the observed information
    is the corresponding Gram matrix.  A per-row rescaling cancels between
    d_t and q_t, which keeps the ratios finite even when raw densities
    overflow.
    """
    m = lam.size
    if m == 1:
        return np.zeros((0, 0)), False
    shift = log_p.max(axis=1, keepdims=True)
    p = np.exp(log_p - shift)
    q = p @ lam
    ratio = (p[:, :-1] - p[:, -1:]) / q[:, None]
    info = ratio.T @ ratio

    eigs = np.linalg.eigvalsh(info)
    ridged = False
    if eigs[0] <= 1e-12 * max(1.0, eigs[-1]):
        info = info + FISHER_RIDGE * np.eye(m - 1)
        ridged = True
    phi = np.linalg.inv(info)
    return 0.5 * (phi + phi.T), ridged


def mixture_to_dict(model: MixtureModel, w: MixtureWeights) -> dict:
    """JSON-ready document: {"components": [{"mu": ..., "sigma": ...}], "weights": ...}."""
    _check_weights(model, w)
    return {
        "components": [
            {"mu": comp.mu.tolist(), "sigma": comp.sigma.tolist()}
            for comp in model.components
        ],
        "weights": w.lambda_full.tolist(),
    }


def mixture_from_dict(doc: dict) -> tuple[MixtureModel, MixtureWeights]:
    """Inverse of :func:`mixture_to_dict`."""
    components = tuple(
        GaussianComponent(np.asarray(c["mu"], dtype=float), np.asarray(c["sigma"], dtype=float))
        for c in doc["components"]
    )
    model = MixtureModel(components)
    weights = MixtureWeights(np.asarray(doc["weights"], dtype=float))
    _check_weights(model, weights)
    return model, weights

"""Weight estimation from history, from the market portfolio, or both.

Three problems over the feasible set of reduced weights
Gamma = {v >= 0, sum(v) <= 1}:

* backward: minimize the prior quadratic
  F1(v) = (v - v_hat)' Phi^{-1} (v - v_hat),
* forward: minimize the market-fit quadratic
  F2(v) = || x_M/a_N - (a_U/a_N) x_U* - (a_I/a_N) g(v) ||^2 weighted by the
  inverse noise covariance, with g the informed investor's holding map,
* combined: minimize F1 + F2, the posterior mode under a Gaussian prior
  and Gaussian noise.

F2 is nonlinear in the weights because the mixture covariance depends on
them, so the forward and combined problems are solved by projected
gradient with Armijo backtracking from multiple starts.  When the return
covariance is a known fixed matrix the observation map becomes linear and
the combined problem is a convex QP solved exactly in closed form.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .equilibrium import EquilibriumObservation
from .gmm import MixtureModel, MixtureWeights, PriorSpec, mixture_moments
from .simplex import in_capped_simplex, project_capped_simplex

MODES = ("backward", "forward", "combined")

#: Stop when the projected-gradient step moves by less than this (inf norm).
PG_TOL = 1e-8
PG_MAX_ITER = 2000
_PHASE1_ITER = 300
_PLATEAU_PATIENCE = 75
ARMIJO_C = 1e-4

#: Objectives closer than this are considered tied across starts.
TIE_TOL = 1e-12

#: A constraint is reported active when its residual is within this.
ACTIVE_TOL = 1e-9

#: Mixture covariances worse conditioned than this get a diagonal ridge.
RIDGE_COND = 1e12
RIDGE_SCALE = 1e-10


@dataclass(frozen=True)
class EstimationProblem:
    """One estimation instance: model, prior, observation, and which problem.

    ``fixed_sigma`` switches on the homogeneous-covariance special case in
    which the informed holding is (delta_I * fixed_sigma)^{-1} mu(lambda)
    with a weight-independent covariance; the forward map is then linear in
    the reduced weights.
    """

    model: MixtureModel
    prior: PriorSpec
    observation: EquilibriumObservation
    mode: str
    fixed_sigma: np.ndarray | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.prior.dim != self.model.m - 1:
            raise ValueError(
                f"prior has dimension {self.prior.dim}, model needs {self.model.m - 1}"
            )
        if self.observation.params.n != self.model.n:
            raise ValueError("observation and model disagree on the number of assets")
        if self.fixed_sigma is not None:
            sigma = np.asarray(self.fixed_sigma, dtype=float)
            if sigma.shape != (self.model.n, self.model.n):
                raise ValueError("fixed_sigma must be n x n")
            if np.linalg.eigvalsh(0.5 * (sigma + sigma.T))[0] <= 0.0:
                raise ValueError("fixed_sigma must be positive definite")
            object.__setattr__(self, "fixed_sigma", 0.5 * (sigma + sigma.T))


@dataclass(frozen=True)
class EstimationResult:
    """Solver output: weights on the full simplex plus diagnostics.

    ``active_constraints`` indexes rows of the constraint system
    G v <= h with G = [1'; -I]: row 0 is the sum constraint, row i >= 1 the
    nonnegativity of weight i-1.  ``multipliers`` carries the KKT
    multipliers when the closed-form QP path produced them.
    """

    mode: str
    weights: MixtureWeights
    objective_value: float
    converged: bool
    active_constraints: tuple[int, ...]
    multipliers: np.ndarray | None = None
    ridge_applied: bool = False


@dataclass(frozen=True)
class LinearCase:
    """Linearized observation x_M = q0 + P v + noise for the fixed-covariance
    market, together with the constraint system G v <= h."""

    q0: np.ndarray
    P: np.ndarray
    G: np.ndarray
    h: np.ndarray

    def __post_init__(self):
        q0 = np.asarray(self.q0, dtype=float)
        P = np.asarray(self.P, dtype=float)
        if P.shape[0] != q0.size:
            raise ValueError("P and q0 disagree on the number of assets")
        m = P.shape[1] + 1
        G_ref, h_ref = linear_constraints(m)
        if not (np.array_equal(self.G, G_ref) and np.array_equal(self.h, h_ref)):
            raise ValueError("G must equal [1'; -I] and h must equal (1, 0, ..., 0)")
        object.__setattr__(self, "q0", q0)
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "G", G_ref)
        object.__setattr__(self, "h", h_ref)

    @property
    def m(self) -> int:
        return self.P.shape[1] + 1


def linear_constraints(m: int) -> tuple[np.ndarray, np.ndarray]:
    """Constraint system of the reduced-weight feasible set: G v <= h."""
    d = m - 1
    G = np.vstack([np.ones((1, d)), -np.eye(d)])
    h = np.zeros(m)
    h[0] = 1.0
    return G, h


class _Objective:
    """Value / gradient of F1, F2, and their sum at a reduced weight vector.

    Precomputes everything that does not depend on the weights.  ``ridged``
    latches to True if any evaluation had to regularize the mixture
    covariance.
    """

    def __init__(self, problem: EstimationProblem):
        model = problem.model
        obs = problem.observation
        p = obs.params
        self.mode = problem.mode
        self.means = model.means
        self.covs = model.covs
        self.covs_flat = model.covs.reshape(model.m, -1)
        self.m = model.m
        self.n = model.n
        self.delta_I = p.delta_I
        self.a_I = p.alpha_I
        # residual base: x_M - a_U x_U*; F2 compares it against a_I g(v)
        self.base = obs.x_M - p.alpha_U * obs.x_U_star
        self.omega_inv_diag = 1.0 / (p.alpha_N * p.sigma_noise) ** 2
        self.lam_hat = problem.prior.lambda_hat_minus
        self.phi_chol = (
            cho_factor(problem.prior.phi) if problem.prior.dim > 0 else None
        )
        self.ridged = False
        if problem.fixed_sigma is not None:
            self.fixed_chol = cho_factor(self.delta_I * problem.fixed_sigma)
            # constant Jacobian of g: columns (delta Sigma)^{-1} (mu_i - mu_m)
            mdiff = (self.means[:-1] - self.means[-1]).T
            self.fixed_jac = cho_solve(self.fixed_chol, mdiff) if self.m > 1 else None
        else:
            self.fixed_chol = None
            self.fixed_jac = None

    # -- F1 -----------------------------------------------------------------

    def f1_value_grad(self, v: np.ndarray) -> tuple[float, np.ndarray]:
        if self.phi_chol is None:
            return 0.0, np.zeros(0)
        d = v - self.lam_hat
        z = cho_solve(self.phi_chol, d)
        return float(d @ z), 2.0 * z

    # -- F2 -----------------------------------------------------------------

    def _mixture_sigma_factor(self, lam_full: np.ndarray):
        """Cholesky factor of the mixture covariance at the full weights,
        ridged when nearly singular.  Returns (factor, mu, centered).

        The condition number is screened by the squared ratio of extreme
        Cholesky diagonal entries, a cheap lower bound; the exact
        eigenvalue ratio is only computed when the screen comes within two
        orders of magnitude of the ridge threshold.
        """
        mu = lam_full @ self.means
        centered = self.means - mu
        sigma = (lam_full @ self.covs_flat).reshape(self.n, self.n) + centered.T @ (
            lam_full[:, None] * centered
        )
        factor = None
        try:
            factor = cho_factor(sigma, check_finite=False)
        except np.linalg.LinAlgError:
            pass
        if factor is not None:
            diag = np.abs(np.diagonal(factor[0]))
            if (diag.max() / diag.min()) ** 2 > RIDGE_COND * 1e-2:
                evals = np.linalg.eigvalsh(sigma)
                if evals[0] <= 0.0 or evals[-1] > RIDGE_COND * evals[0]:
                    factor = None
        if factor is None:
            self.ridged = True
            ridge = RIDGE_SCALE * np.trace(sigma) / self.n
            sigma = sigma + ridge * np.eye(self.n)
            try:
                factor = cho_factor(sigma, check_finite=False)
            except np.linalg.LinAlgError:
                return None, mu, centered
        return factor, mu, centered

    def f2_value(self, v: np.ndarray) -> float:
        return self._f2(v, with_grad=False)[0]

    def f2_value_grad(self, v: np.ndarray) -> tuple[float, np.ndarray]:
        return self._f2(v, with_grad=True)

    def _f2(self, v, with_grad: bool):
        lam_full = np.append(v, 1.0 - v.sum())
        if self.fixed_chol is not None:
            mu = lam_full @ self.means
            g = cho_solve(self.fixed_chol, mu)
            resid = self.base - self.a_I * g
            f2 = float(resid @ (self.omega_inv_diag * resid))
            if not with_grad:
                return f2, None
            if self.m == 1:
                return f2, np.zeros(0)
            grad = -2.0 * self.a_I * (
                self.fixed_jac.T @ (self.omega_inv_diag * resid)
            )
            return f2, grad

        factor, mu, centered = self._mixture_sigma_factor(lam_full)
        if factor is None:
            return float("inf"), np.zeros(self.m - 1)
        u = cho_solve(factor, mu, check_finite=False)  # Sigma^{-1} mu
        g = u / self.delta_I
        resid = self.base - self.a_I * g
        f2 = float(resid @ (self.omega_inv_diag * resid))
        if not with_grad:
            return f2, None
        if self.m == 1:
            return f2, np.zeros(0)
        cov_u = self.covs @ u
        s = centered @ u
        # d(Sigma)/dv_i applied to u, stacked over i
        dsig_u = (
            (cov_u[:-1] - cov_u[-1])
            + centered[:-1] * s[:-1, None]
            - centered[-1] * s[-1]
        )
        tangent = (self.means[:-1] - self.means[-1]) - dsig_u  # (m-1, n)
        jac = cho_solve(factor, tangent.T, check_finite=False) / self.delta_I
        grad = -2.0 * self.a_I * (jac.T @ (self.omega_inv_diag * resid))
        return f2, grad

    # -- combined dispatch ----------------------------------------------------

    def value(self, v: np.ndarray) -> float:
        total = 0.0
        if self.mode in ("backward", "combined"):
            total += self.f1_value_grad(v)[0]
        if self.mode in ("forward", "combined"):
            total += self.f2_value(v)
        return total

    def value_grad(self, v: np.ndarray) -> tuple[float, np.ndarray]:
        f = 0.0
        g = np.zeros(v.size)
        if self.mode in ("backward", "combined"):
            f1, g1 = self.f1_value_grad(v)
            f += f1
            g = g + g1
        if self.mode in ("forward", "combined"):
            f2, g2 = self.f2_value_grad(v)
            f += f2
            g = g + g2
        return f, g


def eval_F1(prior: PriorSpec, lambda_minus) -> float:
    """Prior quadratic (v - v_hat)' Phi^{-1} (v - v_hat)."""
    v = np.asarray(lambda_minus, dtype=float)
    if v.size != prior.dim:
        raise ValueError(f"lambda_minus must have {prior.dim} entries")
    if prior.dim == 0:
        return 0.0
    d = v - prior.lambda_hat_minus
    return float(d @ cho_solve(cho_factor(prior.phi), d))


def eval_F2(problem: EstimationProblem, lambda_minus) -> float:
    """Market-fit quadratic at the reduced weights.

    Returns ``inf`` when the mixture covariance at the point is singular
    beyond repair by the ridge guard.
    """
    v = np.asarray(lambda_minus, dtype=float)
    if v.size != problem.model.m - 1:
        raise ValueError(f"lambda_minus must have {problem.model.m - 1} entries")
    return _Objective(problem).f2_value(v)


def gradient(problem: EstimationProblem, lambda_minus) -> np.ndarray:
    """Analytic gradient of the problem's objective at the reduced weights."""
    v = np.asarray(lambda_minus, dtype=float)
    return _Objective(problem).value_grad(v)[1]


def _pg_minimize(obj: _Objective, x0: np.ndarray, *, tol: float = PG_TOL,
                 max_iter: int = PG_MAX_ITER, incumbent: float = np.inf):
    """Projected gradient with Armijo backtracking on the capped simplex.

    The initial trial step is Barzilai-Borwein when curvature information
    is available.  Iteration also stops when the projected-gradient gap
    has plateaued (badly scaled objectives can exhaust float64 before the
    gradient test is met), or when the start has had a fair budget and
    still trails ``incumbent`` (the best objective another start already
    reached) by a clear margin.  The best iterate is returned either way.
    Returns (x, f, converged).
    """
    x = project_capped_simplex(np.asarray(x0, dtype=float))
    f, g = obj.value_grad(x)
    best_x, best_f = x, f
    x_prev = g_prev = None
    converged = False
    min_gap = np.inf
    plateau = 0
    for it in range(max_iter):
        gap = np.abs(x - project_capped_simplex(x - g)).max()
        if gap < tol:
            converged = True
            break
        if gap < 0.99 * min_gap:
            min_gap = gap
            plateau = 0
        else:
            plateau += 1
        if plateau >= _PLATEAU_PATIENCE:
            break
        if it >= _PHASE1_ITER and f > incumbent * (1.0 + 1e-6) + 1e-9:
            break
        if x_prev is not None:
            s = x - x_prev
            y = g - g_prev
            sy = float(s @ y)
            yy = float(y @ y)
            # alternate the two Barzilai-Borwein step lengths; the pair
            # handles ill-conditioned objectives far better than either alone
            if sy > 1e-30:
                t = (s @ s) / sy if it % 2 == 0 else sy / yy if yy > 1e-30 else 1.0
            else:
                t = 1.0
        else:
            gmax = float(np.abs(g).max())
            t = 1.0 / gmax if gmax > 1.0 else 1.0
        t = float(min(max(t, 1e-12), 1e12))
        accepted = False
        for _ in range(60):
            x_new = project_capped_simplex(x - t * g)
            dx = x_new - x
            if np.abs(dx).max() <= 1e-18:
                break
            f_new = obj.value(x_new)
            if f_new <= f + ARMIJO_C * float(g @ dx):
                accepted = True
                break
            t *= 0.5
        if not accepted:
            break
        x_prev, g_prev = x, g
        x = x_new
        f, g = obj.value_grad(x)
        if f < best_f:
            best_x, best_f = x, f
    return best_x, best_f, converged


def _starting_points(prior: PriorSpec, m: int) -> list[np.ndarray]:
    """Multi-start seeds: projected prior mean, uniform weights, and every
    vertex of the feasible set."""
    d = m - 1
    starts = [
        project_capped_simplex(prior.lambda_hat_minus),
        np.full(d, 1.0 / m),
        np.zeros(d),
    ]
    starts.extend(np.eye(d))
    unique: list[np.ndarray] = []
    for s in starts:
        if not any(np.abs(s - u).max() < 1e-12 for u in unique):
            unique.append(s)
    return unique


def _active_set(v: np.ndarray) -> tuple[int, ...]:
    active = []
    if v.size and v.sum() >= 1.0 - ACTIVE_TOL:
        active.append(0)
    active.extend(i + 1 for i in range(v.size) if v[i] <= ACTIVE_TOL)
    return tuple(active)


def _degenerate_result(problem: EstimationProblem) -> EstimationResult:
    # m == 1: no free weights, the objective is a constant
    obj = _Objective(problem)
    empty = np.zeros(0)
    return EstimationResult(
        mode=problem.mode,
        weights=MixtureWeights(np.ones(1)),
        objective_value=obj.value(empty),
        converged=True,
        active_constraints=(),
        ridge_applied=obj.ridged,
    )


def solve_backward(problem: EstimationProblem) -> EstimationResult:
    """Projection of the prior mean onto the feasible set in the Phi^{-1}
    metric; returns the prior mean itself whenever it is already feasible."""
    if problem.mode != "backward":
        raise ValueError("problem mode must be 'backward'")
    if problem.model.m == 1:
        return _degenerate_result(problem)
    lam_hat = problem.prior.lambda_hat_minus
    if in_capped_simplex(lam_hat):
        weights = MixtureWeights.from_reduced(lam_hat)
        return EstimationResult(
            mode="backward",
            weights=weights,
            objective_value=0.0,
            converged=True,
            active_constraints=_active_set(weights.lambda_minus),
        )
    obj = _Objective(problem)
    x, f, converged = _pg_minimize(obj, project_capped_simplex(lam_hat))
    weights = MixtureWeights.from_reduced(x)
    return EstimationResult(
        mode="backward",
        weights=weights,
        objective_value=obj.value(weights.lambda_minus),
        converged=converged,
        active_constraints=_active_set(weights.lambda_minus),
    )


def solve_forward(problem: EstimationProblem, extra_starts=()) -> EstimationResult:
    """Best market-fit weights by multi-start projected gradient.

    ``extra_starts`` augments the standard start set, for instance with the
    solution of a neighboring problem.
    """
    if problem.mode != "forward":
        raise ValueError("problem mode must be 'forward'")
    return _solve_nonlinear(problem, extra_starts)


def solve_combined(problem: EstimationProblem, extra_starts=()) -> EstimationResult:
    """Posterior-mode weights (prior plus market fit) by multi-start
    projected gradient."""
    if problem.mode != "combined":
        raise ValueError("problem mode must be 'combined'")
    return _solve_nonlinear(problem, extra_starts)


def _solve_nonlinear(problem: EstimationProblem, extra_starts=()) -> EstimationResult:
    if problem.model.m == 1:
        return _degenerate_result(problem)
    obj = _Objective(problem)
    starts = [np.asarray(s, dtype=float) for s in extra_starts]
    starts += _starting_points(problem.prior, problem.model.m)
    # two-phase multi-start: a modest budget for every start locates the
    # basins, then only the best basin (and exact ties) spends the rest of
    # the iteration budget on refinement
    phase1 = [
        _pg_minimize(obj, x0, max_iter=_PHASE1_ITER) for x0 in starts
    ]
    incumbent = min(f for _, f, _ in phase1)
    margin = incumbent * (1.0 + 1e-6) + 1e-9
    candidates = []
    for x, f, converged in phase1:
        if not converged and f <= margin:
            x, f, converged = _pg_minimize(
                obj, x, max_iter=PG_MAX_ITER - _PHASE1_ITER
            )
        candidates.append((f, x, converged))
    best_f = min(c[0] for c in candidates)
    pool = [c for c in candidates if c[0] <= best_f + TIE_TOL]
    lam_hat = problem.prior.lambda_hat_minus
    _, x_best, converged = min(
        pool, key=lambda c: float(np.linalg.norm(c[1] - lam_hat))
    )
    weights = MixtureWeights.from_reduced(x_best)
    return EstimationResult(
        mode=problem.mode,
        weights=weights,
        objective_value=obj.value(weights.lambda_minus),
        converged=converged,
        active_constraints=_active_set(weights.lambda_minus),
        ridge_applied=obj.ridged,
    )


def make_linear_case(
    model: MixtureModel, params, x_U_star, sigma
) -> LinearCase:
    """Build the linear observation map for a market where both rational
    investors price with the same fixed covariance and risk aversion.

    q0 = a_U x_U* + a_I (delta Sigma)^{-1} mu_m and column i of P is
    a_I (delta Sigma)^{-1} (mu_i - mu_m).
    """
    if abs(params.delta_I - params.delta_U) > 1e-12 * max(1.0, params.delta_I):
        raise ValueError("the linear case requires delta_I == delta_U")
    sigma = np.asarray(sigma, dtype=float)
    x_U_star = np.asarray(x_U_star, dtype=float)
    chol = cho_factor(params.delta_I * sigma)
    q0 = params.alpha_U * x_U_star + params.alpha_I * cho_solve(
        chol, model.means[-1]
    )
    if model.m > 1:
        P = params.alpha_I * cho_solve(chol, (model.means[:-1] - model.means[-1]).T)
    else:
        P = np.zeros((model.n, 0))
    G, h = linear_constraints(model.m)
    return LinearCase(q0=q0, P=P, G=G, h=h)


def solve_combined_linear(
    linear_case: LinearCase, prior: PriorSpec, x_M, omega
) -> EstimationResult:
    """Exact combined estimate for the linear observation map.

    The problem is the convex QP  min ||v - L^{-1}k||^2_L  over G v <= h
    with L = Phi^{-1} + P' Omega^{-1} P and
    k = Phi^{-1} v_hat + P' Omega^{-1} (x_M - q0).  If the unconstrained
    minimizer L^{-1}k is feasible it is returned with zero multipliers;
    otherwise the KKT system is solved exactly over active sets (every
    subset of at most m-1 constraint rows has full rank, so enumeration is
    exact; it is intended for small numbers of mixture states).
    """
    x_M = np.asarray(x_M, dtype=float)
    omega = np.asarray(omega, dtype=float)
    m = linear_case.m
    if prior.dim != m - 1:
        raise ValueError("prior dimension does not match the linear case")
    big_lambda, kappa = _linear_normal_equations(linear_case, prior, x_M, omega)
    center = np.linalg.solve(big_lambda, kappa)

    if in_capped_simplex(center, tol=1e-12):
        v = project_capped_simplex(center)
        nu = np.zeros(m)
    else:
        v = nu = None
        G, h = linear_case.G, linear_case.h
        for size in range(1, m):
            for subset in combinations(range(m), size):
                rows = list(subset)
                G_s = G[rows]
                kkt = np.block(
                    [
                        [2.0 * big_lambda, G_s.T],
                        [G_s, np.zeros((size, size))],
                    ]
                )
                rhs = np.concatenate([2.0 * kappa, h[rows]])
                try:
                    sol = np.linalg.solve(kkt, rhs)
                except np.linalg.LinAlgError:
                    continue
                cand, nu_s = sol[: m - 1], sol[m - 1 :]
                if (G @ cand - h).max() > 1e-9 or nu_s.min() < -1e-9:
                    continue
                v = project_capped_simplex(cand)
                nu = np.zeros(m)
                nu[rows] = np.clip(nu_s, 0.0, None)
                break
            if v is not None:
                break
        if v is None:  # unreachable for PD big_lambda; guards numerics
            raise np.linalg.LinAlgError("no KKT point found in the linear QP")

    weights = MixtureWeights.from_reduced(v)
    resid = x_M - linear_case.q0 - linear_case.P @ weights.lambda_minus
    objective = eval_F1(prior, weights.lambda_minus) + float(
        resid @ np.linalg.solve(omega, resid)
    )
    return EstimationResult(
        mode="combined",
        weights=weights,
        objective_value=objective,
        converged=True,
        active_constraints=_active_set(weights.lambda_minus),
        multipliers=nu,
    )


def posterior_linear(
    linear_case: LinearCase, prior: PriorSpec, x_M, omega
) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian posterior of the reduced weights for the linear case.

    mean = (Phi^{-1} + P'Omega^{-1}P)^{-1} (Phi^{-1} v_hat + P'Omega^{-1}(x_M - q0))
    and covariance (Phi^{-1} + P'Omega^{-1}P)^{-1}.
    """
    x_M = np.asarray(x_M, dtype=float)
    omega = np.asarray(omega, dtype=float)
    big_lambda, kappa = _linear_normal_equations(linear_case, prior, x_M, omega)
    mean = np.linalg.solve(big_lambda, kappa)
    cov = np.linalg.inv(big_lambda)
    return mean, 0.5 * (cov + cov.T)


def _linear_normal_equations(linear_case, prior, x_M, omega):
    phi_inv = np.linalg.inv(prior.phi)
    phi_inv = 0.5 * (phi_inv + phi_inv.T)
    omega_chol = cho_factor(omega)
    oinv_P = cho_solve(omega_chol, linear_case.P)
    big_lambda = phi_inv + linear_case.P.T @ oinv_P
    kappa = phi_inv @ prior.lambda_hat_minus + linear_case.P.T @ cho_solve(
        omega_chol, x_M - linear_case.q0
    )
    return 0.5 * (big_lambda + big_lambda.T), kappa


def estimate_moments(
    model: MixtureModel, result: EstimationResult
) -> tuple[np.ndarray, np.ndarray]:
    """Mean and covariance of returns implied by the estimated weights."""
    return mixture_moments(model, result.weights)


def result_to_dict(result: EstimationResult) -> dict:
    """JSON-ready document with fields mode, lambda, objective, converged,
    active_set."""
    return {
        "mode": result.mode,
        "lambda": result.weights.lambda_full.tolist(),
        "objective": result.objective_value,
        "converged": result.converged,
        "active_set": list(result.active_constraints),
    }

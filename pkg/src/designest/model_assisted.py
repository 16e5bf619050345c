"""Model-assisted regression estimators built on the imputed-plus-correction
form: impute every potential outcome from a fitted parametric model, then
add the inverse-probability-weighted residual of the observed cells.

Four parameter-selection strategies are provided: pseudo-likelihood
(fit_qmle / qmle_gr), a rescaled pseudo-likelihood that can never do worse
asymptotically than the unadjusted estimator (no_harm_gr), direct
minimization of the implied asymptotic variance (opt_gr_linear /
opt_gr_logit), and a single-imputed-covariate linear layer (opt_i_gr).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .bounds import VarianceBound
from .linear import (
    EstimateReport,
    ExperimentData,
    _pinv_flagged,
    intercept_matrix,
    normal_ci,
    plugin_varbound,
)

EIG_WARN_RATIO = 1e-8
NOHARM_DENOM_TOL = 1e-6
OMEGA_NORM_TOL = 1e-12


class WeakIdentificationError(ValueError):
    """The rescaling denominator is too close to zero to be usable."""


class OptimizationError(RuntimeError):
    """No interior solution found within the restart budget."""


@dataclass(frozen=True)
class ImputationModel:
    """Parametric imputation family with arm intercepts.

    theta layout: k arm intercepts followed by the slope block (one shared
    p-vector for same_slope, k stacked p-vectors for separate_slope).
    """

    family: str  # "linear" | "logistic"
    k: int
    p: int
    slope_sharing: str = "same_slope"

    def __post_init__(self):
        if self.family not in ("linear", "logistic"):
            raise ValueError("family must be linear or logistic")
        if self.slope_sharing not in ("same_slope", "separate_slope"):
            raise ValueError("slope_sharing must be same_slope or separate_slope")

    @property
    def s(self) -> int:
        """Number of parameters."""
        if self.slope_sharing == "same_slope":
            return self.k + self.p
        return self.k + self.k * self.p

    def design_rows(self, X: np.ndarray) -> np.ndarray:
        """kn x s matrix of linear-predictor rows in arm-major cell order."""
        n = X.shape[0]
        ones = intercept_matrix(n, self.k)
        if self.p == 0:
            return ones
        if self.slope_sharing == "same_slope":
            return np.hstack([ones, np.tile(X, (self.k, 1))])
        blocks = np.zeros((self.k * n, self.k * self.p))
        for a in range(self.k):
            blocks[a * n : (a + 1) * n, a * self.p : (a + 1) * self.p] = X
        return np.hstack([ones, blocks])

    def predict(self, theta: np.ndarray, X: np.ndarray) -> np.ndarray:
        eta = self.design_rows(X) @ np.asarray(theta, dtype=float)
        if self.family == "linear":
            return eta
        return expit(eta)

    def grad(self, theta: np.ndarray, X: np.ndarray) -> np.ndarray:
        """kn x s matrix of per-cell prediction gradients."""
        rows = self.design_rows(X)
        if self.family == "linear":
            return rows.copy()
        f = expit(rows @ np.asarray(theta, dtype=float))
        return rows * (f * (1.0 - f))[:, None]

    def hess_factor(self, theta: np.ndarray, X: np.ndarray) -> np.ndarray:
        """Per-cell scalar h with prediction Hessian h * row row'."""
        if self.family == "linear":
            return np.zeros(self.k * X.shape[0])
        f = expit(self.design_rows(X) @ np.asarray(theta, dtype=float))
        return f * (1.0 - f) * (1.0 - 2.0 * f)


@dataclass
class OptimizerConfig:
    """Gradient-descent recipe for the logit variance-minimizing fit."""

    step: float = 0.1  # line-search acceptance fraction
    backtrack: float = 0.5
    grad_tol: float = 0.01
    box_half_width: float = 10.0
    box_expand: float = 0.2  # total widening per failed restart
    restarts: int = 10
    restart_sd: float = 0.1
    max_steps: int = 2000

    def __post_init__(self):
        if self.step <= 0:
            raise ValueError("step must be positive")
        if not 0 < self.backtrack < 1:
            raise ValueError("backtrack must lie in (0, 1)")
        if self.grad_tol <= 0:
            raise ValueError("grad_tol must be positive")


def _omega_weights(data: ExperimentData, omega) -> np.ndarray:
    kn = data.n * data.k
    if omega is None or (isinstance(omega, str) and omega == "pi"):
        return data.moments.pi.copy()
    if isinstance(omega, str):
        if omega != "ones":
            raise ValueError(f"unknown omega spec {omega!r}")
        return np.ones(kn)
    omega = np.asarray(omega, dtype=float)
    if omega.shape != (kn,):
        raise ValueError("omega must be a kn vector")
    if np.any(omega <= 0):
        raise ValueError("omega weights must be positive")
    return omega


def fit_qmle(
    model: ImputationModel,
    data: ExperimentData,
    omega="pi",
    max_iter: int = 500,
    tol: float = 1e-10,
    coef_cap: float = 10.0,
):
    """Minimize the inverse-probability-weighted sample loss.

    Squared loss has the weighted-least-squares closed form; the logistic
    likelihood is solved by Newton-Raphson with step halving. Observed cell
    i enters with weight omega / pi at its realized cell.
    """
    cells = data.observed_cells
    pi_obs = data.moments.pi[cells]
    if np.any(pi_obs <= 0):
        raise ValueError("observed cell with zero inclusion probability")
    w = _omega_weights(data, omega)[cells] / pi_obs
    rows = model.design_rows(data.X)[cells]
    y = data.y_obs

    if model.family == "linear":
        a = rows.T @ (rows * w[:, None])
        a_inv, deficient = _pinv_flagged(a)
        if deficient:
            warnings.warn("rank-deficient QMLE design matrix; pseudoinverse used", RuntimeWarning)
        return a_inv @ (rows.T @ (w * y))

    theta = np.zeros(model.s)

    def negloglik(th):
        eta = rows @ th
        return -float(np.sum(w * (y * eta - np.logaddexp(0.0, eta))))

    value = negloglik(theta)
    for _ in range(max_iter):
        eta = rows @ theta
        f = expit(eta)
        grad = rows.T @ (w * (y - f))  # likelihood gradient (maximize)
        if np.linalg.norm(grad) < tol * max(1.0, abs(value)):
            break
        hess = rows.T @ (rows * (w * f * (1.0 - f))[:, None])
        h_inv, deficient = _pinv_flagged(hess)
        step = h_inv @ grad
        t = 1.0
        for _ in range(50):  # step halving
            candidate = theta + t * step
            new_value = negloglik(candidate)
            if new_value <= value:
                break
            t *= 0.5
        theta = theta + t * step
        value = negloglik(theta)
    else:
        warnings.warn("logistic QMLE hit the iteration cap", RuntimeWarning)
    if np.any(np.abs(theta) >= coef_cap):
        warnings.warn(
            "logistic QMLE coefficients at the box boundary; possible separation",
            RuntimeWarning,
        )
    return theta


def gr_point_estimate(f: np.ndarray, data: ExperimentData) -> np.ndarray:
    """Imputation mean plus inverse-probability-weighted residual, per arm."""
    n, k = data.n, data.k
    cells = data.observed_cells
    arms = data.assignment.arm_of
    pi_obs = data.moments.pi[cells]
    impute = f.reshape(k, n).mean(axis=1)
    correction = (
        np.bincount(arms, weights=(data.y_obs - f[cells]) / pi_obs, minlength=k) / n
    )
    return impute + correction


def _contrast_weights(data: ExperimentData, c: np.ndarray) -> np.ndarray:
    return np.repeat(np.asarray(c, dtype=float), data.n)


def _ipw_observed(data: ExperimentData) -> np.ndarray:
    """kn vector of y/pi at observed cells, zero elsewhere."""
    out = np.zeros(data.n * data.k)
    cells = data.observed_cells
    out[cells] = data.y_obs / data.moments.pi[cells]
    return out


def _gr_report(
    estimator: str,
    f: np.ndarray,
    data: ExperimentData,
    c: np.ndarray,
    bound: VarianceBound | None,
    level: float,
    diagnostics: dict,
) -> EstimateReport:
    c = np.asarray(c, dtype=float)
    mu = gr_point_estimate(f, data)
    value = float(c @ mu)
    diagnostics = dict(diagnostics)
    diagnostics["mu_hat"] = mu.tolist()
    if bound is None:
        return EstimateReport(
            estimator=estimator,
            contrast=c.tolist(),
            contrast_value=value,
            varbound_times_n=np.nan,
            varbound_raw=np.nan,
            ci_low=np.nan,
            ci_high=np.nan,
            level=level,
            diagnostics=diagnostics,
        )
    z_hat = intercept_matrix(data.n, data.k) * (data.y_stacked_observed() - f)[:, None]
    plugin = plugin_varbound(z_hat, data.assignment, bound, c)
    lo, hi = normal_ci(value, plugin.times_n, data.n, level) if plugin.raw >= 0 else (np.nan, np.nan)
    diagnostics["negative_bound"] = plugin.negative
    return EstimateReport(
        estimator=estimator,
        contrast=c.tolist(),
        contrast_value=value,
        varbound_times_n=plugin.times_n,
        varbound_raw=plugin.raw,
        ci_low=lo,
        ci_high=hi,
        level=level,
        diagnostics=diagnostics,
    )


def qmle_gr(
    theta_hat: np.ndarray,
    model: ImputationModel,
    data: ExperimentData,
    c,
    bound: VarianceBound | None = None,
    level: float = 0.95,
) -> EstimateReport:
    """Imputation-plus-correction estimate at the pseudo-likelihood fit."""
    f = model.predict(theta_hat, data.X)
    return _gr_report(
        "qmle_gr_" + model.family,
        f,
        data,
        c,
        bound,
        level,
        {"theta": np.asarray(theta_hat, dtype=float).tolist()},
    )


def no_harm_alpha(
    theta_hat: np.ndarray,
    model: ImputationModel,
    data: ExperimentData,
    D: np.ndarray,
    c,
) -> float:
    """Feasible multiplicative rescaling of the imputations.

    Ratio of the weighted cross form between observed outcomes and
    imputations to the imputation quadratic form; errors out when the
    denominator is too small for the rescaling to be identified.
    """
    f = model.predict(theta_hat, data.X)
    w = _contrast_weights(data, np.asarray(c, dtype=float))
    wf = w * f
    denominator = float(wf @ D @ wf)
    if abs(denominator) / data.n < NOHARM_DENOM_TOL:
        raise WeakIdentificationError(
            "imputation quadratic form is near zero; the rescaled estimator is "
            "weakly identified and not recommended here"
        )
    numerator = float((w * _ipw_observed(data)) @ D @ wf)
    return numerator / denominator


def population_no_harm_alpha(f: np.ndarray, y_full: np.ndarray, D: np.ndarray, c, n: int) -> float:
    """Oracle rescaling constant from the full potential-outcome vector."""
    w = np.repeat(np.asarray(c, dtype=float), n)
    wf = w * f
    denominator = float(wf @ D @ wf)
    if abs(denominator) / n < NOHARM_DENOM_TOL:
        raise WeakIdentificationError("population rescaling denominator near zero")
    return float((w * y_full) @ D @ wf) / denominator


def no_harm_gr(
    theta_hat: np.ndarray,
    model: ImputationModel,
    data: ExperimentData,
    D: np.ndarray,
    c,
    bound: VarianceBound | None = None,
    level: float = 0.95,
) -> EstimateReport:
    alpha = no_harm_alpha(theta_hat, model, data, D, c)
    f = alpha * model.predict(theta_hat, data.X)
    return _gr_report("no_harm_" + model.family, f, data, c, bound, level, {"alpha": alpha})


def _check_omega(Omega: np.ndarray, kn: int):
    Omega = np.asarray(Omega, dtype=float)
    if Omega.shape != (kn, kn):
        raise ValueError("Omega must be kn x kn")
    if np.abs(Omega).max() < OMEGA_NORM_TOL:
        raise ValueError("Omega is numerically zero; criterion is degenerate")
    return Omega


def _inspect_eigenvalues(A: np.ndarray, label: str) -> bool:
    eigs = np.linalg.eigvalsh(A)
    top = max(eigs.max(), 0.0)
    flagged = bool(top <= 0 or eigs.min() < EIG_WARN_RATIO * top)
    if flagged:
        warnings.warn(
            f"{label} has near-zero eigenvalues; coefficients in the flat "
            "directions are not identified (pseudoinverse used)",
            RuntimeWarning,
        )
    return flagged


def opt_gr_linear(
    data: ExperimentData,
    Omega: np.ndarray,
    c,
    model: ImputationModel | None = None,
    bound: VarianceBound | None = None,
    level: float = 0.95,
) -> EstimateReport:
    """Variance-minimizing linear imputations, closed form.

    The coefficient solves the contrast-weighted normal equations in Omega,
    with the unobservable outcome side replaced by its inverse-probability
    weighted sample analog.
    """
    c = np.asarray(c, dtype=float)
    Omega = _check_omega(Omega, data.n * data.k)
    if model is None:
        model = ImputationModel("linear", data.k, data.p)
    if model.family != "linear":
        raise ValueError("opt_gr_linear needs a linear imputation model")
    rows = model.design_rows(data.X)
    w = _contrast_weights(data, c)
    xt = rows * w[:, None]
    gram = xt.T @ Omega @ xt
    flagged = _inspect_eigenvalues(gram / data.n, "contrast-weighted design form")
    gram_inv, deficient = _pinv_flagged(gram)
    beta = gram_inv @ (xt.T @ (Omega @ (w * _ipw_observed(data))))
    f = rows @ beta
    return _gr_report(
        "opt_gr_linear",
        f,
        data,
        c,
        bound,
        level,
        {"beta": beta.tolist(), "identification_flagged": flagged or deficient},
    )


def population_opt_gr_linear(X_rows, y_full, Omega, c, n):
    """Oracle linear coefficients minimizing the population residual form."""
    w = np.repeat(np.asarray(c, dtype=float), n)
    xt = X_rows * w[:, None]
    gram_inv, _ = _pinv_flagged(xt.T @ Omega @ xt)
    return gram_inv @ (xt.T @ (Omega @ (w * y_full)))


def moment_vector(
    theta: np.ndarray,
    model: ImputationModel,
    data: ExperimentData,
    Omega: np.ndarray,
    c: np.ndarray,
) -> np.ndarray:
    """Sample first-order-condition vector for the variance criterion."""
    w = _contrast_weights(data, c)
    f = model.predict(theta, data.X)
    grad = model.grad(theta, data.X)
    r = w * (_ipw_observed(data) - f)
    return grad.T @ (w * (Omega @ r)) / data.n


def population_moment_vector(theta, model, X, y_full, Omega, c, n):
    """Population version: full outcomes instead of weighted observations."""
    w = np.repeat(np.asarray(c, dtype=float), n)
    f = model.predict(theta, X)
    grad = model.grad(theta, X)
    r = w * (y_full - f)
    return grad.T @ (w * (Omega @ r)) / n


def population_moment_jacobian(theta, model, X, y_full, Omega, c, n):
    w = np.repeat(np.asarray(c, dtype=float), n)
    f = model.predict(theta, X)
    grad = model.grad(theta, X)
    rows = model.design_rows(X)
    wg = grad * w[:, None]
    jac = -(wg.T @ Omega @ wg) / n
    h = model.hess_factor(theta, X)
    if np.any(h != 0):
        r = w * (np.asarray(y_full, dtype=float) - f)
        scale = (w * (Omega @ r)) * h
        jac = jac + rows.T @ (rows * scale[:, None]) / n
    return jac


def population_opt_logit(model, X, y_full, Omega, c, n, start=None):
    """Population variance-minimizing logistic fit for simulation reporting.

    Quasi-Newton descent on the squared population moment norm, started at
    the population pseudo-likelihood fit unless told otherwise.
    """
    from scipy.optimize import minimize

    if start is None:
        start = population_qmle(model, X, y_full)

    def crit(theta):
        g = population_moment_vector(theta, model, X, y_full, Omega, c, n)
        return float(g @ g)

    def grad(theta):
        g = population_moment_vector(theta, model, X, y_full, Omega, c, n)
        jac = population_moment_jacobian(theta, model, X, y_full, Omega, c, n)
        return 2.0 * jac.T @ g

    result = minimize(crit, np.asarray(start, dtype=float), jac=grad, method="BFGS",
                      options={"gtol": 1e-12, "maxiter": 500})
    return result.x


def moment_jacobian(theta, model, data, Omega, c):
    """Analytic Jacobian of the sample moment vector."""
    w = _contrast_weights(data, c)
    f = model.predict(theta, data.X)
    grad = model.grad(theta, data.X)
    rows = model.design_rows(data.X)
    wg = grad * w[:, None]
    jac = -(wg.T @ Omega @ wg) / data.n
    h = model.hess_factor(theta, data.X)
    if np.any(h != 0):
        r = w * (_ipw_observed(data) - f)
        scale = (w * (Omega @ r)) * h
        jac = jac + rows.T @ (rows * scale[:, None]) / data.n
    return jac


def _criterion_and_grad(theta, model, data, Omega, c):
    g = moment_vector(theta, model, data, Omega, c)
    jac = moment_jacobian(theta, model, data, Omega, c)
    return float(g @ g), 2.0 * jac.T @ g, g


def opt_gr_logit(
    data: ExperimentData,
    Omega: np.ndarray,
    c,
    cfg: OptimizerConfig | None = None,
    model: ImputationModel | None = None,
    bound: VarianceBound | None = None,
    level: float = 0.95,
    seed: int = 0,
) -> EstimateReport:
    """Variance-minimizing logistic imputations via damped gradient descent.

    Multi-restart descent on the squared moment-vector norm: backtracking
    line search, a parameter box that widens after each failed restart, and
    the winner chosen by (criterion value, restart index).
    """
    c = np.asarray(c, dtype=float)
    Omega = _check_omega(Omega, data.n * data.k)
    if cfg is None:
        cfg = OptimizerConfig()
    if model is None:
        model = ImputationModel("logistic", data.k, data.p)
    if model.family != "logistic":
        raise ValueError("opt_gr_logit needs a logistic imputation model")
    rng = np.random.default_rng(seed)
    candidates = []
    for attempt in range(cfg.restarts):
        half_width = cfg.box_half_width + attempt * cfg.box_expand / 2.0
        theta = rng.normal(0.0, cfg.restart_sd, size=model.s)
        value, grad, g = _criterion_and_grad(theta, model, data, Omega, c)
        interior = True
        for _ in range(cfg.max_steps):
            if np.linalg.norm(g) <= cfg.grad_tol:
                break
            grad_norm2 = float(grad @ grad)
            if grad_norm2 < 1e-24:
                break  # stationary without solving the moment conditions
            t = 1.0
            while True:
                g_cand = moment_vector(theta - t * grad, model, data, Omega, c)
                cand_value = float(g_cand @ g_cand)
                if cand_value <= value - cfg.step * t * grad_norm2 or t < 1e-14:
                    break
                t *= cfg.backtrack
            theta = theta - t * grad
            if np.any(np.abs(theta) > half_width):
                interior = False
                break
            value, grad, g = _criterion_and_grad(theta, model, data, Omega, c)
        if interior and np.linalg.norm(g) <= cfg.grad_tol:
            candidates.append((value, attempt, theta, g))
    if not candidates:
        raise OptimizationError(
            f"no interior solution with moment norm <= {cfg.grad_tol} in "
            f"{cfg.restarts} restarts"
        )
    value, attempt, theta, g = min(candidates, key=lambda item: (item[0], item[1]))
    hess = _numerical_hessian(
        lambda th: float(
            moment_vector(th, model, data, Omega, c) @ moment_vector(th, model, data, Omega, c)
        ),
        theta,
    )
    hess_eigs = np.linalg.eigvalsh(hess)
    f = model.predict(theta, data.X)
    return _gr_report(
        "opt_gr_logit",
        f,
        data,
        c,
        bound,
        level,
        {
            "theta": theta.tolist(),
            "moment_norm": float(np.linalg.norm(g)),
            "criterion": value,
            "restart": attempt,
            "hessian_min_eig": float(hess_eigs.min()),
            "hessian_max_eig": float(hess_eigs.max()),
        },
    )


def _numerical_hessian(fun, theta, h: float = 1e-4):
    s = len(theta)
    hess = np.zeros((s, s))
    f0 = fun(theta)
    for i in range(s):
        for j in range(i, s):
            ei = np.zeros(s)
            ej = np.zeros(s)
            ei[i] = h
            ej[j] = h
            hess[i, j] = (
                fun(theta + ei + ej) - fun(theta + ei - ej) - fun(theta - ei + ej) + fun(theta - ei - ej)
            ) / (4 * h * h)
            hess[j, i] = hess[i, j]
    return hess


def opt_i_gr(
    theta_hat: np.ndarray,
    model: ImputationModel,
    data: ExperimentData,
    D: np.ndarray,
    c,
    bound: VarianceBound | None = None,
    level: float = 0.95,
) -> EstimateReport:
    """Optimal linear layer over one imputed covariate.

    Regressors are the arm intercepts plus the fitted imputations; the k+1
    coefficients solve the same contrast-weighted normal equations as the
    linear variance-minimizing estimator.
    """
    c = np.asarray(c, dtype=float)
    f_model = model.predict(theta_hat, data.X)
    xi = np.hstack([intercept_matrix(data.n, data.k), f_model[:, None]])
    w = _contrast_weights(data, c)
    xc = xi * w[:, None]
    gram = xc.T @ D @ xc
    flagged = _inspect_eigenvalues(gram / data.n, "imputed-covariate design form")
    gram_inv, deficient = _pinv_flagged(gram)
    beta = gram_inv @ (xc.T @ (D @ (w * _ipw_observed(data))))
    f = xi @ beta
    return _gr_report(
        "opt_i_" + model.family,
        f,
        data,
        c,
        bound,
        level,
        {"beta": beta.tolist(), "identification_flagged": flagged or deficient},
    )


def population_opt_i_beta(f_model, y_full, D, c, n: int, k: int):
    """Oracle Opt-I coefficients with the true outcome side."""
    xi = np.hstack([intercept_matrix(n, k), np.asarray(f_model, dtype=float)[:, None]])
    w = np.repeat(np.asarray(c, dtype=float), n)
    xc = xi * w[:, None]
    gram_inv, _ = _pinv_flagged(xc.T @ D @ xc)
    return gram_inv @ (xc.T @ (D @ (w * np.asarray(y_full, dtype=float))))


def theoretical_asy_variance(f, y_full, M, c, n: int) -> float:
    """n x Var of the linearized contrast estimator with imputations f:
    the contrast-weighted residual quadratic form in M, divided by n."""
    c = np.asarray(c, dtype=float)
    w = np.repeat(c, n)
    v = w * (np.asarray(y_full, dtype=float) - np.asarray(f, dtype=float))
    return float(v @ M @ v) / n


def population_qmle(model: ImputationModel, X, y_full, omega=None, max_iter: int = 200):
    """Population loss minimizer: every cell enters with weight omega."""
    kn = model.k * X.shape[0]
    w = np.ones(kn) if omega is None else np.asarray(omega, dtype=float)
    rows = model.design_rows(X)
    y = np.asarray(y_full, dtype=float)
    if model.family == "linear":
        a_inv, _ = _pinv_flagged(rows.T @ (rows * w[:, None]))
        return a_inv @ (rows.T @ (w * y))
    theta = np.zeros(model.s)
    for _ in range(max_iter):
        f = expit(rows @ theta)
        grad = rows.T @ (w * (y - f))
        if np.linalg.norm(grad) < 1e-12:
            break
        hess = rows.T @ (rows * (w * f * (1.0 - f))[:, None])
        h_inv, _ = _pinv_flagged(hess)
        theta = theta + h_inv @ grad
    return theta

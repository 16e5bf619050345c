"""Simulation driver: outcome imputation, covariate preprocessing, repeated
randomization, and the summary metric table (all x n scaled, matching the
reporting convention of the estimator-comparison tables)."""

from __future__ import annotations

import json
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from .bounds import VarianceBound, aronow_samii_bound, neyman_bound_crd, psd_clip
from .designs import Design, stream_rng
from .linear import (
    ExperimentData,
    estimate_linear,
    intercept_matrix,
    plugin_varbound,
    z_vector,
)
from .model_assisted import (
    ImputationModel,
    OptimizerConfig,
    fit_qmle,
    no_harm_gr,
    opt_gr_linear,
    opt_gr_logit,
    opt_i_gr,
    population_no_harm_alpha,
    population_opt_gr_linear,
    population_opt_i_beta,
    population_opt_logit,
    population_qmle,
    qmle_gr,
)
from .moments import DesignMoments, closed_form_or_exact_moments, mc_moments

ESTIMATOR_NAMES = (
    "ht",
    "hajek",
    "ols",
    "wls",
    "noharm_wls",
    "qmle_logit",
    "noharm_logit",
    "opt_linear",
    "opt_logit",
    "opt_i_ols",
    "opt_i_logit",
)

REPLICATION_CHUNK = 64  # fixed chunking keeps results worker-count invariant


def impute_potential_outcomes(covariates, coeffs, intercepts, seed) -> np.ndarray:
    """Binary potential outcomes from a latent-threshold model.

    One logistic shock per unit, shared across arms (and held fixed across
    simulation replications): y_ai = 1{intercept_a + x_i' coeffs > eps_i}.
    Returns the stacked kn vector.
    """
    X = np.atleast_2d(np.asarray(covariates, dtype=float))
    coeffs = np.asarray(coeffs, dtype=float)
    intercepts = np.asarray(intercepts, dtype=float)
    if X.shape[1] != len(coeffs):
        raise ValueError("coefficient length must match covariate columns")
    n = X.shape[0]
    shocks = stream_rng(seed).logistic(size=n)
    index = X @ coeffs
    return np.concatenate([(b + index > shocks).astype(float) for b in intercepts])


def preprocess_covariates(raw, topcode_columns=(), topcode_value: float = 5.0) -> np.ndarray:
    """Mean-impute missing values, standardize to unit standard deviation,
    top-code the configured columns, then re-center."""
    X = np.array(raw, dtype=float, copy=True)
    if X.ndim != 2:
        raise ValueError("covariates must be a 2-D table")
    for j in range(X.shape[1]):
        col = X[:, j]
        missing = np.isnan(col)
        if missing.all():
            raise ValueError(f"column {j} is entirely missing")
        col[missing] = np.nanmean(col)
        sd = col.std()
        if sd == 0:
            raise ValueError(f"column {j} is constant")
        col -= col.mean()
        col /= sd
        if j in topcode_columns:
            np.clip(col, None, topcode_value, out=col)
        X[:, j] = col
    return X - X.mean(axis=0)


def fine_strata(
    village_of,
    size_var,
    area_var,
    component_of,
    min_size: int = 4,
) -> np.ndarray:
    """Four within-village strata from medians of two stratifying variables,
    with small strata merged into the same stratum type of the
    lowest-indexed other village in the same network component."""
    village_of = np.asarray(village_of)
    size_var = np.asarray(size_var, dtype=float)
    area_var = np.asarray(area_var, dtype=float)
    component_of = np.asarray(component_of)
    n = len(village_of)
    villages = sorted(set(village_of.tolist()))
    stratum_type = np.empty(n, dtype=np.int64)
    for v in villages:
        members = np.flatnonzero(village_of == v)
        size_med = np.median(size_var[members])
        area_med = np.median(area_var[members])
        low_size = size_var[members] < size_med
        low_area = area_var[members] < area_med
        stratum_type[members] = 2 * (~low_size) + (~low_area)

    keys = {}
    group_of = np.empty(n, dtype=np.int64)
    for v in villages:
        for t in range(4):
            members = np.flatnonzero((village_of == v) & (stratum_type == t))
            if len(members) == 0:
                continue
            keys[(v, t)] = members
    assignments = {}
    for (v, t), members in sorted(keys.items()):
        if len(members) >= min_size:
            assignments[(v, t)] = (v, t)
            continue
        component = component_of[members[0]]
        candidates = [
            (v2, t2)
            for (v2, t2) in sorted(keys)
            if t2 == t and v2 != v and component_of[keys[(v2, t2)][0]] == component
        ]
        big = [cand for cand in candidates if len(keys[cand]) >= min_size]
        pool = big or candidates
        if pool:
            assignments[(v, t)] = pool[0]  # lowest-indexed candidate village
        else:
            warnings.warn(
                f"no merge candidate for a small stratum in village {v!r}; kept as is",
                RuntimeWarning,
            )
            assignments[(v, t)] = (v, t)
    # resolve chains (a small stratum may point at another small one)
    def resolve(key, seen=()):
        target = assignments[key]
        if target == key or target in seen:
            return target
        return resolve(target, (*seen, key))

    labels = {}
    for key, members in keys.items():
        root = resolve(key)
        labels.setdefault(root, len(labels))
        group_of[members] = labels[root]
    return group_of


@dataclass
class SimConfig:
    """Everything one simulation run needs; replications are seeded
    independently from (seed, replication index)."""

    design: Design
    y_full: np.ndarray
    X: np.ndarray
    estimators: list
    contrast: np.ndarray
    replications: int
    seed: int
    moments: DesignMoments | None = None
    moments_method: str = "exact"  # used when moments is None
    moments_reps: int = 100_000
    bound_kind: str = "aronow_samii"  # or "neyman" (two-arm CRD only)
    apply_psd_clip: bool = False
    level: float = 0.95
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    workers: int = 1

    def __post_init__(self):
        self.contrast = np.asarray(self.contrast, dtype=float)
        if self.replications < 1:
            raise ValueError("replications must be at least 1")
        if self.contrast.shape != (self.design.k,):
            raise ValueError("contrast length must match the number of arms")
        unknown = set(self.estimators) - set(ESTIMATOR_NAMES)
        if unknown:
            raise ValueError(f"unknown estimators: {sorted(unknown)}")
        self.y_full = np.asarray(self.y_full, dtype=float)
        if self.y_full.shape != (self.design.n * self.design.k,):
            raise ValueError("y_full must be a stacked kn vector")


METRIC_COLUMNS = (
    "bias2_times_n",
    "variance_times_n",
    "mse_times_n",
    "mean_bound_times_n",
    "coverage",
    "theo_var_times_n",
    "theo_bound_times_n",
)


@dataclass
class MetricsTable:
    estimators: list
    metrics: dict  # name -> dict of METRIC_COLUMNS
    failures: dict  # name -> count
    truth: float
    n: int
    replications: int
    provenance: dict = field(default_factory=dict)  # moments method / reps

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write("estimator," + ",".join(METRIC_COLUMNS) + ",failures\n")
            for name in self.estimators:
                row = self.metrics[name]
                cells = ",".join(f"{row[c]:.15g}" for c in METRIC_COLUMNS)
                fh.write(f"{name},{cells},{self.failures[name]}\n")

    def to_json(self, path=None):
        payload = {
            "truth": self.truth,
            "n": self.n,
            "replications": self.replications,
            "metrics": self.metrics,
            "failures": self.failures,
            "provenance": self.provenance,
        }
        text = json.dumps(payload, indent=2)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text

    def display(self) -> str:
        """Two-decimal table, estimators as columns."""
        width = max(len(c) for c in METRIC_COLUMNS) + 2
        header = " " * width + "".join(f"{name:>12}" for name in self.estimators)
        lines = [header]
        for col in METRIC_COLUMNS:
            cells = "".join(f"{self.metrics[name][col]:>12.2f}" for name in self.estimators)
            lines.append(f"{col:<{width}}" + cells)
        return "\n".join(lines)


def _build_bound(cfg: SimConfig, moments: DesignMoments) -> VarianceBound:
    if cfg.bound_kind == "aronow_samii":
        bound = aronow_samii_bound(moments)
    elif cfg.bound_kind == "neyman":
        from .designs import CompletelyRandomizedDesign

        if not (isinstance(cfg.design, CompletelyRandomizedDesign) and cfg.design.k == 2):
            raise ValueError("the neyman bound applies to two-arm completely randomized designs")
        bound = neyman_bound_crd(cfg.design.n, int(cfg.design.counts[0]))
    else:
        raise ValueError(f"unknown bound kind {cfg.bound_kind!r}")
    return psd_clip(bound) if cfg.apply_psd_clip else bound


def _estimate_one(name, data, c, bound, D, opt_cfg, rep_seed):
    if name in ("ht", "hajek", "ols", "wls"):
        m_weights = {"ht": None, "hajek": None, "ols": "identity", "wls": "invpi"}[name]
        fit = estimate_linear(name, data, m_weights=m_weights)
        value = float(c @ fit.mu_hat)
        plugin = plugin_varbound(fit.z_hat, data.assignment, bound, c)
        return value, plugin.times_n
    if name == "noharm_wls":
        model = ImputationModel("linear", data.k, data.p)
        theta = fit_qmle(model, data, omega="ones")
        report = no_harm_gr(theta, model, data, D, c, bound=bound)
    elif name == "qmle_logit":
        model = ImputationModel("logistic", data.k, data.p)
        theta = fit_qmle(model, data, omega="pi")
        report = qmle_gr(theta, model, data, c, bound=bound)
    elif name == "noharm_logit":
        model = ImputationModel("logistic", data.k, data.p)
        theta = fit_qmle(model, data, omega="pi")
        report = no_harm_gr(theta, model, data, D, c, bound=bound)
    elif name == "opt_linear":
        report = opt_gr_linear(data, D, c, bound=bound)
    elif name == "opt_logit":
        report = opt_gr_logit(data, D, c, cfg=opt_cfg, bound=bound, seed=rep_seed)
    elif name == "opt_i_ols":
        model = ImputationModel("linear", data.k, data.p)
        theta = fit_qmle(model, data, omega="pi")
        report = opt_i_gr(theta, model, data, D, c, bound=bound)
    elif name == "opt_i_logit":
        model = ImputationModel("logistic", data.k, data.p)
        theta = fit_qmle(model, data, omega="pi")
        report = opt_i_gr(theta, model, data, D, c, bound=bound)
    else:
        raise ValueError(f"unknown estimator {name!r}")
    return report.contrast_value, report.varbound_times_n


_WORKER_PAYLOAD = None  # inherited by forked workers; avoids re-pickling moments


def _chunk_via_global(rep_indices):
    return _replication_chunk(_WORKER_PAYLOAD, rep_indices)


def _replication_chunk(payload, rep_indices):
    design = payload["design"]
    moments = payload["moments"]
    bound = payload["bound"]
    estimators = payload["estimators"]
    c = payload["contrast"]
    out = {}
    for rep in rep_indices:
        rng = stream_rng(payload["seed"], rep)
        realization = design.sample(rng)
        data = ExperimentData.from_full(payload["y_full"], realization, payload["X"], moments)
        row = {}
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            for name in estimators:
                try:
                    row[name] = _estimate_one(
                        name, data, c, bound, moments.D, payload["optimizer"], rep
                    )
                except Exception as exc:  # recorded and excluded from aggregates
                    row[name] = ("failed", repr(exc))
        out[rep] = row
    return out


def population_contrast_residual(
    name: str,
    X: np.ndarray,
    y_full: np.ndarray,
    moments: DesignMoments,
    contrast: np.ndarray,
    optimizer: OptimizerConfig | None = None,
) -> np.ndarray:
    """Contrast-weighted population linearization vector v with
    n x asymptotic variance = v' M v / n."""
    n, k = moments.n, moments.k
    c = np.asarray(contrast, dtype=float)
    w = np.repeat(c, n)
    ones = intercept_matrix(n, k)
    D = moments.D
    if name == "ht":
        return w * y_full
    if name == "hajek":
        mu = ones.T @ y_full / n
        return w * (y_full - ones @ mu)
    if name in ("ols", "wls"):
        dummy = _dummy_data(X, y_full, moments)
        z = z_vector(name, dummy, fit=None, population=True)
        return z @ c
    if name == "noharm_wls":
        model = ImputationModel("linear", k, X.shape[1])
        theta = population_qmle(model, X, y_full)
        f = model.predict(theta, X)
        alpha = population_no_harm_alpha(f, y_full, D, c, n)
        return w * (y_full - alpha * f)
    if name == "qmle_logit":
        model = ImputationModel("logistic", k, X.shape[1])
        theta = population_qmle(model, X, y_full, omega=moments.pi)
        return w * (y_full - model.predict(theta, X))
    if name == "noharm_logit":
        model = ImputationModel("logistic", k, X.shape[1])
        theta = population_qmle(model, X, y_full, omega=moments.pi)
        f = model.predict(theta, X)
        alpha = population_no_harm_alpha(f, y_full, D, c, n)
        return w * (y_full - alpha * f)
    if name == "opt_linear":
        model = ImputationModel("linear", k, X.shape[1])
        rows = model.design_rows(X)
        beta = population_opt_gr_linear(rows, y_full, D, c, n)
        return w * (y_full - rows @ beta)
    if name == "opt_logit":
        model = ImputationModel("logistic", k, X.shape[1])
        theta = population_opt_logit(model, X, y_full, D, c, n)
        return w * (y_full - model.predict(theta, X))
    if name in ("opt_i_ols", "opt_i_logit"):
        family = "linear" if name == "opt_i_ols" else "logistic"
        model = ImputationModel(family, k, X.shape[1])
        theta = population_qmle(model, X, y_full, omega=moments.pi)
        f_model = model.predict(theta, X)
        beta = population_opt_i_beta(f_model, y_full, D, c, n, k)
        xi = np.hstack([ones, f_model[:, None]])
        return w * (y_full - xi @ beta)
    raise ValueError(f"unknown estimator {name!r}")


def _dummy_data(X, y_full, moments):
    from .designs import AssignmentRealization

    arm_of = np.zeros(moments.n, dtype=np.int64)  # ignored on the population path
    realization = AssignmentRealization(moments.n, moments.k, arm_of)
    return ExperimentData.from_full(np.asarray(y_full, dtype=float), realization, X, moments)


def run_simulation(cfg: SimConfig) -> MetricsTable:
    """Draw assignments, run every configured estimator, and aggregate the
    seven metric rows; failed replications are excluded and counted."""
    moments = cfg.moments
    if moments is None:
        if cfg.moments_method == "exact":
            moments = closed_form_or_exact_moments(cfg.design)
        else:
            moments = mc_moments(cfg.design, reps=cfg.moments_reps, seed=cfg.seed + 1)
    bound = _build_bound(cfg, moments)
    n = cfg.design.n
    truth = float(
        cfg.contrast @ (intercept_matrix(n, cfg.design.k).T @ cfg.y_full) / n
    )
    payload = {
        "design": cfg.design,
        "moments": moments,
        "bound": bound,
        "estimators": list(cfg.estimators),
        "contrast": cfg.contrast,
        "y_full": cfg.y_full,
        "X": cfg.X,
        "seed": cfg.seed,
        "optimizer": cfg.optimizer,
    }
    chunks = [
        range(start, min(start + REPLICATION_CHUNK, cfg.replications))
        for start in range(0, cfg.replications, REPLICATION_CHUNK)
    ]
    results = {}
    if cfg.workers > 1:
        global _WORKER_PAYLOAD
        _WORKER_PAYLOAD = payload
        try:
            with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
                for chunk_result in pool.map(_chunk_via_global, chunks):
                    results.update(chunk_result)
        finally:
            _WORKER_PAYLOAD = None
    else:
        for chunk in chunks:
            results.update(_replication_chunk(payload, chunk))

    z_crit = norm.ppf(0.5 + cfg.level / 2)
    metrics = {}
    failures = {}
    for name in cfg.estimators:
        values, bounds_tn = [], []
        failed = 0
        for rep in range(cfg.replications):
            entry = results[rep][name]
            if entry[0] == "failed":
                failed += 1
                continue
            values.append(entry[0])
            bounds_tn.append(entry[1])
        failures[name] = failed
        values = np.array(values)
        bounds_tn = np.array(bounds_tn)
        if len(values) == 0:
            metrics[name] = {c: np.nan for c in METRIC_COLUMNS}
            continue
        mean = values.mean()
        bias2 = (mean - truth) ** 2
        variance = float(np.mean((values - mean) ** 2))
        mse = float(np.mean((values - truth) ** 2))
        half = z_crit * np.sqrt(np.maximum(bounds_tn, 0.0) / n)
        covered = (np.abs(values - truth) <= half) & (bounds_tn >= 0)
        try:
            theo = population_contrast_residual(
                name, cfg.X, cfg.y_full, moments, cfg.contrast, cfg.optimizer
            )
            theo_var = float(theo @ moments.D @ theo) / n
            theo_bound = float(theo @ bound.Dt @ theo) / n
        except Exception:
            theo_var = theo_bound = np.nan
        metrics[name] = {
            "bias2_times_n": float(n * bias2),
            "variance_times_n": float(n * variance),
            "mse_times_n": float(n * mse),
            "mean_bound_times_n": float(bounds_tn.mean()),
            "coverage": float(covered.mean()),
            "theo_var_times_n": theo_var,
            "theo_bound_times_n": theo_bound,
        }
    return MetricsTable(
        estimators=list(cfg.estimators),
        metrics=metrics,
        failures=failures,
        truth=truth,
        n=n,
        replications=cfg.replications,
        provenance={
            "moments_method": moments.method,
            "moments_reps": moments.reps,
            "bound": bound.name,
            "psd_clipped": bound.psd_clipped,
            "seed": cfg.seed,
        },
    )

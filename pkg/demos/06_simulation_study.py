"""An end-to-end simulation study at desk scale.

Generates binary potential outcomes from a latent-threshold model over a
small interference network, repeats the randomization, and reports the
per-estimator metric table (bias^2, variance, MSE, mean estimated bound,
coverage, and the theoretical rows, all x n).
"""

import numpy as np

from designest import (
    BernoulliDesign,
    InterferenceGraph,
    SimConfig,
    derive_exposure_design,
    impute_potential_outcomes,
    mc_moments,
    preprocess_covariates,
    run_simulation,
    standard_binary_exposure_rules,
    stream_rng,
)

# ---------------------------------------------------------------------------
# 1. A 100-node ring-with-chords network (every unit has three neighbors)
# ---------------------------------------------------------------------------
n = 100
edges = []
for i in range(n):
    edges += [(i, (i + 1) % n), ((i + 1) % n, i)]
    j = (i + n // 2) % n
    edges += [(i, j), (j, i)]
graph = InterferenceGraph(n, edges)
rules = standard_binary_exposure_rules()
design = derive_exposure_design(BernoulliDesign(n, [0.5, 0.5]), graph, rules)
print("arms:", rules.labels, "| units:", n)

# ---------------------------------------------------------------------------
# 2. Outcomes: logistic threshold model with exposure-specific intercepts
# ---------------------------------------------------------------------------
rng = stream_rng(100)
X = preprocess_covariates(rng.standard_normal((n, 2)))
y_full = impute_potential_outcomes(X, coeffs=[0.9, -0.6], intercepts=[0.8, -1.2, 0.1, -0.4], seed=3)
print("take-up rates by exposure:", np.round(y_full.reshape(4, n).mean(axis=1), 3))

# ---------------------------------------------------------------------------
# 3. Design moments by Monte Carlo, then the simulation
# ---------------------------------------------------------------------------
moments = mc_moments(design, reps=60_000, seed=17)
contrast = np.zeros(4)
contrast[rules.labels.index("d11")] = 1.0
contrast[rules.labels.index("d01")] = -1.0

cfg = SimConfig(
    design=design,
    y_full=y_full,
    X=X,
    estimators=["ht", "hajek", "wls", "qmle_logit", "opt_i_logit"],
    contrast=contrast,
    replications=500,
    seed=2024,
    moments=moments,
)
table = run_simulation(cfg)
print(f"\ntrue contrast: {table.truth:.4f}\n")
print(table.display())
print("\nadjusted estimators concentrate: compare the variance rows with the")
print("unadjusted column, and the mean estimated bound with the realized variance.")

table.to_csv("simulation_metrics.csv")
print("\nwrote simulation_metrics.csv")

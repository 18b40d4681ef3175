"""
Return-gap bounds on small tabular MDPs
=======================================

Builds a random MDP, perturbs its transitions to get a "model", and compares
the true return with the lower bounds computed from the model.
"""

# %%
import numpy as np

from ampo import theory

rng = np.random.default_rng(0)
true, model, pi, pi_D = theory.random_instance(rng, n_states=6, n_actions=3, model_error=0.3, gamma=0.9)

# %%
# Occupancy measures are exact linear solves; both sum to one.
nu, rho = theory.occupancy(true, pi)
print("state visitation", np.round(nu, 3), "sum", nu.sum())

# %%
# Main bound: penalty terms for policy shift, feature-level mismatch and model error.
rep = theory.theorem1_check(true, model, pi, pi_D)
print(f"eta {rep.lhs:.4f}  eta_hat {rep.eta_hat:.4f}")
print(f"penalties: policy {rep.r_eps:.4f}  ipm {rep.ipm_term:.4f}  kl {rep.kl_term:.4f}  slack {rep.slack:.4f}")

# %%
# The telescoping identity holds to rounding; its bound is usually tighter.
alt = theory.appendixE_check(true, model, pi, pi_D)
print(f"identity residual {alt.residual:.2e}  alternative slack {alt.bound.slack:.4f}")

# %%
# Per-state visitation gaps against their right-hand sides.
l1 = theory.lemma1_check(true, model, pi, pi_D)
for s, (lhs, rhs) in enumerate(zip(l1.lhs, l1.rhs)):
    print(f"state {s}: |gap| {lhs:.4f} <= {rhs:.4f}")

# %%
# A randomized sweep over error levels and discounts.
rows = theory.run_suite(200, seed=1)
print(sum(r.passed for r in rows), "of", len(rows), "instances pass")

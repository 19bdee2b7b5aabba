"""Closed-form noise-covariance updates at a fixed state.

Walks through the four constraint variants of the inner problem, the
Wishart-prior blend, and the degenerate case that makes the prior-free
update unbounded.
"""

import numpy as np

from jointcov.covariance import (
    assemble_M,
    inner_objective,
    mode_match_prior,
    numeric_inner_oracle,
    solve_inner_diag_eig,
    solve_inner_diagonal,
    solve_inner_eig,
    solve_inner_unconstrained,
)

np.set_printoptions(precision=4, suppress=True)
rng = np.random.default_rng(0)

# Pretend a solver handed us residuals of 40 three-dimensional measurements
# taken at the current state estimate.  Their sample covariance is all the
# covariance update needs.
true_cov = np.diag([0.05, 0.025, 0.033])
residuals = rng.standard_normal((40, 3)) @ np.linalg.cholesky(true_cov).T
S = residuals.T @ residuals / len(residuals)
print("sample covariance S:\n", S)

# 1. Unconstrained: the optimal information matrix is simply S^-1.
sol = solve_inner_unconstrained(S)
print("\nunconstrained optimum: covariance = S itself")
print(sol.covariance)

# 2. Diagonal: project onto independent noise components.
sol_diag = solve_inner_diagonal(S)
print("\ndiagonal optimum (only the variances survive):")
print(sol_diag.covariance)

# 3. Eigenvalue bounds: clamp the covariance spectrum into [lam_min, lam_max].
# Useful when the sensor's noise floor and ceiling are known.
sol_eig = solve_inner_eig(S, lam_min=0.03, lam_max=0.04)
print("\neigenvalue-bounded optimum, spectrum clamped into [0.03, 0.04]:")
print(np.linalg.eigvalsh(sol_eig.covariance))
print("bounds active:", sol_eig.active_lower, sol_eig.active_upper)

# 4. Diagonal + bounds: the entrywise version of the same clamp.
sol_both = solve_inner_diag_eig(S, lam_min=0.03, lam_max=0.04)
print("\ndiagonal + bounded optimum:")
print(np.diag(sol_both.covariance))

# A Wishart prior with weight w blends a prior covariance guess with the
# sample covariance: sigma* = w/(w+1) * sigma0 + 1/(w+1) * S.
sigma0 = 0.02 * np.eye(3)
w = 0.5
prior = mode_match_prior(sigma0, w_prior=w, k=len(residuals))
M = assemble_M(S, len(residuals), prior)
blended = solve_inner_unconstrained(M).covariance
print("\nprior blend with w = 0.5 (2/3 weight on S, 1/3 on the prior):")
print(blended)
print("check:", (w / (w + 1)) * sigma0 + (1 / (w + 1)) * S)

# The slow numerical oracle solves the same convex problem by projected
# gradient descent; it exists to validate the closed forms.
oracle = numeric_inner_oracle(S, "eig", 0.03, 0.04)
print("\noracle agreement (eig variant):",
      np.abs(oracle - sol_eig.information).max())

# Degenerate case: with fewer residuals than dimensions the sample
# covariance is singular and the prior-free objective is unbounded below.
# Pushing the information matrix along a null direction keeps lowering it.
S_rank1 = np.outer([1.0, 2.0, 0.5], [1.0, 2.0, 0.5])
u = np.array([2.0, -1.0, 0.0]) / np.sqrt(5.0)  # in the nullspace of S_rank1
print("\nunbounded descent along a null direction of a singular S:")
for c in (1.0, 10.0, 100.0):
    print(f"  c = {c:5.0f}: F = {inner_objective(S_rank1, np.eye(3) + c * np.outer(u, u)):.4f}")
print("the eigenvalue-bounded variants rescue this case:")
print(np.linalg.eigvalsh(solve_inner_eig(S_rank1, 1e-4, 1e4).covariance))

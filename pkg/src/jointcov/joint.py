"""Joint state / noise-covariance estimation algorithms.

Three drivers minimize the joint objective

    F(x, P) = sum_g [ -log det P_g + <M_g(x), P_g> ]

over the state x and one information matrix per noise group:

* ``run_elimination`` substitutes the analytic optimum P*(x) into F and
  minimizes the reduced objective over x alone with L-BFGS in a retraction
  chart (re-centered after every accepted step).
* ``run_hybrid_bcd`` alternates one descent step on x (a damped Gauss-Newton
  iteration by default, or backtracking Riemannian gradient descent) with
  the analytic P update.
* ``run_block_exact_bcd`` alternates a full weighted NLS solve on x with the
  analytic P update; its F trace is non-increasing.

The x-dependent part of F is ``sum_g s_g sum_{i in g} ||r_i||^2_{P_g}`` with
``s_g = 1/(k_g + nu_g - m_g - 1)`` for MAP groups and ``1/k_g`` otherwise,
so the NLS subproblems are weighted with ``s_g P_g``.
"""

from __future__ import annotations

import time
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import nls
from .covariance import (
    UnboundedProblem,
    assemble_M,
    diagnose_singularity,
    inner_objective,
    solve_inner,
)
from .manifold import CutLocusError, ManifoldPoint, boxplus
from .nls import NlsConfig
from .problem import JointProblem, NoiseGroup, sample_covariance

ELIMINATION = "elimination"
HYBRID_BCD = "hybrid-bcd"
BLOCK_EXACT_BCD = "block-exact-bcd"

ALGORITHMS = (ELIMINATION, HYBRID_BCD, BLOCK_EXACT_BCD)

# Status flags collected on JointResult.
FLAG_BOUND_HIT = "eigenvalue_bound_hit"
FLAG_LM_FAILURE = "lm_failure"
FLAG_LINE_SEARCH_FAILURE = "line_search_failure"


@dataclass
class JointConfig:
    algorithm: str = BLOCK_EXACT_BCD
    max_outer_iterations: int = 25
    nls: NlsConfig = field(default_factory=NlsConfig)
    lbfgs_memory: int = 10
    f_tol: float = 1e-9  # relative change of F, two consecutive iterations
    record_traces: bool = True  # False keeps JointResult.trace empty

    def __post_init__(self):
        if self.max_outer_iterations < 1:
            raise ValueError("iteration cap must be >= 1")
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}")


@dataclass(frozen=True)
class TracePoint:
    """One convergence-trace entry (recorded after each half-step)."""

    iteration: int
    phase: str                 # "init" | "x-step" | "p-step"
    objective: float
    sigma_eig_min: dict
    sigma_eig_max: dict
    gradient_norm: float       # proxy: latest weighted-NLS gradient norm


@dataclass
class JointResult:
    x: ManifoldPoint
    information: dict
    objective: float
    iterations: int
    converged: bool
    trace: tuple[TracePoint, ...]
    flags: frozenset
    cov_update_ms: tuple[float, ...] = ()


def group_scale(group: NoiseGroup, k: int) -> float:
    """Scale of the group's residual sum inside F (see module docstring)."""
    if group.estimator == "map":
        gamma = k + group.prior.dof - group.m - 1
        return 1.0 / gamma
    return 1.0 / k


def _scaled_weights(problem: JointProblem, P: dict) -> dict:
    return {
        g.group_id: group_scale(g, len(problem.factors_by_group[g.group_id]))
        * P[g.group_id]
        for g in problem.groups
    }


def _group_M(problem: JointProblem, x: ManifoldPoint, group: NoiseGroup) -> np.ndarray:
    S = sample_covariance(problem, x, group.group_id)
    if group.estimator == "map":
        return assemble_M(S, len(problem.factors_by_group[group.group_id]),
                          group.prior, group.m)
    return S


def joint_objective(problem: JointProblem, x: ManifoldPoint, P: dict) -> float:
    """F(x, P) summed over noise groups (MAP groups blend in their prior)."""
    total = 0.0
    for g in problem.groups:
        total += inner_objective(_group_M(problem, x, g), P[g.group_id])
    return total


def information_update(problem: JointProblem, x: ManifoldPoint
                       ) -> tuple[dict, dict]:
    """Analytic P update for every group at the current state.

    Fixed groups keep their information matrix.  Prior-free unconstrained
    and diagonal variants are checked for singular sample covariance first
    and raise :class:`UnboundedProblem` naming the offending group.

    Returns:
        (information per group id, InnerSolution per estimated group id)
    """
    P: dict = {}
    solutions: dict = {}
    for g in problem.groups:
        if g.variant == "fixed":
            P[g.group_id] = g.information
            continue
        S = sample_covariance(problem, x, g.group_id)
        if g.estimator == "ml" and g.constraint in ("unconstrained", "diagonal"):
            report = diagnose_singularity(S)
            bad = (report.is_ill_posed if g.constraint == "unconstrained"
                   else report.is_ill_posed_diagonal)
            if bad:
                raise UnboundedProblem(
                    f"group {g.group_id!r}: sample covariance is singular "
                    f"(min eigenvalue {report.min_eigenvalue:.3e}); the "
                    "prior-free covariance update is unbounded below",
                    group_id=g.group_id,
                    min_eigenvalue=report.min_eigenvalue,
                )
        M = S
        if g.estimator == "map":
            M = assemble_M(S, len(problem.factors_by_group[g.group_id]),
                           g.prior, g.m)
        lam_min, lam_max = g.bounds if g.bounds is not None else (None, None)
        sol = solve_inner(M, g.constraint, lam_min, lam_max)
        P[g.group_id] = sol.information
        solutions[g.group_id] = sol
    return P, solutions


def calibrate(problem: JointProblem, x_true_cal: ManifoldPoint) -> dict:
    """One-shot optimal information per group at a known ground-truth state."""
    P, _ = information_update(problem, x_true_cal)
    return P


def _sigma_eig_ranges(P: dict) -> tuple[dict, dict]:
    lo, hi = {}, {}
    for gid, mat in P.items():
        eigs = np.linalg.eigvalsh(mat)
        lo[gid] = float(1.0 / eigs[-1])
        hi[gid] = float(1.0 / eigs[0])
    return lo, hi


class _Convergence:
    """Declares convergence after two consecutive small relative F changes."""

    def __init__(self, f_tol: float):
        self.f_tol = f_tol
        self.prev = None
        self.streak = 0

    def update(self, value: float) -> bool:
        if self.prev is not None:
            if abs(value - self.prev) <= self.f_tol * (1.0 + abs(value)):
                self.streak += 1
            else:
                self.streak = 0
        self.prev = value
        return self.streak >= 2


def _run_bcd(problem: JointProblem, x_init: ManifoldPoint, config: JointConfig,
             exact: bool) -> JointResult:
    x = x_init
    P, solutions = information_update(problem, x)
    flags = set()
    if any(s.any_bound_active for s in solutions.values()):
        flags.add(FLAG_BOUND_HIT)
    trace = []

    def record(iteration, phase, value, grad_proxy):
        if config.record_traces:
            lo, hi = _sigma_eig_ranges(P)
            trace.append(TracePoint(iteration, phase, value, lo, hi, grad_proxy))

    f = joint_objective(problem, x, P)
    record(0, "init", f, np.nan)
    conv = _Convergence(config.f_tol)
    conv.update(f)
    converged = False
    cov_ms = []
    iterations = 0
    for iterations in range(1, config.max_outer_iterations + 1):
        weights = _scaled_weights(problem, P)
        if exact:
            res = nls.solve_fixed_P(problem, x, weights, config.nls)
            x = res.x
            grad_proxy = res.gradient_norm
            if res.lm_failure:
                flags.add(FLAG_LM_FAILURE)
        else:
            x, grad_proxy = nls._step_once_impl(problem, x, weights, config.nls)
        if config.record_traces:
            record(iterations, "x-step", joint_objective(problem, x, P), grad_proxy)

        start = time.perf_counter()
        P, solutions = information_update(problem, x)
        cov_ms.append((time.perf_counter() - start) * 1e3)
        if any(s.any_bound_active for s in solutions.values()):
            flags.add(FLAG_BOUND_HIT)
        f = joint_objective(problem, x, P)
        record(iterations, "p-step", f, grad_proxy)
        if conv.update(f):
            converged = True
            break
    return JointResult(x, P, f, iterations, converged, tuple(trace),
                       frozenset(flags), tuple(cov_ms))


def run_block_exact_bcd(problem: JointProblem, x_init: ManifoldPoint,
                        config: JointConfig | None = None) -> JointResult:
    """Alternate a full weighted-NLS solve on x with the analytic P update.

    F is non-increasing across both half-steps; terminates on a small
    relative F change (twice in a row) or the outer iteration cap.
    """
    config = config or JointConfig(algorithm=BLOCK_EXACT_BCD)
    return _run_bcd(problem, x_init, config, exact=True)


def run_hybrid_bcd(problem: JointProblem, x_init: ManifoldPoint,
                   config: JointConfig | None = None) -> JointResult:
    """Alternate one descent step on x with the analytic P update.

    The x half-step honors ``config.nls.step_mode``: a single damped
    Gauss-Newton iteration by default, or a backtracking Riemannian
    gradient step when set to ``riemannian-gd``.
    """
    config = config or JointConfig(algorithm=HYBRID_BCD)
    return _run_bcd(problem, x_init, config, exact=False)


def _reduced_value_and_grad(problem: JointProblem, x: ManifoldPoint):
    """Reduced objective F(x, P*(x)), its chart gradient, and P*(x).

    By the envelope property of the inner optimum, the gradient is the
    weighted-NLS gradient with weights ``2 s_g P*_g(x)`` (fixed groups
    contribute with their fixed P).
    """
    P, solutions = information_update(problem, x)
    value = 0.0
    bound_hit = False
    for g in problem.groups:
        if g.group_id in solutions:
            value += solutions[g.group_id].objective
            bound_hit = bound_hit or solutions[g.group_id].any_bound_active
        else:
            value += inner_objective(_group_M(problem, x, g), P[g.group_id])
    weights = {gid: 2.0 * w for gid, w in _scaled_weights(problem, P).items()}
    system = nls.build_system(problem, x, weights, with_hessian=False)
    return value, system.gradient, P, bound_hit, system.index


def run_elimination(problem: JointProblem, x_init: ManifoldPoint,
                    config: JointConfig | None = None) -> JointResult:
    """Minimize the reduced objective over x by chart L-BFGS.

    The chart is re-centered through the retraction after every accepted
    step; curvature pairs are kept across re-centerings (exact for purely
    Euclidean states).  Groups without eigenvalue bounds or a prior are
    singularity-monitored at every evaluation and raise
    :class:`UnboundedProblem` when the sample covariance degenerates.
    """
    config = config or JointConfig(algorithm=ELIMINATION)
    x = x_init
    f, g, P, bound_hit, index = _reduced_value_and_grad(problem, x)
    flags = set()
    if bound_hit:
        flags.add(FLAG_BOUND_HIT)
    trace = []

    def record(iteration, phase, value, gradient):
        if config.record_traces:
            lo, hi = _sigma_eig_ranges(P)
            trace.append(TracePoint(iteration, phase, value, lo, hi,
                                    float(np.linalg.norm(gradient))))

    record(0, "init", f, g)
    memory: deque = deque(maxlen=config.lbfgs_memory)
    conv = _Convergence(config.f_tol)
    conv.update(f)
    converged = False
    iterations = 0
    for iterations in range(1, config.max_outer_iterations + 1):
        gnorm = float(np.linalg.norm(g))
        if gnorm <= config.nls.grad_tol:
            converged = True
            iterations -= 1
            break
        d = _two_loop_direction(memory, g)
        if float(d @ g) >= 0.0:  # not a descent direction: reset to steepest
            memory.clear()
            d = -g
        alpha = 1.0 if memory else min(1.0, 1.0 / max(gnorm, 1.0))
        accepted = False
        dg = float(d @ g)
        for _ in range(60):
            try:
                x_trial = boxplus(x, index.scatter(alpha * d))
                f_trial, g_trial, P_trial, bound_hit, index_trial = \
                    _reduced_value_and_grad(problem, x_trial)
            except CutLocusError:
                alpha *= 0.5
                continue
            if np.isfinite(f_trial) and f_trial <= f + 1e-4 * alpha * dg:
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            flags.add(FLAG_LINE_SEARCH_FAILURE)
            break
        s = alpha * d
        y = g_trial - g
        sy = float(s @ y)
        if sy > 1e-10 * float(np.linalg.norm(s)) * float(np.linalg.norm(y)):
            memory.append((s, y, 1.0 / sy))
        x, f, g, P, index = x_trial, f_trial, g_trial, P_trial, index_trial
        if bound_hit:
            flags.add(FLAG_BOUND_HIT)
        record(iterations, "x-step", f, g)
        if conv.update(f):
            converged = True
            break
    return JointResult(x, P, f, iterations, converged, tuple(trace),
                       frozenset(flags))


def _two_loop_direction(memory, g: np.ndarray) -> np.ndarray:
    """Standard L-BFGS two-loop recursion for -H g."""
    if not memory:
        return -g
    q = g.copy()
    alphas = []
    for s, y, rho in reversed(memory):
        a = rho * float(s @ q)
        alphas.append(a)
        q -= a * y
    s, y, _ = memory[-1]
    q *= float(s @ y) / float(y @ y)
    for (s, y, rho), a in zip(memory, reversed(alphas)):
        b = rho * float(y @ q)
        q += (a - b) * s
    return -q

"""Estimation-problem model: measurement factors, noise groups, residuals.

A :class:`JointProblem` bundles a manifold declaration, a factor list, a
table of noise groups, and a gauge (the block ids held fixed).  Residual and
Jacobian evaluation is stateless and reentrant; relative-pose factors also
have a vectorized batch path used by the solvers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Hashable, Mapping

import numpy as np

from .covariance import (
    WishartPrior,
    cholesky_or_none,
    symmetrize,
)
from .manifold import (
    ManifoldPoint,
    ManifoldSpec,
    boxplus,
    log_se2,
    se2_compose,
    se2_inverse,
)

# Residual kinds.
LINEAR_GAUSSIAN = "linear_gaussian"
RELATIVE_SE2 = "relative_se2"
PRIOR_EUCLIDEAN = "prior_euclidean"
CUSTOM = "custom"

# Noise-group variants: estimator (map / ml / fixed) x constraint set.
VARIANTS = (
    "map", "map-diag", "map-eig", "map-diag-eig",
    "ml", "ml-diag", "ml-eig", "ml-diag-eig",
    "fixed",
)

FD_STEP = 1e-6  # central finite-difference step for custom-factor Jacobians

_MAX_PREPROCESS_COND = 1e12


def variant_parts(variant: str) -> tuple[str, str]:
    """Split a group variant into (estimator, inner-constraint) parts."""
    if variant == "fixed":
        return "fixed", "unconstrained"
    estimator, _, rest = variant.partition("-")
    constraint = {"": "unconstrained", "diag": "diagonal", "eig": "eig",
                  "diag-eig": "diag-eig"}[rest]
    return estimator, constraint


@dataclass(frozen=True, eq=False)
class MeasurementFactor:
    """One measurement: residual kind, connected blocks, value, noise group.

    ``preprocess_jacobian`` is the (state-independent) Jacobian of a
    measurement-space transformation applied upstream; when present, its
    inverse maps residuals back to raw-measurement space before the sample
    covariance is formed.  The inverse is computed once here and cached.
    """

    factor_id: int
    kind: str
    block_ids: tuple
    z: np.ndarray
    group_id: Hashable
    H: np.ndarray | None = None
    residual_fn: Callable | None = None
    preprocess_jacobian: np.ndarray | None = None
    preprocess_jacobian_inv: np.ndarray | None = field(default=None, init=False)

    def __post_init__(self):
        object.__setattr__(self, "block_ids", tuple(self.block_ids))
        object.__setattr__(self, "z", np.asarray(self.z, dtype=float))
        if self.kind not in (LINEAR_GAUSSIAN, RELATIVE_SE2, PRIOR_EUCLIDEAN, CUSTOM):
            raise ValueError(f"unknown residual kind {self.kind!r}")
        if self.kind == LINEAR_GAUSSIAN:
            if self.H is None:
                raise ValueError("linear_gaussian factors need an observation matrix")
            object.__setattr__(self, "H", np.asarray(self.H, dtype=float))
        if self.kind == CUSTOM and self.residual_fn is None:
            raise ValueError("custom factors need a residual callable")
        if self.kind == RELATIVE_SE2 and len(self.block_ids) != 2:
            raise ValueError("relative_se2 factors connect exactly two blocks")
        if self.preprocess_jacobian is not None:
            J = np.asarray(self.preprocess_jacobian, dtype=float)
            if J.ndim != 2 or J.shape[0] != J.shape[1]:
                raise ValueError("preprocessing Jacobian must be square")
            if np.linalg.cond(J) >= _MAX_PREPROCESS_COND:
                raise ValueError("preprocessing Jacobian is numerically rank deficient")
            object.__setattr__(self, "preprocess_jacobian", J)
            object.__setattr__(self, "preprocess_jacobian_inv", np.linalg.inv(J))

    @property
    def dim(self) -> int:
        """Residual dimension m."""
        if self.kind == LINEAR_GAUSSIAN:
            return self.H.shape[0]
        if self.kind == RELATIVE_SE2:
            return 3
        return self.z.shape[0]


def linear_factor(factor_id, block_ids, H, z, group_id, preprocess_jacobian=None):
    """r(x) = z - H x over the stacked Euclidean blocks (Jacobian -H)."""
    ids = (block_ids,) if isinstance(block_ids, (str, int)) else tuple(block_ids)
    return MeasurementFactor(factor_id, LINEAR_GAUSSIAN, ids, z, group_id,
                             H=H, preprocess_jacobian=preprocess_jacobian)


def prior_factor(factor_id, block_id, z, group_id):
    """r(x) = z - x_block (Jacobian -I)."""
    return MeasurementFactor(factor_id, PRIOR_EUCLIDEAN, (block_id,), z, group_id)


def relative_se2_factor(factor_id, block_a, block_b, z, group_id,
                        preprocess_jacobian=None):
    """r(x) = log((a^-1 b)^-1 . z) for the measured relative pose z of b in a."""
    return MeasurementFactor(factor_id, RELATIVE_SE2, (block_a, block_b), z,
                             group_id, preprocess_jacobian=preprocess_jacobian)


def custom_factor(factor_id, block_ids, z, group_id, residual_fn):
    """User residual ``residual_fn(z, *block_values) -> (m,)``; FD Jacobians."""
    return MeasurementFactor(factor_id, CUSTOM, tuple(block_ids), z, group_id,
                             residual_fn=residual_fn)


@dataclass(frozen=True, eq=False)
class NoiseGroup:
    """One measurement type: residual dimension, variant, prior, bounds.

    ``information`` is the group's current information matrix: the fixed
    weight for the ``fixed`` variant and the initial value otherwise
    (defaults to identity).  Eigenvalue-constrained variants require
    ``bounds = (lam_min, lam_max)`` with ``lam_max >= lam_min > 0``; MAP
    variants require a Wishart prior.
    """

    group_id: Hashable
    m: int
    variant: str
    prior: WishartPrior | None = None
    bounds: tuple[float, float] | None = None
    information: np.ndarray | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown noise-group variant {self.variant!r}")
        estimator, constraint = variant_parts(self.variant)
        if estimator == "map" and self.prior is None:
            raise ValueError(f"group {self.group_id!r}: MAP variants need a prior")
        if self.prior is not None and self.prior.m != self.m:
            raise ValueError("prior dimension does not match group dimension")
        if constraint in ("eig", "diag-eig"):
            if self.bounds is None:
                raise ValueError(f"group {self.group_id!r}: eig variants need bounds")
            lam_min, lam_max = self.bounds
            if not (0.0 < lam_min <= lam_max):
                raise ValueError("bounds must satisfy 0 < lam_min <= lam_max")
        P = self.information
        if P is None:
            P = np.eye(self.m)
        P = symmetrize(np.asarray(P, dtype=float))
        if P.shape != (self.m, self.m):
            raise ValueError("information matrix shape does not match m")
        if cholesky_or_none(P) is None:
            raise ValueError("information matrix must be positive definite")
        if self.bounds is not None and self.variant != "fixed":
            lam_min, lam_max = self.bounds
            sigma_eigs = 1.0 / np.linalg.eigvalsh(P)
            if sigma_eigs.min() < lam_min * (1 - 1e-9) or sigma_eigs.max() > lam_max * (1 + 1e-9):
                raise ValueError("initial covariance eigenvalues violate the bounds")
        object.__setattr__(self, "information", P)

    @property
    def estimator(self) -> str:
        return variant_parts(self.variant)[0]

    @property
    def constraint(self) -> str:
        return variant_parts(self.variant)[1]


@dataclass(frozen=True, eq=False)
class JointProblem:
    """Factors + manifold + noise groups + gauge; what every solver consumes."""

    manifold: ManifoldSpec
    factors: tuple[MeasurementFactor, ...]
    groups: tuple[NoiseGroup, ...]
    gauge_fixed: frozenset = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "factors", tuple(self.factors))
        if isinstance(self.groups, Mapping):
            object.__setattr__(self, "groups", tuple(self.groups.values()))
        else:
            object.__setattr__(self, "groups", tuple(self.groups))
        object.__setattr__(self, "gauge_fixed", frozenset(self.gauge_fixed))
        ids = [g.group_id for g in self.groups]
        if len(set(ids)) != len(ids):
            raise ValueError("group ids must be unique")
        by_id = {g.group_id: g for g in self.groups}
        counts = {gid: 0 for gid in by_id}
        for f in self.factors:
            for bid in f.block_ids:
                if bid not in self.manifold._by_id:
                    raise ValueError(f"factor {f.factor_id} references unknown block {bid!r}")
            if f.group_id not in by_id:
                raise ValueError(f"factor {f.factor_id} references unknown group {f.group_id!r}")
            g = by_id[f.group_id]
            if f.dim != g.m:
                raise ValueError(
                    f"factor {f.factor_id} residual dimension {f.dim} != group m {g.m}")
            if f.preprocess_jacobian is not None and f.preprocess_jacobian.shape != (g.m, g.m):
                raise ValueError("preprocessing Jacobian must be m x m")
            counts[f.group_id] += 1
        for gid, n in counts.items():
            if n == 0:
                raise ValueError(f"group {gid!r} has no factors")
        for bid in self.gauge_fixed:
            if bid not in self.manifold._by_id:
                raise ValueError(f"gauge-fixed block {bid!r} is not in the manifold")

    @cached_property
    def group_table(self) -> dict:
        return {g.group_id: g for g in self.groups}

    @cached_property
    def factors_by_group(self) -> dict:
        out: dict = {g.group_id: [] for g in self.groups}
        for f in self.factors:
            out[f.group_id].append(f)
        return {gid: tuple(fs) for gid, fs in out.items()}

    def group(self, group_id) -> NoiseGroup:
        return self.group_table[group_id]


def _stacked_euclidean(x: ManifoldPoint, block_ids) -> np.ndarray:
    return np.concatenate([x.block(bid) for bid in block_ids])


def residual(f: MeasurementFactor, x: ManifoldPoint) -> np.ndarray:
    """Residual r(x) = z [-] h(x) for one factor."""
    if f.kind == LINEAR_GAUSSIAN:
        return f.z - f.H @ _stacked_euclidean(x, f.block_ids)
    if f.kind == PRIOR_EUCLIDEAN:
        return f.z - x.block(f.block_ids[0])
    if f.kind == RELATIVE_SE2:
        a = x.block(f.block_ids[0])
        b = x.block(f.block_ids[1])
        h = se2_compose(se2_inverse(a), b)
        return log_se2(se2_compose(se2_inverse(h), f.z))
    return np.asarray(f.residual_fn(f.z, *(x.block(bid) for bid in f.block_ids)),
                      dtype=float)


# ---------------------------------------------------------------------------
# Analytic SE(2) Jacobian pieces, in (x, y, theta) chart coordinates.
# ---------------------------------------------------------------------------

def _rot(th):
    c, s = np.cos(th), np.sin(th)
    return np.array([[c, -s], [s, c]])


def _drot(th):
    c, s = np.cos(th), np.sin(th)
    return np.array([[-s, -c], [c, -s]])


def _dcompose_first(a, b):
    """d(a.b)/da in chart coordinates."""
    J = np.eye(3)
    J[:2, 2] = _drot(a[2]) @ b[:2]
    return J


def _dcompose_second(a):
    """d(a.b)/db in chart coordinates (independent of b)."""
    J = np.eye(3)
    J[:2, :2] = _rot(a[2])
    return J


def _dinverse(a):
    """d(a^-1)/da in chart coordinates."""
    J = np.zeros((3, 3))
    J[:2, :2] = -_rot(a[2]).T
    J[:2, 2] = -_drot(a[2]).T @ a[:2]
    J[2, 2] = -1.0
    return J


def _dlog(g):
    """d(log_se2(g))/dg in chart coordinates."""
    th = g[2]
    if abs(th) < 1e-7:
        alpha, dalpha = 1.0 - th * th / 12.0, -th / 6.0
    else:
        half = 0.5 * th
        sin_half = np.sin(half)
        alpha = half * np.cos(half) / sin_half
        dalpha = (np.sin(th) - th) / (4.0 * sin_half * sin_half)
    J = np.zeros((3, 3))
    J[0, 0] = J[1, 1] = alpha
    J[0, 1] = 0.5 * th
    J[1, 0] = -0.5 * th
    J[0, 2] = dalpha * g[0] + 0.5 * g[1]
    J[1, 2] = -0.5 * g[0] + dalpha * g[1]
    J[2, 2] = 1.0
    return J


def _relative_se2_jacobian(a, b, z):
    """d r / d (right perturbations of a, b) for r = log(b^-1 a z)."""
    az = se2_compose(a, z)
    b_inv = se2_inverse(b)
    g = se2_compose(b_inv, az)
    dlog = _dlog(g)
    # right perturbation enters through d(a . exp(d))/dd at 0 = [[R(a), 0], [0, 1]]
    Ja = dlog @ _dcompose_second(b_inv) @ _dcompose_first(a, z) @ _dcompose_second(a)
    Jb = dlog @ _dcompose_first(b_inv, az) @ _dinverse(b) @ _dcompose_second(b)
    return Ja, Jb


def residual_jacobian(f: MeasurementFactor, x: ManifoldPoint) -> np.ndarray:
    """Jacobian of r with respect to the tangent of the connected blocks.

    Columns are ordered by ``f.block_ids``.  Analytic for linear, prior, and
    relative-pose factors; custom factors fall back to central finite
    differences with step ``1e-6``.
    """
    if f.kind == LINEAR_GAUSSIAN:
        return -f.H
    if f.kind == PRIOR_EUCLIDEAN:
        return -np.eye(f.dim)
    if f.kind == RELATIVE_SE2:
        a = x.block(f.block_ids[0])
        b = x.block(f.block_ids[1])
        Ja, Jb = _relative_se2_jacobian(a, b, f.z)
        return np.hstack([Ja, Jb])
    return _fd_jacobian(f, x)


def _fd_jacobian(f: MeasurementFactor, x: ManifoldPoint) -> np.ndarray:
    spec = x.spec
    dims = [spec.block(bid).dim for bid in f.block_ids]
    total = sum(dims)
    J = np.empty((f.dim, total))
    col = 0
    v = np.zeros(spec.tangent_dim)
    for bid, dim in zip(f.block_ids, dims):
        sl = spec.tangent_slice(bid)
        for j in range(dim):
            v[sl.start + j] = FD_STEP
            r_plus = residual(f, boxplus(x, v))
            v[sl.start + j] = -FD_STEP
            r_minus = residual(f, boxplus(x, v))
            v[sl.start + j] = 0.0
            J[:, col] = (r_plus - r_minus) / (2.0 * FD_STEP)
            col += 1
    return J


# ---------------------------------------------------------------------------
# Batched evaluation (hot path for pose graphs).
# ---------------------------------------------------------------------------

def _batch_relative_se2(x: ManifoldPoint, factors, with_jacobians: bool):
    """Vectorized residuals (n, 3) and Jacobians (n, 3, 3) for SE(2) edges."""
    spec = x.spec
    if all(blk.dim == 3 for blk in spec.blocks):
        # uniform block size: one stacked gather instead of per-factor lookups
        pose_matrix = np.stack(x.values)
        pos = spec._positions
        ia = np.fromiter((pos[f.block_ids[0]] for f in factors), dtype=np.intp,
                         count=len(factors))
        ib = np.fromiter((pos[f.block_ids[1]] for f in factors), dtype=np.intp,
                         count=len(factors))
        a = pose_matrix[ia]
        b = pose_matrix[ib]
    else:
        a = np.stack([x.block(f.block_ids[0]) for f in factors])
        b = np.stack([x.block(f.block_ids[1]) for f in factors])
    z = np.stack([f.z for f in factors])

    az = se2_compose(a, z)
    b_inv = se2_inverse(b)
    g = se2_compose(b_inv, az)
    r = log_se2(g)
    if not with_jacobians:
        return r, None, None

    n = len(factors)
    cb, sb = np.cos(b_inv[:, 2]), np.sin(b_inv[:, 2])
    ca, sa = np.cos(a[:, 2]), np.sin(a[:, 2])

    # dlog(g)
    th = g[:, 2]
    small = np.abs(th) < 1e-7
    ths = np.where(small, 1.0, th)
    half = 0.5 * ths
    sin_half = np.sin(half)
    alpha = np.where(small, 1.0 - th * th / 12.0, half * np.cos(half) / sin_half)
    dalpha = np.where(small, -th / 6.0,
                      (np.sin(ths) - ths) / (4.0 * sin_half * sin_half))
    dlog = np.zeros((n, 3, 3))
    dlog[:, 0, 0] = dlog[:, 1, 1] = alpha
    dlog[:, 0, 1] = 0.5 * th
    dlog[:, 1, 0] = -0.5 * th
    dlog[:, 0, 2] = dalpha * g[:, 0] + 0.5 * g[:, 1]
    dlog[:, 1, 2] = -0.5 * g[:, 0] + dalpha * g[:, 1]
    dlog[:, 2, 2] = 1.0

    # chain: Ja = dlog . R(b_inv) . dcompose_first(a, z) . R(a)
    A = np.zeros((n, 3, 3))  # dcompose_second(b_inv): rotation of b_inv
    A[:, 0, 0] = cb
    A[:, 0, 1] = -sb
    A[:, 1, 0] = sb
    A[:, 1, 1] = cb
    A[:, 2, 2] = 1.0

    B = np.zeros((n, 3, 3))  # dcompose_first(a, z)
    B[:, 0, 0] = B[:, 1, 1] = B[:, 2, 2] = 1.0
    B[:, 0, 2] = -sa * z[:, 0] - ca * z[:, 1]
    B[:, 1, 2] = ca * z[:, 0] - sa * z[:, 1]

    Ra = np.zeros((n, 3, 3))  # dcompose_second(a): rotation of a
    Ra[:, 0, 0] = ca
    Ra[:, 0, 1] = -sa
    Ra[:, 1, 0] = sa
    Ra[:, 1, 1] = ca
    Ra[:, 2, 2] = 1.0

    Ja = dlog @ A @ B @ Ra

    # Jb = dlog . dcompose_first(b_inv, az) . dinverse(b) . R(b)
    C = np.zeros((n, 3, 3))  # dcompose_first(b_inv, az)
    C[:, 0, 0] = C[:, 1, 1] = C[:, 2, 2] = 1.0
    C[:, 0, 2] = -sb * az[:, 0] - cb * az[:, 1]
    C[:, 1, 2] = cb * az[:, 0] - sb * az[:, 1]

    cbb, sbb = np.cos(b[:, 2]), np.sin(b[:, 2])
    Dinv = np.zeros((n, 3, 3))  # dinverse(b)
    Dinv[:, 0, 0] = -cbb
    Dinv[:, 0, 1] = -sbb
    Dinv[:, 1, 0] = sbb
    Dinv[:, 1, 1] = -cbb
    Dinv[:, 0, 2] = sbb * b[:, 0] - cbb * b[:, 1]
    Dinv[:, 1, 2] = cbb * b[:, 0] + sbb * b[:, 1]
    Dinv[:, 2, 2] = -1.0

    Rb = np.zeros((n, 3, 3))  # dcompose_second(b): rotation of b
    Rb[:, 0, 0] = cbb
    Rb[:, 0, 1] = -sbb
    Rb[:, 1, 0] = sbb
    Rb[:, 1, 1] = cbb
    Rb[:, 2, 2] = 1.0

    Jb = dlog @ C @ Dinv @ Rb
    return r, Ja, Jb


def group_residuals(problem: JointProblem, x: ManifoldPoint, group_id) -> np.ndarray:
    """All residuals of a group stacked into a (k, m) array."""
    factors = problem.factors_by_group[group_id]
    se2_factors = [f for f in factors if f.kind == RELATIVE_SE2]
    if len(se2_factors) == len(factors) and factors:
        r, _, _ = _batch_relative_se2(x, factors, with_jacobians=False)
        return r
    return np.stack([residual(f, x) for f in factors])


def sample_covariance(problem: JointProblem, x: ManifoldPoint, group_id) -> np.ndarray:
    """Sample covariance (1/k) sum_i r_i r_i^T over the group's residuals.

    Factors carrying a preprocessing Jacobian contribute
    ``J^-1 r r^T J^-T`` instead, so the estimate lives in raw-measurement
    space.  The result is symmetric PSD but may be singular; singularity
    handling is the caller's concern.
    """
    factors = problem.factors_by_group[group_id]
    R = group_residuals(problem, x, group_id)
    for i, f in enumerate(factors):
        if f.preprocess_jacobian_inv is not None:
            R[i] = f.preprocess_jacobian_inv @ R[i]
    return symmetrize(R.T @ R / len(factors))

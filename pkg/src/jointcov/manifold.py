"""Product-manifold arithmetic for states built from Euclidean and SE(2) blocks.

Poses are stored as ``(x, y, theta)`` triples with ``theta`` wrapped into
``(-pi, pi]``; homogeneous 3x3 matrices are never materialized.  The SE(2)
functions broadcast over leading axes, so a single pose has shape ``(3,)``
and a batch of ``n`` poses has shape ``(n, 3)``.

Tangent vectors are plain flat float arrays whose block layout is given by a
:class:`ManifoldSpec`; ``boxplus`` is the retraction (Euclidean addition /
right composition with the SE(2) exponential) and ``boxminus`` its local
inverse.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Hashable, Mapping, Sequence

import numpy as np

EUCLIDEAN = "euclidean"
SE2 = "se2"

# Below this rotation magnitude, exp/log coefficients switch to their
# second-order Taylor expansions to avoid sin(w)/w style cancellation.
SMALL_ANGLE = 1e-7

# log_se2 refuses rotations this close to the cut locus at |theta| = pi.
_CUT_LOCUS_TOL = 1e-12

# Flat tangent vector; length must equal ManifoldSpec.tangent_dim.
TangentVector = np.ndarray


class CutLocusError(ValueError):
    """The SE(2) log map was evaluated at a rotation of +/-pi.

    The logarithm is ill conditioned at the cut locus; callers must perturb
    or reject such inputs explicitly rather than rely on a silent fixup.
    """


def wrap_angle(theta):
    """Wrap angles into ``(-pi, pi]`` (elementwise)."""
    th = np.remainder(np.asarray(theta, dtype=float), 2.0 * np.pi)
    return np.where(th > np.pi, th - 2.0 * np.pi, th)


def _exp_coeffs(w):
    """Return ``(sin w / w, (1 - cos w) / w)`` with a Taylor branch at w ~ 0.

    The second coefficient is evaluated as ``2 sin^2(w/2) / w``, which is
    free of the 1 - cos cancellation.
    """
    w = np.asarray(w, dtype=float)
    small = np.abs(w) < SMALL_ANGLE
    ws = np.where(small, 1.0, w)
    half_sin = np.sin(0.5 * ws)
    a = np.where(small, 1.0 - w * w / 6.0, np.sin(ws) / ws)
    b = np.where(small, 0.5 * w, 2.0 * half_sin * half_sin / ws)
    return a, b


def _log_coeffs(th):
    """Return ``(alpha, beta)`` with ``V(th)^-1 = [[alpha, beta], [-beta, alpha]]``.

    ``alpha = (th/2) cot(th/2)`` evaluated in the cancellation-free form
    ``(th/2) cos(th/2) / sin(th/2)``; Taylor branch ``1 - th^2/12`` near zero.
    """
    th = np.asarray(th, dtype=float)
    small = np.abs(th) < SMALL_ANGLE
    ths = np.where(small, 1.0, th)
    half = 0.5 * ths
    alpha = np.where(small, 1.0 - th * th / 12.0, half * np.cos(half) / np.sin(half))
    return alpha, 0.5 * th


def se2_compose(a, b):
    """Compose two SE(2) poses (or broadcastable batches): ``a . b``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    ca, sa = np.cos(a[..., 2]), np.sin(a[..., 2])
    out = np.empty(np.broadcast_shapes(a.shape, b.shape), dtype=float)
    out[..., 0] = a[..., 0] + ca * b[..., 0] - sa * b[..., 1]
    out[..., 1] = a[..., 1] + sa * b[..., 0] + ca * b[..., 1]
    out[..., 2] = wrap_angle(a[..., 2] + b[..., 2])
    return out


def se2_inverse(g):
    """Inverse pose(s): ``g^-1 . g = identity``."""
    g = np.asarray(g, dtype=float)
    c, s = np.cos(g[..., 2]), np.sin(g[..., 2])
    out = np.empty(g.shape, dtype=float)
    out[..., 0] = -(c * g[..., 0] + s * g[..., 1])
    out[..., 1] = -(-s * g[..., 0] + c * g[..., 1])
    out[..., 2] = wrap_angle(-g[..., 2])
    return out


def exp_se2(xi):
    """SE(2) exponential of tangent triple(s) ``(vx, vy, w)``.

    Closed form ``t = V(w) rho`` with
    ``V(w) = [[sin w / w, -(1-cos w)/w], [(1-cos w)/w, sin w / w]]``;
    the ``w = 0`` limit is handled by a Taylor branch.
    """
    xi = np.asarray(xi, dtype=float)
    a, b = _exp_coeffs(xi[..., 2])
    out = np.empty(xi.shape, dtype=float)
    out[..., 0] = a * xi[..., 0] - b * xi[..., 1]
    out[..., 1] = b * xi[..., 0] + a * xi[..., 1]
    out[..., 2] = wrap_angle(xi[..., 2])
    return out


def log_se2(g):
    """SE(2) logarithm; inverse of :func:`exp_se2` on ``|theta| < pi``.

    Raises:
        CutLocusError: if any rotation angle is within ``1e-12`` of ``+/-pi``.
    """
    g = np.asarray(g, dtype=float)
    th = wrap_angle(g[..., 2])
    if np.any(np.abs(np.abs(th) - np.pi) < _CUT_LOCUS_TOL):
        raise CutLocusError("log_se2 at a rotation of +/-pi (cut locus)")
    alpha, beta = _log_coeffs(th)
    out = np.empty(g.shape, dtype=float)
    out[..., 0] = alpha * g[..., 0] + beta * g[..., 1]
    out[..., 1] = -beta * g[..., 0] + alpha * g[..., 1]
    out[..., 2] = th
    return out


@dataclass(frozen=True)
class Block:
    """One state block: either Euclidean of a given dimension or one SE(2) pose."""

    block_id: Hashable
    kind: str
    dim: int

    def __post_init__(self):
        if self.kind not in (EUCLIDEAN, SE2):
            raise ValueError(f"unknown block kind {self.kind!r}")
        if self.kind == SE2 and self.dim != 3:
            raise ValueError("SE2 blocks have tangent dimension 3")
        if self.dim < 1:
            raise ValueError("block dimension must be >= 1")


def euclidean_block(block_id: Hashable, dim: int) -> Block:
    return Block(block_id, EUCLIDEAN, int(dim))


def se2_block(block_id: Hashable) -> Block:
    return Block(block_id, SE2, 3)


@dataclass(frozen=True)
class ManifoldSpec:
    """Ordered declaration of the product manifold's blocks.

    The tangent dimension is the sum of Euclidean dimensions plus 3 per
    SE(2) block; block ids must be unique.
    """

    blocks: tuple[Block, ...]

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(self.blocks))
        ids = [b.block_id for b in self.blocks]
        if len(set(ids)) != len(ids):
            raise ValueError("block ids must be unique")

    @cached_property
    def tangent_dim(self) -> int:
        return sum(b.dim for b in self.blocks)

    @cached_property
    def _offsets(self) -> dict:
        offsets, pos = {}, 0
        for b in self.blocks:
            offsets[b.block_id] = pos
            pos += b.dim
        return offsets

    @cached_property
    def _by_id(self) -> dict:
        return {b.block_id: b for b in self.blocks}

    @cached_property
    def _positions(self) -> dict:
        return {b.block_id: i for i, b in enumerate(self.blocks)}

    def block(self, block_id: Hashable) -> Block:
        return self._by_id[block_id]

    def position(self, block_id: Hashable) -> int:
        return self._positions[block_id]

    def tangent_offset(self, block_id: Hashable) -> int:
        return self._offsets[block_id]

    def tangent_slice(self, block_id: Hashable) -> slice:
        off = self._offsets[block_id]
        return slice(off, off + self._by_id[block_id].dim)

    def identity(self) -> "ManifoldPoint":
        """The origin: zero vectors and identity poses."""
        return ManifoldPoint(self, tuple(np.zeros(b.dim) for b in self.blocks))


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class ManifoldPoint:
    """Immutable point on a :class:`ManifoldSpec`.

    Euclidean blocks hold plain vectors; SE(2) blocks hold ``(x, y, theta)``
    with the angle wrapped into ``(-pi, pi]`` at construction.
    """

    spec: ManifoldSpec
    values: tuple[np.ndarray, ...]

    def __post_init__(self):
        if len(self.values) != len(self.spec.blocks):
            raise ValueError("value count does not match block count")
        frozen = []
        for blk, val in zip(self.spec.blocks, self.values):
            v = np.array(val, dtype=float).reshape(-1)
            if v.shape != (blk.dim,):
                raise ValueError(
                    f"block {blk.block_id!r} expects shape ({blk.dim},), got {v.shape}"
                )
            if blk.kind == SE2:
                v[2] = wrap_angle(v[2])
            frozen.append(_freeze(v))
        object.__setattr__(self, "values", tuple(frozen))

    @classmethod
    def from_blocks(cls, spec: ManifoldSpec, blocks: Mapping) -> "ManifoldPoint":
        return cls(spec, tuple(blocks[b.block_id] for b in spec.blocks))

    def block(self, block_id: Hashable) -> np.ndarray:
        return self.values[self.spec.position(block_id)]


def boxplus(x: ManifoldPoint, v: Sequence[float]) -> ManifoldPoint:
    """Retraction: Euclidean blocks add, SE(2) blocks compose with ``exp_se2``."""
    v = np.asarray(v, dtype=float)
    if v.shape != (x.spec.tangent_dim,):
        raise ValueError(
            f"tangent vector has length {v.shape}, expected ({x.spec.tangent_dim},)"
        )
    out, pos = [], 0
    for blk, val in zip(x.spec.blocks, x.values):
        vb = v[pos : pos + blk.dim]
        if blk.kind == EUCLIDEAN:
            out.append(val + vb)
        else:
            out.append(se2_compose(val, exp_se2(vb)))
        pos += blk.dim
    return ManifoldPoint(x.spec, tuple(out))


def boxminus(z: ManifoldPoint, y: ManifoldPoint) -> TangentVector:
    """Local inverse of :func:`boxplus`: ``boxminus(boxplus(y, v), y) = v``.

    Euclidean blocks subtract; SE(2) blocks return ``log_se2(y^-1 . z)``.
    Raises :class:`CutLocusError` if a relative rotation lands on the cut
    locus.
    """
    if z.spec is not y.spec and z.spec != y.spec:
        raise ValueError("points live on different manifold specs")
    out = np.empty(z.spec.tangent_dim)
    pos = 0
    for blk, zv, yv in zip(z.spec.blocks, z.values, y.values):
        if blk.kind == EUCLIDEAN:
            out[pos : pos + blk.dim] = zv - yv
        else:
            out[pos : pos + 3] = log_se2(se2_compose(se2_inverse(yv), zv))
        pos += blk.dim
    return out

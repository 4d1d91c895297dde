"""Multi-granularity orthogonal matrices ``R = G1 @ G2 @ H1 @ H2``.

``G1`` rotates the disjoint planes (0,1), (2,3), ...; ``G2`` rotates the
shifted planes (1,2), (3,4), .... Together they carry ``d - 1`` angles.
``H1`` and ``H2`` are Householder reflections ``I - 2 u u^T`` whose unit
vectors are derived from unconstrained raw vectors by normalization, so the
product of the two is a proper rotation.

Convention for a single Givens factor ``G(i, j, theta)``: ``cos`` on the
diagonal at ``i`` and ``j``, ``+sin`` at ``(i, j)`` and ``-sin`` at ``(j, i)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

__all__ = [
    "GivensPlan",
    "HouseholderPair",
    "MultiGranularityRotation",
    "givens_matrix",
    "householder_matrix",
    "materialize",
    "apply_fast",
    "apply_transpose_fast",
    "rotation_gradients",
    "rotate",
    "solve_ladder_angles",
    "apply_chain",
    "butterfly_coverage_residual",
]


def _stage_pairs(d: int, offset: int) -> list[tuple[int, int]]:
    return [(i, i + 1) for i in range(offset, d - 1, 2)]


@dataclass(frozen=True)
class GivensPlan:
    d: int
    angles: np.ndarray

    def __post_init__(self):
        if self.d < 2:
            raise ValueError(f"a Givens plan needs d >= 2, got {self.d}")
        angles = np.asarray(self.angles, dtype=np.float64)
        if angles.shape != (self.d - 1,):
            raise ValueError(f"expected {self.d - 1} angles, got shape {angles.shape}")
        object.__setattr__(self, "angles", angles)

    @property
    def stage_one(self) -> list[tuple[int, int]]:
        return _stage_pairs(self.d, 0)

    @property
    def stage_two(self) -> list[tuple[int, int]]:
        return _stage_pairs(self.d, 1)

    @property
    def split(self) -> int:
        return self.d // 2


@dataclass(frozen=True)
class HouseholderPair:
    v1: np.ndarray
    v2: np.ndarray

    def __post_init__(self):
        for name in ("v1", "v2"):
            v = np.asarray(getattr(self, name), dtype=np.float64)
            if v.ndim != 1:
                raise ValueError(f"{name} must be a vector")
            if not np.linalg.norm(v) > 0:
                raise ValueError(f"{name} must be non-zero")
            object.__setattr__(self, name, v)
        if self.v1.shape != self.v2.shape:
            raise ValueError("v1 and v2 must have the same length")

    @property
    def u1(self) -> np.ndarray:
        return self.v1 / np.linalg.norm(self.v1)

    @property
    def u2(self) -> np.ndarray:
        return self.v2 / np.linalg.norm(self.v2)


@dataclass(frozen=True)
class MultiGranularityRotation:
    plan: GivensPlan
    householders: HouseholderPair = field(default=None)

    def __post_init__(self):
        if self.householders is None:
            e1 = np.eye(self.plan.d)[0]
            object.__setattr__(self, "householders", HouseholderPair(e1, e1.copy()))
        if self.householders.v1.shape[0] != self.plan.d:
            raise ValueError("Householder vectors must have length d")

    @classmethod
    def identity(cls, d: int) -> "MultiGranularityRotation":
        return cls(GivensPlan(d, np.zeros(d - 1)))

    @classmethod
    def from_params(cls, theta, v1, v2) -> "MultiGranularityRotation":
        theta = np.asarray(theta, dtype=np.float64)
        return cls(GivensPlan(theta.shape[0] + 1, theta), HouseholderPair(v1, v2))

    @classmethod
    def random(cls, d: int, rng: np.random.Generator, angle_scale: float = np.pi):
        return cls.from_params(
            rng.uniform(-angle_scale, angle_scale, d - 1),
            rng.standard_normal(d),
            rng.standard_normal(d),
        )

    @property
    def d(self) -> int:
        return self.plan.d

    @property
    def num_parameters(self) -> int:
        return (self.d - 1) + 2 * self.d


def givens_matrix(d: int, i: int, j: int, theta: float) -> np.ndarray:
    if not (0 <= i < j < d):
        raise ValueError(f"need 0 <= i < j < d, got i={i}, j={j}, d={d}")
    G = np.eye(d)
    c, s = np.cos(theta), np.sin(theta)
    G[i, i] = G[j, j] = c
    G[i, j] = s
    G[j, i] = -s
    return G


def householder_matrix(u) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    norm = np.linalg.norm(u)
    if norm == 0:
        raise ValueError("Householder vector must be non-zero")
    if abs(norm - 1.0) > 1e-12:
        raise ValueError(f"Householder vector must have unit norm, got {norm!r}")
    return np.eye(u.shape[0]) - 2.0 * np.outer(u, u)


def materialize(rot: MultiGranularityRotation) -> np.ndarray:
    d = rot.d
    theta = rot.plan.angles
    k = rot.plan.split
    R = np.eye(d)
    for (i, j), t in zip(rot.plan.stage_one, theta[:k]):
        R = R @ givens_matrix(d, i, j, t)
    for (i, j), t in zip(rot.plan.stage_two, theta[k:]):
        R = R @ givens_matrix(d, i, j, t)
    H1 = householder_matrix(rot.householders.u1)
    H2 = householder_matrix(rot.householders.u2)
    return R @ H1 @ H2


# --------------------------------------------------------------------------
# sparse fast path


def _stage_patterns(d: int, offset: int, theta: np.ndarray):
    """cos pattern, sin pattern and row permutation for one Givens stage."""
    cos = np.ones(d)
    sin = np.zeros(d)
    perm = np.arange(d)
    i = np.arange(offset, offset + 2 * len(theta), 2)
    j = i + 1
    c, s = np.cos(theta), np.sin(theta)
    cos[i] = c
    cos[j] = c
    sin[i] = s
    sin[j] = -s
    perm[i] = j
    perm[j] = i
    return cos, sin, perm


def _apply_stage(X, cos, sin, perm):
    return X * cos[:, None] + X[perm] * sin[:, None]


def _reflect(u, X):
    return X - 2.0 * np.outer(u, u @ X)


def _check_rows(rot, X):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] != rot.d:
        raise ValueError(f"expected a {rot.d} x n matrix, got shape {X.shape}")
    return X


def _forward_states(rot: MultiGranularityRotation, X: np.ndarray):
    d, k = rot.d, rot.plan.split
    theta = rot.plan.angles
    p1 = _stage_patterns(d, 0, theta[:k])
    p2 = _stage_patterns(d, 1, theta[k:])
    u1, u2 = rot.householders.u1, rot.householders.u2
    A = _reflect(u2, X)
    B = _reflect(u1, A)
    C = _apply_stage(B, *p2)
    Y = _apply_stage(C, *p1)
    return A, B, C, Y, p1, p2


def apply_fast(rot: MultiGranularityRotation, X) -> np.ndarray:
    """``materialize(rot) @ X`` without forming any d x d matrix."""
    X = _check_rows(rot, X)
    return _forward_states(rot, X)[3]


def apply_transpose_fast(rot: MultiGranularityRotation, Y) -> np.ndarray:
    """``materialize(rot).T @ Y``."""
    Y = _check_rows(rot, Y)
    d, k = rot.d, rot.plan.split
    theta = rot.plan.angles
    out = _apply_stage(Y, *_stage_patterns(d, 0, -theta[:k]))
    out = _apply_stage(out, *_stage_patterns(d, 1, -theta[k:]))
    out = _reflect(rot.householders.u1, out)
    return _reflect(rot.householders.u2, out)


def _stage_angle_grad(offset, theta, inp, g_out):
    # out_i = c*x_i + s*x_j,  out_j = -s*x_i + c*x_j
    i = np.arange(offset, offset + 2 * len(theta), 2)
    j = i + 1
    c, s = np.cos(theta)[:, None], np.sin(theta)[:, None]
    xi, xj = inp[i], inp[j]
    gi, gj = g_out[i], g_out[j]
    return (gi * (-s * xi + c * xj) + gj * (-c * xi - s * xj)).sum(axis=1)


def _householder_grads(u, v, X, gA):
    # A = X - 2 u (u^T X); gradient w.r.t. u, then projected through u = v/|v|.
    g_u = -2.0 * (gA @ (X.T @ u) + X @ (gA.T @ u))
    g_v = (g_u - u * (u @ g_u)) / np.linalg.norm(v)
    g_X = _reflect(u, gA)
    return g_v, g_X


def rotation_gradients(rot: MultiGranularityRotation, upstream, X):
    """Gradients of ``sum(upstream * apply_fast(rot, X))``.

    Returns ``(g_theta, g_v1, g_v2, g_X)``.
    """
    X = _check_rows(rot, X)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != X.shape:
        raise ValueError(f"upstream shape {upstream.shape} != input shape {X.shape}")
    d, k = rot.d, rot.plan.split
    theta = rot.plan.angles
    A, B, C, _, _, _ = _forward_states(rot, X)

    g_theta = np.empty(d - 1)
    g_theta[:k] = _stage_angle_grad(0, theta[:k], C, upstream)
    gC = _apply_stage(upstream, *_stage_patterns(d, 0, -theta[:k]))
    g_theta[k:] = _stage_angle_grad(1, theta[k:], B, gC)
    gB = _apply_stage(gC, *_stage_patterns(d, 1, -theta[k:]))

    hh = rot.householders
    g_v1, gA = _householder_grads(hh.u1, hh.v1, A, gB)
    g_v2, g_X = _householder_grads(hh.u2, hh.v2, X, gA)
    return g_theta, g_v1, g_v2, g_X


def rotate(theta: ad.Node, v1: ad.Node, v2: ad.Node, X) -> ad.Node:
    """Tape operation computing ``R(theta, v1, v2) @ X``."""
    tape = theta.tape
    Xn = tape._lift(X)
    rot = MultiGranularityRotation.from_params(theta.value, v1.value, v2.value)
    out = apply_fast(rot, Xn.value)
    Xv = Xn.value

    def vjp(g):
        return rotation_gradients(rot, g, Xv)

    return ad.custom("rotate", out, (theta, v1, v2, Xn), vjp)


# --------------------------------------------------------------------------
# full-angle coverage


def _ladder_to_last_axis(v: np.ndarray) -> list[float]:
    """Angles on planes (k, k+1) that zero v[0..d-2] and leave v[d-1] >= 0."""
    v = v.copy()
    angles = []
    for k in range(v.shape[0] - 1):
        theta = np.arctan2(-v[k], v[k + 1])
        c, s = np.cos(theta), np.sin(theta)
        v[k], v[k + 1] = c * v[k] + s * v[k + 1], -s * v[k] + c * v[k + 1]
        angles.append(theta)
    return angles


def _check_unit(name, x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] < 2:
        raise ValueError(f"{name} must be a vector of length >= 2")
    if abs(np.linalg.norm(x) - 1.0) > 1e-12:
        raise ValueError(f"{name} must have unit norm")
    return x


def solve_ladder_angles(v, y) -> list[tuple[tuple[int, int], float]]:
    """Chain of adjacent-plane rotations mapping unit ``v`` onto unit ``y``.

    The chain is ordered by application: the first entry acts on ``v`` first.
    Zero angles are dropped, so ``v == y`` may yield a chain whose product is
    the identity up to rounding.
    """
    v = _check_unit("v", v)
    y = _check_unit("y", y)
    if v.shape != y.shape:
        raise ValueError("v and y must have the same dimension")
    down = [((k, k + 1), t) for k, t in enumerate(_ladder_to_last_axis(v))]
    up = [((k, k + 1), -t) for k, t in enumerate(_ladder_to_last_axis(y))][::-1]
    return [(pair, float(t)) for pair, t in down + up if t != 0.0]


def apply_chain(chain, x) -> np.ndarray:
    """Apply a chain from :func:`solve_ladder_angles` using dense Givens factors."""
    x = np.asarray(x, dtype=np.float64)
    d = x.shape[0]
    for (i, j), t in chain:
        x = givens_matrix(d, i, j, t) @ x
    return x


def butterfly_coverage_residual(v, y, restarts: int = 8, seed: int = 0) -> float:
    """Smallest ``|G1 G2 v - y|`` found by least squares over the d-1 angles.

    A numerical probe of whether the fixed two-stage arrangement alone reaches
    ``y`` from ``v``; it is not a proof either way.
    """
    from scipy.optimize import least_squares

    v = _check_unit("v", v)
    y = _check_unit("y", y)
    d = v.shape[0]
    e1 = np.eye(d)[0]
    col = v[:, None]

    def residual(theta):
        rot = MultiGranularityRotation(GivensPlan(d, theta), HouseholderPair(e1, e1))
        return apply_fast(rot, col)[:, 0] - y

    rng = np.random.default_rng(seed)
    best = np.inf
    for _ in range(restarts):
        sol = least_squares(residual, rng.uniform(-np.pi, np.pi, d - 1), xtol=1e-15, ftol=1e-15, gtol=1e-15)
        best = min(best, float(np.linalg.norm(sol.fun)))
        if best < 1e-12:
            break
    return best

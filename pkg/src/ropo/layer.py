"""The RoPO linear layer: frozen unit-column directions, a shared trainable
rotation, and a trainable per-column magnitude.

With ``W`` of shape ``(d, n)`` and row-vector inputs ``x`` of length ``d``,
the layer computes ``z = x @ (R @ W_hat) * m`` where ``W_hat`` holds the
unit-normalized columns of ``W``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .rotations import MultiGranularityRotation, apply_fast, rotate

__all__ = ["DecomposedWeight", "LayerFootprint", "ropo_forward", "merge", "footprint", "ropo_forward_node"]


@dataclass(frozen=True)
class LayerFootprint:
    d: int
    n: int
    trainable_count: int
    frozen_count: int


def footprint(d: int, n: int) -> LayerFootprint:
    """Parameter census of one wrapped ``d x n`` matrix."""
    if d < 2:
        raise ValueError(f"d must be >= 2 for a Givens plan, got {d}")
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    return LayerFootprint(d, n, (d - 1) + 2 * d + n, d * n)


def column_norms(W: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(W, axis=0)
    bad = np.flatnonzero(~(norms > 0))
    if bad.size:
        raise ValueError(f"column {bad[0]} of the weight matrix has zero norm")
    return norms


@dataclass(frozen=True)
class DecomposedWeight:
    W_frozen: np.ndarray
    column_norms: np.ndarray
    direction: np.ndarray
    m: np.ndarray
    rot: MultiGranularityRotation

    @classmethod
    def from_weight(cls, W) -> "DecomposedWeight":
        W = np.array(W, dtype=np.float64)
        if W.ndim != 2:
            raise ValueError("weight must be a d x n matrix")
        W.setflags(write=False)
        norms = column_norms(W)
        direction = W / norms
        direction.setflags(write=False)
        return cls(W, norms, direction, norms.copy(), MultiGranularityRotation.identity(W.shape[0]))

    def with_params(self, theta=None, v1=None, v2=None, m=None) -> "DecomposedWeight":
        hh = self.rot.householders
        rot = MultiGranularityRotation.from_params(
            self.rot.plan.angles if theta is None else theta,
            hh.v1 if v1 is None else v1,
            hh.v2 if v2 is None else v2,
        )
        return replace(self, rot=rot, m=self.m if m is None else np.asarray(m, dtype=np.float64))

    @property
    def shape(self) -> tuple[int, int]:
        return self.W_frozen.shape

    @property
    def footprint(self) -> LayerFootprint:
        return footprint(*self.shape)


def ropo_forward(layer: DecomposedWeight, x) -> np.ndarray:
    """Outputs for a batch of inputs (rows of ``x``, or a single vector)."""
    x = np.asarray(x, dtype=np.float64)
    d = layer.shape[0]
    if x.shape[-1] != d:
        raise ValueError(f"input length {x.shape[-1]} does not match d={d}")
    rotated = apply_fast(layer.rot, layer.direction)
    return (x @ rotated) * layer.m


def merge(layer: DecomposedWeight) -> np.ndarray:
    """Dense ``d x n`` weight equivalent to the decomposed layer."""
    return apply_fast(layer.rot, layer.direction) * layer.m


def ropo_forward_node(x, direction, theta: ad.Node, v1: ad.Node, v2: ad.Node, m: ad.Node) -> ad.Node:
    """Tape version of :func:`ropo_forward`; ``direction`` stays constant."""
    weight = ad.mul(rotate(theta, v1, v2, direction), m)
    return ad.matmul(x, weight)

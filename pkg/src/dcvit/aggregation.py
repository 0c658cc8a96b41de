"""Pooling functions and decoupled (spatial-then-channel) aggregation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import ShapeError, Tensor

POOL_MODES = ("mean", "max", "cls", "abmil")


@dataclass
class PoolParams:
    mode: str
    V: Tensor | None = None
    u: Tensor | None = None

    def __post_init__(self):
        if self.mode not in POOL_MODES:
            raise ValueError(f"unknown pooling mode {self.mode!r}; expected one of {POOL_MODES}")
        if self.mode == "abmil":
            if self.V is None or self.u is None:
                raise ValueError("abmil pooling needs V and u")
            if self.u.shape != (self.V.shape[1],):
                raise ShapeError(f"abmil u {self.u.shape} does not match V {self.V.shape}")


@dataclass
class AggregationConfig:
    g_sp: PoolParams
    g_ch: PoolParams
    joint: bool = False


def abmil_weights(X: Tensor, p: PoolParams, mask=None) -> Tensor:
    """Instance weights ``softmax_i(u . tanh(V^T x_i))`` over axis -2."""
    logits = nx.matmul(nx.tanh(nx.linear(X, p.V)), nx.reshape(p.u, (-1, 1)))
    logits = nx.reshape(logits, logits.shape[:-1])
    return nx.softmax(logits, axis=-1, mask=mask)


def pool(X: Tensor, p: PoolParams, mask=None) -> Tensor:
    """Reduce ``[..., n, D]`` to ``[..., D]``.

    ``mask`` (``[..., n]``) restricts the set of rows for mean, max and abmil.
    """
    if X.ndim < 2 or X.shape[-2] == 0:
        raise ShapeError(f"pool needs at least one row, got shape {X.shape}")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not mask.any(axis=-1).all():
            raise ValueError("pooling over an empty set")
    if p.mode == "mean":
        if mask is None:
            return nx.mean(X, axis=-2)
        m = mask.astype(X.dtype)
        total = nx.sum(X * m[..., None], axis=-2)
        return total * (1.0 / m.sum(axis=-1, keepdims=True))
    if p.mode == "max":
        return nx.amax(X, axis=-2, mask=None if mask is None else mask[..., None])
    if p.mode == "cls":
        return X[..., 0, :]
    w = abmil_weights(X, p, mask)
    out = nx.matmul(nx.reshape(w, (*w.shape[:-1], 1, w.shape[-1])), X)
    return nx.reshape(out, (*out.shape[:-2], out.shape[-1]))


def _check_present(x_L: Tensor, present):
    if present is None:
        return None
    present = np.asarray(present, dtype=bool)
    if present.shape[-1] != x_L.shape[-3]:
        raise ShapeError(f"mask of length {present.shape[-1]} for {x_L.shape[-3]} channels")
    if not present.any(axis=-1).all():
        raise ValueError("aggregation needs at least one present channel")
    return present


def dag(x_L: Tensor, cfg: AggregationConfig, present=None) -> Tensor:
    """Pool each channel's tokens with ``g_sp``, then the channel embeddings with ``g_ch``."""
    present = _check_present(x_L, present)
    y = pool(x_L, cfg.g_sp)
    return pool(y, cfg.g_ch, mask=present)


def pool_joint(x_L: Tensor, p: PoolParams, present=None) -> Tensor:
    """Pool all present ``C*N`` tokens as one set."""
    present = _check_present(x_L, present)
    *lead, C, N, D = x_L.shape
    flat = nx.reshape(x_L, (*lead, C * N, D))
    mask = None
    if present is not None:
        mask = np.repeat(present, N, axis=-1)
    return pool(flat, p, mask=mask)


def aggregate(x_L: Tensor, cfg: AggregationConfig, present=None) -> Tensor:
    if cfg.joint:
        return pool_joint(x_L, cfg.g_sp, present)
    return dag(x_L, cfg, present)

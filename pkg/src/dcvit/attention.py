"""Scaled dot-product attention and its three token arrangements.

Shapes follow ``[..., C, N, D]`` for the decoupled layouts (any number of
leading batch axes, including none) and ``[..., S, D]`` for the joint one.
The ``present`` masks are boolean arrays shaped ``[..., C]``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import ShapeError, Tensor


@dataclass
class AttentionParams:
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    heads: int = 1

    def __post_init__(self):
        D = self.wq.shape[0]
        for name in ("wq", "wk", "wv", "wo"):
            if getattr(self, name).shape != (D, D):
                raise ShapeError(f"{name} must be {D}x{D}, got {getattr(self, name).shape}")
        if self.heads < 1 or D % self.heads:
            raise ShapeError(f"embed dim {D} is not divisible by {self.heads} heads")

    @property
    def dim(self) -> int:
        return self.wq.shape[0]

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads


@dataclass
class DsaLayerParams:
    attn: AttentionParams
    alpha: Tensor | None = None
    layer_in_M: bool = False

    def __post_init__(self):
        if self.layer_in_M != (self.alpha is not None):
            raise ValueError("alpha must be given exactly when the layer is in M")


def scaled_dot_attention(q, k, v, scale: float, key_mask=None) -> Tensor:
    """``softmax(q k^T / scale) v`` over the last two axes.

    ``key_mask`` (``[..., S]``) drops keys from the softmax.
    """
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"attention operands disagree: q{q.shape} k{k.shape} v{v.shape}")
    if scale <= 0:
        raise ValueError("scale must be positive")
    scores = nx.matmul(q, nx.swapaxes(k, -1, -2)) * (1.0 / scale)
    mask = None if key_mask is None else np.asarray(key_mask, dtype=bool)[..., None, :]
    return nx.matmul(nx.softmax(scores, mask=mask), v)


def _split_heads(t: Tensor, heads: int) -> Tensor:
    *lead, S, D = t.shape
    t = nx.reshape(t, (*lead, S, heads, D // heads))
    return nx.swapaxes(t, -2, -3)


def _merge_heads(t: Tensor) -> Tensor:
    t = nx.swapaxes(t, -2, -3)
    *lead, S, H, Dh = t.shape
    return nx.reshape(t, (*lead, S, H * Dh))


def project_qkv(x: Tensor, p: AttentionParams):
    if x.shape[-1] != p.dim:
        raise ShapeError(f"token width {x.shape[-1]} does not match attention dim {p.dim}")
    return (
        nx.linear(x, p.wq, p.bq),
        nx.linear(x, p.wk, p.bk),
        nx.linear(x, p.wv, p.bv),
    )


def attend_heads(q, k, v, heads: int, key_mask=None) -> Tensor:
    """Multi-head attention over axis -2 of already-projected q, k, v."""
    Dh = q.shape[-1] // heads
    if key_mask is not None:
        key_mask = np.asarray(key_mask, dtype=bool)[..., None, :]
    out = scaled_dot_attention(
        _split_heads(q, heads),
        _split_heads(k, heads),
        _split_heads(v, heads),
        scale=float(np.sqrt(Dh)),
        key_mask=key_mask,
    )
    return _merge_heads(out)


def multi_head_attend(x: Tensor, p: AttentionParams, key_mask=None) -> Tensor:
    """Attention over the rows of ``x`` before the output projection."""
    q, k, v = project_qkv(x, p)
    return attend_heads(q, k, v, p.heads, key_mask)


def msa_joint(x: Tensor, p: AttentionParams, key_mask=None) -> Tensor:
    """Baseline joint attention over a flattened ``C*N`` token sequence."""
    return nx.linear(multi_head_attend(x, p, key_mask), p.wo, p.bo)


def _check_grid(x: Tensor) -> None:
    if x.ndim < 3:
        raise ShapeError(f"expected a [..., C, N, D] token grid, got shape {x.shape}")


def _zero_absent(t: Tensor, present) -> Tensor:
    if present is None:
        return t
    m = np.asarray(present, dtype=t.dtype)[..., :, None, None]
    return t * m


def _spatial_from_qkv(q, k, v, heads):
    return attend_heads(q, k, v, heads)


def _channel_from_qkv(q, k, v, heads, present):
    # [..., C, N, D] -> [..., N, C, D]: one attention problem per location
    qs, ks, vs = (nx.swapaxes(t, -2, -3) for t in (q, k, v))
    key_mask = None
    if present is not None:
        present = np.asarray(present, dtype=bool)
        if not present.any(axis=-1).all():
            raise ValueError("channel attention needs at least one present channel")
        key_mask = present[..., None, :]
    out = nx.swapaxes(attend_heads(qs, ks, vs, heads, key_mask), -2, -3)
    return out


def spatial_attention(x: Tensor, p: AttentionParams) -> Tensor:
    """Within-channel attention: each channel's N tokens attend to each other."""
    _check_grid(x)
    return multi_head_attend(x, p)


def channel_attention(x: Tensor, p: AttentionParams, present=None) -> Tensor:
    """Across-channel attention at each spatial location.

    Absent channels are removed from the softmax and receive zero output.
    """
    _check_grid(x)
    if present is not None and np.asarray(present).shape[-1] != x.shape[-3]:
        raise ShapeError(f"mask of length {np.asarray(present).shape[-1]} for {x.shape[-3]} channels")
    q, k, v = project_qkv(x, p)
    return _zero_absent(_channel_from_qkv(q, k, v, p.heads, present), present)


def dsa(x: Tensor, layer: DsaLayerParams, present=None) -> Tensor:
    """Decoupled self-attention, without the residual connection.

    Spatial attention always runs; for layers in M the channel branch is mixed
    in as ``alpha * channel + (1 - alpha) * spatial`` before the shared output
    projection. Queries, keys and values are projected once and reused.
    """
    _check_grid(x)
    p = layer.attn
    q, k, v = project_qkv(x, p)
    mixed = _spatial_from_qkv(q, k, v, p.heads)
    if layer.layer_in_M:
        ch = _zero_absent(_channel_from_qkv(q, k, v, p.heads, present), present)
        mixed = layer.alpha * ch + (1.0 - layer.alpha) * mixed
    return nx.linear(mixed, p.wo, p.bo)

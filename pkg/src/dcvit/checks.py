"""Cross-module invariant suite used by ``dcvit check`` and the tests."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import numerics as nx
from .aggregation import AggregationConfig, PoolParams, dag, pool_joint
from .attention import DsaLayerParams, dsa, spatial_attention
from .complexity import count_dsa, count_msa, flops_dsa, flops_msa
from .encoder import ChannelBatch, DcVitModel, ModelConfig, encode, forward_logits, init_model
from .numerics import Tensor


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    value: float
    tolerance: float

    def row(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{self.name:<34} {status}  value={self.value:.3e}  tol={self.tolerance:.0e}"


def cross_channel_sensitivity(f: Callable[[np.ndarray], np.ndarray], x: np.ndarray, src: int, dst: int,
                              channel_axis: int = 0, h: float = 1e-5) -> float:
    """Largest central-difference derivative of output channel ``dst`` with
    respect to any entry of input channel ``src``.

    ``f`` maps an array laid out like ``x`` to one whose ``channel_axis`` also
    indexes channels.
    """
    x = np.asarray(x, dtype=np.float64)
    worst = 0.0
    src_view = np.moveaxis(x, channel_axis, 0)[src]
    for idx in np.ndindex(src_view.shape):
        xp, xm = x.copy(), x.copy()
        np.moveaxis(xp, channel_axis, 0)[src][idx] += h
        np.moveaxis(xm, channel_axis, 0)[src][idx] -= h
        d = (np.moveaxis(f(xp), channel_axis, 0)[dst] - np.moveaxis(f(xm), channel_axis, 0)[dst]) / (2 * h)
        worst = max(worst, float(np.abs(d).max()))
    return worst


def _tiny(**kw) -> ModelConfig:
    base = dict(c_max=4, img_size=4, patch_size=2, dim=8, depth=2, heads=2, channel_layers=(2,),
                num_classes=3, mlp_ratio=2.0)
    base.update(kw)
    return ModelConfig(**base)


def _spread(model: DcVitModel, rng: np.random.Generator, scale: float = 0.3) -> DcVitModel:
    # move away from the near-zero init so every term contributes
    for name, p in model.params.items():
        if not name.endswith(("alpha", "gamma")):
            p.data = p.data + scale * rng.standard_normal(p.shape)
    return model


def _model(cfg: ModelConfig, seed: int) -> DcVitModel:
    return _spread(init_model(cfg, seed=seed, dtype=np.float64), np.random.default_rng(seed))


def _without_alpha(model: DcVitModel, cfg: ModelConfig) -> DcVitModel:
    return DcVitModel(cfg, {k: v for k, v in model.params.items() if not k.endswith("alpha")})


def alpha_zero_collapse(seed: int) -> float:
    model = _model(_tiny(), seed)
    x = Tensor(np.random.default_rng(seed).standard_normal((2, 3, 4, 8)))
    p = model.attention(1)
    got = dsa(x, DsaLayerParams(p, Tensor(0.0), True))
    want = nx.linear(spatial_attention(x, p), p.wo, p.bo)
    return float(np.abs(got.data - want.data).max())


def one_channel_equivalence(seed: int) -> float:
    worst = 0.0
    for M in ((), (1, 2)):
        d = _model(_tiny(channel_layers=M, alpha_init=0.0), seed)
        m = _without_alpha(d, _tiny(channel_layers=M, block_kind="mcvit"))
        b = ChannelBatch(np.random.default_rng(seed).standard_normal((2, 1, 4, 4)))
        worst = max(worst, float(np.abs(forward_logits(b, d).data - forward_logits(b, m).data).max()))
    return worst


def dsa_permutation_equivariance(seed: int) -> float:
    model = _model(_tiny(), seed)
    x = np.random.default_rng(seed).standard_normal((2, 3, 4, 8))
    perm = [2, 0, 1]
    layer = model.dsa_layer(1)
    a = dsa(Tensor(x), layer).data[:, perm]
    b = dsa(Tensor(x[:, perm]), layer).data
    return float(np.abs(a - b).max())


def logits_permutation_invariance(seed: int) -> float:
    worst = 0.0
    x = np.random.default_rng(seed).standard_normal((2, 3, 4, 4))
    for g_ch in ("mean", "max"):
        model = _model(_tiny(use_channel_embed=False, g_ch=g_ch), seed)
        a = forward_logits(ChannelBatch(x), model).data
        b = forward_logits(ChannelBatch(x[:, [1, 2, 0]]), model).data
        worst = max(worst, float(np.abs(a - b).max()))
    return worst


def channel_isolation(seed: int) -> float:
    model = _model(_tiny(channel_layers=(), use_channel_embed=False), seed)
    x = np.random.default_rng(seed).standard_normal((1, 3, 4, 4))

    def f(images):
        return encode(ChannelBatch(images), model).data

    return max(cross_channel_sensitivity(f, x, s, t, channel_axis=1) for s in range(3) for t in range(3) if s != t)


def dag_joint_mean(seed: int) -> float:
    x = Tensor(np.random.default_rng(seed).standard_normal((2, 3, 5, 4)))
    mean = PoolParams("mean")
    a = dag(x, AggregationConfig(mean, mean)).data
    b = pool_joint(x, mean).data
    return float(np.abs(a - b).max())


def flops_counter_agreement(seed: int) -> float:
    """Largest absolute mismatch between counted and analytic FLOPs on a small grid."""
    rng = np.random.default_rng(seed)
    worst = 0
    for C in (1, 2, 3):
        for N in (1, 2, 3):
            for D in (2, 4):
                x = rng.standard_normal((C, N, D))
                worst = max(worst, abs(count_msa(x, 2)[0] - flops_msa(C, N, D, 2)))
                worst = max(worst, abs(count_dsa(x, 2, 1)[0] - flops_dsa(C, N, D, 2, 1)))
    return float(worst)


INVARIANTS: tuple[tuple[str, Callable[[int], float], float], ...] = (
    ("alpha_zero_collapse", alpha_zero_collapse, 1e-12),
    ("one_channel_dcvit_equals_mcvit", one_channel_equivalence, 1e-8),
    ("dsa_permutation_equivariance", dsa_permutation_equivariance, 1e-12),
    ("logits_permutation_invariance", logits_permutation_invariance, 1e-8),
    ("channel_isolation_without_M", channel_isolation, 1e-8),
    ("dag_mean_equals_joint_mean", dag_joint_mean, 1e-12),
    ("flops_counter_agreement", flops_counter_agreement, 0.0),
)


def run_checks(seed: int = 0) -> list[CheckResult]:
    results = []
    for name, fn, tol in INVARIANTS:
        value = fn(seed)
        results.append(CheckResult(name, bool(value <= tol), value, tol))
    return results

"""Attention-core FLOPs model and forward-pass timing harness.

Only the attention core is counted: ``q k^T``, the softmax and ``A v``.
Projections and MLPs cost the same for joint and decoupled attention and are
left out. Conventions: a ``m x k`` by ``k x n`` product costs ``2 m k n``
(one multiply and one add per term); softmax costs 5 per score (max-compare,
subtract, exp, sum-add, divide). Heads are not modelled: splitting the width
into heads leaves the matmul counts unchanged and the softmax term is taken
for a single head.
"""

from __future__ import annotations

import csv
import math
import statistics
import time
from dataclasses import dataclass

import numpy as np
from threadpoolctl import threadpool_limits

from .encoder import ChannelBatch, ModelConfig, forward_logits, init_model

SOFTMAX_COST = 5
CSV_HEADER = ("mode", "C", "N", "D", "L", "m", "analytic_flops", "wall_time_s", "repeats")


def _core(S: int, D: int) -> int:
    return 4 * S * S * D + SOFTMAX_COST * S * S


def flops_msa(C: int, N: int, D: int, L: int) -> int:
    """Joint attention over ``C*N`` tokens in each of ``L`` layers."""
    if min(C, N, D, L) < 1:
        raise ValueError("flops_msa needs positive C, N, D, L")
    return L * _core(C * N, D)


def flops_dsa(C: int, N: int, D: int, L: int, m: int) -> int:
    """Spatial attention (C problems of size N) in every layer, channel
    attention (N problems of size C) in ``m`` of them."""
    if min(C, N, D, L) < 1 or m < 0:
        raise ValueError("flops_dsa needs positive C, N, D, L and m >= 0")
    if m > L:
        raise ValueError(f"m={m} channel-attention layers exceed depth L={L}")
    return L * C * _core(N, D) + m * N * _core(C, D)


def loglog_slope(points) -> float:
    """Least-squares slope of ln(value) against ln(C)."""
    pts = [(float(c), float(v)) for c, v in points]
    if len(pts) < 2:
        raise ValueError("need at least two points")
    cs = [c for c, _ in pts]
    if len(set(cs)) != len(cs) or min(cs) <= 0 or min(v for _, v in pts) <= 0:
        raise ValueError("points need distinct positive C and positive values")
    slope, _ = np.polyfit(np.log(cs), np.log([v for _, v in pts]), 1)
    return float(slope)


class CountingAttention:
    """Scalar-loop single-head attention that tallies every arithmetic op.

    The 1/sqrt(d) scale is assumed folded into the query projection, so it is
    not part of the count.
    """

    def __init__(self):
        self.ops = 0

    def dot(self, a, b) -> float:
        acc = 0.0
        for x, y in zip(a, b):
            acc += x * y
            self.ops += 2
        return acc

    def softmax(self, row):
        top = row[0]
        self.ops += 1
        for r in row[1:]:
            top = r if r > top else top
            self.ops += 1
        shifted = []
        for r in row:
            shifted.append(r - top)
            self.ops += 1
        ex = []
        for s in shifted:
            ex.append(math.exp(s))
            self.ops += 1
        total = 0.0
        for e in ex:
            total += e
            self.ops += 1
        out = []
        for e in ex:
            out.append(e / total)
            self.ops += 1
        return out

    def attend(self, q, k, v):
        """``q, k, v`` are lists of S rows of width D."""
        out = []
        for qi in q:
            w = self.softmax([self.dot(qi, kj) for kj in k])
            D = len(v[0])
            row = [0.0] * D
            for d in range(D):
                acc = 0.0
                for j, vj in enumerate(v):
                    acc += w[j] * vj[d]
                    self.ops += 2
                row[d] = acc
            out.append(row)
        return out


def count_msa(x: np.ndarray, layers: int) -> tuple[int, np.ndarray]:
    """Run joint attention on a ``[C, N, D]`` grid (identity projections), counting ops."""
    counter = CountingAttention()
    C, N, D = x.shape
    seq = x.reshape(C * N, D).tolist()
    for _ in range(layers):
        seq = counter.attend(seq, seq, seq)
    return counter.ops, np.asarray(seq).reshape(C, N, D)


def count_dsa(x: np.ndarray, layers: int, m: int, alpha: float = 0.5) -> tuple[int, np.ndarray]:
    """Decoupled attention on ``[C, N, D]``; the first ``m`` layers also run channel attention.

    The alpha mix itself is not attention-core work and is not counted.
    """
    counter = CountingAttention()
    C, N, D = x.shape
    grid = x.tolist()
    out = None
    for l in range(layers):
        sp = [counter.attend(grid[c], grid[c], grid[c]) for c in range(C)]
        out = np.asarray(sp)
        if l < m:
            ch = np.zeros_like(out)
            for n in range(N):
                col = [grid[c][n] for c in range(C)]
                ch[:, n, :] = counter.attend(col, col, col)
            out = alpha * ch + (1 - alpha) * out
        grid = out.tolist()
    return counter.ops, out


@dataclass
class BenchRecord:
    mode: str
    C: int
    N: int
    D: int
    L: int
    m: int
    analytic_flops: int
    wall_time_s: float
    repeats: int
    parallel: bool = False

    def csv_row(self) -> list:
        return [self.mode, self.C, self.N, self.D, self.L, self.m, self.analytic_flops, repr(self.wall_time_s), self.repeats]


def bench_forward(cfg: ModelConfig, repeats: int = 5, seed: int = 0, parallel: bool = False) -> BenchRecord:
    """Median wall time of one B=1 forward pass over ``cfg.c_max`` channels."""
    if repeats < 3:
        raise ValueError("repeats must be >= 3")
    model = init_model(cfg, seed=seed, dtype=np.float32)
    rng = np.random.default_rng(seed)
    C, N, D, L = cfg.c_max, cfg.tokens_per_channel, cfg.dim, cfg.depth
    images = rng.standard_normal((1, C, cfg.img_size, cfg.img_size)).astype(np.float32)
    batch = ChannelBatch(images)
    if cfg.block_kind == "dcvit":
        mode, m = "dsa", len(cfg.channel_layers)
        flops = flops_dsa(C, N, D, L, m)
    else:
        mode, m = "msa", 0
        flops = flops_msa(C, N, D, L)
    times = []
    with threadpool_limits(None if parallel else 1):
        forward_logits(batch, model)  # warm-up
        for _ in range(repeats):
            t0 = time.perf_counter()
            forward_logits(batch, model)
            times.append(time.perf_counter() - t0)
    return BenchRecord(mode, C, N, D, L, m, flops, statistics.median(times), repeats, parallel)


def sweep_config(C: int, N: int, D: int, L: int, M, mode: str, heads: int = 1, patch_size: int = 4) -> ModelConfig:
    side = math.isqrt(N)
    if side * side != N:
        raise ValueError(f"N={N} is not a square token grid")
    return ModelConfig(
        c_max=C,
        img_size=side * patch_size,
        patch_size=patch_size,
        dim=D,
        depth=L,
        heads=heads,
        channel_layers=tuple(M) if mode == "dsa" else (),
        block_kind="dcvit" if mode == "dsa" else "mcvit",
        num_classes=2,
    )


def bench_sweep(C_list, N: int, D: int, L: int, M, repeats: int = 5, seed: int = 0, parallel: bool = False,
                heads: int = 1) -> list[BenchRecord]:
    records = []
    for mode in ("dsa", "msa"):
        for C in C_list:
            cfg = sweep_config(C, N, D, L, M, mode, heads=heads)
            records.append(bench_forward(cfg, repeats, seed, parallel))
    return records


def write_csv(records, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, quoting=csv.QUOTE_MINIMAL)
        w.writerow(CSV_HEADER)
        for r in records:
            w.writerow(r.csv_row())


def slopes(records) -> dict[str, tuple[float, float]]:
    """Per mode: (FLOPs slope, wall-time slope) against C."""
    out = {}
    for mode in sorted({r.mode for r in records}):
        rs = [r for r in records if r.mode == mode]
        out[mode] = (
            loglog_slope([(r.C, r.analytic_flops) for r in rs]),
            loglog_slope([(r.C, r.wall_time_s) for r in rs]),
        )
    return out


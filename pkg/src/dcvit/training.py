"""Cross-entropy training with Adam, plus the full-model gradient check."""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .encoder import (
    PARAM_GROUPS,
    ChannelBatch,
    ConfigError,
    DcVitModel,
    ModelConfig,
    forward_logits,
    init_model,
    param_group,
)
from .numerics import GradTape, Tensor, backward, cross_entropy


@dataclass
class TrainConfig:
    # tiny synthetic tasks train fast at 1e-3; large real datasets usually want less
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    batch_size: int = 32
    steps: int = 1000
    seed: int = 0
    eval_every: int = 100
    grad_clip: float | None = None
    # stop once validation accuracy reaches this value (None: run all steps)
    target_accuracy: float | None = None

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        if self.lr < 0 or self.steps < 1 or self.batch_size < 1 or self.eval_every < 1:
            raise ConfigError("need lr >= 0, steps >= 1, batch_size >= 1, eval_every >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown train keys: {unknown}")
        return cls(**d)


@dataclass
class TrainHistory:
    records: list[dict] = field(default_factory=list)
    alphas: dict[int, float] = field(default_factory=dict)

    @property
    def best_accuracy(self) -> float:
        return max((r["val_accuracy"] for r in self.records), default=float("nan"))

    @property
    def final_accuracy(self) -> float:
        return self.records[-1]["val_accuracy"] if self.records else float("nan")

    def to_jsonl(self) -> str:
        lines = [json.dumps(r) for r in self.records]
        lines.append(json.dumps({"alpha": {str(k): v for k, v in self.alphas.items()}}))
        return "\n".join(lines) + "\n"


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState, cfg: TrainConfig, t: int) -> None:
    """One bias-corrected Adam update, written into ``params`` in place."""
    if t < 1:
        raise ValueError("Adam step counter starts at 1")
    b1, b2 = cfg.betas
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise nx.ShapeError(f"{name}: gradient {g.shape} vs parameter {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        p.data = (p.data - cfg.lr * mhat / (np.sqrt(vhat) + cfg.eps)).astype(p.dtype, copy=False)


def loss_and_grads(model: DcVitModel, batch: ChannelBatch):
    with GradTape() as tape:
        loss = cross_entropy(forward_logits(batch, model), batch.labels)
    g = backward(tape, loss)
    return float(loss.data), {k: g[p] for k, p in model.params.items()}


def _clip(grads: dict[str, np.ndarray], max_norm: float) -> None:
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total > max_norm:
        for g in grads.values():
            g *= max_norm / (total + 1e-12)


def predict(model: DcVitModel, batch: ChannelBatch, chunk: int = 256) -> np.ndarray:
    preds = []
    for lo in range(0, len(batch), chunk):
        logits = forward_logits(batch.subset(slice(lo, lo + chunk)), model)
        preds.append(np.argmax(logits.data, axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def accuracy(model: DcVitModel, batch: ChannelBatch) -> float:
    return float((predict(model, batch) == batch.labels).mean())


def train(model: DcVitModel, train_set: ChannelBatch, val_set: ChannelBatch, cfg: TrainConfig,
          log=None) -> TrainHistory:
    """Seeded minibatch Adam on ``model.params`` (mutated in place)."""
    if train_set.labels is None or val_set.labels is None:
        raise ValueError("training needs labelled data")
    if train_set.labels.max(initial=0) >= model.config.num_classes:
        raise ConfigError("task has more classes than the model head")
    rng = np.random.default_rng(cfg.seed)
    state = AdamState()
    hist = TrainHistory()
    n = len(train_set)
    for step in range(1, cfg.steps + 1):
        idx = rng.choice(n, size=min(cfg.batch_size, n), replace=False)
        loss, grads = loss_and_grads(model, train_set.subset(idx))
        if cfg.grad_clip is not None:
            _clip(grads, cfg.grad_clip)
        adam_step(model.params, grads, state, cfg, step)
        if step % cfg.eval_every == 0 or step == cfg.steps:
            acc = accuracy(model, val_set)
            rec = {"step": step, "train_loss": loss, "val_accuracy": acc}
            if model.alphas():
                rec["alpha"] = {str(k): v for k, v in model.alphas().items()}
            hist.records.append(rec)
            if log is not None:
                log(rec)
            if cfg.target_accuracy is not None and acc >= cfg.target_accuracy:
                break
    hist.alphas = model.alphas()
    return hist


# ---------------------------------------------------------------------------
# gradient check


@dataclass
class GradcheckReport:
    errors: dict[str, float]
    members: dict[str, list[str]]
    num_params: int

    def passed(self, tol: float = 1e-3) -> bool:
        return all(e < tol for e in self.errors.values())


GRADCHECK_MAX_PARAMS = 50_000


def gradcheck(config: ModelConfig, seed: int = 0, batch_size: int = 2, h: float = 1e-5,
              channels: int | None = None) -> GradcheckReport:
    """Analytic vs central-difference gradients for every parameter, in float64."""
    model = init_model(config, seed=seed, dtype=np.float64)
    # spread the tiny init so nonlinearities are exercised away from zero
    rng = np.random.default_rng(seed + 1)
    for name, p in model.params.items():
        if name.endswith(("alpha", "gamma")):
            continue
        p.data = p.data + 0.3 * rng.standard_normal(p.shape)
    if model.num_params() > GRADCHECK_MAX_PARAMS:
        raise ConfigError(f"model has {model.num_params()} parameters; gradcheck allows at most {GRADCHECK_MAX_PARAMS}")
    C = channels or config.c_max
    images = rng.standard_normal((batch_size, C, config.img_size, config.img_size))
    labels = rng.integers(0, config.num_classes, size=batch_size)
    batch = ChannelBatch(images, labels=labels)

    _, analytic = loss_and_grads(model, batch)

    members: dict[str, list[str]] = {g: [] for g in PARAM_GROUPS}
    errors: dict[str, float] = {}
    for name, p in model.params.items():
        original = p.data

        def f(t: Tensor, p=p):
            p.data = t.data
            return cross_entropy(forward_logits(batch, model), batch.labels)

        numeric = nx.finite_diff_grad(f, p, h)
        p.data = original
        group = param_group(name)
        members.setdefault(group, []).append(name)
        err = nx.relative_error(analytic[name], numeric)
        errors[group] = max(errors.get(group, 0.0), err)
    return GradcheckReport(errors, members, model.num_params())

"""Multi-channel ViT encoder: patch/embedding front end, DC-ViT and MC-ViT blocks."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .aggregation import POOL_MODES, AggregationConfig, PoolParams, aggregate
from .attention import AttentionParams, DsaLayerParams, dsa, msa_joint
from .numerics import ShapeError, Tensor


class ConfigError(ValueError):
    """Invalid model/run configuration."""


@dataclass
class ModelConfig:
    c_max: int = 8
    img_size: int = 224
    patch_size: int = 16
    dim: int = 384
    depth: int = 12
    heads: int = 6
    # 1-based layer indices that get channel attention
    channel_layers: tuple[int, ...] = (4, 6, 8)
    alpha_init: float = 0.1
    mlp_ratio: float = 4.0
    use_channel_embed: bool = True
    use_cls_per_channel: bool = False
    g_sp: str = "abmil"
    g_ch: str = "max"
    joint_pool: bool = False
    abmil_dim: int | None = None
    num_classes: int = 10
    block_kind: str = "dcvit"
    use_norm: bool = True
    # "literal": x + MLP(x + A(x));  "standard": h = x + A(x); h + MLP(h)
    residual: str = "literal"
    norm_eps: float = 1e-6

    def __post_init__(self):
        self.channel_layers = tuple(sorted(int(m) for m in self.channel_layers))
        if self.img_size <= 0 or self.patch_size <= 0 or self.img_size % self.patch_size:
            raise ConfigError(f"image side {self.img_size} is not divisible by patch size {self.patch_size}")
        if self.depth < 0:
            raise ConfigError("depth must be >= 0")
        bad = [m for m in self.channel_layers if not 1 <= m <= self.depth]
        if bad or len(set(self.channel_layers)) != len(self.channel_layers):
            raise ConfigError(f"channel_layers {list(self.channel_layers)} must be distinct indices in 1..{self.depth}")
        if self.heads < 1 or self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} is not divisible by heads {self.heads}")
        for name in ("g_sp", "g_ch"):
            if getattr(self, name) not in POOL_MODES:
                raise ConfigError(f"{name} must be one of {POOL_MODES}, got {getattr(self, name)!r}")
        if self.g_ch == "cls":
            raise ConfigError("g_ch cannot be 'cls': channels carry no cls slot")
        if self.g_sp == "cls" and not self.use_cls_per_channel:
            raise ConfigError("g_sp='cls' requires use_cls_per_channel")
        if self.block_kind not in ("dcvit", "mcvit"):
            raise ConfigError(f"block_kind must be 'dcvit' or 'mcvit', got {self.block_kind!r}")
        if self.residual not in ("literal", "standard"):
            raise ConfigError(f"residual must be 'literal' or 'standard', got {self.residual!r}")
        if self.c_max < 1 or self.num_classes < 1 or self.dim < 1:
            raise ConfigError("c_max, num_classes and dim must be positive")

    @property
    def tokens_per_channel(self) -> int:
        return (self.img_size // self.patch_size) ** 2

    @property
    def seq_len(self) -> int:
        return self.tokens_per_channel + int(self.use_cls_per_channel)

    @property
    def hidden_dim(self) -> int:
        return max(1, int(round(self.mlp_ratio * self.dim)))

    @property
    def pool_dim(self) -> int:
        return self.abmil_dim or max(1, self.dim // 2)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["channel_layers"] = list(self.channel_layers)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown model config keys: {unknown}")
        return cls(**d)


@dataclass
class ChannelBatch:
    images: np.ndarray  # [B, C, H, W]
    present: np.ndarray | None = None  # [B, C] bool
    labels: np.ndarray | None = None  # [B] int
    channel_ids: np.ndarray | None = None  # [C]

    def __post_init__(self):
        self.images = np.asarray(self.images)
        if self.images.ndim != 4:
            raise ShapeError(f"images must be [B, C, H, W], got {self.images.shape}")
        B, C = self.images.shape[:2]
        if self.present is None:
            self.present = np.ones((B, C), dtype=bool)
        self.present = np.asarray(self.present, dtype=bool)
        if self.present.shape != (B, C):
            raise ShapeError(f"present mask {self.present.shape} does not match images {self.images.shape}")
        if not self.present.any(axis=1).all():
            raise ValueError("every sample needs at least one present channel")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.channel_ids is None:
            self.channel_ids = np.arange(C)

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def num_channels(self) -> int:
        return self.images.shape[1]

    def subset(self, idx) -> "ChannelBatch":
        return ChannelBatch(
            self.images[idx],
            self.present[idx],
            None if self.labels is None else self.labels[idx],
            self.channel_ids,
        )


def _trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


@dataclass
class DcVitModel:
    config: ModelConfig
    params: dict[str, Tensor] = field(default_factory=dict)

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def num_params(self) -> int:
        return int(np.sum([p.size for p in self.params.values()]))

    def attention(self, l: int) -> AttentionParams:
        p = self.params
        pre = f"layers.{l}.attn."
        return AttentionParams(
            *(p[pre + n] for n in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")),
            heads=self.config.heads,
        )

    def dsa_layer(self, l: int) -> DsaLayerParams:
        in_m = (l + 1) in self.config.channel_layers
        return DsaLayerParams(self.attention(l), self.params.get(f"layers.{l}.alpha") if in_m else None, in_m)

    def aggregation(self) -> AggregationConfig:
        def mk(stage, mode):
            if mode == "abmil":
                return PoolParams(mode, self.params[f"{stage}.V"], self.params[f"{stage}.u"])
            return PoolParams(mode)

        c = self.config
        return AggregationConfig(mk("pool_sp", c.g_sp), mk("pool_ch", c.g_ch), joint=c.joint_pool)

    def alphas(self) -> dict[int, float]:
        if self.config.block_kind != "dcvit":
            return {}
        return {m: float(self.params[f"layers.{m - 1}.alpha"].data) for m in self.config.channel_layers}

    def copy(self) -> "DcVitModel":
        return DcVitModel(self.config, {k: Tensor(v.data.copy()) for k, v in self.params.items()})

    def astype(self, dtype) -> "DcVitModel":
        return DcVitModel(self.config, {k: Tensor(v.data.astype(dtype)) for k, v in self.params.items()})


def init_model(config: ModelConfig, seed: int = 0, dtype=np.float32) -> DcVitModel:
    """Random initialisation: truncated normal (std 0.02) weights, zero biases, unit norms."""
    rng = np.random.default_rng(seed)
    c = config
    D, P2 = c.dim, c.patch_size**2
    p: dict[str, np.ndarray] = {
        "patch.W": _trunc_normal(rng, (P2, D)),
        "patch.b": np.zeros(D),
        "pos_embed": _trunc_normal(rng, (c.tokens_per_channel, D)),
    }
    if c.use_channel_embed:
        p["channel_embed"] = _trunc_normal(rng, (c.c_max, D))
    if c.use_cls_per_channel:
        p["cls.token"] = _trunc_normal(rng, (1, D))
        p["cls.pos"] = _trunc_normal(rng, (1, D))
    for l in range(c.depth):
        pre = f"layers.{l}."
        for n in ("wq", "wk", "wv", "wo"):
            p[pre + "attn." + n] = _trunc_normal(rng, (D, D))
            p[pre + "attn.b" + n[1]] = np.zeros(D)
        if c.block_kind == "dcvit" and (l + 1) in c.channel_layers:
            p[pre + "alpha"] = np.array(c.alpha_init)
        p[pre + "mlp.W1"] = _trunc_normal(rng, (D, c.hidden_dim))
        p[pre + "mlp.b1"] = np.zeros(c.hidden_dim)
        p[pre + "mlp.W2"] = _trunc_normal(rng, (c.hidden_dim, D))
        p[pre + "mlp.b2"] = np.zeros(D)
        if c.use_norm:
            for ln in ("ln1", "ln2"):
                p[pre + ln + ".gamma"] = np.ones(D)
                p[pre + ln + ".beta"] = np.zeros(D)
    if c.use_norm:
        p["norm.gamma"] = np.ones(D)
        p["norm.beta"] = np.zeros(D)
    for stage, mode in (("pool_sp", c.g_sp), ("pool_ch", c.g_ch)):
        if mode == "abmil":
            p[stage + ".V"] = _trunc_normal(rng, (D, c.pool_dim))
            p[stage + ".u"] = _trunc_normal(rng, (c.pool_dim,))
    p["head.W"] = _trunc_normal(rng, (D, c.num_classes))
    p["head.b"] = np.zeros(c.num_classes)
    return DcVitModel(config, {k: Tensor(np.asarray(v, dtype=dtype)) for k, v in p.items()})


def param_group(name: str) -> str:
    """Coarse parameter family used in gradient-check reports."""
    if name.startswith("layers."):
        part = name.split(".")[2]
        return {"attn": "attn", "alpha": "alpha", "mlp": "mlp"}.get(part, "norm")
    head = name.split(".")[0]
    return {"patch": "patch", "cls": "cls", "norm": "norm"}.get(head, head)


PARAM_GROUPS = ("patch", "pos_embed", "channel_embed", "cls", "attn", "alpha", "mlp", "norm", "pool_sp", "pool_ch", "head")


# ---------------------------------------------------------------------------
# forward pieces


def _patchify(images: np.ndarray, P: int) -> np.ndarray:
    *lead, H, W = images.shape
    if H % P or W % P:
        raise ShapeError(f"image {H}x{W} is not divisible into {P}x{P} patches")
    h, w = H // P, W // P
    x = images.reshape(*lead, h, P, w, P)
    x = np.moveaxis(x, -3, -2)  # [..., h, w, P, P]
    return x.reshape(*lead, h * w, P * P)


def patch_embed(image, model: DcVitModel) -> Tensor:
    """Cut each channel into row-major P x P patches and apply the shared projection.

    Accepts ``[C, H, W]`` or ``[B, C, H, W]``; returns ``[..., C, N, D]``.
    """
    c = model.config
    arr = np.asarray(image.data if isinstance(image, Tensor) else image, dtype=model.dtype)
    if arr.shape[-1] != c.img_size or arr.shape[-2] != c.img_size:
        raise ShapeError(f"image side {arr.shape[-2:]} does not match configured {c.img_size}")
    patches = _patchify(arr, c.patch_size)
    return nx.linear(Tensor(patches), model.params["patch.W"], model.params["patch.b"])


def add_embeddings(tokens: Tensor, model: DcVitModel, channel_ids=None) -> Tensor:
    c = model.config
    p = model.params
    C = tokens.shape[-3]
    x = tokens + p["pos_embed"]
    if c.use_channel_embed:
        ids = np.arange(C) if channel_ids is None else np.asarray(channel_ids)
        if ids.shape != (C,):
            raise ShapeError(f"need {C} channel ids, got {ids.shape}")
        if ids.min() < 0 or ids.max() >= c.c_max:
            raise IndexError(f"channel id out of range 0..{c.c_max - 1}: {ids.tolist()}")
        ce = nx.take(p["channel_embed"], ids)
        x = x + nx.reshape(ce, (C, 1, c.dim))
    elif channel_ids is not None and np.asarray(channel_ids).shape != (C,):
        raise ShapeError(f"need {C} channel ids")
    if c.use_cls_per_channel:
        cls = p["cls.token"] + p["cls.pos"]
        cls = nx.broadcast_to(cls, (*x.shape[:-2], 1, c.dim))
        x = nx.concat([cls, x], axis=-2)
    return x


def _mlp(x: Tensor, model: DcVitModel, l: int) -> Tensor:
    p = model.params
    pre = f"layers.{l}.mlp."
    h = nx.gelu(nx.linear(x, p[pre + "W1"], p[pre + "b1"]))
    return nx.linear(h, p[pre + "W2"], p[pre + "b2"])


def _norm(x: Tensor, model: DcVitModel, name: str) -> Tensor:
    if not model.config.use_norm:
        return x
    p = model.params
    return nx.layer_norm(x, p[name + ".gamma"], p[name + ".beta"], model.config.norm_eps)


def _residual_block(x: Tensor, model: DcVitModel, l: int, attend) -> Tensor:
    a = attend(_norm(x, model, f"layers.{l}.ln1"))
    h = x + a
    m = _mlp(_norm(h, model, f"layers.{l}.ln2"), model, l)
    if model.config.residual == "standard":
        return h + m
    return x + m


def dcvit_block(x: Tensor, model: DcVitModel, l: int, present=None) -> Tensor:
    """One DC-ViT layer (0-based index ``l``) on a ``[..., C, N, D]`` grid."""
    layer = model.dsa_layer(l)
    return _residual_block(x, model, l, lambda t: dsa(t, layer, present))


def mcvit_block(x: Tensor, model: DcVitModel, l: int, key_mask=None) -> Tensor:
    """One joint-sequence MC-ViT layer on a flattened ``[..., C*N, D]`` sequence."""
    attn = model.attention(l)
    return _residual_block(x, model, l, lambda t: msa_joint(t, attn, key_mask))


def _mask_channels(x: Tensor, present) -> Tensor:
    if present is None or np.asarray(present).all():
        return x
    return x * np.asarray(present, dtype=x.dtype)[..., :, None, None]


def encode(batch: ChannelBatch, model: DcVitModel) -> Tensor:
    """Embed and run all blocks; returns ``[B, C, N', D]``."""
    c = model.config
    C = batch.num_channels
    if C > c.c_max:
        raise ShapeError(f"{C} channels exceed c_max={c.c_max}")
    present = batch.present
    x = add_embeddings(patch_embed(batch.images, model), model, batch.channel_ids)
    x = _mask_channels(x, present)
    B, _, Np, D = x.shape
    for l in range(c.depth):
        if c.block_kind == "dcvit":
            x = dcvit_block(x, model, l, present)
        else:
            key_mask = np.repeat(present, Np, axis=-1)
            flat = mcvit_block(nx.reshape(x, (B, C * Np, D)), model, l, key_mask)
            x = nx.reshape(flat, (B, C, Np, D))
        x = _mask_channels(x, present)
    if c.use_norm:
        x = _mask_channels(_norm(x, model, "norm"), present)
    return x


def forward_logits(batch: ChannelBatch, model: DcVitModel) -> Tensor:
    z = aggregate(encode(batch, model), model.aggregation(), batch.present)
    return nx.linear(z, model.params["head.W"], model.params["head.b"])

"""Seeded synthetic multi-channel classification tasks.

Informative channels carry one bar motif (2 pixels wide, amplitude 1) at a
random offset; every other channel is Gaussian noise. ``single_channel``
labels are the motif of the one informative channel; ``xor_channels`` labels
are the XOR of the motif ids of two informative channels.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .encoder import ChannelBatch, ConfigError

MOTIF_NAMES = ("horizontal", "vertical", "diagonal", "antidiagonal")


@dataclass
class SynthTask:
    kind: str = "single_channel"
    C: int = 3
    img_size: int = 16
    num_classes: int = 2
    informative_channels: list[int] = field(default_factory=lambda: [0])
    noise_std: float = 0.25
    seed: int = 0
    bar_length: int = 8

    def __post_init__(self):
        self.informative_channels = [int(c) for c in self.informative_channels]
        if self.kind not in ("single_channel", "xor_channels"):
            raise ConfigError(f"unknown task kind {self.kind!r}")
        want = 1 if self.kind == "single_channel" else 2
        if len(self.informative_channels) != want or len(set(self.informative_channels)) != want:
            raise ConfigError(f"{self.kind} needs {want} distinct informative channel(s)")
        if any(not 0 <= c < self.C for c in self.informative_channels):
            raise ConfigError(f"informative channels {self.informative_channels} outside 0..{self.C - 1}")
        if self.kind == "xor_channels" and self.num_classes != 2:
            raise ConfigError("xor_channels has exactly 2 classes")
        if not 2 <= self.num_classes <= len(MOTIF_NAMES):
            raise ConfigError(f"num_classes must be in 2..{len(MOTIF_NAMES)} (one motif per class)")
        if not 2 <= self.bar_length <= self.img_size:
            raise ConfigError("bar_length must fit in the image")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be >= 0")

    @property
    def motifs_per_channel(self) -> int:
        return 2 if self.kind == "xor_channels" else self.num_classes

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthTask":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown task keys: {unknown}")
        return cls(**d)


def motif_stamp(motif: int, length: int) -> np.ndarray:
    """``length x length`` binary stamp of a 2-pixel-wide bar."""
    s = np.zeros((length, length))
    mid = length // 2 - 1
    idx = np.arange(length)
    if motif == 0:
        s[mid:mid + 2, :] = 1.0
    elif motif == 1:
        s[:, mid:mid + 2] = 1.0
    elif motif == 2:
        s[idx, idx] = 1.0
        s[idx[:-1], idx[1:]] = 1.0
    elif motif == 3:
        s[idx, idx[::-1]] = 1.0
        s[idx[:-1], idx[::-1][1:]] = 1.0
    else:
        raise ValueError(f"no motif {motif}")
    return s


def gen_dataset(task: SynthTask, n_samples: int) -> ChannelBatch:
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    rng = np.random.default_rng(task.seed)
    S, Lb = task.img_size, task.bar_length
    K = task.motifs_per_channel
    n_inf = len(task.informative_channels)
    ids = rng.integers(0, K, size=(n_samples, n_inf))
    offsets = rng.integers(0, S - Lb + 1, size=(n_samples, n_inf, 2))
    images = rng.standard_normal((n_samples, task.C, S, S)) * task.noise_std
    stamps = [motif_stamp(k, Lb) for k in range(K)]
    for j, ch in enumerate(task.informative_channels):
        for i in range(n_samples):
            r, c = offsets[i, j]
            images[i, ch, r:r + Lb, c:c + Lb] += stamps[ids[i, j]]
    if task.kind == "single_channel":
        labels = ids[:, 0]
    else:
        labels = ids[:, 0] ^ ids[:, 1]
    return ChannelBatch(images.astype(np.float32), labels=labels)


def motif_ids(batch: ChannelBatch, task: SynthTask) -> np.ndarray:
    """Recover each informative channel's motif by best template match over all offsets."""
    S, Lb = task.img_size, task.bar_length
    stamps = [motif_stamp(k, Lb) for k in range(task.motifs_per_channel)]
    out = np.zeros((len(batch), len(task.informative_channels)), dtype=np.int64)
    for j, ch in enumerate(task.informative_channels):
        img = batch.images[:, ch].astype(np.float64)
        windows = np.lib.stride_tricks.sliding_window_view(img, (Lb, Lb), axis=(1, 2))
        scores = []
        for s in stamps:
            # normalised correlation so bigger stamps don't win by mass
            corr = np.einsum("brcij,ij->brc", windows, s) / s.sum()
            scores.append(corr.reshape(len(batch), -1).max(axis=1))
        out[:, j] = np.argmax(np.stack(scores, axis=1), axis=1)
    return out


def split(batch: ChannelBatch, fractions=(0.8, 0.1, 0.1), seed: int = 0):
    """Seeded shuffle then contiguous train/val/test split.

    Val and test get ``floor(fraction * n)`` samples; the remainder goes to train.
    """
    fr = np.asarray(fractions, dtype=float)
    if fr.shape != (3,) or (fr < 0).any() or abs(fr.sum() - 1.0) > 1e-9:
        raise ValueError("fractions must be three non-negative numbers summing to 1")
    n = len(batch)
    n_val = int(np.floor(fr[1] * n))
    n_test = int(np.floor(fr[2] * n))
    n_train = n - n_val - n_test
    for name, f, k in (("train", fr[0], n_train), ("val", fr[1], n_val), ("test", fr[2], n_test)):
        if f > 0 and k == 0:
            raise ValueError(f"{name} split is empty for n={n}")
    perm = np.random.default_rng(seed).permutation(n)
    parts = np.split(perm, [n_train, n_train + n_val])
    return tuple(batch.subset(p) for p in parts)

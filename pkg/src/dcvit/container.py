"""DCVT binary tensor container.

Layout::

    b"DCVT" | u32 version (=1) | u64 header length | UTF-8 JSON header | blobs

The header maps tensor name -> {"shape", "dtype": "f32", "offset"}, offsets
counted from the first byte after the header. An optional ``__metadata__``
entry carries free-form JSON (the model config). All integers little-endian.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .encoder import DcVitModel, ModelConfig, init_model
from .numerics import Tensor

MAGIC = b"DCVT"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")


class FormatError(ValueError):
    """File is not a readable DCVT container."""


class BadMagicError(FormatError):
    pass


def write_container(path, tensors: dict, metadata: dict | None = None) -> None:
    header: dict = {}
    blobs = []
    offset = 0
    for name, value in tensors.items():
        arr = np.asarray(getattr(value, "data", value), dtype="<f4")
        header[name] = {"shape": list(arr.shape), "dtype": "f32", "offset": offset}
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    if metadata is not None:
        header["__metadata__"] = metadata
    raw = json.dumps(header, sort_keys=False).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(raw)))
        fh.write(raw)
        for b in blobs:
            fh.write(b)


def read_container(path) -> tuple[dict[str, np.ndarray], dict]:
    buf = Path(path).read_bytes()
    if len(buf) < _PREFIX.size:
        raise FormatError("file too short for a DCVT header")
    magic, version, hlen = _PREFIX.unpack_from(buf)
    if magic != MAGIC:
        raise BadMagicError("bad magic")
    if version != VERSION:
        raise FormatError(f"unsupported container version {version}")
    start = _PREFIX.size + hlen
    if start > len(buf):
        raise FormatError("truncated header")
    try:
        header = json.loads(buf[_PREFIX.size:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable header: {exc}") from exc
    metadata = header.pop("__metadata__", {})
    out = {}
    for name, spec in header.items():
        if spec.get("dtype") != "f32":
            raise FormatError(f"{name}: unsupported dtype {spec.get('dtype')!r}")
        shape = tuple(spec["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        lo = start + int(spec["offset"])
        hi = lo + 4 * count
        if hi > len(buf):
            raise FormatError(f"{name}: blob runs past end of file")
        out[name] = np.frombuffer(buf, dtype="<f4", count=count, offset=lo).reshape(shape).astype(np.float32)
    return out, metadata


def save_model(model: DcVitModel, path) -> None:
    write_container(path, model.params, {"config": model.config.to_dict()})


def load_model(path, dtype=np.float32) -> DcVitModel:
    tensors, metadata = read_container(path)
    if "config" not in metadata:
        raise FormatError("container has no model config")
    config = ModelConfig.from_dict(metadata["config"])
    expected = {k: v.shape for k, v in init_model(config).params.items()}
    got = {k: v.shape for k, v in tensors.items()}
    if got != expected:
        missing = sorted(set(expected) - set(got))
        extra = sorted(set(got) - set(expected))
        bad = sorted(k for k in set(got) & set(expected) if got[k] != expected[k])
        raise FormatError(f"tensors do not match config: missing {missing}, unexpected {extra}, misshapen {bad}")
    return DcVitModel(config, {k: Tensor(v.astype(dtype)) for k, v in tensors.items()})

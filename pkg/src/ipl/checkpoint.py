"""Binary checkpoint format.

Layout (little endian)::

    b"IPLC" | version u32 | config length u32 | config JSON (UTF-8)
    | tensor count u32 | per tensor: name length u16, name UTF-8, rank u8,
      dims u32 * rank, payload f64 * prod(dims), row-major

The config JSON holds ``model`` (ModelConfig fields), ``prompt``
(``length``, ``d_h``) and optional extra sections such as ``optim``.
"""

import json
import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import (
    CheckpointFormatError,
    CheckpointShapeError,
    CheckpointTruncatedError,
    CheckpointVersionError,
)
from .model import ModelConfig, TransformerLM
from .prompting import PromptModule

MAGIC = b"IPLC"
VERSION = 1


@dataclass
class Checkpoint:
    pm: PromptModule
    lm: TransformerLM
    config: dict


def _named_tensors(pm, lm):
    tensors = dict(lm.parameters())
    tensors.update(pm.parameters())
    return tensors


def dumps_checkpoint(pm, lm, extra=None):
    config = {"model": lm.config.to_dict(), "prompt": {"length": pm.length, "d_h": pm.d_h}}
    config["float_width"] = 64 if lm.dtype == np.float64 else 32
    if extra:
        config.update(extra)
    blob = json.dumps(config, sort_keys=True).encode("utf-8")
    tensors = _named_tensors(pm, lm)
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(blob)), blob,
             struct.pack("<I", len(tensors))]
    for name, t in tensors.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", t.ndim))
        parts.append(struct.pack(f"<{t.ndim}I", *t.shape))
        parts.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    return b"".join(parts)


def save_checkpoint(path, pm, lm, config=None):
    """Write ``pm`` and ``lm`` to ``path``; ``config`` entries are stored alongside."""
    data = dumps_checkpoint(pm, lm, config)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise CheckpointTruncatedError(
                f"checkpoint truncated while reading {what} at byte {self.pos} (size {len(self.data)})"
            )
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt, what):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size, what))


def loads_checkpoint(data):
    if len(data) < len(MAGIC):
        raise CheckpointTruncatedError("checkpoint shorter than its magic header")
    if data[:4] != MAGIC:
        raise CheckpointFormatError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    r = _Reader(data)
    r.take(4, "magic")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise CheckpointVersionError(f"checkpoint version {version}, this build reads version {VERSION}")
    (n_config,) = r.unpack("<I", "config length")
    try:
        config = json.loads(r.take(n_config, "config").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"unreadable config block: {exc}") from exc
    (count,) = r.unpack("<I", "tensor count")
    stored = {}
    for _ in range(count):
        (n_name,) = r.unpack("<H", "tensor name length")
        name = r.take(n_name, "tensor name").decode("utf-8")
        (rank,) = r.unpack("<B", f"rank of {name}")
        dims = r.unpack(f"<{rank}I", f"dims of {name}")
        n = int(np.prod(dims)) if rank else 1
        payload = r.take(8 * n, f"payload of {name}")
        stored[name] = np.frombuffer(payload, dtype="<f8").reshape(dims)

    model_config = ModelConfig(**config["model"])
    dtype = np.float64 if config.get("float_width", 64) == 64 else np.float32
    lm = TransformerLM(model_config, dtype=dtype)
    prompt = config["prompt"]
    pm = PromptModule(prompt["length"], model_config.d_e, prompt["d_h"], dtype=dtype)
    expected = _named_tensors(pm, lm)
    if set(expected) != set(stored):
        missing = sorted(set(expected) - set(stored))
        unexpected = sorted(set(stored) - set(expected))
        raise CheckpointShapeError(f"tensor names disagree with config: missing {missing}, unexpected {unexpected}")
    for name, t in expected.items():
        if stored[name].shape != t.shape:
            raise CheckpointShapeError(f"{name}: stored shape {stored[name].shape}, config implies {t.shape}")
    for name, t in expected.items():
        t.data = stored[name].astype(dtype)
    return Checkpoint(pm=pm, lm=lm, config=config)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return loads_checkpoint(fh.read())

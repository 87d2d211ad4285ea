"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"FIDL"  uint32 version  uint32 config_len  config_json
    uint32 n_arrays
    repeated: uint16 name_len  name  uint8 ndim  uint32 dims[ndim]  float32 data
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .model import FidModel, ModelConfig, Tokenizer

MAGIC = b"FIDL"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str | Path, model: FidModel, meta: dict | None = None) -> None:
    config = {
        "model": vars(model.config).copy(),
        "tokens": model.tokenizer.tokens,
        "meta": meta or {},
    }
    blob = json.dumps(config, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(blob)), blob]
    arrays = model.state_dict()
    parts.append(struct.pack("<I", len(arrays)))
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f4")
        encoded = name.encode()
        parts.append(struct.pack("<HB", len(encoded), arr.ndim))
        parts.append(encoded)
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> tuple[FidModel, dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}")
    version, clen = struct.unpack_from("<II", raw, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    off = 12
    config = json.loads(raw[off : off + clen])
    off += clen
    (n_arrays,) = struct.unpack_from("<I", raw, off)
    off += 4
    state = {}
    for _ in range(n_arrays):
        name_len, ndim = struct.unpack_from("<HB", raw, off)
        off += 3
        name = raw[off : off + name_len].decode()
        off += name_len
        shape = struct.unpack_from(f"<{ndim}I", raw, off)
        off += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        state[name] = np.frombuffer(raw, dtype="<f4", count=count, offset=off).reshape(shape).astype(np.float32)
        off += 4 * count
    if off != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - off} trailing bytes")
    model = FidModel(ModelConfig(**config["model"]), Tokenizer(config["tokens"]))
    model.load_state_dict(state)
    return model, config["meta"]

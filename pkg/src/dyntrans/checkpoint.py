"""``DETC`` checkpoint container.

Layout (little-endian)::

    b"DETC" | u32 version | u64 entry count
    per entry: u32 name length | utf-8 name | u8 dtype code | u32 rank |
               u64 dims[rank] | payload

Entries hold model parameters (``param/...``), Adam moments
(``adam_m/...``, ``adam_v/...``), the update counter, the random stream
state and a JSON blob with the experiment configuration.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .collaborative import TrainState
from .model import DetModel, ModelConfig, load_state_dict, state_dict
from .rng import RngStream

MAGIC = b"DETC"
VERSION = 1

DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4"), 2: np.dtype("<i8"), 3: np.dtype("u1")}
_CODES = {v: k for k, v in DTYPES.items()}


class CheckpointFormatError(ValueError):
    """Malformed, truncated or incompatible checkpoint file."""


def write_entries(path, entries: dict[str, np.ndarray]) -> None:
    parts = [MAGIC, struct.pack("<IQ", VERSION, len(entries))]
    for name, arr in entries.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder not in "|" else arr.dtype
        if dt not in _CODES:
            raise TypeError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<BI", _CODES[dt], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_entries(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointFormatError("truncated checkpoint")
        out = buf[pos:pos + n]
        pos += n
        return out

    if take(4) != MAGIC:
        raise CheckpointFormatError("bad magic; not a DETC file")
    version, count = struct.unpack("<IQ", take(12))
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported DETC version {version}")
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8", errors="strict")
        code, rank = struct.unpack("<BI", take(5))
        if code not in DTYPES:
            raise CheckpointFormatError(f"{name}: unknown dtype code {code}")
        dims = struct.unpack(f"<{rank}Q", take(8 * rank))
        dt = DTYPES[code]
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        out[name] = np.frombuffer(take(n * dt.itemsize), dtype=dt).reshape(dims).copy()
    if pos != len(buf):
        raise CheckpointFormatError("trailing bytes after last entry")
    return out


@dataclass
class Checkpoint:
    config: dict
    params: dict[str, np.ndarray]
    state: TrainState | None = None
    rng: RngStream | None = None
    extra: dict = field(default_factory=dict)

    def build_model(self) -> DetModel:
        cfg = ModelConfig.from_dict(self.config["model"])
        model = DetModel(cfg, RngStream(0))
        load_state_dict(model, self.params)
        return model


def save_checkpoint(path, model: DetModel, config: dict, state: TrainState | None = None,
                    rng: RngStream | None = None) -> None:
    """``config`` must contain a ``model`` section (``ModelConfig.to_dict()``)."""
    entries: dict[str, np.ndarray] = {}
    blob = json.dumps(config, sort_keys=True).encode("utf-8")
    entries["meta/config"] = np.frombuffer(blob, dtype=np.uint8)
    for k, v in state_dict(model).items():
        entries[f"param/{k}"] = v
    if state is not None:
        entries["state/step"] = np.array([state.step], dtype=np.int64)
        entries["state/schedule"] = np.array([state.base_lr, state.warmup, *state.betas, state.eps])
        for k in sorted(state.m):
            entries[f"adam_m/{k}"] = state.m[k]
            entries[f"adam_v/{k}"] = state.v[k]
    if rng is not None:
        entries["state/rng"] = np.array(rng.state(), dtype=np.uint64).astype(np.int64)
    write_entries(path, entries)


def load_checkpoint(path) -> Checkpoint:
    entries = read_entries(path)
    if "meta/config" not in entries:
        raise CheckpointFormatError("checkpoint has no configuration entry")
    config = json.loads(entries["meta/config"].tobytes().decode("utf-8"))
    params = {k[len("param/"):]: v for k, v in entries.items() if k.startswith("param/")}
    state = None
    if "state/step" in entries:
        base_lr, warmup, b1, b2, eps = entries["state/schedule"].tolist()
        state = TrainState(base_lr, int(warmup), int(entries["state/step"][0]), (b1, b2), eps)
        state.m = {k[len("adam_m/"):]: v for k, v in entries.items() if k.startswith("adam_m/")}
        state.v = {k[len("adam_v/"):]: v for k, v in entries.items() if k.startswith("adam_v/")}
    rng = None
    if "state/rng" in entries:
        seed, counter, lane = (int(x) for x in entries["state/rng"].astype(np.uint64))
        rng = RngStream(seed, counter, lane)
    return Checkpoint(config, params, state, rng)

"""Binary checkpoint format.

Layout::

    bytes 0-7   b"VBCLSCK1"
    bytes 8-11  header length, little-endian uint32
    header      UTF-8 JSON: {"arrays": [{"name", "shape", "offset"}, ...],
                             "dims": {...}, "config": {...}, "meta": {...}}
    payload     little-endian float64 values, arrays concatenated in header order

Offsets are byte offsets into the payload. Readers locate arrays by offset,
so the order of entries in the header does not matter.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from vbcls import autodiff as ad
from vbcls.errors import ConfigurationError, CorruptCheckpointError, FileSystemError
from vbcls.model.networks import Dims, ModelParams
from vbcls.model.training import TrainConfig

MAGIC = b"VBCLSCK1"
_LEN = struct.Struct("<I")


@dataclass
class Checkpoint:
    params: ModelParams
    config: TrainConfig
    meta: dict = field(default_factory=dict)


def save_checkpoint(params: ModelParams, config: TrainConfig, path, meta: dict | None = None) -> None:
    entries, blobs, offset = [], [], 0
    for name, t in params.tensors.items():
        blob = np.ascontiguousarray(t.data, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(t.shape), "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"arrays": entries, "dims": asdict(params.dims), "config": config.to_dict(),
                         "meta": meta or {}}, sort_keys=True).encode("utf-8")
    path = Path(path)
    try:
        with path.open("wb") as fh:
            fh.write(MAGIC)
            fh.write(_LEN.pack(len(header)))
            fh.write(header)
            for blob in blobs:
                fh.write(blob)
    except OSError as exc:
        raise FileSystemError(f"cannot write checkpoint {path}: {exc.strerror}", path=str(path)) from exc


def read_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise FileSystemError(f"cannot read checkpoint {path}: {exc.strerror}", path=str(path)) from exc
    if raw[:8] != MAGIC:
        raise CorruptCheckpointError(f"{path}: bad magic bytes")
    if len(raw) < 12:
        raise CorruptCheckpointError(f"{path}: truncated before header length")
    (hlen,) = _LEN.unpack_from(raw, 8)
    if 12 + hlen > len(raw):
        raise CorruptCheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[12:12 + hlen].decode("utf-8"))
        dims = Dims(**header["dims"])
        config = TrainConfig.from_dict(header["config"])
        entries = header["arrays"]
    except (ValueError, KeyError, TypeError, ConfigurationError) as exc:
        raise CorruptCheckpointError(f"{path}: unreadable header ({exc})") from exc
    payload = memoryview(raw)[12 + hlen:]

    expected = dims.layer_shapes()
    declared = {}
    total = 0
    for e in entries:
        try:
            name, shape, offset = e["name"], tuple(int(s) for s in e["shape"]), int(e["offset"])
        except (KeyError, TypeError, ValueError) as exc:
            raise CorruptCheckpointError(f"{path}: malformed array entry {e!r}") from exc
        if name not in expected or name in declared:
            raise CorruptCheckpointError(f"{path}: unexpected or duplicate array {name!r}")
        if shape != expected[name]:
            raise CorruptCheckpointError(f"{path}: {name} declared {shape}, architecture needs {expected[name]}")
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if offset < 0 or offset + nbytes > len(payload):
            raise CorruptCheckpointError(f"{path}: payload truncated inside {name}")
        declared[name] = (shape, offset, nbytes)
        total += nbytes
    if set(declared) != set(expected):
        raise CorruptCheckpointError(f"{path}: missing arrays {sorted(set(expected) - set(declared))}")
    if total != len(payload):
        raise CorruptCheckpointError(f"{path}: payload is {len(payload)} bytes, header accounts for {total}")

    tensors = {}
    for name in expected:
        shape, offset, nbytes = declared[name]
        data = np.frombuffer(payload[offset:offset + nbytes], dtype="<f8").astype(np.float64).reshape(shape)
        tensors[name] = ad.Tensor(data, requires_grad=True, name=name)
    return Checkpoint(ModelParams(dims, tensors), config, header.get("meta", {}))


def load_checkpoint(path) -> tuple[ModelParams, TrainConfig]:
    ckpt = read_checkpoint(path)
    return ckpt.params, ckpt.config

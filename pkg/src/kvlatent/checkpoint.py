"""Checkpoint format: text header + raw little-endian float32 payload.

Layout (all header lines are UTF-8, ``\\n``-terminated)::

    KVLCKPT1
    config <json object, sorted keys>
    tensor <name> <f4> <dim0,dim1,...> <offset> <nbytes>
    ...
    end <payload_nbytes> <crc32 of payload, 8 hex digits>
    <payload: concatenated little-endian float32 tensor data>

Offsets are payload-relative and non-overlapping, in directory order. The
round trip is bit-exact; any structural damage (bad magic, malformed
directory entry, truncated payload, checksum mismatch) raises
:class:`CheckpointError` naming what broke.
"""

from __future__ import annotations

import json
import zlib

import numpy as np

from .autodiff import Tensor
from .model import Model, ModelConfig

__all__ = ["CheckpointError", "save_model", "load_model", "MAGIC"]

MAGIC = b"KVLCKPT1"


class CheckpointError(RuntimeError):
    """Structural problem with a checkpoint file."""


def save_model(model: Model, path: str) -> None:
    if model.dtype != np.float32:
        raise CheckpointError(f"checkpoint payload is float32; model is {model.dtype}")
    entries = []
    chunks = []
    offset = 0
    for name, tensor in model.named_parameters():
        data = np.ascontiguousarray(tensor.data, dtype="<f4")
        raw = data.tobytes()
        shape = ",".join(str(d) for d in data.shape)
        entries.append(f"tensor {name} f4 {shape} {offset} {len(raw)}")
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header_lines = [
        MAGIC.decode(),
        "config " + json.dumps(model.config.to_dict(), sort_keys=True),
        *entries,
        f"end {len(payload)} {zlib.crc32(payload):08x}",
    ]
    with open(path, "wb") as fh:
        fh.write(("\n".join(header_lines) + "\n").encode("utf-8"))
        fh.write(payload)


def load_model(path: str) -> Model:
    with open(path, "rb") as fh:
        blob = fh.read()

    head_end = blob.find(b"\nend ")
    if not blob.startswith(MAGIC + b"\n"):
        raise CheckpointError(f"{path}: bad magic; expected {MAGIC.decode()} "
                              "(version mismatch or not a checkpoint)")
    if head_end < 0:
        raise CheckpointError(f"{path}: missing end marker")
    end_line_stop = blob.index(b"\n", head_end + 1)
    header = blob[:end_line_stop].decode("utf-8").split("\n")
    payload = blob[end_line_stop + 1:]

    end_parts = header[-1].split()
    if len(end_parts) != 3:
        raise CheckpointError(f"{path}: malformed end line {header[-1]!r}")
    declared_len, declared_crc = int(end_parts[1]), end_parts[2]
    if len(payload) < declared_len:
        raise CheckpointError(f"{path}: truncated payload "
                              f"({len(payload)} of {declared_len} bytes)")
    payload = payload[:declared_len]
    if f"{zlib.crc32(payload):08x}" != declared_crc:
        raise CheckpointError(f"{path}: payload checksum mismatch")

    if not header[1].startswith("config "):
        raise CheckpointError(f"{path}: missing config line")
    config = ModelConfig.from_dict(json.loads(header[1][len("config "):]))

    tensors: dict[str, np.ndarray] = {}
    for line in header[2:-1]:
        parts = line.split()
        if len(parts) != 6 or parts[0] != "tensor" or parts[2] != "f4":
            raise CheckpointError(f"{path}: malformed directory entry {line!r}")
        name, shape_s, off_s, nbytes_s = parts[1], parts[3], parts[4], parts[5]
        try:
            shape = tuple(int(d) for d in shape_s.split(","))
            off, nbytes = int(off_s), int(nbytes_s)
        except ValueError as e:
            raise CheckpointError(f"{path}: bad directory entry for tensor "
                                  f"{name!r}: {e}") from None
        expect = int(np.prod(shape)) * 4
        if nbytes != expect or off < 0 or off + nbytes > declared_len:
            raise CheckpointError(f"{path}: directory entry for tensor {name!r} "
                                  f"does not fit payload (offset {off}, {nbytes} bytes)")
        arr = np.frombuffer(payload, dtype="<f4", count=expect // 4, offset=off)
        tensors[name] = arr.reshape(shape).astype(np.float32)

    return _assemble(config, tensors, path)


def _assemble(config: ModelConfig, tensors: dict[str, np.ndarray], path: str) -> Model:
    from .model import init_model

    model = init_model(config, seed=0)
    expected = dict(model.named_parameters())
    missing = sorted(set(expected) - set(tensors))
    extra = sorted(set(tensors) - set(expected))
    if missing or extra:
        raise CheckpointError(f"{path}: tensor directory mismatch: "
                              f"missing {missing}, unexpected {extra}")
    for name, tensor in model.named_parameters():
        arr = tensors[name]
        if arr.shape != tensor.data.shape:
            raise CheckpointError(f"{path}: tensor {name!r} has shape {arr.shape}, "
                                  f"config implies {tensor.data.shape}")
        tensor.data = arr
    return model

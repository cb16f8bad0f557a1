"""Versioned binary checkpoint container.

Layout::

    b"SEDACKPT"  magic
    uint32 LE    format version
    uint64 LE    header length
    header       UTF-8 JSON: {"meta": {...}, "tensors": [{name, dtype, shape, offset, nbytes}]}
    payload      raw little-endian tensor bytes, in header order
    uint32 LE    CRC-32 of everything above

The writer is deterministic, so save -> load -> save is byte-identical.
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .nn import NetworkSpec, Param, ParamStore

MAGIC = b"SEDACKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    spec: NetworkSpec
    student: ParamStore
    teacher: ParamStore
    epoch: int
    seed: int
    config: dict = field(default_factory=dict)
    history: list = field(default_factory=list)
    best_pass_rate: float = -1.0
    best_epoch: int = 0
    best: "Checkpoint | None" = None

    def copy(self) -> "Checkpoint":
        return Checkpoint(
            self.spec,
            self.student.copy(),
            self.teacher.copy(),
            self.epoch,
            self.seed,
            json.loads(json.dumps(self.config)),
            [dict(h) for h in self.history],
            self.best_pass_rate,
            self.best_epoch,
            None if self.best is None else self.best.copy(),
        )


def _store_tensors(prefix: str, store: ParamStore, out: list) -> dict:
    for name, p in store.params.items():
        out.append((f"{prefix}.param.{name}.value", p.value))
        if store.with_moments:
            out.append((f"{prefix}.param.{name}.adam_m", p.adam_m))
            out.append((f"{prefix}.param.{name}.adam_v", p.adam_v))
    for name, b in store.buffers.items():
        out.append((f"{prefix}.buffer.{name}", b))
    return {
        "params": list(store.params),
        "buffers": list(store.buffers),
        "with_moments": store.with_moments,
        "step_count": store.step_count,
    }


def _meta(ck: Checkpoint, tensors: list, prefix: str = "") -> dict:
    meta = {
        "spec": ck.spec.to_dict(),
        "epoch": ck.epoch,
        "seed": ck.seed,
        "config": ck.config,
        "history": ck.history,
        "best_pass_rate": ck.best_pass_rate,
        "best_epoch": ck.best_epoch,
        "student": _store_tensors(prefix + "student", ck.student, tensors),
        "teacher": _store_tensors(prefix + "teacher", ck.teacher, tensors),
    }
    if ck.best is not None:
        meta["best"] = _meta(ck.best, tensors, prefix + "best.")
    return meta


def to_bytes(ck: Checkpoint) -> bytes:
    tensors: list = []
    meta = _meta(ck, tensors)
    table, blobs, offset = [], [], 0
    for name, arr in tensors:
        arr = np.ascontiguousarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"))
        raw = le.tobytes()
        table.append({
            "name": name,
            "dtype": le.dtype.str,
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(raw),
        })
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta, "tensors": table}, sort_keys=True, separators=(",", ":")).encode()
    body = MAGIC + struct.pack("<IQ", VERSION, len(header)) + header + b"".join(blobs)
    return body + struct.pack("<I", zlib.crc32(body))


def _load_store(prefix: str, info: dict, arrays: dict) -> ParamStore:
    store = ParamStore(with_moments=info["with_moments"])
    for name in info["params"]:
        value = arrays[f"{prefix}.param.{name}.value"]
        m = v = None
        if store.with_moments:
            m = arrays[f"{prefix}.param.{name}.adam_m"]
            v = arrays[f"{prefix}.param.{name}.adam_v"]
        store.params[name] = Param(value, np.zeros_like(value), m, v)
    for name in info["buffers"]:
        store.buffers[name] = arrays[f"{prefix}.buffer.{name}"]
    store.step_count = info["step_count"]
    return store


def _from_meta(meta: dict, arrays: dict, prefix: str = "") -> Checkpoint:
    return Checkpoint(
        spec=NetworkSpec.from_dict(meta["spec"]),
        student=_load_store(prefix + "student", meta["student"], arrays),
        teacher=_load_store(prefix + "teacher", meta["teacher"], arrays),
        epoch=meta["epoch"],
        seed=meta["seed"],
        config=meta["config"],
        history=meta["history"],
        best_pass_rate=meta["best_pass_rate"],
        best_epoch=meta["best_epoch"],
        best=_from_meta(meta["best"], arrays, prefix + "best.") if "best" in meta else None,
    )


def from_bytes(data: bytes, source: str = "<bytes>") -> Checkpoint:
    if len(data) < len(MAGIC) + 16 or not data.startswith(MAGIC):
        raise CheckpointError(f"{source}: not a checkpoint file (bad magic)")
    version, hlen = struct.unpack_from("<IQ", data, len(MAGIC))
    if version != VERSION:
        raise CheckpointError(f"{source}: checkpoint version {version}, this build reads version {VERSION}")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"{source}: corrupt checkpoint (checksum mismatch)")
    start = len(MAGIC) + 12
    try:
        header = json.loads(data[start:start + hlen].decode())
        payload = memoryview(body)[start + hlen:]
        arrays = {}
        for t in header["tensors"]:
            if t["offset"] + t["nbytes"] > len(payload):
                raise CheckpointError(f"{source}: truncated tensor {t['name']}")
            dtype = np.dtype(t["dtype"])
            arr = np.frombuffer(payload[t["offset"]:t["offset"] + t["nbytes"]], dtype=dtype)
            arrays[t["name"]] = arr.reshape(t["shape"]).astype(dtype.newbyteorder("="))
        return _from_meta(header["meta"], arrays)
    except CheckpointError:
        raise
    except (ValueError, KeyError, TypeError, UnicodeDecodeError) as e:
        raise CheckpointError(f"{source}: corrupt checkpoint ({e})") from e


def save(path, ck: Checkpoint) -> None:
    Path(path).write_bytes(to_bytes(ck))


def load(path) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"{path}: cannot read checkpoint ({e.strerror})") from e
    return from_bytes(data, str(path))

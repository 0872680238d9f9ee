"""Checkpoint files.

Layout::

    b"PLNET1"                 magic
    uint32 LE                 format version
    uint64 LE                 header length in bytes
    header                    UTF-8 JSON (sorted keys, compact)
    payload                   little-endian float32 arrays, back to back

The header holds the network config, the training phase, free-form metadata
and a manifest of ``{name, shape, dtype, offset, nbytes}`` entries with
offsets relative to the payload start. Model arrays are named by graph path
(``enc/L1/step1/conv.weight``); optimizer moments use ``adam.m/<name>`` and
``adam.v/<name>``.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"PLNET1"
VERSION = 1
DTYPE = "<f4"


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: dict
    arrays: dict
    phase: str = "joint"
    optimizer: dict | None = None  # {"step": int, "m": {...}, "v": {...}}
    meta: dict = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        entries, chunks, offset = [], [], 0

        def put(name, arr):
            nonlocal offset
            a = np.ascontiguousarray(np.asarray(arr), dtype=DTYPE)
            entries.append({"name": name, "shape": list(a.shape), "dtype": DTYPE,
                            "offset": offset, "nbytes": a.nbytes})
            chunks.append(a.tobytes())
            offset += a.nbytes

        for name in sorted(self.arrays):
            put(name, self.arrays[name])
        opt_head = None
        if self.optimizer is not None:
            opt_head = {"step": int(self.optimizer["step"])}
            for kind in ("m", "v"):
                for name in sorted(self.optimizer[kind]):
                    put(f"adam.{kind}/{name}", self.optimizer[kind][name])
        header = {"config": self.config, "phase": self.phase, "meta": self.meta,
                  "optimizer": opt_head, "manifest": entries}
        hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
        return MAGIC + struct.pack("<IQ", VERSION, len(hb)) + hb + b"".join(chunks)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Checkpoint":
        if blob[:len(MAGIC)] != MAGIC:
            raise CheckpointError("not a PLNET1 checkpoint")
        pos = len(MAGIC)
        version, hlen = struct.unpack_from("<IQ", blob, pos)
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        pos += struct.calcsize("<IQ")
        header = json.loads(blob[pos:pos + hlen].decode())
        payload = memoryview(blob)[pos + hlen:]
        entries = header["manifest"]
        end = 0
        for e in sorted(entries, key=lambda e: e["offset"]):
            if e["offset"] < end:
                raise CheckpointError(f"overlapping manifest entry {e['name']}")
            end = e["offset"] + e["nbytes"]
        if end != len(payload):
            raise CheckpointError(f"payload is {len(payload)} bytes, manifest covers {end}")

        arrays, m, v = {}, {}, {}
        for e in entries:
            a = np.frombuffer(payload, dtype=e["dtype"], count=e["nbytes"] // 4,
                              offset=e["offset"]).reshape(e["shape"]).astype(np.float32)
            name = e["name"]
            if name.startswith("adam.m/"):
                m[name[7:]] = a
            elif name.startswith("adam.v/"):
                v[name[7:]] = a
            else:
                arrays[name] = a
        opt = None
        if header["optimizer"] is not None:
            opt = {"step": header["optimizer"]["step"], "m": m, "v": v}
        return cls(header["config"], arrays, header["phase"], opt, header["meta"])

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())


def from_model(model, phase: str = "joint", optimizer=None, meta: dict | None = None) -> Checkpoint:
    """Checkpoint of a live model; ``optimizer`` is a training.OptimizerState."""
    opt = None
    if optimizer is not None:
        opt = {"step": optimizer.step, "m": dict(optimizer.m), "v": dict(optimizer.v)}
    return Checkpoint(model.config.to_dict(), dict(model.state_arrays()), phase, opt, dict(meta or {}))


def from_snapshot(snap, config, meta: dict | None = None) -> Checkpoint:
    opt = None
    if snap.optimizer is not None:
        opt = {"step": snap.optimizer.step, "m": snap.optimizer.m, "v": snap.optimizer.v}
    info = {"epoch": snap.epoch, "val_loss": snap.val_loss, **(meta or {})}
    return Checkpoint(config.to_dict(), snap.arrays, snap.phase, opt, info)


def build_model(ckpt: Checkpoint):
    """Rebuild the network described by ``ckpt`` and load its weights."""
    from .arch_graph import NetworkConfig
    from .model_runtime import Model
    from .training import load_state

    cfg = NetworkConfig.from_dict(ckpt.config).validate()
    model = Model.from_config(cfg)
    extra = ckpt.arrays.keys() - model.state_arrays().keys()
    if extra:
        raise CheckpointError(f"checkpoint has arrays the graph lacks: {sorted(extra)[:5]}")
    try:
        load_state(model, ckpt.arrays)
    except (KeyError, ValueError) as e:
        raise CheckpointError(str(e)) from None
    return model


def optimizer_state(ckpt: Checkpoint):
    from .training import OptimizerState

    if ckpt.optimizer is None:
        return None
    o = ckpt.optimizer
    return OptimizerState({k: v.copy() for k, v in o["m"].items()},
                          {k: v.copy() for k, v in o["v"].items()}, int(o["step"]))

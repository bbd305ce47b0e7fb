"""Binary checkpoint: magic, version, a JSON header, then raw little-endian blobs.

Layout::

    b"PCKP" | u32 version | u32 header length | header (UTF-8 JSON) | blobs

The header lists each blob's name, dtype, shape and byte offset relative to
the end of the header.  Blobs are written in sorted name order so that two
saves of the same state produce identical bytes.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .network import NetConfig, ScoreNetwork
from .normalize import DEFAULT_SPEC, NormalizationSpec

MAGIC = b"PCKP"
VERSION = 1
_PREFIX = struct.Struct("<4sII")


class CheckpointError(ValueError):
    pass


def config_hash(obj) -> str:
    """SHA-256 of the canonical JSON encoding of ``obj`` (first 16 hex digits)."""
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()[:16]


@dataclass
class Checkpoint:
    arch: NetConfig
    params: dict[str, np.ndarray]
    step: int = 0
    normalization: NormalizationSpec = DEFAULT_SPEC
    config_hash: str = ""
    meta: dict = field(default_factory=dict)

    @property
    def sigma_data(self) -> float:
        return self.arch.sigma_data

    @property
    def objective(self) -> str:
        return self.arch.objective

    def build_network(self) -> ScoreNetwork:
        net = ScoreNetwork(self.arch)
        net.load_state_dict(self.params)
        return net

    @classmethod
    def from_network(cls, net: ScoreNetwork, step=0, normalization=DEFAULT_SPEC, config_hash="",
                     meta=None) -> "Checkpoint":
        return cls(net.config, net.state_dict(), step, normalization, config_hash, dict(meta or {}))


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    entries, blobs, offset = [], [], 0
    for name in sorted(ckpt.params):
        arr = np.asarray(ckpt.params[name])
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = np.ascontiguousarray(le).tobytes()
        entries.append({"name": name, "dtype": le.dtype.str, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "arch": ckpt.arch.to_dict(),
        "normalization": ckpt.normalization.to_dict(),
        "sigma_data": ckpt.sigma_data,
        "objective": ckpt.objective,
        "step": int(ckpt.step),
        "config_hash": ckpt.config_hash,
        "meta": ckpt.meta,
        "tensors": entries,
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(head)))
        fh.write(head)
        for raw in blobs:
            fh.write(raw)
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    buf = Path(path).read_bytes()
    if len(buf) < _PREFIX.size:
        raise CheckpointError(f"{path}: truncated checkpoint")
    magic, version, hlen = _PREFIX.unpack_from(buf)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {VERSION}")
    start = _PREFIX.size + hlen
    header = json.loads(buf[_PREFIX.size:start].decode("utf-8"))
    params = {}
    for e in header["tensors"]:
        lo = start + e["offset"]
        if lo + e["nbytes"] > len(buf):
            raise CheckpointError(f"{path}: blob {e['name']} runs past end of file")
        arr = np.frombuffer(buf, dtype=np.dtype(e["dtype"]), count=int(np.prod(e["shape"], dtype=np.int64)),
                            offset=lo)
        params[e["name"]] = arr.reshape(e["shape"]).astype(np.dtype(e["dtype"]).newbyteorder("="))
    arch = NetConfig.from_dict(header["arch"])
    return Checkpoint(arch, params, header["step"],
                      NormalizationSpec.from_dict(header["normalization"]),
                      header["config_hash"], header["meta"])

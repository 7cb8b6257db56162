"""Checkpoint files: a JSON header followed by little-endian float32 parameter arrays.

Layout::

    b"GANTRCKPT\\n" | uint32 LE header length | header JSON (utf-8) | body

The body holds every generator then discriminator tensor in canonical
(state-dict) order. ``content_hash`` in the header is the snapshot parameter
hash and is checked on load.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .backbone import GanSnapshot, NetworkConfig, new_snapshot, parameter_hash

MAGIC = b"GANTRCKPT\n"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def to_bytes(snapshot: GanSnapshot) -> bytes:
    tensors = snapshot.named_parameters()
    header = {
        "format_version": FORMAT_VERSION,
        "network": snapshot.config.to_dict(),
        "role": snapshot.role,
        "step": snapshot.step,
        "content_hash": parameter_hash(snapshot),
        "tensors": [{"name": n, "shape": list(t.shape)} for n, t in tensors],
    }
    head = json.dumps(header, sort_keys=True).encode()
    body = b"".join(t.detach().cpu().to(torch.float32).contiguous().numpy().astype("<f4").tobytes() for _, t in tensors)
    return MAGIC + struct.pack("<I", len(head)) + head + body


def from_bytes(data: bytes) -> GanSnapshot:
    if not data.startswith(MAGIC):
        raise CheckpointError("not a checkpoint file (bad magic)")
    off = len(MAGIC)
    try:
        (hlen,) = struct.unpack("<I", data[off : off + 4])
        header = json.loads(data[off + 4 : off + 4 + hlen])
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"unreadable checkpoint header: {exc}") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('format_version')}")
    snapshot = new_snapshot(NetworkConfig(**header["network"]), seed=0, role=header["role"])
    snapshot.step = int(header["step"])

    pos = off + 4 + hlen
    g_state, d_state = {}, {}
    expected = dict(snapshot.named_parameters())
    for entry in header["tensors"]:
        name, shape = entry["name"], tuple(entry["shape"])
        if name not in expected or tuple(expected[name].shape) != shape:
            raise CheckpointError(f"tensor {name} {shape} does not fit the network config")
        n = int(np.prod(shape, dtype=np.int64))
        if pos + 4 * n > len(data):
            raise CheckpointError(f"checkpoint body is truncated at tensor {name}")
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=pos).reshape(shape)
        pos += 4 * n
        t = torch.from_numpy(arr.astype(np.float32))
        net, key = name.split(".", 1)
        (g_state if net == "generator" else d_state)[key] = t
    missing = set(expected) - {e["name"] for e in header["tensors"]}
    if missing:
        raise CheckpointError(f"checkpoint lacks {len(missing)} tensors, e.g. {sorted(missing)[0]}")
    if pos != len(data):
        raise CheckpointError("trailing bytes after checkpoint body")
    snapshot.generator.load_state_dict(g_state)
    snapshot.discriminator.load_state_dict(d_state)
    got = parameter_hash(snapshot)
    if got != header["content_hash"]:
        raise CheckpointError(f"content hash mismatch: header {header['content_hash'][:16]}, body {got[:16]}")
    return snapshot


def save(snapshot: GanSnapshot, path: str | Path) -> str:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(to_bytes(snapshot))
    return parameter_hash(snapshot)


def load(path: str | Path) -> GanSnapshot:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return from_bytes(data)

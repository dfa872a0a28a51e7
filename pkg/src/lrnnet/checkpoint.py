"""Checkpoint files: one JSON manifest line, then a raw little-endian float32 blob.

The manifest line is space-padded so the blob starts on a 16-byte boundary
right after the first newline. Each tensor entry records ``offset`` and
``length`` in bytes relative to the blob start; offsets are 16-byte aligned
and entries appear in network build order.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Optional

import numpy as np

from .blocks import Network, NetworkSpec
from .errors import CheckpointError

FORMAT = "lrnnet-checkpoint"
ALIGN = 16


def _align(n: int) -> int:
    return -(-n // ALIGN) * ALIGN


def save_checkpoint(path, net: Network, extra: Optional[list] = None, meta: Optional[dict] = None) -> None:
    """Write parameters and norm buffers of ``net`` plus optional ``extra`` (name, array) pairs."""
    items = net.state() + list(extra or [])
    entries, chunks, offset = [], [], 0
    for name, arr in items:
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(np.shape(arr)), "dtype": "f32",
                        "offset": offset, "length": len(data)})
        pad = _align(len(data)) - len(data)
        chunks.append(data + b"\0" * pad)
        offset += len(data) + pad
    manifest = {"format": FORMAT, "version": 1, "spec": net.spec.to_dict(),
                "spec_hash": net.spec.hash(), "meta": meta or {}, "tensors": entries}
    head = json.dumps(manifest, sort_keys=True).encode()
    head += b" " * (_align(len(head) + 1) - len(head) - 1) + b"\n"
    with open(path, "wb") as fh:
        fh.write(head)
        fh.write(b"".join(chunks))


def read_checkpoint(path) -> tuple:
    """Return ``(manifest, {name: float32 array})``."""
    raw = Path(path).read_bytes()
    end = raw.find(b"\n")
    if end < 0:
        raise CheckpointError(f"{path}: no manifest line")
    try:
        manifest = json.loads(raw[:end])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: manifest is not JSON") from exc
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"{path}: not an lrnnet checkpoint")
    blob = memoryview(raw)[end + 1:]
    tensors = {}
    for e in manifest["tensors"]:
        if e["dtype"] != "f32" or e["offset"] % ALIGN:
            raise CheckpointError(f"{path}: bad entry {e['name']}")
        if e["offset"] + e["length"] > len(blob):
            raise CheckpointError(f"{path}: truncated blob at {e['name']}")
        arr = np.frombuffer(blob[e["offset"]:e["offset"] + e["length"]], dtype="<f4")
        tensors[e["name"]] = arr.reshape(e["shape"]).copy()
    return manifest, tensors


def load_into(net: Network, manifest: dict, tensors: dict) -> None:
    """Copy checkpoint values into ``net`` in place; the spec hashes must agree."""
    if manifest.get("spec_hash") != net.spec.hash():
        raise CheckpointError(
            f"checkpoint spec hash {manifest.get('spec_hash')} != network {net.spec.hash()}")
    for name, arr in net.state():
        if name not in tensors:
            raise CheckpointError(f"checkpoint lacks {name}")
        src = tensors[name]
        if src.shape != arr.shape:
            raise CheckpointError(f"{name}: shape {src.shape} != {arr.shape}")
        arr[...] = src


def load_network(path, seed: int = 0) -> tuple:
    """Build the network named in the manifest and fill it from the file."""
    from .blocks import build_lrnnet

    manifest, tensors = read_checkpoint(path)
    try:
        spec = NetworkSpec.from_dict(manifest["spec"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: unreadable network spec") from exc
    net = build_lrnnet(spec, seed=seed, dtype=np.float32)
    load_into(net, manifest, tensors)
    return net, manifest, tensors

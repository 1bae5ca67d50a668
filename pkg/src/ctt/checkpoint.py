"""Binary checkpoint container.

Layout::

    b"CTTM" | version: u32 LE | header length: u64 LE | UTF-8 JSON header | blobs

The JSON header carries a ``tensors`` manifest (name, shape, byte offset and
length relative to the start of the blob section); blobs are little-endian
float32 arrays concatenated in manifest order. Models, taboo keys and
adversarial batches all use this container.
"""

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"CTTM"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")

__all__ = [
    "CheckpointError",
    "CheckpointTruncatedError",
    "write_container",
    "read_container",
    "save_checkpoint",
    "load_checkpoint",
    "save_adversarial",
    "load_adversarial",
]


class CheckpointError(ValueError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


def write_container(path, header, tensors):
    """Write ``tensors`` (name -> array) plus a JSON-able ``header`` dict."""
    manifest, blobs, offset = [], [], 0
    for name, arr in tensors.items():
        blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        manifest.append({"name": name, "shape": list(np.shape(arr)), "offset": offset,
                         "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = dict(header, tensors=manifest)
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(head)))
        fh.write(head)
        for blob in blobs:
            fh.write(blob)
    return path


def read_container(path):
    """Returns ``(header, tensors)``; validates magic, version and lengths."""
    raw = Path(path).read_bytes()
    if len(raw) < _PREFIX.size:
        raise CheckpointTruncatedError(
            f"{path}: {len(raw)} bytes, shorter than the {_PREFIX.size}-byte prefix")
    magic, version, head_len = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}, expected {VERSION}")
    start = _PREFIX.size + head_len
    if len(raw) < start:
        raise CheckpointTruncatedError(
            f"{path}: header needs {head_len} bytes, only {len(raw) - _PREFIX.size} present")
    try:
        header = json.loads(raw[_PREFIX.size:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header: {exc}") from exc
    tensors = {}
    blob_len = len(raw) - start
    expected_total = sum(t["nbytes"] for t in header.get("tensors", []))
    if blob_len < expected_total:
        raise CheckpointTruncatedError(
            f"{path}: blob section expected {expected_total} bytes, got {blob_len}")
    for entry in header.get("tensors", []):
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        if entry["nbytes"] != 4 * count:
            raise CheckpointError(f"{path}: manifest entry {entry['name']} declares "
                                  f"{entry['nbytes']} bytes for shape {entry['shape']}")
        lo = start + entry["offset"]
        hi = lo + entry["nbytes"]
        if hi > len(raw):
            raise CheckpointTruncatedError(
                f"{path}: tensor {entry['name']} expected {entry['nbytes']} bytes, "
                f"got {max(0, len(raw) - lo)}")
        arr = np.frombuffer(raw[lo:hi], dtype="<f4").astype(np.float32)
        tensors[entry["name"]] = arr.reshape(entry["shape"])
    if blob_len != expected_total:
        raise CheckpointError(
            f"{path}: blob section has {blob_len} bytes, manifest accounts for {expected_total}")
    return header, tensors


def save_checkpoint(path, model, key=None, extra=None):
    """Persist a model (spec + parameters), optional taboo key and metadata."""
    header = {
        "kind": "model",
        "spec": model.spec.to_dict(),
        "seed": model.seed,
        "metrics": model.metrics,
        "key": key.to_dict() if key is not None else None,
        "extra": extra or {},
    }
    return write_container(path, header, model.params)


def load_checkpoint(path):
    """Returns ``(model, key, header)``; ``key`` is None when none was saved."""
    from .core import TabooKey
    from .model import Model, ModelSpec

    header, tensors = read_container(path)
    if header.get("kind") != "model":
        raise CheckpointError(f"{path}: not a model checkpoint (kind={header.get('kind')!r})")
    model = Model(ModelSpec.from_dict(header["spec"]), tensors, header.get("seed", 0))
    model.metrics = header.get("metrics") or {}
    key = TabooKey.from_dict(header["key"]) if header.get("key") else None
    return model, key, header


def save_adversarial(path, batch, meta=None):
    """Persist an :class:`~ctt.attacks.AdvBatch` for later replay."""
    tensors = {
        "original": batch.original,
        "perturbed": batch.perturbed,
        "labels": batch.labels.astype(np.float32),
        "predicted": batch.predicted.astype(np.float32),
        "success": batch.success.astype(np.float32),
        "l2": batch.l2,
        "linf": batch.linf,
        "queries": batch.queries.astype(np.float32),
    }
    header = {"kind": "adversarial", "attack": batch.attack, "meta": meta or {}}
    return write_container(path, header, tensors)


def load_adversarial(path):
    from .attacks import AdvBatch

    header, t = read_container(path)
    if header.get("kind") != "adversarial":
        raise CheckpointError(f"{path}: not an adversarial batch (kind={header.get('kind')!r})")
    batch = AdvBatch(
        original=t["original"], perturbed=t["perturbed"],
        labels=t["labels"].astype(np.int64), predicted=t["predicted"].astype(np.int64),
        success=t["success"].astype(bool), queries=t["queries"].astype(np.int64),
        attack=header.get("attack", {}),
    )
    return batch, header

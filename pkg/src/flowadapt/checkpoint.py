"""Single-file binary checkpoints: JSON header plus packed float64 payload.

Layout: 8-byte magic, little-endian uint64 header length, UTF-8 JSON header,
then every array back-to-back as little-endian float64. The header names each
tensor with its shape and payload offset and carries a SHA-256 over header
content and payload; a mismatch on load is refused. Round-trips are bitwise
lossless and writes are atomic (temp file + rename).
"""

import hashlib
import json
import os
import struct
import tempfile

import numpy as np

from .backbone import Backbone
from .errors import CheckpointError
from .flow import FlowModel

MAGIC = b"FLOWCKPT"
FORMAT_VERSION = 1


def _pack(named_arrays):
    entries, chunks, offset = [], [], 0
    for name, arr in named_arrays.items():
        data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(np.shape(arr)),
                        "offset": offset, "count": int(np.size(arr))})
        chunks.append(data)
        offset += len(data)
    return entries, b"".join(chunks)


def _canonical(header):
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_checkpoint(path, kind, config, named_params, named_stats=None):
    params, payload_p = _pack(named_params)
    stats, payload_s = _pack(named_stats or {})
    for entry in stats:
        entry["offset"] += len(payload_p)
    payload = payload_p + payload_s
    header = {"format_version": FORMAT_VERSION, "kind": kind, "config": config,
              "params": params, "stats": stats}
    header["content_hash"] = hashlib.sha256(_canonical(header) + payload).hexdigest()
    blob = _canonical(header)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<Q", len(blob)))
            fh.write(blob)
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return header["content_hash"]


def read_checkpoint(path, expected_kind=None):
    """Parsed (header, arrays-by-name) after verifying the content hash."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(MAGIC) + 8 or raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (header_len,) = struct.unpack_from("<Q", raw, len(MAGIC))
    start = len(MAGIC) + 8
    try:
        header = json.loads(raw[start : start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    payload = raw[start + header_len :]
    stored_hash = header.pop("content_hash", None)
    actual = hashlib.sha256(_canonical(header) + payload).hexdigest()
    if stored_hash != actual:
        raise CheckpointError(f"{path}: content hash mismatch, refusing to load")
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version "
                              f"{header.get('format_version')}")
    if expected_kind is not None and header.get("kind") != expected_kind:
        raise CheckpointError(f"{path}: expected a {expected_kind} checkpoint, "
                              f"found {header.get('kind')!r}")
    arrays = {}
    for entry in header["params"] + header["stats"]:
        size = entry["count"] * 8
        piece = payload[entry["offset"] : entry["offset"] + size]
        if len(piece) != size:
            raise CheckpointError(f"{path}: truncated payload for {entry['name']!r}")
        arrays[entry["name"]] = np.frombuffer(piece, dtype="<f8").reshape(entry["shape"]).copy()
    header["content_hash"] = stored_hash
    return header, arrays


def checkpoint_hash(path):
    header, _ = read_checkpoint(path)
    return header["content_hash"]


def save_backbone(backbone, path):
    params = {k: v.data for k, v in backbone.named_parameters().items()}
    return save_checkpoint(path, "backbone", backbone.config(), params,
                           backbone.named_stats())


def load_backbone(path):
    header, arrays = read_checkpoint(path, expected_kind="backbone")
    model = Backbone.from_config(header["config"])
    _assign(model, header, arrays, path)
    model.set_mode("eval")
    return model


def save_flow(flow, path):
    params = {k: v.data for k, v in flow.named_parameters().items()}
    return save_checkpoint(path, "flow", flow.config(), params)


def load_flow(path):
    header, arrays = read_checkpoint(path, expected_kind="flow")
    model = FlowModel.from_config(header["config"])
    _assign(model, header, arrays, path)
    return model


def _assign(model, header, arrays, path):
    named = model.named_parameters()
    saved_params = {e["name"] for e in header["params"]}
    if saved_params != set(named):
        missing = sorted(set(named) ^ saved_params)
        raise CheckpointError(f"{path}: parameter names do not match model "
                              f"(mismatched: {missing[:5]})")
    for name, tensor in named.items():
        value = arrays[name]
        if value.shape != tensor.shape:
            raise CheckpointError(f"{path}: shape mismatch for {name!r}: "
                                  f"{value.shape} vs {tensor.shape}")
        tensor.data = value
    if header["stats"]:
        for i, stage in enumerate(model.stages, start=1):
            stage.bn.load_stats(arrays[f"stage{i}.bn.running_mean"],
                                arrays[f"stage{i}.bn.running_var"])

"""On-disk formats: tensor containers, alignments and model checkpoints.

A tensor container is a pair of files, ``<stem>.json`` (manifest) and
``<stem>.bin`` (little-endian payload).  The manifest lists each tensor's
name, shape, dtype and byte offset::

    {"format_version": 1, "payload_bytes": 16,
     "tensors": [{"name": "w", "shape": [2, 2], "dtype": "f32", "offset": 0}],
     "meta": {...}}
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


class FormatError(ValueError):
    """A file does not match its declared format."""


def _stem(path) -> Path:
    path = Path(path)
    return path.with_suffix("") if path.suffix in (".json", ".bin") else path


def container_paths(path) -> tuple[Path, Path]:
    stem = _stem(path)
    return stem.with_name(stem.name + ".json"), stem.with_name(stem.name + ".bin")


def write_tensors(path, tensors: dict, dtype: str = "f32", meta: dict | None = None) -> Path:
    if dtype not in DTYPES:
        raise FormatError(f"unknown dtype {dtype!r}")
    manifest_path, payload_path = container_paths(path)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = [], [], 0
    for name, value in tensors.items():
        raw = np.ascontiguousarray(np.asarray(value), dtype=DTYPES[dtype]).tobytes()
        entries.append({"name": name, "shape": list(np.shape(value)), "dtype": dtype, "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    manifest = {"format_version": FORMAT_VERSION, "payload_bytes": offset, "tensors": entries, "meta": meta or {}}
    payload_path.write_bytes(b"".join(chunks))
    manifest_path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest_path


def read_tensors(path) -> tuple[dict, dict]:
    """Return ``(tensors, meta)``; raises :class:`FormatError` on any inconsistency."""
    manifest_path, payload_path = container_paths(path)
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{manifest_path}: {exc}") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"{manifest_path}: unsupported format_version {manifest.get('format_version')!r}")
    payload = payload_path.read_bytes()
    tensors, expected = {}, 0
    for entry in manifest["tensors"]:
        dtype = DTYPES.get(entry["dtype"])
        if dtype is None:
            raise FormatError(f"{manifest_path}: unknown dtype {entry['dtype']!r}")
        if entry["offset"] != expected:
            raise FormatError(f"{manifest_path}: tensor {entry['name']!r} has offset {entry['offset']}, expected {expected}")
        count = int(np.prod(entry["shape"], dtype=np.int64))
        size = count * dtype.itemsize
        if expected + size > len(payload):
            raise FormatError(f"{payload_path}: payload length {len(payload)} is shorter than the manifest requires")
        tensors[entry["name"]] = np.frombuffer(payload, dtype=dtype, count=count, offset=expected).reshape(entry["shape"]).copy()
        expected += size
    if expected != len(payload) or manifest.get("payload_bytes", expected) != len(payload):
        raise FormatError(f"{payload_path}: payload length {len(payload)} does not match manifest ({expected})")
    return tensors, manifest.get("meta", {})


def file_digest(*paths) -> str:
    h = hashlib.sha256()
    for p in paths:
        h.update(Path(p).read_bytes())
    return h.hexdigest()


# ---------------------------------------------------------------- alignments


def write_alignment(path, words) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps([{"word": w["word"], "start_ms": int(w["start_ms"]), "end_ms": int(w["end_ms"])} for w in words], indent=1))


def read_alignment(path) -> list[dict]:
    data = json.loads(Path(path).read_text())
    if not isinstance(data, list):
        raise FormatError(f"{path}: alignment must be a list of word spans")
    out = []
    for item in data:
        try:
            out.append({"word": str(item["word"]), "start_ms": int(item["start_ms"]), "end_ms": int(item["end_ms"])})
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"{path}: bad word span {item!r}") from exc
    return out


# --------------------------------------------------------------- checkpoints


def save_model(path, model) -> Path:
    from .encoder import RecognizerModel
    from .scout import ScoutModel

    if isinstance(model, ScoutModel):
        meta = {"kind": "scout", "dims": model.dims.to_dict()}
    elif isinstance(model, RecognizerModel):
        meta = {"kind": "recognizer", **model.config()}
    else:
        raise TypeError(f"cannot save {type(model).__name__}")
    return write_tensors(path, model.params, dtype="f64", meta=meta)


def load_model(path):
    from .encoder import RecognizerModel
    from .scout import ScoutModel
    from .transformer import ModelDims

    tensors, meta = read_tensors(path)
    kind = meta.get("kind")
    if kind == "scout":
        return ScoutModel(ModelDims(**meta["dims"]), tensors)
    if kind == "recognizer":
        return RecognizerModel(ModelDims(**meta["dims"]), meta["vocab_size"], meta["n_decoder_layers"], tensors)
    raise FormatError(f"{path}: unknown model kind {kind!r}")

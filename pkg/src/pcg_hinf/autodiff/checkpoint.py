"""Parameter checkpoints: a JSON manifest line followed by float32 payloads.

Layout::

    {"format": "pcg-hinf-checkpoint/1", "entries": [...], "meta": {...}}\\n
    <entry 0 float32 little-endian, row-major><entry 1 ...>...

Entries keep their insertion order; each records name, shape and byte offset.
"""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import numpy as np

FORMAT = "pcg-hinf-checkpoint/1"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, arrays: dict, meta: dict | None = None):
    entries, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        payload = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(np.shape(arr)), "offset": offset})
        chunks.append(payload)
        offset += len(payload)
    manifest = {"format": FORMAT, "entries": entries, "meta": meta or {}}
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    with os.fdopen(fd, "wb") as fh:
        fh.write(json.dumps(manifest, sort_keys=True).encode("utf-8") + b"\n")
        for chunk in chunks:
            fh.write(chunk)
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[dict, dict]:
    """Return ``(arrays, meta)`` with arrays in file order."""
    with open(path, "rb") as fh:
        line = fh.readline()
        payload = fh.read()
    try:
        manifest = json.loads(line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint manifest ({exc})") from None
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"{path}: unknown checkpoint format {manifest.get('format')!r}")
    arrays = {}
    for e in manifest["entries"]:
        count = int(np.prod(e["shape"], dtype=np.int64))
        start, stop = e["offset"], e["offset"] + 4 * count
        if stop > len(payload):
            raise CheckpointError(f"{path}: payload truncated in entry {e['name']!r}")
        arrays[e["name"]] = np.frombuffer(payload[start:stop], dtype="<f4").reshape(e["shape"]).astype(np.float32)
    return arrays, manifest.get("meta", {})


def assign_arrays(targets: dict, arrays: dict, allow=None):
    """Copy ``arrays`` into the numpy arrays held by ``targets`` (name -> ndarray or Tensor).

    Without ``allow`` the name sets must match exactly. With an allowlist
    (a collection of names, or a predicate on names) only those entries are
    copied and the rest of ``targets`` is left untouched.
    """
    if allow is None:
        missing = sorted(set(targets) - set(arrays))
        unexpected = sorted(set(arrays) - set(targets))
        if missing or unexpected:
            raise CheckpointError(f"parameter names differ: missing {missing[:5]}, unexpected {unexpected[:5]}")
        names = list(targets)
    else:
        keep = allow if callable(allow) else (lambda n, s=set(allow): n in s)
        names = [n for n in targets if keep(n)]
        absent = [n for n in names if n not in arrays]
        if absent:
            raise CheckpointError(f"checkpoint lacks requested parameter {absent[0]!r}")
    for name in names:
        dst = targets[name]
        data = dst.data if hasattr(dst, "data") and not isinstance(dst, np.ndarray) else dst
        src = arrays[name]
        if tuple(data.shape) != tuple(src.shape):
            raise CheckpointError(
                f"shape mismatch for {name!r}: model {tuple(data.shape)} vs checkpoint {tuple(src.shape)}")
        data[...] = src
    return names

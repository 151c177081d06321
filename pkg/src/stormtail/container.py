"""Bit-exact binary container for dataset shards and model checkpoints.

Layout: magic bytes ``DPSG`` | u32 little-endian header length | UTF-8
JSON header | concatenated little-endian float payloads in header order.
The header is ``{"version": 1, "dtype": "f32", "arrays": [{"name": ...,
"shape": [...]}, ...], "meta": {...}}``. Writes are deterministic: the
same arrays and meta always produce the same bytes.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import BadMagicError, HeaderError, PayloadSizeMismatchError

MAGIC = b"DPSG"
VERSION = 1
_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


def write_container(
    path: str | Path,
    arrays: dict[str, np.ndarray],
    meta: dict | None = None,
    dtype: str = "f32",
) -> None:
    """Write named arrays plus a JSON meta block to ``path``."""
    if dtype not in _DTYPES:
        raise HeaderError(f"unsupported container dtype {dtype!r}")
    np_dtype = _DTYPES[dtype]
    entries = [{"name": str(k), "shape": list(np.asarray(v).shape)} for k, v in arrays.items()]
    header = {
        "version": VERSION,
        "dtype": dtype,
        "arrays": entries,
        "meta": meta or {},
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(len(header_bytes).to_bytes(4, "little"))
        fh.write(header_bytes)
        for k in arrays:
            fh.write(np.ascontiguousarray(arrays[k], dtype=np_dtype).tobytes())


def read_container(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    """Read a container back; returns (arrays, meta).

    Raises BadMagicError, HeaderError, or PayloadSizeMismatchError for the
    corresponding corruption kinds.
    """
    raw = Path(path).read_bytes()
    if len(raw) < 8 or raw[:4] != MAGIC:
        raise BadMagicError(f"{path}: bad magic bytes {raw[:4]!r}")
    header_len = int.from_bytes(raw[4:8], "little")
    if len(raw) < 8 + header_len:
        raise HeaderError(f"{path}: truncated header ({len(raw) - 8} < {header_len} bytes)")
    try:
        header = json.loads(raw[8 : 8 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise HeaderError(f"{path}: header is not valid JSON: {exc}") from exc
    for key in ("version", "dtype", "arrays", "meta"):
        if key not in header:
            raise HeaderError(f"{path}: header missing {key!r}")
    if header["version"] != VERSION:
        raise HeaderError(f"{path}: unsupported container version {header['version']}")
    if header["dtype"] not in _DTYPES:
        raise HeaderError(f"{path}: unsupported dtype {header['dtype']!r}")
    np_dtype = _DTYPES[header["dtype"]]

    payload = raw[8 + header_len :]
    counts = []
    for entry in header["arrays"]:
        if "name" not in entry or "shape" not in entry:
            raise HeaderError(f"{path}: malformed array entry {entry!r}")
        counts.append(int(np.prod(entry["shape"], dtype=np.int64)))
    expected = sum(counts) * np_dtype.itemsize
    if len(payload) != expected:
        raise PayloadSizeMismatchError(
            f"{path}: payload holds {len(payload)} bytes, header declares {expected}"
        )

    arrays: dict[str, np.ndarray] = {}
    offset = 0
    for entry, count in zip(header["arrays"], counts):
        nbytes = count * np_dtype.itemsize
        flat = np.frombuffer(payload, dtype=np_dtype, count=count, offset=offset)
        arrays[entry["name"]] = flat.reshape(entry["shape"]).copy()
        offset += nbytes
    return arrays, header["meta"]


def write_shard_index(path: str | Path, shards: list[dict]) -> None:
    """Write the shard index: a JSON list of {path, num_samples} records."""
    doc = {"schema_version": 1, "shards": shards}
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")


def read_shard_index(path: str | Path) -> list[dict]:
    doc = json.loads(Path(path).read_text())
    if doc.get("schema_version") != 1 or "shards" not in doc:
        raise HeaderError(f"{path}: not a valid shard index")
    return doc["shards"]

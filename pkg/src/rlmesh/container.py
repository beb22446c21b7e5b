"""Binary checkpoint container: JSON metadata + raw arrays + SHA-256 footer.

Layout: ``magic | format version (u32 LE) | header length (u64 LE) | header
JSON | array payload | sha256 of everything before the digest``. Writing is
deterministic (sorted keys, fixed separators, arrays in sorted name order),
so save -> load -> save round-trips byte-identically. Files are written to a
temp path and atomically renamed, so a crash never leaves a torn checkpoint.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile

import numpy as np

from .errors import CheckpointIntegrityError

_MAGIC = b"RLMESHCP"
_FORMAT_VERSION = 1
_DIGEST_LEN = 32
_ALLOWED_DTYPES = {"float64", "int64", "uint8", "bool"}


def save_container(path, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    """Write ``meta`` (JSON-serializable) and named arrays to ``path``."""
    table = []
    payloads = []
    offset = 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        if arr.dtype == np.bool_:
            dtype = "bool"
        else:
            dtype = arr.dtype.name
        if dtype not in _ALLOWED_DTYPES:
            arr = np.ascontiguousarray(arr, dtype=np.float64)
            dtype = "float64"
        raw = arr.tobytes()
        table.append(
            {"name": name, "dtype": dtype, "shape": list(arr.shape), "offset": offset}
        )
        payloads.append(raw)
        offset += len(raw)

    header = json.dumps(
        {"meta": meta, "arrays": table}, sort_keys=True, separators=(",", ":")
    ).encode("utf-8")

    body = bytearray()
    body += _MAGIC
    body += _FORMAT_VERSION.to_bytes(4, "little")
    body += len(header).to_bytes(8, "little")
    body += header
    for raw in payloads:
        body += raw
    digest = hashlib.sha256(bytes(body)).digest()

    directory = os.path.dirname(os.path.abspath(path)) or "."
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(bytes(body))
            fh.write(digest)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Read a container back; raises :class:`CheckpointIntegrityError` on damage."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise CheckpointIntegrityError(f"cannot read checkpoint {path}: {exc}") from exc

    if len(blob) < len(_MAGIC) + 12 + _DIGEST_LEN:
        raise CheckpointIntegrityError(f"checkpoint {path} is truncated")
    body, digest = blob[:-_DIGEST_LEN], blob[-_DIGEST_LEN:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointIntegrityError(f"checkpoint {path} failed its checksum")
    if body[: len(_MAGIC)] != _MAGIC:
        raise CheckpointIntegrityError(f"checkpoint {path} has a bad magic header")
    pos = len(_MAGIC)
    version = int.from_bytes(body[pos : pos + 4], "little")
    if version != _FORMAT_VERSION:
        raise CheckpointIntegrityError(
            f"checkpoint {path} format version {version} is unsupported"
        )
    pos += 4
    header_len = int.from_bytes(body[pos : pos + 8], "little")
    pos += 8
    try:
        header = json.loads(body[pos : pos + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointIntegrityError(f"checkpoint {path} header is corrupt") from exc
    pos += header_len

    arrays = {}
    for entry in header["arrays"]:
        dtype = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        start = pos + entry["offset"]
        end = start + count * dtype.itemsize
        if end > len(body):
            raise CheckpointIntegrityError(f"checkpoint {path} payload is truncated")
        arr = np.frombuffer(body[start:end], dtype=dtype).reshape(entry["shape"])
        arrays[entry["name"]] = arr.copy()
    return header["meta"], arrays

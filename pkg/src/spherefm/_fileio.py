"""Framed binary files: a magic line, one line of JSON header, then raw little-endian arrays.

The header lists the payload sections as ``[name, dtype, count]`` and carries a
SHA-256 of the payload bytes, so truncation is detected on load.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .errors import ChecksumMismatch, FormatVersionMismatch, SphereFMError


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def write_framed(path, magic: str, version: int, header: dict, arrays: list[tuple[str, np.ndarray]]) -> Path:
    path = Path(path)
    chunks = []
    sections = []
    for name, arr in arrays:
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        chunks.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
        sections.append([name, dt.str, int(arr.size)])
    payload = b"".join(chunks)
    full = dict(header)
    full.update(format_version=version, sections=sections, sha256=hashlib.sha256(payload).hexdigest())
    try:
        with open(path, "wb") as fh:
            fh.write(magic.encode() + b"\n")
            fh.write(canonical_json(full).encode() + b"\n")
            fh.write(payload)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc
    return path


def read_framed(path, magic: str, supported_version: int) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc}") from exc
    first, _, rest = raw.partition(b"\n")
    if first.decode(errors="replace") != magic:
        raise SphereFMError(f"{path}: not a {magic} file")
    line, sep, payload = rest.partition(b"\n")
    if not sep:
        raise ChecksumMismatch(f"{path}: header truncated")
    try:
        header = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ChecksumMismatch(f"{path}: corrupt header ({exc})") from exc
    version = header.get("format_version")
    if version != supported_version:
        raise FormatVersionMismatch(
            f"{path}: file format version {version}, this build reads version {supported_version}"
        )
    if hashlib.sha256(payload).hexdigest() != header.get("sha256"):
        raise ChecksumMismatch(f"{path}: payload checksum mismatch ({len(payload)} bytes read)")
    arrays = {}
    offset = 0
    for name, dtype, count in header["sections"]:
        dt = np.dtype(dtype)
        arrays[name] = np.frombuffer(payload, dtype=dt, count=count, offset=offset).astype(dt.newbyteorder("="))
        offset += dt.itemsize * count
    return header, arrays


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()

"""Binary container shared by datasets, latent files and checkpoints.

Layout (all integers little-endian)::

    8 bytes   magic  b"PDLATENT"
    uint32    format version (1)
    uint64    header length in bytes
    ...       header: UTF-8 JSON, keys sorted
    ...       payload: little-endian float64, C order

The header's ``layout`` key selects the payload order:

``records``
    ``n_records`` fixed-size records back to back; record ``i`` is the
    concatenation of ``fields[j]`` (name + per-record shape) for that sample.
``tensors``
    named tensors back to back in ``tensors`` order (name + shape).

See ``docs/formats.md`` for the field lists written by each command.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"PDLATENT"
VERSION = 1
_F8 = np.dtype("<f8")


def _dump_header(header: dict) -> bytes:
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _write(path, header, payload: bytes):
    path = Path(path)
    hdr = _dump_header(header)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<IQ", VERSION, len(hdr)))
            fh.write(hdr)
            fh.write(payload)
    except OSError as exc:
        raise OSError(f"could not write container {path}: {exc}") from exc


def _read(path):
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise OSError(f"could not read container {path}: {exc}") from exc
    if raw[:8] != MAGIC:
        raise ValueError(f"{path} is not a pdelatent container (bad magic)")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != VERSION:
        raise ValueError(f"{path}: unsupported container version {version}")
    header = json.loads(raw[20:20 + hlen].decode("utf-8"))
    payload = np.frombuffer(raw, dtype=_F8, offset=20 + hlen)
    return header, payload


def write_records(path, header: dict, fields: dict[str, np.ndarray]):
    """Write per-sample records; every array in ``fields`` has leading axis ``n``."""
    names = list(fields)
    arrays = [np.asarray(fields[k], dtype=float) for k in names]
    n = arrays[0].shape[0] if arrays else 0
    if any(a.shape[0] != n for a in arrays):
        raise ValueError("all record fields need the same leading length")
    header = dict(header, layout="records", n_records=n,
                  fields=[{"name": k, "shape": list(a.shape[1:])} for k, a in zip(names, arrays)])
    flat = np.concatenate([a.reshape(n, -1) for a in arrays], axis=1) if arrays else np.zeros((0, 0))
    _write(path, header, flat.astype(_F8).tobytes())


def write_tensors(path, header: dict, tensors: dict[str, np.ndarray]):
    names = list(tensors)
    arrays = [np.asarray(tensors[k], dtype=float) for k in names]
    header = dict(header, layout="tensors",
                  tensors=[{"name": k, "shape": list(a.shape)} for k, a in zip(names, arrays)])
    payload = b"".join(a.astype(_F8).tobytes() for a in arrays)
    _write(path, header, payload)


def read_container(path):
    """Return ``(header, arrays)`` for either layout."""
    header, payload = _read(path)
    out = {}
    if header["layout"] == "records":
        n = header["n_records"]
        sizes = [int(np.prod(f["shape"])) for f in header["fields"]]
        table = payload.reshape(n, sum(sizes)) if n else np.zeros((0, sum(sizes)))
        col = 0
        for f, size in zip(header["fields"], sizes):
            out[f["name"]] = table[:, col:col + size].reshape([n] + f["shape"]).copy()
            col += size
    elif header["layout"] == "tensors":
        pos = 0
        for t in header["tensors"]:
            size = int(np.prod(t["shape"]))
            out[t["name"]] = payload[pos:pos + size].reshape(t["shape"]).copy()
            pos += size
    else:
        raise ValueError(f"{path}: unknown layout {header['layout']!r}")
    return header, out

"""Model files: header, flat little-endian float64 arrays, SHA-256 trailer.

Layout::

    b"GMLFM\\0"  magic
    uint16      format version
    uint32      header length, then a UTF-8 JSON header
                (k, n, layers, spec, field layout, vocabulary, toolkit version,
                config echo)
    float64[]   w0, w, V (row-major), h, L (row-major), then W_l, b_l per layer
    32 bytes    SHA-256 of everything above
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .data import FieldLayout, Vocabulary
from .model import DistanceSpec, ModelParams

MAGIC = b"GMLFM\0"
FORMAT_VERSION = 1


class ModelFileError(ValueError):
    pass


def save_model(path, params, spec, layout=None, vocabulary=None, item_attributes=None, config=None):
    k, n, layers = params.k, params.n, len(params.mlp)
    header = {
        "format_version": FORMAT_VERSION,
        "toolkit_version": __version__,
        "k": k,
        "n": n,
        "layers": layers,
        "spec": asdict(spec),
        "layout": None if layout is None else {
            "fields": [list(f) for f in layout.fields],
            "user_field": layout.user_field,
            "item_field": layout.item_field,
        },
        "vocabulary": None if vocabulary is None else vocabulary.to_rows(),
        "config": config,
        "item_attributes": None if not item_attributes else
            {str(i): {str(p): c for p, c in a.items()} for i, a in item_attributes.items()},
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    chunks = [params.w0, params.w, params.V, params.h, params.L]
    for W, b in params.mlp:
        chunks += [W, b]
    body = b"".join(np.ascontiguousarray(c, dtype="<f8").tobytes() for c in chunks)
    blob = MAGIC + struct.pack("<HI", FORMAT_VERSION, len(hbytes)) + hbytes + body
    Path(path).write_bytes(blob + hashlib.sha256(blob).digest())


def load_model(path, expect_n=None, expect_k=None):
    """Read a model file; returns ``(params, spec, header)``.

    Rejects checksum mismatches and, when given, unexpected ``n``/``k``.
    """
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + 6 + 32 or not raw.startswith(MAGIC):
        raise ModelFileError(f"{path}: not a model file")
    blob, digest = raw[:-32], raw[-32:]
    found = hashlib.sha256(blob).digest()
    if found != digest:
        raise ModelFileError(
            f"{path}: checksum mismatch (expected {digest.hex()[:16]}..., found {found.hex()[:16]}...)"
        )
    version, hlen = struct.unpack_from("<HI", blob, len(MAGIC))
    if version != FORMAT_VERSION:
        raise ModelFileError(f"{path}: unsupported format version {version}")
    off = len(MAGIC) + 6
    header = json.loads(blob[off : off + hlen])
    k, n, layers = header["k"], header["n"], header["layers"]
    if expect_n is not None and expect_n != n:
        raise ModelFileError(f"{path}: n mismatch (expected {expect_n}, found {n})")
    if expect_k is not None and expect_k != k:
        raise ModelFileError(f"{path}: k mismatch (expected {expect_k}, found {k})")
    data = np.frombuffer(blob, dtype="<f8", offset=off + hlen).astype(np.float64)
    sizes = [1, n, n * k, k, k * k] + [k * k, k] * layers
    if data.size != sum(sizes):
        raise ModelFileError(f"{path}: expected {sum(sizes)} values, found {data.size}")
    parts = np.split(data, np.cumsum(sizes)[:-1])
    mlp = [(parts[5 + 2 * l].reshape(k, k), parts[6 + 2 * l]) for l in range(layers)]
    params = ModelParams(float(parts[0][0]), parts[1], parts[2].reshape(n, k), parts[3],
                         parts[4].reshape(k, k), mlp)
    spec = DistanceSpec(**header["spec"])
    return params, spec, header


def layout_from_header(header):
    lay = header.get("layout")
    if lay is None:
        return None
    return FieldLayout(tuple(tuple(f) for f in lay["fields"]), lay["user_field"], lay["item_field"])


def vocabulary_from_header(header):
    rows = header.get("vocabulary")
    return None if rows is None else Vocabulary.from_rows(rows)


def item_attributes_from_header(header):
    attrs = header.get("item_attributes") or {}
    return {int(i): {int(p): int(c) for p, c in a.items()} for i, a in attrs.items()}

"""GSLM model container.

Layout::

    b"GSLM" | version u32 LE | header length u32 LE | UTF-8 JSON header | payloads

The header carries the model config, free-form metadata and an ordered tensor
manifest ``{name, shape, offset}``. Offsets are absolute file offsets, each a
multiple of 64; payloads are little-endian float32 in manifest order, and the
gaps are zero-filled.
"""

import json
import struct

import numpy as np

from .model import Model, ModelConfig, weight_names

MAGIC = b"GSLM"
VERSION = 1
ALIGN = 64


class ContainerError(ValueError):
    pass


def _align(n):
    return (n + ALIGN - 1) // ALIGN * ALIGN


def to_bytes(model):
    names = weight_names(model.cfg)
    arrays = [np.ascontiguousarray(model.weights[n], dtype="<f4") for n in names]
    manifest = [{"name": n, "shape": list(a.shape), "offset": 0} for n, a in zip(names, arrays)]

    def header_bytes():
        header = {"config": model.cfg.to_dict(), "meta": model.meta, "tensors": manifest}
        return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")

    # offsets depend on header length, which depends on the offsets' digits
    while True:
        head = header_bytes()
        pos = _align(12 + len(head))
        changed = False
        for entry, a in zip(manifest, arrays):
            if entry["offset"] != pos:
                entry["offset"] = pos
                changed = True
            pos = _align(pos + a.nbytes)
        if not changed:
            break
    buf = bytearray(MAGIC + struct.pack("<II", VERSION, len(head)) + head)
    for entry, a in zip(manifest, arrays):
        buf.extend(b"\0" * (entry["offset"] - len(buf)))
        buf.extend(a.tobytes())
    return bytes(buf)


def from_bytes(data):
    if len(data) < 12 or data[:4] != MAGIC:
        raise ContainerError("not a GSLM container")
    version, hlen = struct.unpack("<II", data[4:12])
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")
    try:
        header = json.loads(data[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"corrupt header: {exc}") from exc
    cfg = ModelConfig.from_dict(header["config"])
    weights = {}
    for entry in header["tensors"]:
        off = entry["offset"]
        if off % ALIGN:
            raise ContainerError(f"{entry['name']} is not {ALIGN}-byte aligned")
        count = int(np.prod(entry["shape"], dtype=np.int64))
        end = off + 4 * count
        if end > len(data):
            raise ContainerError(f"{entry['name']} runs past end of file")
        weights[entry["name"]] = np.frombuffer(data, dtype="<f4", count=count, offset=off).reshape(entry["shape"])
    return Model(cfg, weights, header.get("meta"))


def save_model(model, path):
    data = to_bytes(model)
    with open(path, "wb") as fh:
        fh.write(data)
    return data


def load_model(path):
    with open(path, "rb") as fh:
        return from_bytes(fh.read())

"""
Bit-exact persistence: the VVOL volume format, model checkpoints and reports.

VVOL layout (all little-endian)::

    "VVOL" | version u16 | dtype u8 | D, H, W u32 | spacing 3 x f64 | voxels (z, y, x)

dtype codes: 0 float32 image, 1 binary byte mask, 2 tri-label byte (u = 255).

Checkpoints::

    "WSCK" | version u16 | header length u32 | JSON header | raw arrays | sha256 of all preceding bytes
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

from weakseg3d.errors import CorruptionError, FormatError, InvalidArgumentError
from weakseg3d.net.unet import UNetConfig, UNetParameters
from weakseg3d.sdn import SDNModel
from weakseg3d.ssn import SSNModel
from weakseg3d.volume import UNLABELED, BinaryMask, ProbabilityVolume, TriLabelMask, VolumeImage

VVOL_MAGIC = b"VVOL"
VVOL_VERSION = 1
_HEADER = struct.Struct("<4sHB3I3d")
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("u1"), 2: np.dtype("u1")}

CKPT_MAGIC = b"WSCK"
CKPT_VERSION = 1
_CK_HEAD = struct.Struct("<4sHI")


def _atomic_write(path, payload: bytes) -> None:
    path = Path(path)
    if not path.parent.is_dir():
        raise InvalidArgumentError(f"parent directory of {path} does not exist")
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


# ---- volumes


def encode_volume(vol) -> bytes:
    if isinstance(vol, (VolumeImage, ProbabilityVolume)):
        code = 0
    elif isinstance(vol, BinaryMask):
        code = 1
    elif isinstance(vol, TriLabelMask):
        code = 2
    else:
        raise InvalidArgumentError(f"cannot store {type(vol).__name__}")
    data = np.ascontiguousarray(vol.data, dtype=_DTYPES[code])
    return _HEADER.pack(VVOL_MAGIC, VVOL_VERSION, code, *data.shape, *vol.spacing) + data.tobytes()


def decode_volume(raw: bytes):
    if len(raw) < _HEADER.size:
        raise FormatError(f"file holds {len(raw)} bytes, shorter than the {_HEADER.size}-byte header", "header")
    magic, version, code, d, h, w, *spacing = _HEADER.unpack_from(raw)
    if magic != VVOL_MAGIC:
        raise FormatError(f"bad magic {magic!r}", "magic")
    if version != VVOL_VERSION:
        raise FormatError(f"unsupported version {version}", "version")
    if code not in _DTYPES:
        raise FormatError(f"unknown dtype code {code}", "dtype")
    dt = _DTYPES[code]
    n = d * h * w * dt.itemsize
    body = raw[_HEADER.size :]
    if len(body) != n:
        raise FormatError(f"payload has {len(body)} bytes, dims {d}x{h}x{w} need {n}", "payload")
    if not all(np.isfinite(spacing)) or min(spacing) <= 0:
        raise FormatError(f"invalid spacing {spacing}", "spacing")
    data = np.frombuffer(body, dtype=dt).reshape(d, h, w).copy()
    if code == 0:
        return VolumeImage(data.astype(np.float32), tuple(spacing))
    allowed = (0, 1) if code == 1 else (0, 1, UNLABELED)
    if not np.isin(data, allowed).all():
        raise FormatError(f"voxel values outside {allowed} for dtype code {code}", "payload")
    return (BinaryMask if code == 1 else TriLabelMask)(data, tuple(spacing))


def write_volume(path, vol) -> None:
    _atomic_write(path, encode_volume(vol))


def read_volume(path):
    return decode_volume(Path(path).read_bytes())


# ---- checkpoints


def encode_checkpoint(model: SSNModel | SDNModel) -> bytes:
    if isinstance(model, SSNModel):
        header = {"kind": "ssn", "flags": list(model.flags)}
    elif isinstance(model, SDNModel):
        header = {"kind": "sdn", "frozen": bool(model.frozen)}
    else:
        raise InvalidArgumentError(f"cannot checkpoint {type(model).__name__}")
    header["config"] = model.cfg.to_dict()
    header["training_history"] = [float(v) for v in model.training_history]
    arrays, blobs = [], []
    for group, store in (("values", model.params.values), ("momentum", model.params.momentum)):
        for name, arr in store.items():
            a = np.ascontiguousarray(arr)
            le = a.astype(a.dtype.newbyteorder("<"), copy=False)
            arrays.append({"group": group, "name": name, "dtype": le.dtype.str, "shape": list(a.shape)})
            blobs.append(le.tobytes())
    header["arrays"] = arrays
    hb = json.dumps(header, sort_keys=True).encode()
    body = _CK_HEAD.pack(CKPT_MAGIC, CKPT_VERSION, len(hb)) + hb + b"".join(blobs)
    return body + hashlib.sha256(body).digest()


def decode_checkpoint(raw: bytes) -> SSNModel | SDNModel:
    if len(raw) < _CK_HEAD.size + 32:
        raise FormatError("checkpoint shorter than its fixed header and trailer", "header")
    magic, version, hlen = _CK_HEAD.unpack_from(raw)
    if magic != CKPT_MAGIC:
        raise FormatError(f"bad magic {magic!r}", "magic")
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported version {version}", "version")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CorruptionError("checkpoint checksum mismatch")
    try:
        header = json.loads(body[_CK_HEAD.size : _CK_HEAD.size + hlen])
    except ValueError as e:
        raise FormatError(f"unreadable header: {e}", "header") from e
    cfg = UNetConfig.from_dict(header["config"])
    off = _CK_HEAD.size + hlen
    groups = {"values": OrderedDict(), "momentum": OrderedDict()}
    for spec in header["arrays"]:
        dt = np.dtype(spec["dtype"])
        n = int(np.prod(spec["shape"], dtype=np.int64)) * dt.itemsize
        if off + n > len(body):
            raise FormatError(f"array {spec['name']} runs past the end of the file", "arrays")
        arr = np.frombuffer(body[off : off + n], dtype=dt).reshape(spec["shape"])
        groups[spec["group"]][spec["name"]] = arr.astype(dt.newbyteorder("="))
        off += n
    if off != len(body):
        raise FormatError("trailing bytes after the last array", "arrays")
    params = UNetParameters(groups["values"])
    for k, v in groups["momentum"].items():
        params.momentum[k] = v
    history = list(header["training_history"])
    if header["kind"] == "ssn":
        return SSNModel(cfg, params, history, list(header["flags"]))
    if header["kind"] == "sdn":
        return SDNModel(cfg, params, bool(header["frozen"]), history)
    raise FormatError(f"unknown model kind {header['kind']!r}", "kind")


def write_checkpoint(path, model) -> None:
    _atomic_write(path, encode_checkpoint(model))


def read_checkpoint(path):
    return decode_checkpoint(Path(path).read_bytes())


# ---- JSON documents


def write_json(path, doc) -> None:
    _atomic_write(path, (json.dumps(doc, sort_keys=True, indent=1) + "\n").encode())


def read_json(path):
    return json.loads(Path(path).read_text())

"""Binary checkpoint files.

Layout (all integers little-endian)::

    b"MDIL"                     magic
    u32 version                 currently 1
    u32 n, n bytes              UTF-8 JSON metadata (domains, label spaces, config)
    u32 count                   number of tensor records
    count x record:
        u32 n, n bytes          tensor name (UTF-8)
        u8  dtype code          1=float32 2=float64 3=int64 4=uint8
        u32 rank
        rank x u64              extents
        payload                 row-major little-endian values

Latent exports reuse the same container with ``meta["kind"] == "latents"``.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

from mdil import rng as rngmod
from mdil.model import DomainSpec, EncoderConfig, Model, add_domain, build_model

MAGIC = b"MDIL"
VERSION = 1

_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<i8"), 4: np.dtype("u1")}
_CODES = {v.newbyteorder("="): k for k, v in _DTYPES.items()}


class CheckpointError(ValueError):
    """Malformed, truncated or incompatible checkpoint file."""


def _dtype_code(arr: np.ndarray) -> int:
    try:
        return _CODES[arr.dtype.newbyteorder("=")]
    except KeyError:
        raise CheckpointError(f"unsupported dtype {arr.dtype}") from None


def encode_records(meta: dict, tensors: dict) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    text = json.dumps(meta, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(text)))
    buf.write(text)
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        code = _dtype_code(arr)
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<BI", code, arr.ndim))
        for e in arr.shape:
            buf.write(struct.pack("<Q", e))
        buf.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("truncated checkpoint")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_records(data: bytes) -> tuple[dict, dict]:
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise CheckpointError("bad magic: not an MDIL file")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    (n,) = r.unpack("<I")
    try:
        meta = json.loads(r.take(n).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt metadata block: {exc}") from None
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (n,) = r.unpack("<I")
        name = r.take(n).decode("utf-8")
        code, rank = r.unpack("<BI")
        if code not in _DTYPES:
            raise CheckpointError(f"{name}: unknown dtype code {code}")
        shape = tuple(r.unpack(f"<{rank}Q")) if rank else ()
        dt = _DTYPES[code]
        size = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        arr = np.frombuffer(r.take(size), dtype=dt).reshape(shape)
        tensors[name] = arr.astype(dt.newbyteorder("="))
    if r.pos != len(data):
        raise CheckpointError("trailing bytes after last record")
    return meta, tensors


def write_records(path, meta: dict, tensors: dict) -> None:
    Path(path).write_bytes(encode_records(meta, tensors))


def read_records(path) -> tuple[dict, dict]:
    return decode_records(Path(path).read_bytes())


def model_metadata(model: Model) -> dict:
    return {
        "kind": "model",
        "arch": model.arch,
        "single_head": model.single_head,
        "dtype": model.dtype.name,
        "config": asdict(model.cfg),
        "domains": [{"name": s.name, "classes": list(s.classes), "location": s.location}
                    for s in model.domains],
        "union": list(model.union),
        "frozen": sorted(p.name for p in model.parameters() if p.frozen),
    }


def checkpoint_save(model: Model, path, extra: dict | None = None) -> None:
    meta = model_metadata(model)
    if extra:
        meta["extra"] = extra
    tensors = {name: p.data for name, p in model.named_parameters().items()}
    tensors.update(model.buffers())
    write_records(path, meta, tensors)


def checkpoint_load(path) -> Model:
    meta, tensors = read_records(path)
    if meta.get("kind") != "model":
        raise CheckpointError(f"{path}: not a model checkpoint")
    try:
        cfg = EncoderConfig(**{k: tuple(v) if isinstance(v, list) else v
                               for k, v in meta["config"].items()})
        specs = [DomainSpec(d["name"], tuple(d["classes"]), d.get("location"))
                 for d in meta["domains"]]
        # skeleton only: every tensor is overwritten below
        g = rngmod.stream(0)
        model = build_model(cfg, specs[0], g, arch=meta["arch"],
                            single_head=meta["single_head"], dtype=np.dtype(meta["dtype"]))
        for spec in specs[1:]:
            add_domain(model, spec, init="random", rng=g)
    except (KeyError, TypeError, IndexError, ValueError) as exc:
        raise CheckpointError(f"{path}: bad metadata ({exc})") from None
    params = model.named_parameters()
    buffers = model.buffers()
    expected = set(params) | set(buffers)
    unknown = sorted(set(tensors) - expected)
    if unknown:
        raise CheckpointError(f"unknown tensor name {unknown[0]!r}")
    missing = sorted(expected - set(tensors))
    if missing:
        raise CheckpointError(f"missing tensor {missing[0]!r}")
    for name, arr in tensors.items():
        target = params[name].data if name in params else buffers[name]
        if target.shape != arr.shape or target.dtype != arr.dtype:
            raise CheckpointError(f"{name}: stored {arr.dtype}{arr.shape}, "
                                  f"model expects {target.dtype}{target.shape}")
        if name in params:
            params[name].data = arr.copy()
        else:
            target[...] = arr
    for name in meta.get("frozen", []):
        params[name].freeze()
    return model

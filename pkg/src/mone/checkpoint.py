"""Binary checkpoint format.

Layout: ``b"MONE"``, u32 LE version, u32 LE metadata length, UTF-8 JSON
metadata (config, ordered tensor manifest, per-layer pruning layout, lineage),
then every tensor's little-endian float32 data in manifest order, unpadded.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError
from .model import Attention, Block, Expert, MoEModel, MoELayer, MoNELayer, ModelConfig, Router

MAGIC = b"MONE"
VERSION = 1
_HEADER = struct.Struct("<4sII")
_F32 = np.dtype("<f4")


def _layer_layout(model):
    layout = []
    for blk in model.blocks:
        if isinstance(blk.moe, MoNELayer):
            layout.append({
                "retained": sorted(int(e) for e in blk.moe.retained),
                "pruned": list(blk.moe.pruned),
                "renormalize_dropped": bool(blk.moe.renormalize_dropped),
            })
        else:
            layout.append(None)
    return layout


def checkpoint_bytes(model: MoEModel) -> bytes:
    tensors = model.tensors()
    meta = {
        "config": model.config.to_dict(),
        "tensors": [{"name": n, "shape": list(a.shape)} for n, a in tensors],
        "layers": _layer_layout(model),
        "lineage": dict(model.lineage),
    }
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [_HEADER.pack(MAGIC, VERSION, len(meta_bytes)), meta_bytes]
    parts.extend(np.ascontiguousarray(a, dtype=_F32).tobytes() for _, a in tensors)
    return b"".join(parts)


def model_fingerprint(model: MoEModel) -> str:
    """SHA-256 of the canonical checkpoint bytes."""
    return hashlib.sha256(checkpoint_bytes(model)).hexdigest()


def save_checkpoint(model: MoEModel, path) -> str:
    data = checkpoint_bytes(model)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load_checkpoint(path) -> MoEModel:
    return checkpoint_from_bytes(Path(path).read_bytes())


def checkpoint_from_bytes(data: bytes) -> MoEModel:
    if len(data) < _HEADER.size:
        raise FormatError("truncated checkpoint header", offset=len(data))
    magic, version, meta_len = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", offset=0)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4)
    pos = _HEADER.size
    if pos + meta_len > len(data):
        raise FormatError("truncated checkpoint metadata", offset=len(data))
    try:
        meta = json.loads(data[pos:pos + meta_len].decode("utf-8"))
        config = ModelConfig.from_dict(meta["config"])
        manifest = meta["tensors"]
        layout = meta.get("layers") or [None] * config.n_layers
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"invalid checkpoint metadata: {exc}", offset=pos) from exc
    pos += meta_len

    arrays = {}
    for entry in manifest:
        shape = tuple(int(s) for s in entry["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * _F32.itemsize
        if pos + nbytes > len(data):
            raise FormatError(f"truncated tensor {entry['name']!r}", offset=len(data))
        arrays[entry["name"]] = np.frombuffer(data, dtype=_F32, count=nbytes // 4, offset=pos).reshape(shape).astype(np.float32)
        pos += nbytes
    if pos != len(data):
        raise FormatError(f"{len(data) - pos} trailing bytes after last tensor", offset=pos)

    try:
        return _assemble(config, arrays, layout, meta.get("lineage") or {})
    except KeyError as exc:
        raise FormatError(f"manifest is missing tensor {exc}", offset=_HEADER.size) from exc


def _assemble(config, arrays, layout, lineage):
    blocks = []
    for li in range(config.n_layers):
        p = f"blocks.{li}."
        attn = Attention(*(arrays[p + "attn." + n] for n in ("wq", "wk", "wv", "wo")))
        router = Router(arrays[p + "moe.router"])

        def expert(e):
            return Expert(arrays[f"{p}moe.experts.{e}.w_up"], arrays[f"{p}moe.experts.{e}.w_down"])

        spec = layout[li]
        if spec is None:
            moe = MoELayer(router, [expert(e) for e in range(config.n_experts)])
        else:
            nov = arrays[p + "moe.novices"]
            moe = MoNELayer(
                router,
                {e: expert(e) for e in spec["retained"]},
                {e: nov[j] for j, e in enumerate(spec["pruned"])},
                renormalize_dropped=bool(spec.get("renormalize_dropped", False)),
            )
        blocks.append(Block(attn, moe))
    return MoEModel(config, arrays["embedding"], blocks, arrays["lm_head"], dict(lineage))

"""Binary checkpoint format.

Layout (all integers little-endian)::

    magic     8 bytes  b"BIASCKPT"
    version   u32      1
    cfg_len   u32      length of the config text
    cfg       bytes    UTF-8 ``key = value`` lines (model and training config)
    count     u32      number of arrays
    count x:
        name_len u16, name (UTF-8)
        ndim     u8,  ndim x u32 dims
        data     prod(dims) x float32 (little-endian, C order)

Integer buffers (BatchNorm step counters) are stored as float32 too and
cast back on load.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
import torch

from .config import ModelConfig, TrainConfig, build, dump_kv, parse_kv
from .errors import ParseError

MAGIC = b"BIASCKPT"
VERSION = 1


def save_checkpoint(path, model, train_cfg: TrainConfig | None = None) -> None:
    cfg_text = dump_kv(model.cfg, *(c for c in (train_cfg,) if c is not None)).encode("utf-8")
    state = model.state_dict()
    parts = [MAGIC, struct.pack("<II", VERSION, len(cfg_text)), cfg_text, struct.pack("<I", len(state))]
    for name, tensor in state.items():
        arr = tensor.detach().cpu().numpy().astype("<f4")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes(order="C"))
    Path(path).write_bytes(b"".join(parts))


def read_checkpoint(path):
    """Return ``(config_dict, {name: float32 array})``."""
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ParseError(f"{path}: not a checkpoint file")
    pos = 8
    version, cfg_len = struct.unpack_from("<II", data, pos)
    pos += 8
    if version != VERSION:
        raise ParseError(f"{path}: unsupported checkpoint version {version}")
    cfg = parse_kv(data[pos:pos + cfg_len].decode("utf-8"))
    pos += cfg_len
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    arrays = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + n].decode("utf-8")
        pos += n
        (ndim,) = struct.unpack_from("<B", data, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(data, dtype="<f4", count=size, offset=pos).reshape(shape).copy()
        pos += 4 * size
    if pos != len(data):
        raise ParseError(f"{path}: {len(data) - pos} trailing bytes")
    return cfg, arrays


def load_checkpoint(path):
    """Rebuild the model; returns ``(model, model_cfg, train_cfg)``."""
    from .fusion import BIASModel

    cfg, arrays = read_checkpoint(path)
    model_cfg = build(ModelConfig, cfg, strict=False)
    train_cfg = build(TrainConfig, cfg, strict=False)
    model = BIASModel(model_cfg)
    ref = model.state_dict()
    state = {}
    for name, arr in arrays.items():
        if name not in ref:
            raise ParseError(f"{path}: unexpected array {name}")
        state[name] = torch.from_numpy(arr).to(ref[name].dtype)
    model.load_state_dict(state)
    model.eval()
    return model, model_cfg, train_cfg

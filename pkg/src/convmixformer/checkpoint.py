"""CMFC checkpoint container.

Layout (little-endian)::

    4 bytes  magic b"CMFC"
    u32      array count
    per array:
        u32      name length in bytes
        bytes    UTF-8 name
        u32      rank
        u32[rank] dims
        f64[prod(dims)] values, row-major

Learnable arrays are stored under ``ModelParams.named_tensors`` names and
batch-norm running statistics under ``ModelParams.named_buffers`` names, in
that order.
"""
from __future__ import annotations

import os
import struct
from pathlib import Path
from typing import Union

import numpy as np

from .errors import FormatError
from .model import ModelConfig, ModelParams, init_model

MAGIC = b"CMFC"
_U32 = struct.Struct("<I")


def encode_arrays(arrays: list[tuple[str, np.ndarray]]) -> bytes:
    parts = [MAGIC, _U32.pack(len(arrays))]
    for name, arr in arrays:
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype=np.float64)
        parts.append(_U32.pack(len(raw)))
        parts.append(raw)
        parts.append(_U32.pack(arr.ndim))
        parts.extend(_U32.pack(n) for n in arr.shape)
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def decode_arrays(buf: bytes) -> list[tuple[str, np.ndarray]]:
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"truncated checkpoint: need {n} bytes", offset=pos)
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    if take(4) != MAGIC:
        raise FormatError("bad checkpoint magic", offset=0)
    (count,) = _U32.unpack(take(4))
    out = []
    for _ in range(count):
        (nlen,) = _U32.unpack(take(4))
        start = pos
        try:
            name = take(nlen).decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("array name is not UTF-8", offset=start) from None
        (rank,) = _U32.unpack(take(4))
        dims = tuple(_U32.unpack(take(4))[0] for _ in range(rank))
        size = int(np.prod(dims)) if dims else 1
        start = pos
        arr = np.frombuffer(take(8 * size), dtype="<f8").reshape(dims).astype(np.float64)
        if not np.isfinite(arr).all():
            raise FormatError(f"non-finite values in {name!r}", offset=start)
        out.append((name, arr))
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes", offset=pos)
    return out


def params_to_arrays(params: ModelParams) -> list[tuple[str, np.ndarray]]:
    return [(n, t.data) for n, t in params.named_tensors()] + params.named_buffers()


def save_checkpoint(params: ModelParams, path: Union[str, os.PathLike]) -> None:
    Path(path).write_bytes(encode_arrays(params_to_arrays(params)))


def load_checkpoint(path: Union[str, os.PathLike], config: ModelConfig) -> ModelParams:
    """Rebuild ``ModelParams`` for ``config`` from a checkpoint; names and shapes must match exactly."""
    stored = dict(decode_arrays(Path(path).read_bytes()))
    params = init_model(config, seed=0)
    expected = {n for n, _ in params.named_tensors()} | {n for n, _ in params.named_buffers()}
    missing = sorted(set(expected) - set(stored))
    extra = sorted(set(stored) - set(expected))
    if missing or extra:
        raise FormatError(f"checkpoint does not match config: missing {missing[:4]}, unexpected {extra[:4]}")
    for name, tensor in params.named_tensors():
        arr = stored[name]
        if arr.shape != tensor.shape:
            raise FormatError(f"{name}: stored shape {arr.shape} != expected {tensor.shape}")
        tensor.data = arr.copy()
    c = config.mixer_channels
    for i, stage in enumerate(params.stages):
        mean, var = stored[f"stage{i}.bn_running_mean"], stored[f"stage{i}.bn_running_var"]
        if mean.shape != (c,) or var.shape != (c,):
            raise FormatError(f"stage{i}: running statistics must have shape ({c},)")
        stage.bn_state.mean, stage.bn_state.var = mean.copy(), var.copy()
    return params

"""Single-file checkpoint format.

Little-endian throughout::

    b"EGLT"  u32 version (=1)
    u64 config_len, config_len bytes of UTF-8 JSON
    u32 tensor_count
    tensor_count x { u16 name_len, name, u8 dtype, u8 ndim, u64 dims[ndim],
                     u32 group_size, u64 data_offset, u64 data_len }
    zero padding to a 64-byte boundary, then the data region

dtype 0 = f32, 1 = int8-grouped, 2 = int4-grouped. Offsets are absolute and
every tensor starts on a 64-byte boundary. Quantized data is the per-group f32
scales followed by the packed codes (int8: signed bytes; int4: nibble = code+8,
two per byte, low nibble first).
"""
from __future__ import annotations

import json
import math
import os
import struct
import tempfile
from dataclasses import dataclass

import numpy as np

from . import quantization as qz
from . import autograd as ag
from .model import EagleConfig, EagleModel, param_shapes

MAGIC = b"EGLT"
VERSION = 1
ALIGN = 64
DTYPE_F32, DTYPE_INT8, DTYPE_INT4 = 0, 1, 2
_BITS = {DTYPE_INT8: 8, DTYPE_INT4: 4}


class CheckpointFormatError(qz.FormatError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


def atomic_write(path: str | os.PathLike, data: bytes) -> None:
    """Write via a temp file in the target directory and rename over ``path``."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=directory)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


@dataclass
class TensorEntry:
    name: str
    dtype: int
    shape: tuple[int, ...]
    group_size: int
    data_offset: int
    data_len: int

    @property
    def numel(self) -> int:
        return math.prod(self.shape)

    @property
    def bits(self) -> int:
        return _BITS.get(self.dtype, 32)


def expected_data_len(dtype: int, shape: tuple[int, ...], group_size: int) -> int:
    n = math.prod(shape)
    if dtype == DTYPE_F32:
        return 4 * n
    rows = n // shape[-1]
    scales = 4 * rows * qz.groups_per_row(shape[-1], group_size)
    return scales + qz.packed_code_bytes(n, _BITS[dtype])


def _tensor_blobs(model: EagleModel) -> list[tuple[str, int, tuple, int, bytes]]:
    blobs = []
    for name in param_shapes(model.cfg):
        if name in model.packed:
            q = model.packed[name]
            dtype = DTYPE_INT8 if q.spec.bits == 8 else DTYPE_INT4
            data = q.scales.astype("<f4").tobytes() + q.packed.tobytes()
            blobs.append((name, dtype, q.shape, q.spec.group_size, data))
        else:
            arr = np.asarray(model.params[name].data, dtype="<f4")
            blobs.append((name, DTYPE_F32, arr.shape, 0, arr.tobytes()))
    for name in sorted(model.lora):
        for suffix, var in zip(("lora_a", "lora_b"), model.lora[name]):
            arr = np.asarray(var.data, dtype="<f4")
            blobs.append((f"{name}.{suffix}", DTYPE_F32, arr.shape, 0, arr.tobytes()))
    return blobs


def _align(n: int) -> int:
    return -(-n // ALIGN) * ALIGN


def to_bytes(model: EagleModel) -> bytes:
    config = {"model": model.cfg.to_dict(), "quant": model.quant_meta}
    if model.lora:
        config["quant"] = dict(model.quant_meta, lora_scale=model.lora_scale)
    cfg_bytes = json.dumps(config, sort_keys=True).encode("utf-8")
    blobs = _tensor_blobs(model)
    header_len = 4 + 4 + 8 + len(cfg_bytes) + 4
    for name, _, shape, _, _ in blobs:
        header_len += 2 + len(name.encode()) + 2 + 8 * len(shape) + 4 + 8 + 8
    offset = _align(header_len)
    table = []
    for name, dtype, shape, gs, data in blobs:
        table.append((name, dtype, shape, gs, offset, len(data)))
        offset = _align(offset + len(data))
    out = bytearray()
    out += MAGIC + struct.pack("<IQ", VERSION, len(cfg_bytes)) + cfg_bytes
    out += struct.pack("<I", len(blobs))
    for name, dtype, shape, gs, off, ln in table:
        nb = name.encode()
        out += struct.pack("<H", len(nb)) + nb + struct.pack("<BB", dtype, len(shape))
        out += struct.pack(f"<{len(shape)}Q", *shape) + struct.pack("<IQQ", gs, off, ln)
    assert len(out) == header_len
    for (name, dtype, shape, gs, data), (_, _, _, _, off, _) in zip(blobs, table):
        out += b"\0" * (off - len(out))
        out += data
    return bytes(out)


def save(model: EagleModel, path: str | os.PathLike) -> int:
    data = to_bytes(model)
    atomic_write(path, data)
    return len(data)


def read_header(data: bytes) -> tuple[dict, list[TensorEntry]]:
    def need(off: int, n: int, what: str) -> None:
        if off + n > len(data):
            raise CheckpointFormatError(f"truncated file while reading {what}", off)

    need(0, 16, "header")
    if data[:4] != MAGIC:
        raise CheckpointFormatError("bad magic", 0)
    version, cfg_len = struct.unpack_from("<IQ", data, 4)
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported version {version}", 4)
    need(16, cfg_len, "config")
    try:
        config = json.loads(data[16:16 + cfg_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointFormatError(f"invalid config JSON: {e}", 16) from None
    off = 16 + cfg_len
    need(off, 4, "tensor count")
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    entries = []
    for _ in range(count):
        start = off
        need(off, 2, "tensor name length")
        (nlen,) = struct.unpack_from("<H", data, off)
        off += 2
        need(off, nlen + 2, "tensor name")
        name = data[off:off + nlen].decode("utf-8")
        off += nlen
        dtype, ndim = struct.unpack_from("<BB", data, off)
        off += 2
        if dtype not in (DTYPE_F32, DTYPE_INT8, DTYPE_INT4):
            raise CheckpointFormatError(f"unknown dtype {dtype} for tensor {name!r}", off - 2)
        need(off, 8 * ndim + 20, "tensor dims")
        shape = struct.unpack_from(f"<{ndim}Q", data, off)
        off += 8 * ndim
        gs, doff, dlen = struct.unpack_from("<IQQ", data, off)
        off += 20
        if ndim == 0 or 0 in shape:
            raise CheckpointFormatError(f"tensor {name!r} has an empty shape", start)
        if dtype != DTYPE_F32 and (gs < 1 or gs & (gs - 1)):
            raise CheckpointFormatError(f"tensor {name!r} has invalid group size {gs}", start)
        want = expected_data_len(dtype, tuple(shape), gs)
        if dlen != want:
            raise CheckpointFormatError(f"tensor {name!r} data_len {dlen} != expected {want}", start)
        if doff + dlen > len(data):
            raise CheckpointFormatError(f"truncated data for tensor {name!r}", min(doff, len(data)))
        entries.append(TensorEntry(name, dtype, tuple(int(s) for s in shape), gs, doff, dlen))
    return config, entries


def from_bytes(data: bytes) -> EagleModel:
    config, entries = read_header(data)
    cfg = EagleConfig.from_dict(config["model"])
    shapes = param_shapes(cfg)
    params, packed, lora_parts = {}, {}, {}
    for e in entries:
        raw = data[e.data_offset:e.data_offset + e.data_len]
        if e.dtype == DTYPE_F32:
            arr = np.frombuffer(raw, dtype="<f4").reshape(e.shape).astype(np.float32)
            if e.name.endswith((".lora_a", ".lora_b")):
                lora_parts[e.name] = arr
            else:
                params[e.name] = arr
        else:
            rows = e.numel // e.shape[-1]
            g = qz.groups_per_row(e.shape[-1], e.group_size)
            scales = np.frombuffer(raw[:4 * rows * g], dtype="<f4").reshape(rows, g).astype(np.float32)
            codes = np.frombuffer(raw[4 * rows * g:], dtype=np.uint8).copy()
            packed[e.name] = qz.QuantizedTensor(qz.QuantSpec(_BITS[e.dtype], e.group_size), e.shape, codes, scales)
    for name, shape in shapes.items():
        have = params.get(name, packed.get(name))
        if have is None:
            raise CheckpointFormatError(f"missing tensor {name!r}", 0)
        got = have.shape if isinstance(have, np.ndarray) else have.shape
        if tuple(got) != tuple(shape):
            raise CheckpointFormatError(f"tensor {name!r} has shape {tuple(got)}, config expects {shape}", 0)
    model = EagleModel.__new__(EagleModel)
    model.cfg = cfg
    model.params = {k: ag.Var(v) for k, v in params.items()}
    model.packed = packed
    model.qat = {}
    model.quant_meta = dict(config.get("quant", {}))
    model.lora_scale = float(model.quant_meta.pop("lora_scale", 0.0))
    model.lora = {}
    for key in sorted(lora_parts):
        if key.endswith(".lora_a"):
            base = key[:-len(".lora_a")]
            model.lora[base] = (ag.Var(lora_parts[key]), ag.Var(lora_parts[base + ".lora_b"]))
    return model


def load(path: str | os.PathLike) -> EagleModel:
    with open(path, "rb") as f:
        return from_bytes(f.read())


def inspect(path: str | os.PathLike) -> dict:
    """Tensor table, parameter totals and predicted vs actual file size."""
    with open(path, "rb") as f:
        data = f.read()
    _, entries = read_header(data)
    rows = [{"name": e.name, "dtype": ("f32", "int8", "int4")[e.dtype], "shape": list(e.shape),
             "bits": e.bits, "bytes": e.data_len} for e in entries]
    total = sum(e.numel for e in entries)
    avg = sum(e.numel * e.bits for e in entries) / total
    quantized = any(e.dtype != DTYPE_F32 for e in entries)
    predicted = qz.estimate_size_bytes(total, avg, qz.DEFAULT_GROUP_SIZE if quantized else None)
    return {"tensors": rows, "total_params": total, "avg_bits": avg,
            "predicted_bytes": predicted, "actual_bytes": len(data)}

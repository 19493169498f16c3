"""Group-wise symmetric weight quantization, fake quantization and mixed-precision planning.

Groups run along the last axis. A row whose length is not a multiple of the
group size gets a short final group; the missing values behave as zero padding
and never influence the scale.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from . import autograd as ag

DEFAULT_GROUP_SIZE = 32
_QMAX = {8: 127, 4: 7}
_QMIN = {8: -127, 4: -8}


class FormatError(ValueError):
    pass


@dataclass(frozen=True)
class QuantSpec:
    bits: int = 8
    group_size: int = DEFAULT_GROUP_SIZE
    symmetric: bool = True

    def __post_init__(self):
        if self.bits not in _QMAX:
            raise ValueError(f"bits must be 4 or 8, got {self.bits}")
        gs = self.group_size
        if gs < 1 or gs & (gs - 1):
            raise ValueError(f"group_size must be a power of two, got {gs}")
        if not self.symmetric:
            raise ValueError("only symmetric quantization is supported")

    @property
    def qmax(self) -> int:
        return _QMAX[self.bits]

    @property
    def qmin(self) -> int:
        return _QMIN[self.bits]


@dataclass
class QuantizedTensor:
    spec: QuantSpec
    shape: tuple[int, ...]
    packed: np.ndarray  # uint8
    scales: np.ndarray  # float32, [rows, groups_per_row]

    @property
    def numel(self) -> int:
        return math.prod(self.shape)

    @property
    def nbytes(self) -> int:
        return self.packed.nbytes + self.scales.nbytes


def groups_per_row(last_dim: int, group_size: int) -> int:
    return -(-last_dim // group_size)


def packed_code_bytes(numel: int, bits: int) -> int:
    return -(-numel * bits // 8)


def _grouped(w: np.ndarray, group_size: int) -> np.ndarray:
    """[rows, groups, group_size] view of ``w`` with zero padding on the last axis."""
    n = w.shape[-1]
    rows = w.reshape(-1, n)
    g = groups_per_row(n, group_size)
    pad = g * group_size - n
    if pad:
        rows = np.pad(rows, ((0, 0), (0, pad)))
    return rows.reshape(rows.shape[0], g, group_size)


def compute_scales(w: np.ndarray, spec: QuantSpec) -> np.ndarray:
    w = np.asarray(w, dtype=np.float32)
    amax = np.abs(_grouped(w, spec.group_size)).max(axis=-1)
    scales = (amax / np.float32(spec.qmax)).astype(np.float32)
    # a denormal group max can underflow to a zero scale; keep it positive
    tiny = np.float32(np.finfo(np.float32).smallest_subnormal)
    return np.where((amax > 0) & (scales == 0), tiny, scales).astype(np.float32)


def _rounded(w: np.ndarray, scales: np.ndarray, spec: QuantSpec) -> np.ndarray:
    """Unclipped rint(w / scale) per group; all-zero groups give code 0."""
    # divide in float64: a float32 quotient can land on the wrong side of a .5 tie
    grouped = _grouped(np.asarray(w, dtype=np.float32), spec.group_size).astype(np.float64)
    s = scales[..., None].astype(np.float64)
    safe = np.where(s > 0, s, 1.0)
    return np.where(s > 0, np.rint(grouped / safe), 0.0)


def _codes(w: np.ndarray, scales: np.ndarray, spec: QuantSpec) -> np.ndarray:
    codes = np.clip(_rounded(w, scales, spec), spec.qmin, spec.qmax).astype(np.int8)
    n = np.shape(w)[-1]
    return codes.reshape(codes.shape[0], -1)[:, :n]


def _dequant_codes(codes: np.ndarray, scales: np.ndarray, shape, spec: QuantSpec) -> np.ndarray:
    # the one canonical dequantization: code * group scale, in float32
    n = shape[-1]
    g = scales.shape[1]
    pad = g * spec.group_size - n
    c = codes.reshape(-1, n)
    if pad:
        c = np.pad(c, ((0, 0), (0, pad)))
    vals = c.reshape(c.shape[0], g, spec.group_size).astype(np.float32) * scales[..., None]
    return vals.reshape(c.shape[0], -1)[:, :n].reshape(shape)


def pack_codes(codes: np.ndarray, bits: int) -> np.ndarray:
    flat = np.asarray(codes, dtype=np.int8).reshape(-1)
    if bits == 8:
        return flat.view(np.uint8).copy()
    nib = (flat.astype(np.int16) + 8).astype(np.uint8)
    if nib.size % 2:
        nib = np.append(nib, np.uint8(0))
    return (nib[0::2] | (nib[1::2] << 4)).astype(np.uint8)


def unpack_codes(packed: np.ndarray, bits: int, numel: int) -> np.ndarray:
    packed = np.asarray(packed, dtype=np.uint8)
    expected = packed_code_bytes(numel, bits)
    if packed.size != expected:
        raise FormatError(f"packed length {packed.size} != expected {expected} for {numel} {bits}-bit codes")
    if bits == 8:
        return packed.view(np.int8).copy()
    out = np.empty(packed.size * 2, dtype=np.int8)
    out[0::2] = (packed & 0x0F).astype(np.int8) - 8
    out[1::2] = (packed >> 4).astype(np.int8) - 8
    return out[:numel]


def quantize(w: np.ndarray, spec: QuantSpec = QuantSpec()) -> QuantizedTensor:
    w = np.asarray(w, dtype=np.float32)
    if not np.all(np.isfinite(w)):
        raise ValueError("cannot quantize non-finite values")
    scales = compute_scales(w, spec)
    codes = _codes(w, scales, spec)
    return QuantizedTensor(spec, tuple(w.shape), pack_codes(codes, spec.bits), scales)


def dequantize(q: QuantizedTensor) -> np.ndarray:
    rows = math.prod(q.shape[:-1])
    g = groups_per_row(q.shape[-1], q.spec.group_size)
    if q.scales.shape != (rows, g):
        raise FormatError(f"scales shape {q.scales.shape} != expected {(rows, g)}")
    codes = unpack_codes(q.packed, q.spec.bits, q.numel)
    return _dequant_codes(codes, q.scales, q.shape, q.spec)


def fake_quant(w: np.ndarray, spec: QuantSpec = QuantSpec()) -> np.ndarray:
    """dequantize(quantize(w)) without the byte packing round trip.

    Unpacking is lossless, so skipping it leaves the arithmetic identical to
    the inference path.
    """
    w = np.asarray(w, dtype=np.float32)
    scales = compute_scales(w, spec)
    codes = _codes(w, scales, spec)
    return _dequant_codes(codes, scales, w.shape, spec)


def clip_mask(w: np.ndarray, spec: QuantSpec, scales: np.ndarray | None = None) -> np.ndarray:
    """True where the rounded code lands inside [qmin, qmax], i.e. where the
    quantizer is locally the identity."""
    w = np.asarray(w, dtype=np.float32)
    if scales is None:
        scales = compute_scales(w, spec)
    raw = _rounded(w, scales, spec)
    inside = (raw >= spec.qmin) & (raw <= spec.qmax)
    return inside.reshape(inside.shape[0], -1)[:, :w.shape[-1]].reshape(w.shape)


def ste_grad(upstream: np.ndarray, w: np.ndarray, spec: QuantSpec,
             scales: np.ndarray | None = None) -> np.ndarray:
    """Clipped straight-through gradient of ``fake_quant`` w.r.t. ``w``.

    ``scales`` overrides the max-derived scales (frozen-scale case).
    """
    if upstream.shape != np.shape(w):
        raise ValueError(f"ste_grad shape mismatch: {upstream.shape} vs {np.shape(w)}")
    mask = clip_mask(w, spec, scales)
    return np.where(mask, upstream, np.zeros((), dtype=upstream.dtype))


def fake_quant_var(w: ag.Var, spec: QuantSpec) -> ag.Var:
    """Autograd wrapper: fake-quant forward, clipped STE backward."""
    wd = w.data
    out = fake_quant(wd, spec)
    return ag.custom(out, (w,), lambda g: (ste_grad(g, wd, spec),))


# ---------------------------------------------------------------- planning

@dataclass
class SensitivityReport:
    deltas: dict[str, float]
    baseline_loss: float = 0.0

    def __post_init__(self):
        self.deltas = {k: max(0.0, float(v)) for k, v in self.deltas.items()}


@dataclass
class QuantPlan:
    assignments: dict[str, QuantSpec]
    target_avg_bits: float
    achieved_avg_bits: float
    param_counts: dict[str, int] = field(default_factory=dict)

    def bits(self, name: str) -> int:
        return self.assignments[name].bits

    def fraction_at(self, bits: int) -> float:
        total = sum(self.param_counts.values())
        hit = sum(n for k, n in self.param_counts.items() if self.assignments[k].bits == bits)
        return hit / total

    @classmethod
    def uniform(cls, param_counts: Mapping[str, int], bits: int,
                group_size: int = DEFAULT_GROUP_SIZE) -> "QuantPlan":
        spec = QuantSpec(bits, group_size)
        return cls({k: spec for k in sorted(param_counts)}, float(bits), float(bits),
                   dict(param_counts))


def average_bits(assignments: Mapping[str, QuantSpec], param_counts: Mapping[str, int]) -> float:
    total = sum(param_counts[k] for k in assignments)
    return sum(param_counts[k] * s.bits for k, s in assignments.items()) / total


def build_mixed_plan(report: SensitivityReport, param_counts: Mapping[str, int],
                     target_avg_bits: float, always_int8: Iterable[str] = (),
                     group_size: int = DEFAULT_GROUP_SIZE) -> QuantPlan:
    """Greedy {4, 8}-bit assignment under an average-bits budget.

    Tensors are visited by descending sensitivity per parameter (ties by name);
    each one gets 8 bits if that keeps the weighted average within the target,
    otherwise 4. Tensors in ``always_int8`` are placed at 8 bits first.
    """
    if not report.deltas:
        raise ValueError("empty sensitivity report")
    if not 4.0 <= target_avg_bits <= 8.0:
        raise ValueError(f"target_avg_bits must lie in [4, 8], got {target_avg_bits}")
    missing = set(report.deltas) ^ set(param_counts)
    if missing:
        raise ValueError(f"report and param_counts disagree on tensors: {sorted(missing)}")
    total = sum(param_counts.values())
    budget = target_avg_bits * total
    forced = set(always_int8)
    used = 4.0 * total
    eight: set[str] = set()
    for name in sorted(forced & set(param_counts)):
        eight.add(name)
        used += 4.0 * param_counts[name]
    order = sorted((k for k in param_counts if k not in forced),
                   key=lambda k: (-report.deltas[k] / param_counts[k], k))
    for name in order:
        extra = 4.0 * param_counts[name]
        if used + extra <= budget + 1e-9:
            eight.add(name)
            used += extra
    assignments = {k: QuantSpec(8 if k in eight else 4, group_size) for k in sorted(param_counts)}
    return QuantPlan(assignments, float(target_avg_bits), used / total, dict(param_counts))


# ---------------------------------------------------------------- size accounting

def size_breakdown(param_count: int, avg_bits: float, group_size: int | None = DEFAULT_GROUP_SIZE,
                   header_bytes: int = 0) -> dict[str, int]:
    if param_count <= 0:
        raise ValueError("param_count must be positive")
    if group_size is not None and group_size <= 0:
        raise ValueError("group_size must be positive (None for unquantized)")
    code = math.ceil(param_count * avg_bits / 8)
    scales = 0 if group_size is None else 4 * math.ceil(param_count / group_size)
    return {"code_bytes": code, "scale_bytes": scales, "header_bytes": int(header_bytes),
            "total_bytes": code + scales + int(header_bytes)}


def estimate_size_bytes(param_count: int, avg_bits: float,
                        group_size: int | None = DEFAULT_GROUP_SIZE, header_bytes: int = 0) -> int:
    """Code bytes + 4-byte scale per group + header. ``group_size=None`` means
    no scales (float storage)."""
    return size_breakdown(param_count, avg_bits, group_size, header_bytes)["total_bytes"]

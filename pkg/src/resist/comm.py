"""Communication accounting and parameter compression codecs.

Accounting model: every worker downloads and uploads each parameter it holds
once per synchronization round. Full precision is 64 bits per value; a
quantizing codec charges its bit width, a top-k codec charges 64 value bits
plus a 32-bit index per kept entry.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ._backend import kernels
from .partition import PartitionPlan, full_plan
from .resnet import GlobalParams, ModelConfig

FULL_BITS = 64
INDEX_BITS = 32
SYNC_METHODS = ("resist", "local_sgd", "data_parallel")


@dataclass(frozen=True)
class QuantizedTensor:
    codes: np.ndarray
    lo: float
    hi: float
    bits: int
    shape: tuple

    @property
    def step(self) -> float:
        return (self.hi - self.lo) / ((1 << self.bits) - 1)


def quantize(values, bits: int) -> QuantizedTensor:
    """Uniform affine quantization with one (lo, hi) pair for the whole tensor."""
    if not 1 <= bits <= 16:
        raise ValueError(f"bits must be in 1..16, got {bits}")
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        return QuantizedTensor(np.zeros(0, dtype=np.uint32), 0.0, 0.0, bits, arr.shape)
    if not np.all(np.isfinite(arr)):
        raise ValueError("cannot quantize non-finite values")
    flat = np.ascontiguousarray(arr.ravel())
    lo, hi = float(flat.min()), float(flat.max())
    codes = kernels.quantize_codes(flat, lo, (hi - lo) / ((1 << bits) - 1), bits)
    return QuantizedTensor(codes, lo, hi, bits, arr.shape)


def dequantize(q: QuantizedTensor) -> np.ndarray:
    if q.hi == q.lo:
        return np.full(q.shape, q.lo)
    return kernels.dequantize_codes(q.codes, q.lo, q.step).reshape(q.shape)


@dataclass(frozen=True)
class SparseTensor:
    indices: np.ndarray
    values: np.ndarray
    size: int
    shape: tuple


def sparsify_topk(values, frac: float) -> SparseTensor:
    """Keep the ``ceil(frac * len)`` largest-magnitude entries; ties go to the lower index."""
    if not 0.0 < frac <= 1.0:
        raise ValueError(f"frac must be in (0, 1], got {frac}")
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("cannot sparsify an empty array")
    flat = arr.ravel()
    k = math.ceil(frac * flat.size)
    order = np.argsort(-np.abs(flat), kind="stable")
    idx = np.sort(order[:k])
    return SparseTensor(idx, flat[idx].copy(), flat.size, arr.shape)


def densify(sp: SparseTensor) -> np.ndarray:
    out = np.zeros(sp.size)
    out[sp.indices] = sp.values
    return out.reshape(sp.shape)


@dataclass(frozen=True)
class Codec:
    """``kind`` is ``"quantize"`` (with ``bits``) or ``"topk"`` (with ``frac``)."""

    kind: str
    bits: int = 8
    frac: float = 1.0

    def __post_init__(self):
        if self.kind == "quantize":
            if not 1 <= self.bits <= 16:
                raise ValueError(f"bits must be in 1..16, got {self.bits}")
        elif self.kind == "topk":
            if not 0.0 < self.frac <= 1.0:
                raise ValueError(f"frac must be in (0, 1], got {self.frac}")
        else:
            raise ValueError(f"unknown codec {self.kind!r}")

    def roundtrip(self, arr: np.ndarray) -> np.ndarray:
        if self.kind == "quantize":
            return dequantize(quantize(arr, self.bits))
        return densify(sparsify_topk(arr, self.frac))

    def tensor_bits(self, size: int) -> int:
        if self.kind == "quantize":
            return size * self.bits
        return math.ceil(self.frac * size) * (FULL_BITS + INDEX_BITS)


def tensor_bits(size: int, codec: Optional[Codec], bits: int = FULL_BITS) -> int:
    return size * bits if codec is None else codec.tensor_bits(size)


def compress_params(params: GlobalParams, codec: Optional[Codec]) -> GlobalParams:
    """What a receiver reconstructs after ``params`` pass through ``codec``."""
    if codec is None:
        return params
    blocks = [None if W is None else codec.roundtrip(W) for W in params.blocks]
    return GlobalParams(blocks, codec.roundtrip(params.a))


def compress_delta(params: GlobalParams, reference: GlobalParams, codec: Optional[Codec]) -> GlobalParams:
    """Send ``params - reference`` through ``codec``; the receiver adds it back.

    Both ends must already share ``reference``. Blocks absent from ``params``
    stay absent.
    """
    if codec is None:
        return params
    blocks = [None if W is None else R + codec.roundtrip(W - R) for W, R in zip(params.blocks, reference.blocks)]
    return GlobalParams(blocks, reference.a + codec.roundtrip(params.a - reference.a))


def _bytes(bits: int) -> int:
    return (bits + 7) // 8


def traffic(plan: PartitionPlan, cfg: ModelConfig, codec: Optional[Codec] = None,
            directions: int = 2, bits: int = FULL_BITS) -> tuple[int, int]:
    """(shared_bytes, partitioned_bytes) moved for one round of ``plan``.

    ``bits`` is the per-value width used when no codec is installed.
    """
    shared_bits = partitioned_bits = 0
    partitionable = set(cfg.partitionable)
    for mask in plan.masks:
        for h in range(1, cfg.depth_H + 1):
            if not mask[h]:
                continue
            rows, cols = cfg.block_shape(h)
            size_bits = tensor_bits(rows * cols, codec, bits)
            if h in partitionable:
                partitioned_bits += size_bits
            else:
                shared_bits += size_bits
        shared_bits += tensor_bits(cfg.width_m, codec, bits)
    return _bytes(directions * shared_bits), _bytes(directions * partitioned_bits)


def round_volume(plan: PartitionPlan, cfg: ModelConfig, method: str, bits: int = FULL_BITS) -> int:
    """Bytes moved in one synchronization round at ``bits`` per value.

    Local SGD and data parallel move the full model for every worker; ResIST
    moves only what each worker's view holds.
    """
    if not 4 <= bits <= 64:
        raise ValueError(f"bits must be in 4..64, got {bits}")
    if method in ("local_sgd", "data_parallel"):
        plan = full_plan(cfg, plan.S, plan.round_index)
    elif method != "resist":
        raise ValueError(f"no per-round volume for method {method!r}")
    return sum(traffic(plan, cfg, bits=bits))


@dataclass(frozen=True)
class LedgerEntry:
    round: int
    shared_bytes: int
    partitioned_bytes: int

    @property
    def total_bytes(self) -> int:
        return self.shared_bytes + self.partitioned_bytes


@dataclass
class CommLedger:
    precision_bits: int = FULL_BITS
    entries: list = field(default_factory=list)
    cumulative: int = 0

    def record(self, round_index: int, shared_bytes: int, partitioned_bytes: int) -> LedgerEntry:
        entry = LedgerEntry(round_index, shared_bytes, partitioned_bytes)
        self.entries.append(entry)
        self.cumulative += entry.total_bytes
        return entry

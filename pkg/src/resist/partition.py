"""Per-round partition plans and sub-network views."""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .resnet import BlockMask, GlobalParams, ModelConfig
from .rng import stream


@dataclass(frozen=True)
class PartitionPlan:
    round_index: int
    num_workers_S: int
    masks: tuple
    shared_blocks: tuple

    @property
    def S(self) -> int:
        return self.num_workers_S

    def holders(self, h: int) -> list[int]:
        return [v for v, mask in enumerate(self.masks) if mask[h]]

    def multiplicity(self) -> np.ndarray:
        return np.sum([mask.bits for mask in self.masks], axis=0)

    def to_json(self) -> str:
        return json.dumps({
            "round": self.round_index,
            "S": self.num_workers_S,
            "masks": [mask.to_list() for mask in self.masks],
        })

    @classmethod
    def from_json(cls, text: str, cfg: ModelConfig) -> "PartitionPlan":
        obj = json.loads(text)
        masks = tuple(BlockMask(np.array(bits, dtype=bool)) for bits in obj["masks"])
        for mask in masks:
            mask.validate(cfg)
        if len(masks) != obj["S"]:
            raise ValueError(f"plan lists {len(masks)} masks for S={obj['S']}")
        return cls(obj["round"], obj["S"], masks, cfg.shared_blocks)


@dataclass
class SubResNetView:
    """One worker's copy of the parameters it holds; absent blocks are ``None``."""

    worker: int
    mask: BlockMask
    params: GlobalParams

    @property
    def param_count(self) -> int:
        return self.params.param_count


def deal(cfg: ModelConfig, S: int, round_index: int, seed: int) -> tuple[list, list]:
    """Shuffle and deal partitionable blocks; returns (dealt, final) holdings per worker."""
    rng = stream(seed, round_index, "partition")
    blocks = np.array(list(cfg.partitionable), dtype=np.int64)
    order = rng.permutation(blocks)
    dealt = [sorted(int(h) for h in order[v::S]) for v in range(S)]
    need = min(cfg.min_depth, len(blocks))
    final = []
    for held in dealt:
        held = set(held)
        if len(held) < need:
            lacking = np.array([h for h in blocks if h not in held], dtype=np.int64)
            extra = rng.choice(lacking, size=need - len(held), replace=False)
            held.update(int(h) for h in extra)
        final.append(sorted(held))
    return dealt, final


def make_plan(cfg: ModelConfig, S: int, round_index: int, seed: int) -> PartitionPlan:
    """Random round-robin partition of the partitionable blocks over ``S`` workers.

    Block ``order[k]`` of a seeded shuffle goes to worker ``k mod S``. A worker
    left with fewer than ``min_depth`` blocks is topped up with blocks drawn
    uniformly without replacement from those it lacks, so some blocks end up
    shared between workers.
    """
    if S < 1:
        raise ValueError("S must be >= 1")
    _, final = deal(cfg, S, round_index, seed)
    masks = tuple(BlockMask.holding(cfg, held) for held in final)
    return PartitionPlan(round_index, S, masks, cfg.shared_blocks)


def full_plan(cfg: ModelConfig, S: int, round_index: int = 0) -> PartitionPlan:
    """Every worker holds every block (local SGD / data parallel)."""
    masks = tuple(BlockMask.full(cfg) for _ in range(S))
    return PartitionPlan(round_index, S, masks, cfg.shared_blocks)


def extract_view(global_params: GlobalParams, plan: PartitionPlan, worker_v: int) -> SubResNetView:
    if not 0 <= worker_v < plan.S:
        raise IndexError(f"worker {worker_v} out of range for S={plan.S}")
    mask = plan.masks[worker_v]
    blocks = [W.copy() if mask[h] else None for h, W in enumerate(global_params.blocks, start=1)]
    return SubResNetView(worker_v, mask, GlobalParams(blocks, global_params.a.copy()))

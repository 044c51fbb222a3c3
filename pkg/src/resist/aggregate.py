"""Masked averaging of trained sub-network views into the global model."""
from __future__ import annotations

from ._backend import kernels
from .partition import PartitionPlan, SubResNetView
from .resnet import GlobalParams


class CoverageError(ValueError):
    """A block that no worker holds cannot be aggregated."""


def aggregate(views: list[SubResNetView], plan: PartitionPlan) -> GlobalParams:
    """Average each block over the workers holding it, in ascending worker order.

    Shared blocks and the output vector are held by every worker and so are
    averaged over all S views. A block held by a single worker is copied.
    """
    if len(views) != plan.S:
        raise ValueError(f"{len(views)} views for a plan with S={plan.S}")
    views = sorted(views, key=lambda view: view.worker)
    if [view.worker for view in views] != list(range(plan.S)):
        raise ValueError("views must cover workers 0..S-1 exactly once")
    depth = len(plan.masks[0].bits)
    blocks = []
    for h in range(1, depth + 1):
        holders = plan.holders(h)
        if not holders:
            raise CoverageError(f"block {h} is held by no worker")
        parts = [views[v].params.block(h) for v in holders]
        if any(W is None for W in parts):
            raise ValueError(f"block {h} missing from a view whose mask holds it")
        blocks.append(_mean(parts))
    a = _mean([view.params.a for view in views])
    return GlobalParams(blocks, a)


def _mean(parts: list):
    if len(parts) == 1:
        return parts[0].copy()
    return kernels.mean_of(parts).reshape(parts[0].shape)

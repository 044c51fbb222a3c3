"""Training protocols over simulated workers.

``resist`` repartitions the residual blocks every round, trains each
sub-network for ``ell`` local steps and merges them by masked averaging.
``local_sgd`` and ``data_parallel`` train the full model on every worker and
average everything; ``ensemble`` partitions once and never synchronizes.

Workers draw mini-batches from generators keyed by (seed, round, worker), so
a run is bitwise reproducible however the workers are scheduled.
"""
from __future__ import annotations

import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional, Union

import numpy as np

from ._backend import kernels
from .aggregate import aggregate
from .comm import Codec, CommLedger, compress_delta, compress_params, traffic
from .data import Dataset, shard
from .partition import PartitionPlan, SubResNetView, extract_view, full_plan, make_plan
from .resnet import TRAIN, BlockMask, GlobalParams, Inference, ModelConfig, Mode, forward_batch, init_params, loss_and_grad
from .rng import stream

log = logging.getLogger(__name__)

METHODS = ("resist", "local_sgd", "data_parallel", "ensemble")
DIVERGENCE_LOSS = 1e12


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class ProtocolConfig:
    method: str
    S: int
    T: int
    ell: int = 50
    eta: float = 1e-2
    batch_size: Union[int, str] = "full"
    warmup_rounds: int = 0
    shard_mode: str = "full_data"
    compression: Optional[Codec] = None
    delta_encoding: bool = False
    seed: int = 0
    threads: Optional[int] = None
    clock: str = "simulated"
    flops_per_second: float = 1e9
    bytes_per_second: float = 1.25e9

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.S < 1 or self.T < 0:
            raise ValueError("S must be >= 1 and T >= 0")
        if self.ell < 1:
            raise ValueError(f"ell must be >= 1, got {self.ell}")
        if self.method == "data_parallel" and self.ell != 1:
            raise ValueError("data_parallel synchronizes every step; ell must be 1")
        if not self.eta > 0:
            raise ValueError("eta must be positive")
        if self.batch_size != "full" and not (isinstance(self.batch_size, int) and self.batch_size >= 1):
            raise ValueError(f"batch_size must be a positive integer or 'full', got {self.batch_size!r}")
        if self.warmup_rounds < 0:
            raise ValueError("warmup_rounds must be >= 0")
        if self.shard_mode not in ("full_data", "disjoint_shards"):
            raise ValueError(f"unknown shard_mode {self.shard_mode!r}")
        if self.clock not in ("simulated", "wall"):
            raise ValueError(f"unknown clock {self.clock!r}")


@dataclass(frozen=True)
class RoundMetrics:
    round: int
    train_loss: float
    eval_loss: float
    shared_bytes: int
    partitioned_bytes: int
    cumulative_bytes: int
    seconds: float


@dataclass
class RunResult:
    method: str
    initial_loss: float
    rounds: list
    params: Optional[GlobalParams]
    models: list = field(default_factory=list)
    ledger: CommLedger = field(default_factory=CommLedger)
    trajectory: list = field(default_factory=list)
    wall_seconds: float = 0.0

    @property
    def final_loss(self) -> float:
        return self.rounds[-1].train_loss if self.rounds else self.initial_loss

    @property
    def losses(self) -> list[float]:
        return [r.train_loss for r in self.rounds]


def worker_threads(pcfg: ProtocolConfig) -> int:
    if pcfg.threads is not None:
        return max(1, pcfg.threads)
    env = os.environ.get("RESIST_THREADS", "")
    return max(1, int(env)) if env.strip() else 1


def _map_workers(fn, items: list, threads: int) -> list:
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=min(threads, len(items))) as pool:
        return list(pool.map(fn, items))


def _check(value: float, where: str) -> None:
    if not np.isfinite(value) or value > DIVERGENCE_LOSS:
        raise DivergenceError(f"loss {value!r} at {where}")


def local_train(view: SubResNetView, shard_data: Dataset, ell: int, eta: float,
                rng: np.random.Generator, cfg: ModelConfig, batch_size: Union[int, str] = "full",
                mode: Mode = TRAIN, history: Optional[list] = None) -> SubResNetView:
    """Run ``ell`` steps of ``W <- W - eta * grad`` on the blocks the view holds.

    ``history``, if given, receives the mini-batch loss seen before each step.
    """
    if not eta > 0:
        raise ValueError("eta must be positive")
    params = view.params.copy()
    if ell == 0:
        return SubResNetView(view.worker, view.mask, params)
    n = shard_data.n
    for step in range(ell):
        if batch_size == "full" or batch_size >= n:
            batch = shard_data
        else:
            batch = shard_data.subset(np.sort(rng.choice(n, size=batch_size, replace=False)))
        value, g = loss_and_grad(params, batch, view.mask, cfg, mode)
        _check(value, f"worker {view.worker} step {step}")
        if history is not None:
            history.append(value)
        for W, gW in zip(params.blocks, g.blocks):
            if W is not None:
                kernels.sgd_step(W.reshape(-1), np.ascontiguousarray(gW).reshape(-1), eta)
        kernels.sgd_step(params.a, np.ascontiguousarray(g.a), eta)
    return SubResNetView(view.worker, view.mask, params)


def _eval_loss(params: GlobalParams, data: Dataset, cfg: ModelConfig, mode: Mode) -> float:
    u = forward_batch(params, data.X, BlockMask.full(cfg), cfg, mode)[0]
    r = u - data.y
    return 0.5 * float(np.dot(r, r))


def _ensemble_loss(models: list[SubResNetView], data: Dataset, cfg: ModelConfig) -> float:
    outs = [forward_batch(v.params, data.X, v.mask, cfg)[0] for v in models]
    r = kernels.mean_of(outs) - data.y
    return 0.5 * float(np.dot(r, r))


def _step_seconds(pcfg: ProtocolConfig, views: list[SubResNetView], shard_sizes: list[int],
                  steps: int, round_bytes: int) -> float:
    # forward + backward ~ 6 flops per parameter per sample
    compute = 0.0
    for view, n in zip(views, shard_sizes):
        b = n if pcfg.batch_size == "full" else min(n, pcfg.batch_size)
        compute = max(compute, 6.0 * b * view.param_count * steps / pcfg.flops_per_second)
    return compute + round_bytes / pcfg.bytes_per_second


class _Clock:
    def __init__(self, pcfg: ProtocolConfig):
        self.pcfg = pcfg
        self.start = time.perf_counter()
        self.simulated = 0.0

    def advance(self, seconds: float) -> float:
        self.simulated += seconds
        if self.pcfg.clock == "wall":
            return time.perf_counter() - self.start
        return self.simulated


def _merge(reference: GlobalParams, update: GlobalParams) -> GlobalParams:
    blocks = [R if W is None else W for R, W in zip(reference.blocks, update.blocks)]
    return GlobalParams(blocks, update.a)


def _sync_round(pcfg: ProtocolConfig, cfg: ModelConfig, params: GlobalParams, plan: PartitionPlan,
                shards: list[Dataset], round_index: int, mode: Mode, threads: int,
                refs: Optional[list[GlobalParams]] = None):
    """One partition/train/aggregate cycle.

    With ``refs`` (delta encoding), ``refs[v]`` is the copy of every block
    that worker v and the server both hold from earlier transfers; only
    differences against it pass through the codec, and ``refs`` is updated
    in place.
    """
    codec = pcfg.compression
    if refs is None:
        sent = compress_params(params, codec)
        views = [extract_view(sent, plan, v) for v in range(plan.S)]
    else:
        views = []
        for v in range(plan.S):
            view = extract_view(params, plan, v)
            got = compress_delta(view.params, refs[v], codec)
            refs[v] = _merge(refs[v], got)
            views.append(SubResNetView(v, view.mask, got))

    def work(view: SubResNetView) -> SubResNetView:
        rng = stream(pcfg.seed, round_index, "batches", view.worker)
        trained = local_train(view, shards[view.worker], pcfg.ell, pcfg.eta, rng, cfg, pcfg.batch_size, mode)
        if refs is None:
            return SubResNetView(trained.worker, trained.mask, compress_params(trained.params, codec))
        return SubResNetView(trained.worker, trained.mask, compress_delta(trained.params, view.params, codec))

    trained = _map_workers(work, views, threads)
    if refs is not None:
        for view in trained:
            refs[view.worker] = _merge(refs[view.worker], view.params)
    return aggregate(trained, plan), trained


def _run_synchronous(pcfg: ProtocolConfig, cfg: ModelConfig, data: Dataset, eval_data: Optional[Dataset],
                     keep_trajectory: bool) -> RunResult:
    threads = worker_threads(pcfg)
    eval_data = eval_data if eval_data is not None else data
    shards = shard(data, pcfg.S, pcfg.shard_mode, pcfg.seed)
    params = init_params(cfg, pcfg.seed)
    resist = pcfg.method == "resist"
    eval_mode: Mode = Inference(pcfg.S) if resist else TRAIN
    ledger = CommLedger(precision_bits=pcfg.compression.bits if pcfg.compression and pcfg.compression.kind == "quantize" else 64)
    clock = _Clock(pcfg)
    started = time.perf_counter()
    result = RunResult(pcfg.method, _eval_loss(params, data, cfg, eval_mode), [], None, ledger=ledger)
    _check(result.initial_loss, "initialization")
    # every worker can rebuild the initial weights from the seed, so they start as the shared reference
    refs = [params.copy() for _ in range(pcfg.S)] if pcfg.delta_encoding and pcfg.compression else None

    schedule = []
    if resist:
        schedule += [("warmup", t) for t in range(1, pcfg.warmup_rounds + 1)]
    offset = len(schedule)
    schedule += [("main", offset + t) for t in range(1, pcfg.T + 1)]

    for phase, t in schedule:
        if resist and phase == "main":
            plan = make_plan(cfg, pcfg.S, t, pcfg.seed)
            train_mode: Mode = TRAIN
        else:
            plan = full_plan(cfg, pcfg.S, t)
            # warm-up keeps the 1/S branch scaling so it matches later evaluation
            train_mode = Inference(pcfg.S) if resist else TRAIN
        params, views = _sync_round(pcfg, cfg, params, plan, shards, t, train_mode, threads, refs)
        shared_b, part_b = traffic(plan, cfg, pcfg.compression)
        entry = ledger.record(t, shared_b, part_b)
        train_loss = _eval_loss(params, data, cfg, eval_mode)
        _check(train_loss, f"round {t}")
        eval_loss = train_loss if eval_data is data else _eval_loss(params, eval_data, cfg, eval_mode)
        seconds = clock.advance(_step_seconds(pcfg, views, [s.n for s in shards], pcfg.ell, entry.total_bytes))
        result.rounds.append(RoundMetrics(t, train_loss, eval_loss, shared_b, part_b, ledger.cumulative, seconds))
        if keep_trajectory:
            result.trajectory.append(params.copy())
    result.params = params
    result.wall_seconds = time.perf_counter() - started
    return result


def run_resist(pcfg: ProtocolConfig, cfg: ModelConfig, data: Dataset, eval_data: Optional[Dataset] = None,
               keep_trajectory: bool = False) -> RunResult:
    if pcfg.method != "resist":
        raise ValueError(f"run_resist called with method {pcfg.method!r}")
    return _run_synchronous(pcfg, cfg, data, eval_data, keep_trajectory)


def run_local_sgd(pcfg: ProtocolConfig, cfg: ModelConfig, data: Dataset, eval_data: Optional[Dataset] = None,
                  keep_trajectory: bool = False) -> RunResult:
    if pcfg.method != "local_sgd":
        raise ValueError(f"run_local_sgd called with method {pcfg.method!r}")
    return _run_synchronous(pcfg, cfg, data, eval_data, keep_trajectory)


def run_data_parallel(pcfg: ProtocolConfig, cfg: ModelConfig, data: Dataset, eval_data: Optional[Dataset] = None,
                      keep_trajectory: bool = False) -> RunResult:
    if pcfg.method != "data_parallel":
        raise ValueError(f"run_data_parallel called with method {pcfg.method!r}")
    return _run_synchronous(pcfg, cfg, data, eval_data, keep_trajectory)


def run_ensemble(pcfg: ProtocolConfig, cfg: ModelConfig, data: Dataset, eval_data: Optional[Dataset] = None,
                 keep_trajectory: bool = False) -> RunResult:
    """Partition once, then train every sub-network alone for ``T * ell`` steps.

    Round ``t`` of the metrics covers local steps ``(t-1)*ell .. t*ell`` and
    evaluates the mean of the S sub-network outputs.
    """
    if pcfg.method != "ensemble":
        raise ValueError(f"run_ensemble called with method {pcfg.method!r}")
    threads = worker_threads(pcfg)
    eval_data = eval_data if eval_data is not None else data
    shards = shard(data, pcfg.S, pcfg.shard_mode, pcfg.seed)
    params = init_params(cfg, pcfg.seed)
    plan = make_plan(cfg, pcfg.S, 0, pcfg.seed)
    ledger = CommLedger()
    clock = _Clock(pcfg)
    started = time.perf_counter()
    sent = compress_params(params, pcfg.compression)
    models = [extract_view(sent, plan, v) for v in range(pcfg.S)]
    shared_b, part_b = traffic(plan, cfg, pcfg.compression, directions=1)
    ledger.record(0, shared_b, part_b)
    clock.advance(ledger.cumulative / pcfg.bytes_per_second)
    result = RunResult("ensemble", _ensemble_loss(models, data, cfg), [], None, ledger=ledger)
    _check(result.initial_loss, "initialization")

    for t in range(1, pcfg.T + 1):
        def work(view: SubResNetView) -> SubResNetView:
            rng = stream(pcfg.seed, t, "batches", view.worker)
            return local_train(view, shards[view.worker], pcfg.ell, pcfg.eta, rng, cfg, pcfg.batch_size)

        models = _map_workers(work, models, threads)
        ledger.record(t, 0, 0)
        train_loss = _ensemble_loss(models, data, cfg)
        _check(train_loss, f"round {t}")
        eval_loss = train_loss if eval_data is data else _ensemble_loss(models, eval_data, cfg)
        seconds = clock.advance(_step_seconds(pcfg, models, [s.n for s in shards], pcfg.ell, 0))
        result.rounds.append(RoundMetrics(t, train_loss, eval_loss, 0, 0, ledger.cumulative, seconds))
        if keep_trajectory:
            result.trajectory.append([m.params.copy() for m in models])
    result.models = models
    result.wall_seconds = time.perf_counter() - started
    return result


RUNNERS = {
    "resist": run_resist,
    "local_sgd": run_local_sgd,
    "data_parallel": run_data_parallel,
    "ensemble": run_ensemble,
}


def run(pcfg: ProtocolConfig, cfg: ModelConfig, data: Dataset, eval_data: Optional[Dataset] = None,
        keep_trajectory: bool = False) -> RunResult:
    return RUNNERS[pcfg.method](pcfg, cfg, data, eval_data, keep_trajectory)


def sweep_local_iterations(base: ProtocolConfig, cfg: ModelConfig, data: Dataset, ells: list[int],
                           eval_data: Optional[Dataset] = None) -> list[dict]:
    """One run per ``ell`` with everything else fixed."""
    if not ells:
        raise ValueError("ells must be non-empty")
    rows = []
    for ell in ells:
        res = run(replace(base, ell=ell), cfg, data, eval_data)
        rows.append({
            "ell": ell,
            "final_train_loss": res.final_loss,
            "final_eval_loss": res.rounds[-1].eval_loss if res.rounds else res.initial_loss,
            "cumulative_bytes": res.ledger.cumulative,
        })
    return rows

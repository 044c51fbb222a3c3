"""Residual MLP with block masks, analytic gradients and Gram matrices.

The network is

    x1 = sqrt(c_sigma / m) * act(W1 x)
    xh = x(h-1) + c_res / (H sqrt(m)) * act(Wh x(h-1)) * M[h]     for h = 2..H
    u  = a . xH

Block 1 (the input layer) and the output vector ``a`` are always present.
Blocks ``partition_lo..partition_hi`` may be masked out per worker; in
inference mode every such block is active with its branch scaled by 1/S.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from ._backend import kernels
from .data import Dataset
from .rng import stream


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    depth_H: int
    width_m: int
    input_dim_d: int
    c_res: float = 0.5
    c_sigma: float = 2.0
    activation: str = "relu"
    partition_lo: int = 2
    partition_hi: Optional[int] = None
    min_depth: int = 1

    def __post_init__(self):
        if self.partition_hi is None:
            object.__setattr__(self, "partition_hi", self.depth_H)
        H = self.depth_H
        if H < 1 or self.width_m < 1 or self.input_dim_d < 1:
            raise ConfigError("depth_H, width_m and input_dim_d must be >= 1")
        if not 0.0 < self.c_res < 1.0:
            raise ConfigError(f"c_res must lie in (0, 1), got {self.c_res}")
        if not self.c_sigma > 0.0:
            raise ConfigError(f"c_sigma must be positive, got {self.c_sigma}")
        if self.activation not in ("relu", "identity"):
            raise ConfigError(f"unknown activation {self.activation!r}")
        if H >= 2 and not 2 <= self.partition_lo <= self.partition_hi <= H:
            raise ConfigError(
                f"partition range [{self.partition_lo}, {self.partition_hi}] must satisfy 2 <= lo <= hi <= {H}"
            )
        if self.min_depth < 1:
            raise ConfigError("min_depth must be >= 1")
        if H >= 2 and self.min_depth > self.num_partitionable:
            raise ConfigError(
                f"min_depth {self.min_depth} exceeds the {self.num_partitionable} partitionable blocks"
            )

    @property
    def partitionable(self) -> range:
        if self.depth_H < 2:
            return range(0)
        return range(self.partition_lo, self.partition_hi + 1)

    @property
    def num_partitionable(self) -> int:
        return len(self.partitionable)

    @property
    def shared_blocks(self) -> tuple[int, ...]:
        inside = set(self.partitionable)
        return tuple(h for h in range(1, self.depth_H + 1) if h not in inside)

    @property
    def branch_coef(self) -> float:
        return self.c_res / (self.depth_H * np.sqrt(self.width_m))

    @property
    def input_coef(self) -> float:
        return float(np.sqrt(self.c_sigma / self.width_m))

    def block_shape(self, h: int) -> tuple[int, int]:
        return (self.width_m, self.input_dim_d) if h == 1 else (self.width_m, self.width_m)

    @property
    def param_count(self) -> int:
        m, d, H = self.width_m, self.input_dim_d, self.depth_H
        return m * d + (H - 1) * m * m + m


@dataclass
class GlobalParams:
    """Network weights. ``blocks[h - 1]`` holds W^(h); ``None`` marks a block
    a sub-network view does not carry."""

    blocks: list
    a: np.ndarray

    def block(self, h: int) -> Optional[np.ndarray]:
        return self.blocks[h - 1]

    @property
    def depth(self) -> int:
        return len(self.blocks)

    def copy(self) -> "GlobalParams":
        return GlobalParams([None if W is None else W.copy() for W in self.blocks], self.a.copy())

    @property
    def param_count(self) -> int:
        return sum(W.size for W in self.blocks if W is not None) + self.a.size

    def arrays(self) -> list:
        return [W for W in self.blocks if W is not None] + [self.a]

    def flatten(self) -> np.ndarray:
        return np.concatenate([arr.ravel() for arr in self.arrays()])

    def with_flat(self, flat: np.ndarray) -> "GlobalParams":
        out = self.copy()
        pos = 0
        for arr in out.arrays():
            arr.ravel()[:] = flat[pos:pos + arr.size]
            pos += arr.size
        return out

    def equals(self, other: "GlobalParams") -> bool:
        """Bitwise equality, including which blocks are absent."""
        if len(self.blocks) != len(other.blocks):
            return False
        for A, B in zip(self.blocks, other.blocks):
            if (A is None) != (B is None):
                return False
            if A is not None and (A.shape != B.shape or A.tobytes() != B.tobytes()):
                return False
        return self.a.tobytes() == other.a.tobytes()


@dataclass(frozen=True)
class BlockMask:
    bits: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "bits", np.asarray(self.bits, dtype=bool).copy())
        self.bits.flags.writeable = False

    def __getitem__(self, h: int) -> bool:
        return bool(self.bits[h - 1])

    @classmethod
    def full(cls, cfg: ModelConfig) -> "BlockMask":
        return cls(np.ones(cfg.depth_H, dtype=bool))

    @classmethod
    def holding(cls, cfg: ModelConfig, held) -> "BlockMask":
        """Mask holding the shared blocks plus the partitionable blocks in ``held``."""
        bits = np.ones(cfg.depth_H, dtype=bool)
        held = set(held)
        for h in cfg.partitionable:
            bits[h - 1] = h in held
        return cls(bits)

    def held_partitionable(self, cfg: ModelConfig) -> list[int]:
        return [h for h in cfg.partitionable if self[h]]

    def validate(self, cfg: ModelConfig) -> None:
        if self.bits.shape != (cfg.depth_H,):
            raise ConfigError(f"mask has {self.bits.size} bits, model depth is {cfg.depth_H}")
        for h in cfg.shared_blocks:
            if not self[h]:
                raise ConfigError(f"shared block {h} cannot be masked")

    def to_list(self) -> list[int]:
        return [int(b) for b in self.bits]


@dataclass(frozen=True)
class Inference:
    """Evaluation mode: all partitionable branches active, scaled by 1/S."""

    S: int

    def __post_init__(self):
        if self.S < 1:
            raise ConfigError("inference S must be >= 1")


TRAIN = "train"
Mode = Union[str, Inference]


@dataclass
class ActivationCache:
    """Hidden states ``xs[h - 1]`` = x^(h) and pre-activations ``zs[h - 1]`` =
    W^(h) x^(h-1) for a batch; ``zs`` entries are ``None`` for absent blocks."""

    inputs: np.ndarray
    xs: list
    zs: list
    coefs: list
    u: np.ndarray = field(repr=False)


def init_params(cfg: ModelConfig, seed: int) -> GlobalParams:
    rng = stream(seed, 0, "init")
    blocks = [rng.standard_normal(cfg.block_shape(h)) for h in range(1, cfg.depth_H + 1)]
    return GlobalParams(blocks, rng.standard_normal(cfg.width_m))


def _branch_coefs(cfg: ModelConfig, mask: BlockMask, mode: Mode) -> list:
    """Residual branch multiplier per block (index h-1); ``None`` if absent."""
    base = cfg.branch_coef
    coefs: list = [cfg.input_coef]
    inside = set(cfg.partitionable)
    for h in range(2, cfg.depth_H + 1):
        if isinstance(mode, Inference):
            coefs.append(base * (1.0 / mode.S) if h in inside else base)
        elif mode == TRAIN:
            coefs.append(base if mask[h] else None)
        else:
            raise ConfigError(f"unknown mode {mode!r}")
    return coefs


def _act(z: np.ndarray, coef: float, cfg: ModelConfig) -> np.ndarray:
    if cfg.activation == "relu":
        return kernels.scaled_relu(z, coef)
    return coef * z


def forward_batch(params: GlobalParams, X: np.ndarray, mask: BlockMask, cfg: ModelConfig,
                  mode: Mode = TRAIN) -> tuple[np.ndarray, ActivationCache]:
    X = np.ascontiguousarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != cfg.input_dim_d:
        raise ConfigError(f"input has shape {X.shape}, expected (n, {cfg.input_dim_d})")
    mask.validate(cfg)
    coefs = _branch_coefs(cfg, mask, mode)
    z = X @ params.blocks[0].T
    x = _act(z, coefs[0], cfg)
    xs, zs = [x], [z]
    for h in range(2, cfg.depth_H + 1):
        coef = coefs[h - 1]
        if coef is None:
            zs.append(None)
        else:
            z = x @ params.blocks[h - 1].T
            if cfg.activation == "relu":
                x = kernels.residual_relu(x, z, coef)
            else:
                x = x + coef * z
            zs.append(z)
        xs.append(x)
    u = x @ params.a
    return u, ActivationCache(X, xs, zs, coefs, u)


def forward(params: GlobalParams, x: np.ndarray, mask: BlockMask, cfg: ModelConfig,
            mode: Mode = TRAIN) -> tuple[float, ActivationCache]:
    """Output for a single input vector ``x``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (cfg.input_dim_d,):
        raise ConfigError(f"input has shape {x.shape}, expected ({cfg.input_dim_d},)")
    u, cache = forward_batch(params, x[None, :], mask, cfg, mode)
    return float(u[0]), cache


def predict(params: GlobalParams, X: np.ndarray, mask: BlockMask, cfg: ModelConfig,
            mode: Mode = TRAIN) -> np.ndarray:
    return forward_batch(params, X, mask, cfg, mode)[0]


def loss(params: GlobalParams, data: Dataset, mask: BlockMask, cfg: ModelConfig,
         mode: Mode = TRAIN) -> float:
    if data.n == 0:
        raise ConfigError("empty dataset")
    r = predict(params, data.X, mask, cfg, mode) - data.y
    return 0.5 * float(np.dot(r, r))


def _backward(params: GlobalParams, cache: ActivationCache, seed_grad: np.ndarray,
              cfg: ModelConfig) -> tuple[list, np.ndarray]:
    """Per-sample derivatives of ``seed_grad . u`` w.r.t. each pre-activation.

    Returns ``(dzs, dX_H)`` where ``dzs[h - 1]`` is an n x m array (``None``
    for absent blocks).
    """
    relu = cfg.activation == "relu"
    dx = seed_grad[:, None] * params.a[None, :]
    dx_top = dx
    dzs: list = [None] * cfg.depth_H
    for h in range(cfg.depth_H, 1, -1):
        coef = cache.coefs[h - 1]
        if coef is None:
            continue
        z = cache.zs[h - 1]
        dz = kernels.relu_backward(dx, z, coef) if relu else coef * dx
        dzs[h - 1] = dz
        dx = dx + dz @ params.blocks[h - 1]
    z = cache.zs[0]
    dzs[0] = kernels.relu_backward(dx, z, cache.coefs[0]) if relu else cache.coefs[0] * dx
    return dzs, dx_top


def grad(params: GlobalParams, data: Dataset, mask: BlockMask, cfg: ModelConfig,
         mode: Mode = TRAIN) -> GlobalParams:
    """Gradient of ``0.5 * sum (u_i - y_i)^2``; absent blocks get zero matrices."""
    return loss_and_grad(params, data, mask, cfg, mode)[1]


def loss_and_grad(params: GlobalParams, data: Dataset, mask: BlockMask, cfg: ModelConfig,
                  mode: Mode = TRAIN) -> tuple[float, GlobalParams]:
    u, cache = forward_batch(params, data.X, mask, cfg, mode)
    r = u - data.y
    value = 0.5 * float(np.dot(r, r))
    dzs, _ = _backward(params, cache, r, cfg)
    blocks = []
    for h in range(1, cfg.depth_H + 1):
        dz = dzs[h - 1]
        if dz is None:
            blocks.append(np.zeros(cfg.block_shape(h)))
        else:
            prev = cache.inputs if h == 1 else cache.xs[h - 2]
            blocks.append(dz.T @ prev)
    return value, GlobalParams(blocks, cache.xs[-1].T @ r)


def gram_matrix(params: GlobalParams, data: Dataset, cfg: ModelConfig) -> tuple[np.ndarray, list]:
    """Gram matrix of per-sample output gradients and its per-layer terms.

    ``per_layer[h - 1]`` is the W^(h) contribution for h = 1..H and
    ``per_layer[H]`` the output-vector term. For sample i the gradient of u_i
    w.r.t. W^(h) is the outer product of dz_i and x_i^(h-1), so each layer
    term factors into a Hadamard product of two small Gram matrices.
    """
    mask = BlockMask.full(cfg)
    _, cache = forward_batch(params, data.X, mask, cfg)
    dzs, _ = _backward(params, cache, np.ones(data.n), cfg)
    per_layer = []
    for h in range(1, cfg.depth_H + 1):
        prev = cache.inputs if h == 1 else cache.xs[h - 2]
        D = dzs[h - 1]
        per_layer.append((D @ D.T) * (prev @ prev.T))
    top = cache.xs[-1]
    per_layer.append(top @ top.T)
    G = np.zeros((data.n, data.n))
    for term in per_layer:
        G += term
    return G, per_layer

"""Checkpoint files: one JSON header line, then raw little-endian float64 data.

Values follow in the order W1, W2 .. WH (each row-major) and then ``a``.
Absent blocks of a sub-network are written as zeros, which leaves a ReLU
network's output unchanged.
"""
from __future__ import annotations

import json

import numpy as np

from .resnet import GlobalParams, ModelConfig

VERSION = 1


class CheckpointError(ValueError):
    pass


def header(cfg: ModelConfig) -> dict:
    return {
        "version": VERSION,
        "H": cfg.depth_H,
        "m": cfg.width_m,
        "d": cfg.input_dim_d,
        "c_res": cfg.c_res,
        "c_sigma": cfg.c_sigma,
        "activation": cfg.activation,
    }


def dumps(params: GlobalParams, cfg: ModelConfig) -> bytes:
    parts = []
    for h in range(1, cfg.depth_H + 1):
        W = params.block(h)
        if W is None:
            W = np.zeros(cfg.block_shape(h))
        elif W.shape != cfg.block_shape(h):
            raise CheckpointError(f"block {h} has shape {W.shape}, expected {cfg.block_shape(h)}")
        parts.append(np.ascontiguousarray(W, dtype="<f8").tobytes())
    parts.append(np.ascontiguousarray(params.a, dtype="<f8").tobytes())
    head = json.dumps(header(cfg), sort_keys=True).encode("utf-8") + b"\n"
    return head + b"".join(parts)


def loads(blob: bytes) -> tuple[GlobalParams, ModelConfig]:
    newline = blob.find(b"\n")
    if newline < 0:
        raise CheckpointError("missing header line")
    try:
        head = json.loads(blob[:newline].decode("utf-8"))
    except ValueError as exc:
        raise CheckpointError(f"bad header: {exc}") from None
    if head.get("version") != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {head.get('version')!r}")
    H, m, d = head["H"], head["m"], head["d"]
    cfg = ModelConfig(depth_H=H, width_m=m, input_dim_d=d, c_res=head["c_res"],
                      c_sigma=head["c_sigma"], activation=head["activation"])
    body = np.frombuffer(blob[newline + 1:], dtype="<f8")
    if body.size != cfg.param_count:
        raise CheckpointError(f"expected {cfg.param_count} values, found {body.size}")
    blocks, pos = [], 0
    for h in range(1, H + 1):
        rows, cols = cfg.block_shape(h)
        blocks.append(body[pos:pos + rows * cols].reshape(rows, cols).astype(np.float64))
        pos += rows * cols
    return GlobalParams(blocks, body[pos:].astype(np.float64)), cfg


def save(path, params: GlobalParams, cfg: ModelConfig) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(params, cfg))


def load(path) -> tuple[GlobalParams, ModelConfig]:
    with open(path, "rb") as fh:
        return loads(fh.read())

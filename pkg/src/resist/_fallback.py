"""Pure-numpy versions of the compiled kernels in ``_kernels.pyx``.

Both implementations are required to agree bit for bit, so every expression
here fixes its evaluation order explicitly.
"""
from __future__ import annotations

import numpy as np


def residual_relu(x_prev: np.ndarray, z: np.ndarray, coef: float) -> np.ndarray:
    return x_prev + coef * np.maximum(z, 0.0)


def scaled_relu(z: np.ndarray, coef: float) -> np.ndarray:
    return coef * np.maximum(z, 0.0)


def relu_backward(delta: np.ndarray, z: np.ndarray, coef: float) -> np.ndarray:
    return np.where(z > 0.0, coef * delta, 0.0)


def sgd_step(w: np.ndarray, g: np.ndarray, eta: float) -> None:
    w -= eta * g


def mean_of(arrays: list) -> np.ndarray:
    base = np.array(arrays[0], dtype=np.float64).ravel()
    if len(arrays) == 1:
        return base
    acc = np.zeros_like(base)
    for arr in arrays[1:]:
        acc += np.ravel(arr) - base
    return base + acc / float(len(arrays))


def quantize_codes(values: np.ndarray, lo: float, step: float, bits: int) -> np.ndarray:
    if step == 0.0:
        return np.zeros(values.shape[0], dtype=np.uint32)
    top = float((1 << bits) - 1)
    codes = np.clip(np.rint((values - lo) / step), 0.0, top)
    return codes.astype(np.uint32)


def dequantize_codes(codes: np.ndarray, lo: float, step: float) -> np.ndarray:
    return lo + codes.astype(np.float64) * step

"""Minimal numpy building blocks shared by the noise model and the classifier.

Parameters live in ordered ``dict[str, ndarray]`` mappings; gradients use the
same keys. Models implement their own forward/backward passes on top of the
helpers here.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import BinaryIO

import numpy as np

Params = dict[str, np.ndarray]

CHECKPOINT_VERSION = 1


def silu(x: np.ndarray) -> np.ndarray:
    return x * sigmoid(x)


def silu_grad(x: np.ndarray) -> np.ndarray:
    s = sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


def sigmoid(x: np.ndarray) -> np.ndarray:
    # Split by sign so exp never overflows.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def sinusoidal_embedding(t: np.ndarray, dim: int, dtype=np.float32) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half, dtype=np.float64) / half)
    args = np.asarray(t, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1).astype(dtype)


def glorot(rng: np.random.Generator, n_in: int, n_out: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / (n_in + n_out)), size=(n_in, n_out))


def he(rng: np.random.Generator, n_in: int, n_out: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / n_in), size=(n_in, n_out))


def flatten(params: Params) -> np.ndarray:
    return np.concatenate([p.ravel() for p in params.values()])


def unflatten(vec: np.ndarray, like: Params) -> Params:
    out: Params = {}
    i = 0
    for k, p in like.items():
        out[k] = vec[i : i + p.size].reshape(p.shape).astype(p.dtype, copy=False)
        i += p.size
    if i != vec.size:
        raise ValueError(f"parameter vector has {vec.size} entries, expected {i}")
    return out


def copy_params(params: Params) -> Params:
    return {k: v.copy() for k, v in params.items()}


class Adam:
    """Adam with bias correction; state is keyed like the parameters."""

    def __init__(self, params: Params, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.step_count = 0

    def step(self, params: Params, grads: Params, lr: float) -> None:
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.step_count
        c2 = 1.0 - b2**self.step_count
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            params[k] -= (lr / c1) * m / (np.sqrt(v / c2) + self.eps)


class SGDMomentum:
    def __init__(self, params: Params, momentum: float = 0.9, weight_decay: float = 0.0):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: Params, grads: Params, lr: float) -> None:
        for k, g in grads.items():
            if self.weight_decay and params[k].ndim > 1:
                g = g + self.weight_decay * params[k]
            vel = self.velocity[k]
            vel *= self.momentum
            vel += g
            params[k] -= lr * vel


# -- checkpoint container ---------------------------------------------------
#
# magic[4] | version u16 | descriptor length u32 | descriptor (utf-8 JSON)
# | parameter count u64 | float32 little-endian parameters


def write_checkpoint(path: str | Path, magic: bytes, descriptor: dict, params: Params) -> None:
    vec = flatten(params).astype("<f4")
    desc = json.dumps(descriptor, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<HI", CHECKPOINT_VERSION, len(desc)))
        fh.write(desc)
        fh.write(struct.pack("<Q", vec.size))
        fh.write(vec.tobytes())


def read_checkpoint(path: str | Path, magic: bytes) -> tuple[dict, np.ndarray]:
    with open(path, "rb") as fh:
        return _read_checkpoint(fh, magic, str(path))


def _read_checkpoint(fh: BinaryIO, magic: bytes, name: str) -> tuple[dict, np.ndarray]:
    got = fh.read(4)
    if got != magic:
        raise ValueError(f"{name}: bad magic {got!r}, expected {magic!r}")
    version, desc_len = struct.unpack("<HI", fh.read(6))
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{name}: unsupported checkpoint version {version}")
    descriptor = json.loads(fh.read(desc_len).decode())
    (count,) = struct.unpack("<Q", fh.read(8))
    vec = np.frombuffer(fh.read(4 * count), dtype="<f4")
    if vec.size != count:
        raise ValueError(f"{name}: truncated parameter block")
    return descriptor, vec.astype(np.float32)

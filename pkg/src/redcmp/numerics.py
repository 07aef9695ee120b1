"""Dense numeric primitives shared by the LSTM, encoder-decoder and trainer.

Everything is float64. Vectors are 1-D arrays; any function that takes a
vector also accepts a batch with the vector on the last axis.
"""

from __future__ import annotations

import numpy as np

CE_EPS = 1e-12

Rng = np.random.Generator


def make_rng(seed: int, *keys: int) -> Rng:
    """Return a PCG64 generator for ``seed``, optionally forked by integer ``keys``.

    Distinct key tuples give statistically independent streams, so a job can
    derive its own generator from a run seed without sharing state.
    """
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.PCG64(ss))


def affine(W: np.ndarray, x: np.ndarray, U: np.ndarray, h: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Compute ``W x + U h + b`` (batched over leading axes of ``x`` and ``h``)."""
    if W.shape[1] != x.shape[-1] or U.shape[1] != h.shape[-1]:
        raise ValueError(
            f"affine: W{W.shape} x{x.shape} / U{U.shape} h{h.shape} are not conformable"
        )
    if not (W.shape[0] == U.shape[0] == b.shape[-1]):
        raise ValueError(f"affine: row mismatch W{W.shape} U{U.shape} b{b.shape}")
    return x @ W.T + h @ U.T + b


def sigmoid(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def tanh_vec(v: np.ndarray) -> np.ndarray:
    return np.tanh(np.asarray(v, dtype=np.float64))


def softmax(logits: np.ndarray) -> np.ndarray:
    """Softmax over the last axis, shifted by the row max for stability."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.shape[-1] < 1:
        raise ValueError("softmax of an empty vector")
    z = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def cross_entropy(p: np.ndarray, target: np.ndarray) -> np.ndarray | float:
    """``-sum(target * ln(max(p, 1e-12)))`` over the last axis."""
    out = -np.sum(target * np.log(np.maximum(p, CE_EPS)), axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def rand_matrix(rng: Rng, rows: int, cols: int, scale: float) -> np.ndarray:
    if scale <= 0:
        raise ValueError("scale must be positive")
    return rng.uniform(-scale, scale, size=(rows, cols))


def rand_gaussian(rng: Rng, n: int | tuple[int, ...], sigma: float) -> np.ndarray:
    """Zero-mean Gaussian samples by the Box-Muller transform.

    ``n`` may be a shape. Uniform pairs are always drawn so that the stream
    advance depends only on the sample count, not on ``sigma``.
    """
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    shape = (n,) if np.isscalar(n) else tuple(n)
    count = int(np.prod(shape))
    pairs = (count + 1) // 2
    u1 = 1.0 - rng.random(pairs)  # (0, 1], keeps log finite
    u2 = rng.random(pairs)
    r = np.sqrt(-2.0 * np.log(u1))
    theta = 2.0 * np.pi * u2
    z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:count]
    return (sigma * z).reshape(shape)


def global_norm(arrays) -> float:
    return float(np.sqrt(sum(float(np.vdot(a, a)) for a in arrays)))

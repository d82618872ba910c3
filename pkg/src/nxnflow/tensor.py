"""Minimal dense tensor kernels in float64.

Tensors are plain ``numpy.ndarray`` values in a fixed contiguous layout:
rank 4 is batch-major NCHW (batch, channel, row, column); rank 2 toy data
is N x D with D playing the channel role. All math is done in 64-bit
floats so the finite-difference oracles have headroom.
"""

from __future__ import annotations

import hashlib
import json

import numpy as np

from .errors import ShapeError

# Relative pivot tolerance below which an LU pivot is treated as zero.
PIVOT_TOL = 1e-12


def as_tensor(x) -> np.ndarray:
    """Coerce to a contiguous float64 array."""
    return np.ascontiguousarray(x, dtype=np.float64)


def spatial_size(x: np.ndarray) -> int:
    """H*W for rank-4 input, 1 for rank-2 (N x D) input."""
    if x.ndim == 4:
        return x.shape[2] * x.shape[3]
    if x.ndim == 2:
        return 1
    raise ShapeError(f"expected rank 2 or 4 tensor, got rank {x.ndim}")


def num_channels(x: np.ndarray) -> int:
    if x.ndim not in (2, 4):
        raise ShapeError(f"expected rank 2 or 4 tensor, got rank {x.ndim}")
    return x.shape[1]


def channel_affine(x: np.ndarray, scale: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """out[n,c,i,j] = scale[c] * x[n,c,i,j] + bias[c]."""
    scale = np.asarray(scale, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    c = num_channels(x)
    if scale.shape != (c,) or bias.shape != (c,):
        raise ShapeError(
            f"scale/bias must have length {c}, got {scale.shape} and {bias.shape}"
        )
    if x.ndim == 4:
        return scale[None, :, None, None] * x + bias[None, :, None, None]
    return scale[None, :] * x + bias[None, :]


def channel_matmul(w: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Apply the C_out x C_in matrix w to the channel fiber at every pixel."""
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2:
        raise ShapeError(f"w must be a matrix, got rank {w.ndim}")
    if w.shape[1] != num_channels(x):
        raise ShapeError(f"w has {w.shape[1]} columns but x has {num_channels(x)} channels")
    if x.ndim == 4:
        return np.einsum("dc,nchw->ndhw", w, x, optimize=True)
    return x @ w.T


def lu_factor(a: np.ndarray):
    """LU with partial pivoting: returns (perm, lower, upper).

    perm is a row-permutation vector such that a[perm] = lower @ upper,
    lower has unit diagonal. Pivots below PIVOT_TOL relative to the
    largest magnitude in the matrix are treated as zero.
    """
    a = np.array(a, dtype=np.float64)
    n = a.shape[0]
    if a.ndim != 2 or a.shape[1] != n:
        raise ShapeError(f"matrix must be square, got {a.shape}")
    perm = np.arange(n)
    scale = np.max(np.abs(a)) if n else 0.0
    tol = PIVOT_TOL * max(scale, 1.0)
    for k in range(n):
        p = k + int(np.argmax(np.abs(a[k:, k])))
        if abs(a[p, k]) <= tol:
            a[k, k] = 0.0
            continue
        if p != k:
            a[[k, p]] = a[[p, k]]
            perm[[k, p]] = perm[[p, k]]
        a[k + 1:, k] /= a[k, k]
        a[k + 1:, k + 1:] -= np.outer(a[k + 1:, k], a[k, k + 1:])
    lower = np.tril(a, -1) + np.eye(n)
    upper = np.triu(a)
    return perm, lower, upper


def lu_slogdet(w: np.ndarray) -> tuple[int, float]:
    """(sign, log|det|) via LU with partial pivoting; sign 0 iff singular."""
    w = np.asarray(w, dtype=np.float64)
    n = w.shape[0]
    perm, _, upper = lu_factor(w)
    diag = np.diag(upper)
    if np.any(diag == 0.0):
        return 0, -np.inf
    # permutation parity: count transpositions needed to sort perm
    visited = np.zeros(n, dtype=bool)
    swaps = 0
    for i in range(n):
        if visited[i]:
            continue
        j = i
        cycle = 0
        while not visited[j]:
            visited[j] = True
            j = perm[j]
            cycle += 1
        swaps += cycle - 1
    sign = -1 if swaps % 2 else 1
    sign *= int(np.prod(np.sign(diag)))
    return sign, float(np.sum(np.log(np.abs(diag))))


def _derive_seed(seed: int, label: str) -> int:
    digest = hashlib.blake2b(f"{seed}/{label}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


class Rng:
    """Deterministic, splittable random stream (counter-based Philox).

    Identical seed and call sequence yields an identical stream on any
    platform. ``child(label)`` derives an independent stream whose seed
    depends only on (seed, label).
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.Philox(key=self.seed))

    def child(self, label: str) -> "Rng":
        return Rng(_derive_seed(self.seed, label))

    def normal(self, shape=()) -> np.ndarray:
        return self._gen.standard_normal(shape, dtype=np.float64)

    def uniform(self, shape=(), low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self._gen.uniform(low, high, shape)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        return self._gen.integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def state_json(self) -> str:
        st = self._gen.bit_generator.state
        enc = {
            "seed": self.seed,
            "state": {k: v.tolist() for k, v in st["state"].items()},
            "buffer": st["buffer"].tolist(),
            "buffer_pos": st["buffer_pos"],
            "has_uint32": st["has_uint32"],
            "uinteger": st["uinteger"],
        }
        return json.dumps(enc, sort_keys=True)

    @classmethod
    def from_state_json(cls, text: str) -> "Rng":
        enc = json.loads(text)
        rng = cls(enc["seed"])
        rng._gen.bit_generator.state = {
            "bit_generator": "Philox",
            "state": {k: np.array(v, dtype=np.uint64) for k, v in enc["state"].items()},
            "buffer": np.array(enc["buffer"], dtype=np.uint64),
            "buffer_pos": enc["buffer_pos"],
            "has_uint32": enc["has_uint32"],
            "uinteger": enc["uinteger"],
        }
        return rng

"""Exact maximum-likelihood training: Adam, dequantization, train loop."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, NumericError
from .model import MultiScaleModel, bits_per_dim
from .tensor import Rng


def dequantize(x_int: np.ndarray, bits: int, rng: Rng) -> np.ndarray:
    """(x + u)/2^bits with u ~ U(0,1) i.i.d.; maps b-bit integers into [0, 1)."""
    x_int = np.asarray(x_int)
    levels = 1 << bits
    if x_int.size and (x_int.min() < 0 or x_int.max() >= levels):
        raise DataError(f"integer values out of range [0, {levels})")
    u = rng.uniform(x_int.shape)
    return (x_int.astype(np.float64) + u) / levels


@dataclass
class TrainConfig:
    batch_size: int = 64
    steps: int = 1000
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    bits: int = 5
    clip_norm: float = 50.0
    checkpoint_every: int = 500

    def __post_init__(self):
        if self.batch_size < 2 or self.steps < 1 or self.lr <= 0:
            raise ValueError("batch_size >= 2, steps >= 1, lr > 0 required")


class Adam:
    """Standard bias-corrected Adam over a named parameter tree."""

    def __init__(self, params: dict, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict, grads: dict) -> None:
        for g in grads.values():
            if not np.all(np.isfinite(g)):
                raise NumericError("non-finite gradient; step aborted")
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for k, p in params.items():
            g = grads[k]
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            p -= self.lr * (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + self.eps)


def clip_global_norm(grads: dict, max_norm: float) -> float:
    """Scale all gradients so the global L2 norm is at most max_norm."""
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total


@dataclass
class MetricsRow:
    step: int
    nll_nats: float
    bpd: float
    grad_norm: float
    seconds: float

    def csv(self) -> str:
        return f"{self.step},{self.nll_nats:.6f},{self.bpd:.6f},{self.grad_norm:.6f},{self.seconds:.3f}"


METRICS_HEADER = "step,nll_nats,bpd,grad_norm,seconds"


def train(model: MultiScaleModel, data: np.ndarray, cfg: TrainConfig,
          on_checkpoint=None, log=None, resume=None):
    """Minimize mean NLL on `data`; returns (model, list of MetricsRow).

    `data` is integer-valued NCHW for image mode (dequantized per batch) or
    float N x D for rank-2 mode. `on_checkpoint(step, opt, rng_states)` is
    called on the configured cadence and after the final step. `resume` is
    an optional (step, adam, rng_states) tuple produced by a checkpoint:
    actnorm init is skipped and step numbering continues.
    """
    image_mode = model.config.mode == "image"
    n = data.shape[0]
    if n == 0:
        raise DataError("empty dataset")
    dims = model.config.input_dims()

    if resume is None:
        rng = Rng(cfg.seed)
        deq_rng = rng.child("dequantize")
        batch_rng = rng.child("batches")
        start_step = 0
    else:
        start_step, adam_state, rng_states = resume
        deq_rng = Rng.from_state_json(rng_states["dequantize"])
        batch_rng = Rng.from_state_json(rng_states["batches"])

    def get_batch():
        idx = batch_rng.integers(0, n, (cfg.batch_size,))
        batch = data[idx]
        if image_mode:
            batch = dequantize(batch, cfg.bits, deq_rng)
        return np.asarray(batch, dtype=np.float64)

    if resume is None:
        model.init_actnorms(get_batch())
    opt = Adam(model.param_tree(), cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    if resume is not None:
        opt.t = adam_state["t"]
        opt.m = {k: v.copy() for k, v in adam_state["m"].items()}
        opt.v = {k: v.copy() for k, v in adam_state["v"].items()}

    metrics = []
    t0 = time.monotonic()
    for step in range(start_step + 1, start_step + cfg.steps + 1):
        batch = get_batch()
        loss, grads, _ = model.loss_and_grads(batch)
        if not math.isfinite(loss):
            raise NumericError(f"non-finite loss at step {step}; aborting")
        gnorm = clip_global_norm(grads, cfg.clip_norm)
        opt.step(model.param_tree(), grads)
        row = MetricsRow(step, loss, bits_per_dim(loss, dims, cfg.bits if image_mode else 0),
                         gnorm, time.monotonic() - t0)
        metrics.append(row)
        if log is not None:
            log(row)
        if on_checkpoint is not None and (step % cfg.checkpoint_every == 0
                                          or step == start_step + cfg.steps):
            rng_states = {"dequantize": deq_rng.state_json(),
                          "batches": batch_rng.state_json()}
            on_checkpoint(step, opt, rng_states)
    return model, metrics


def evaluate_nll(model: MultiScaleModel, data: np.ndarray, bits: int, seed: int,
                 batch_size: int = 256) -> float:
    """Mean NLL in nats over a dataset, with seeded dequantization."""
    rng = Rng(seed).child("eval_dequantize")
    image_mode = model.config.mode == "image"
    total, count = 0.0, 0
    for start in range(0, data.shape[0], batch_size):
        batch = data[start:start + batch_size]
        if image_mode:
            batch = dequantize(batch, bits, rng)
        lp = model.log_prob(np.asarray(batch, dtype=np.float64))
        total += float(-lp.sum())
        count += batch.shape[0]
    if count == 0:
        raise DataError("empty dataset")
    return total / count

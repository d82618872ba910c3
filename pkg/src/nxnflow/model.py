"""Multi-scale flow model: squeeze -> K flow steps -> split, per level.

One flow step applies actnorm, then the invertible n x n convolution
(per-channel shift composed with an invertible 1x1 convolution), then an
affine coupling. Exact log-likelihood is the standard-normal prior term
on all latent parts plus the accumulated log-determinant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericError, ShapeError
from .layers import (ActNorm, Coupling, Inv1x1, Shift, split_channels, squeeze2x2,
                     unsplit_channels, unsqueeze2x2)
from .tensor import Rng

LOG_2PI = math.log(2.0 * math.pi)

# Published reference bits/dim for the full-scale runs; documentation only,
# not desk-scale targets.
REFERENCE_BPD = {"cifar10": 3.50, "imagenet32": 3.96, "imagenet64": 3.74}


@dataclass
class ModelConfig:
    mode: str = "image"                # "image" (NCHW) or "rank2" (N x D)
    channels: int = 3
    height: int = 8
    width: int = 8
    dim: int = 2                       # rank2 only
    depth_k: int = 8
    levels: int = 2
    hidden_width: int = 32
    inv1x1_mode: str = "plu"           # "plu" or "direct"
    bits: int = 5                      # image bit depth for dequantization / bpd

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.mode not in ("image", "rank2"):
            raise ConfigError(f"unknown model mode {self.mode!r}")
        if self.depth_k < 0 or self.levels < 1 or self.hidden_width < 1:
            raise ConfigError("depth_k >= 0, levels >= 1, hidden_width >= 1 required")
        if self.inv1x1_mode not in ("plu", "direct"):
            raise ConfigError(f"unknown inv1x1 mode {self.inv1x1_mode!r}")
        if self.mode == "image":
            if not (1 <= self.bits <= 8):
                raise ConfigError("bits must be in [1, 8]")
            div = 2 ** self.levels
            if self.height % div or self.width % div:
                raise ConfigError(
                    f"spatial extents {self.height}x{self.width} must be divisible by 2^levels={div}")
        else:
            if self.dim < 2:
                raise ConfigError("rank2 mode needs dim >= 2")
        for c, _, _ in self.level_shapes():
            if self.depth_k > 0 and c < 2:
                raise ConfigError("coupling needs >= 2 channels at every level")

    def input_shape(self):
        if self.mode == "image":
            return (self.channels, self.height, self.width)
        return (self.dim,)

    def input_dims(self) -> int:
        return int(np.prod(self.input_shape()))

    def level_shapes(self):
        """(channels, h, w) seen by the flow steps of each level (post-squeeze)."""
        out = []
        if self.mode == "image":
            c, h, w = self.channels, self.height, self.width
            for lev in range(self.levels):
                c, h, w = 4 * c, h // 2, w // 2
                out.append((c, h, w))
                if lev < self.levels - 1:
                    if c % 2:
                        raise ConfigError("split needs an even channel count")
                    c //= 2
        else:
            c = self.dim
            for lev in range(self.levels):
                out.append((c, 1, 1))
                if lev < self.levels - 1:
                    if c % 2:
                        raise ConfigError("split needs an even channel count")
                    c //= 2
        return out

    def z_shapes(self):
        """Shapes of the latent parts emitted by splits plus the final part."""
        shapes = []
        levels = self.level_shapes()
        for lev, (c, h, w) in enumerate(levels):
            if lev < self.levels - 1:
                part = (c // 2, h, w)
            else:
                part = (c, h, w)
            shapes.append(part if self.mode == "image" else (part[0],))
        return shapes

    def to_text(self) -> str:
        keys = ["mode", "channels", "height", "width", "dim", "depth_k",
                "levels", "hidden_width", "inv1x1_mode", "bits"]
        return "\n".join(f"model.{k} = {getattr(self, k)}" for k in keys) + "\n"


@dataclass
class FlowOutput:
    z_parts: list
    logdet: np.ndarray  # (N,)


class FlowStep:
    """actnorm -> shift -> 1x1 mix -> coupling, in that order."""

    def __init__(self, channels: int, hidden: int, kernel: int, rng: Rng,
                 inv1x1_mode: str = "plu"):
        self.actnorm = ActNorm(channels)
        self.shift = Shift(channels)
        self.mix = Inv1x1(channels, rng.child("mix"), mode=inv1x1_mode)
        self.coupling = Coupling(channels, hidden, kernel, rng.child("coupling"))

    def sublayers(self):
        return [("actnorm", self.actnorm), ("shift", self.shift),
                ("mix", self.mix), ("coupling", self.coupling)]


def standard_normal_logp(z: np.ndarray) -> np.ndarray:
    """log N(z; 0, I) summed over non-batch axes, per sample."""
    axes = tuple(range(1, z.ndim))
    d = int(np.prod(z.shape[1:]))
    return -0.5 * (z * z).sum(axis=axes) - 0.5 * d * LOG_2PI


def bits_per_dim(nll_nats: float, dims: int, bits: int) -> float:
    """NLL in nats -> bits/dim for data scaled to [0,1] at the given depth."""
    return nll_nats / (dims * math.log(2.0)) + bits


class MultiScaleModel:
    def __init__(self, config: ModelConfig, rng: Rng):
        self.config = config
        kernel = 3 if config.mode == "image" else 1
        self.steps = []  # per level: list of FlowStep
        for lev, (c, _, _) in enumerate(config.level_shapes()):
            lev_rng = rng.child(f"level{lev}")
            self.steps.append([
                FlowStep(c, config.hidden_width, kernel, lev_rng.child(f"step{k}"),
                         config.inv1x1_mode)
                for k in range(config.depth_k)
            ])

    # -- parameters -------------------------------------------------------

    def param_tree(self) -> dict:
        """Flat name -> live array view of every learnable parameter."""
        out = {}
        for lev, steps in enumerate(self.steps):
            for k, step in enumerate(steps):
                for lname, layer in step.sublayers():
                    for pname, arr in layer.params().items():
                        out[f"level{lev}/step{k}/{lname}/{pname}"] = arr
        return out

    def buffer_tree(self) -> dict:
        """Non-learnable state that must survive a checkpoint round trip
        (the PLU permutation and diagonal signs)."""
        out = {}
        for lev, steps in enumerate(self.steps):
            for k, step in enumerate(steps):
                if step.mix.mode == "plu":
                    out[f"level{lev}/step{k}/mix/p"] = step.mix.p
                    out[f"level{lev}/step{k}/mix/u_sign"] = step.mix.u_sign
        return out

    def set_buffers(self, tree: dict) -> None:
        own = self.buffer_tree()
        if set(own) != set(tree):
            raise ConfigError("buffer tree does not match model structure")
        for name, arr in own.items():
            arr[...] = tree[name]

    def set_params(self, tree: dict) -> None:
        own = self.param_tree()
        if set(own) != set(tree):
            raise ConfigError("parameter tree does not match model structure")
        for name, arr in own.items():
            if arr.shape != tree[name].shape:
                raise ConfigError(f"parameter {name} shape mismatch")
            arr[...] = tree[name]

    def init_actnorms(self, batch: np.ndarray) -> None:
        """Data-dependent actnorm init, layer by layer along the flow."""
        h = self._check_input(batch)
        for lev, steps in enumerate(self.steps):
            h = self._enter_level(h)
            for step in steps:
                step.actnorm.init_from_batch(h)
                for _, layer in step.sublayers():
                    h, _, _ = layer.forward(h)
            if lev < self.config.levels - 1:
                h, _ = split_channels(h)

    # -- forward / inverse --------------------------------------------------

    def _check_input(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        expect = self.config.input_shape()
        if x.shape[1:] != expect:
            raise ShapeError(f"input shape {x.shape[1:]} does not match config {expect}")
        return x

    def _enter_level(self, h):
        if self.config.mode == "image":
            return squeeze2x2(h)
        return h

    def _exit_level(self, h):
        if self.config.mode == "image":
            return unsqueeze2x2(h)
        return h

    def forward_with_tape(self, x: np.ndarray):
        """Returns (FlowOutput, tape); tape drives the exact backward pass."""
        h = self._check_input(x)
        n = h.shape[0]
        logdet = np.zeros(n)
        z_parts = []
        tape = []
        for lev, steps in enumerate(self.steps):
            h = self._enter_level(h)
            tape.append(("enter_level", lev))
            for k, step in enumerate(steps):
                for lname, layer in step.sublayers():
                    h, ld, cache = layer.forward(h)
                    if not np.all(np.isfinite(h)) or not np.all(np.isfinite(ld)):
                        raise NumericError(
                            f"non-finite activation at level{lev}/step{k}/{lname}")
                    logdet += ld
                    tape.append(("layer", f"level{lev}/step{k}/{lname}", layer, cache))
            if lev < self.config.levels - 1:
                h, factored = split_channels(h)
                z_parts.append(factored)
                tape.append(("split",))
        z_parts.append(h)
        return FlowOutput(z_parts=z_parts, logdet=logdet), tape

    def forward(self, x: np.ndarray) -> FlowOutput:
        out, _ = self.forward_with_tape(x)
        return out

    def inverse(self, z_parts: list) -> np.ndarray:
        shapes = self.config.z_shapes()
        if len(z_parts) != len(shapes):
            raise ShapeError(f"expected {len(shapes)} latent parts, got {len(z_parts)}")
        for z, s in zip(z_parts, shapes):
            if tuple(z.shape[1:]) != tuple(s):
                raise ShapeError(f"latent part shape {z.shape[1:]} != expected {s}")
        h = np.asarray(z_parts[-1], dtype=np.float64)
        for lev in reversed(range(self.config.levels)):
            if lev < self.config.levels - 1:
                h = unsplit_channels(h, np.asarray(z_parts[lev], dtype=np.float64))
            for step in reversed(self.steps[lev]):
                for _, layer in reversed(step.sublayers()):
                    h = layer.inverse(h)
            h = self._exit_level(h)
        return h

    # -- likelihood ---------------------------------------------------------

    def log_prob(self, x: np.ndarray) -> np.ndarray:
        out = self.forward(x)
        logp = out.logdet.copy()
        for z in out.z_parts:
            logp += standard_normal_logp(z)
        return logp

    def loss_and_grads(self, x: np.ndarray):
        """Mean NLL (nats) over the batch and gradients for every parameter."""
        out, tape = self.forward_with_tape(x)
        n = x.shape[0]
        nll = -(out.logdet + sum(standard_normal_logp(z) for z in out.z_parts))
        loss = float(nll.mean())
        # dL/dlogdet_n = -1/n; dL/dz = z/n for every latent part
        dlogdet = np.full(n, -1.0 / n)
        dz_parts = [z / n for z in out.z_parts]
        grads = {}
        g = dz_parts.pop()
        for entry in reversed(tape):
            if entry[0] == "split":
                g = unsplit_channels(g, dz_parts.pop())
            elif entry[0] == "enter_level":
                if self.config.mode == "image":
                    g = unsqueeze2x2(g)
            else:
                _, name, layer, cache = entry
                g, layer_grads = layer.backward(g, dlogdet, cache)
                for pname, garr in layer_grads.items():
                    grads[f"{name}/{pname}"] = garr
        return loss, grads, nll

    def sample(self, n: int, temperature: float, rng: Rng) -> np.ndarray:
        if temperature <= 0:
            raise ConfigError("temperature must be > 0")
        z_parts = [temperature * rng.normal((n,) + tuple(s)) for s in self.config.z_shapes()]
        return self.inverse(z_parts)


def build_model(config: ModelConfig, seed: int) -> MultiScaleModel:
    return MultiScaleModel(config, Rng(seed).child("model_init"))

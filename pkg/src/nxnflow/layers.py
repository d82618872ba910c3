"""Invertible flow layers with hand-derived gradients.

Every layer follows one contract:

    forward(x)  -> (y, logdet, cache)   logdet has shape (N,), nats per sample
    inverse(y)  -> x
    backward(dy, dlogdet, cache) -> (dx, grads)

where ``dlogdet`` is dL/dlogdet per sample and ``grads`` mirrors the keys
of ``params()``. Inputs are rank-4 NCHW arrays or rank-2 N x D arrays
(the toy-2D mode, where the spatial factor H*W is 1).

Per-channel scales are stored as logs, so they stay strictly positive and
an identity initialization is a zero log.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.linalg import solve_triangular

from .errors import DegenerateChannelError, ShapeError, SingularMatrixError, StateError
from .tensor import Rng, channel_affine, lu_factor, lu_slogdet, num_channels, spatial_size


def _per_channel(v: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Broadcast a length-C vector against x's channel axis."""
    if x.ndim == 4:
        return v[None, :, None, None]
    return v[None, :]


def _sum_per_channel(g: np.ndarray) -> np.ndarray:
    """Reduce a gradient over batch and spatial axes, keeping channels."""
    if g.ndim == 4:
        return g.sum(axis=(0, 2, 3))
    return g.sum(axis=0)


class ActNorm:
    """Per-channel affine y = gamma * x + beta with data-dependent init."""

    def __init__(self, channels: int):
        self.channels = channels
        self.log_gamma = np.zeros(channels)
        self.beta = np.zeros(channels)
        self.initialized = False

    def params(self):
        return {"log_gamma": self.log_gamma, "beta": self.beta}

    def init_from_batch(self, batch: np.ndarray) -> None:
        if self.initialized:
            raise StateError("actnorm already initialized")
        if batch.shape[0] < 2:
            raise StateError("actnorm init needs at least 2 samples")
        axes = (0, 2, 3) if batch.ndim == 4 else (0,)
        mu = batch.mean(axis=axes)
        sigma = batch.std(axis=axes)
        if np.any(sigma < 1e-6):
            bad = int(np.argmin(sigma))
            raise DegenerateChannelError(
                f"channel {bad} has std {sigma[bad]:.3e} < 1e-6"
            )
        self.log_gamma = -np.log(sigma)
        self.beta = -mu / sigma
        self.initialized = True

    def forward(self, x):
        if not self.initialized:
            raise StateError("actnorm used before initialization")
        gamma = np.exp(self.log_gamma)
        y = channel_affine(x, gamma, self.beta)
        logdet = np.full(x.shape[0], spatial_size(x) * self.log_gamma.sum())
        return y, logdet, {"x": x}

    def inverse(self, y):
        if not self.initialized:
            raise StateError("actnorm used before initialization")
        gamma = np.exp(self.log_gamma)
        return channel_affine(y, 1.0 / gamma, -self.beta / gamma)

    def backward(self, dy, dlogdet, cache):
        x = cache["x"]
        gamma = np.exp(self.log_gamma)
        dx = dy * _per_channel(gamma, dy)
        g_beta = _sum_per_channel(dy)
        g_log_gamma = _sum_per_channel(dy * x) * gamma + spatial_size(x) * dlogdet.sum()
        return dx, {"log_gamma": g_log_gamma, "beta": g_beta}


class Shift:
    """The invertible per-channel shift map y = alpha * x + beta.

    Identical functional form to ActNorm but initialized at the identity
    (alpha = 1, beta = 0) and trained freely; its Jacobian is diagonal so
    the log-determinant is H*W * sum_c log alpha_c.
    """

    def __init__(self, channels: int):
        self.channels = channels
        self.log_alpha = np.zeros(channels)
        self.beta = np.zeros(channels)

    def params(self):
        return {"log_alpha": self.log_alpha, "beta": self.beta}

    def forward(self, x):
        alpha = np.exp(self.log_alpha)
        y = channel_affine(x, alpha, self.beta)
        logdet = np.full(x.shape[0], spatial_size(x) * self.log_alpha.sum())
        return y, logdet, {"x": x}

    def inverse(self, y):
        alpha = np.exp(self.log_alpha)
        return channel_affine(y, 1.0 / alpha, -self.beta / alpha)

    def backward(self, dy, dlogdet, cache):
        x = cache["x"]
        alpha = np.exp(self.log_alpha)
        dx = dy * _per_channel(alpha, dy)
        g_beta = _sum_per_channel(dy)
        g_log_alpha = _sum_per_channel(dy * x) * alpha + spatial_size(x) * dlogdet.sum()
        return dx, {"log_alpha": g_log_alpha, "beta": g_beta}


class Inv1x1:
    """Invertible 1x1 convolution, PLU-parameterized by default.

    PLU mode stores W = P @ L @ U with P a fixed permutation, L unit lower
    triangular and U upper triangular with diag(U) = sign * exp(log_u_diag);
    invertibility is structural and the log-det is O(C). DirectW mode keeps
    the raw matrix and pays an LU factorization per log-det.
    """

    def __init__(self, channels: int, rng: Rng, mode: str = "plu"):
        if mode not in ("plu", "direct"):
            raise ValueError(f"unknown inv1x1 mode {mode!r}")
        self.channels = channels
        self.mode = mode
        # rotation init: orthogonal, |det| = 1, so the initial logdet is 0
        a = rng.normal((channels, channels))
        q, r = np.linalg.qr(a)
        q = q * np.sign(np.diag(r))[None, :]
        if mode == "direct":
            self.w = q
        else:
            perm, lower, upper = lu_factor(q)
            self.p = np.eye(channels)[np.argsort(perm)]  # a[perm] = L U -> a = P L U
            self.l_strict = np.tril(lower, -1)
            diag = np.diag(upper)
            self.u_sign = np.sign(diag)
            self.log_u_diag = np.log(np.abs(diag))
            self.u_off = np.triu(upper, 1)

    def params(self):
        if self.mode == "direct":
            return {"w": self.w}
        return {
            "l_strict": self.l_strict,
            "u_off": self.u_off,
            "log_u_diag": self.log_u_diag,
        }

    @property
    def matrix(self) -> np.ndarray:
        if self.mode == "direct":
            return self.w
        lower = np.tril(self.l_strict, -1) + np.eye(self.channels)
        upper = np.triu(self.u_off, 1) + np.diag(self.u_sign * np.exp(self.log_u_diag))
        return self.p @ lower @ upper

    def _logdet_scalar(self) -> float:
        if self.mode == "direct":
            sign, logabs = lu_slogdet(self.w)
            if sign == 0:
                raise SingularMatrixError("1x1 convolution matrix is singular")
            return logabs
        return float(self.log_u_diag.sum())

    def _apply(self, m, x):
        if x.ndim == 4:
            return np.einsum("dc,nchw->ndhw", m, x, optimize=True)
        return x @ m.T

    def forward(self, x):
        w = self.matrix
        logdet = np.full(x.shape[0], spatial_size(x) * self._logdet_scalar())
        return self._apply(w, x), logdet, {"x": x}

    def inverse(self, y):
        n = y.shape[0]
        if y.ndim == 4:
            fibers = y.transpose(1, 0, 2, 3).reshape(self.channels, -1)
        else:
            fibers = y.T
        if self.mode == "direct":
            sign, _ = lu_slogdet(self.w)
            if sign == 0:
                raise SingularMatrixError("1x1 convolution matrix is singular")
            solved = np.linalg.solve(self.w, fibers)
        else:
            lower = np.tril(self.l_strict, -1) + np.eye(self.channels)
            upper = np.triu(self.u_off, 1) + np.diag(self.u_sign * np.exp(self.log_u_diag))
            tmp = solve_triangular(lower, self.p.T @ fibers, lower=True, unit_diagonal=True)
            solved = solve_triangular(upper, tmp, lower=False)
        if y.ndim == 4:
            return solved.reshape(self.channels, n, y.shape[2], y.shape[3]).transpose(1, 0, 2, 3)
        return np.ascontiguousarray(solved.T)

    def backward(self, dy, dlogdet, cache):
        x = cache["x"]
        hw = spatial_size(x)
        if x.ndim == 4:
            gw = np.einsum("ndhw,nchw->dc", dy, x, optimize=True)
        else:
            gw = dy.T @ x
        dx = self._apply(self.matrix.T, dy)
        ld = hw * dlogdet.sum()
        if self.mode == "direct":
            return dx, {"w": gw + ld * np.linalg.inv(self.w).T}
        lower = np.tril(self.l_strict, -1) + np.eye(self.channels)
        upper = np.triu(self.u_off, 1) + np.diag(self.u_sign * np.exp(self.log_u_diag))
        g_lower = self.p.T @ gw @ upper.T
        g_upper = lower.T @ self.p.T @ gw
        g_log_u = np.diag(g_upper) * self.u_sign * np.exp(self.log_u_diag) + ld
        return dx, {
            "l_strict": np.tril(g_lower, -1),
            "u_off": np.triu(g_upper, 1),
            "log_u_diag": g_log_u,
        }


class Conv2d:
    """Plain 3x3 / 1x1 convolution with zero padding, manual adjoint."""

    def __init__(self, c_in: int, c_out: int, kernel: int, rng: Rng | None,
                 zero_init: bool = False):
        self.kernel = kernel
        if zero_init:
            self.w = np.zeros((c_out, c_in, kernel, kernel))
        else:
            fan_in = c_in * kernel * kernel
            self.w = rng.normal((c_out, c_in, kernel, kernel)) * math.sqrt(2.0 / fan_in)
        self.b = np.zeros(c_out)

    def forward(self, x):
        n, _, h, w = x.shape
        pad = self.kernel // 2
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
        y = np.zeros((n, self.w.shape[0], h, w))
        for di in range(self.kernel):
            for dj in range(self.kernel):
                y += np.einsum("dc,nchw->ndhw", self.w[:, :, di, dj],
                               xp[:, :, di:di + h, dj:dj + w], optimize=True)
        y += self.b[None, :, None, None]
        return y, {"xp": xp, "hw": (h, w)}

    def backward(self, dy, cache):
        xp, (h, w) = cache["xp"], cache["hw"]
        pad = self.kernel // 2
        gw = np.empty_like(self.w)
        dxp = np.zeros_like(xp)
        for di in range(self.kernel):
            for dj in range(self.kernel):
                gw[:, :, di, dj] = np.einsum("ndhw,nchw->dc", dy,
                                             xp[:, :, di:di + h, dj:dj + w], optimize=True)
                dxp[:, :, di:di + h, dj:dj + w] += np.einsum(
                    "dc,ndhw->nchw", self.w[:, :, di, dj], dy, optimize=True)
        gb = dy.sum(axis=(0, 2, 3))
        dx = dxp[:, :, pad:pad + h, pad:pad + w] if pad else dxp
        return dx, gw, gb


class ConditionerNet:
    """The coupling conditioner: conv -> relu -> conv -> relu -> conv(zero).

    Kernel size 3 for image data and 1 for rank-2 data (a 1x1 convolution
    on a 1x1 grid is a dense layer). The zero-initialized output layer
    makes the coupling start as the identity.
    """

    def __init__(self, c_in: int, c_out: int, hidden: int, kernel: int, rng: Rng):
        self.layers = [
            Conv2d(c_in, hidden, kernel, rng.child("conv0")),
            Conv2d(hidden, hidden, kernel, rng.child("conv1")),
            Conv2d(hidden, c_out, kernel, None, zero_init=True),
        ]

    def params(self):
        out = {}
        for i, layer in enumerate(self.layers):
            out[f"conv{i}/w"] = layer.w
            out[f"conv{i}/b"] = layer.b
        return out

    def forward(self, x):
        caches = []
        h = x
        for i, layer in enumerate(self.layers):
            h, c = layer.forward(h)
            if i < len(self.layers) - 1:
                mask = h > 0
                h = h * mask
                caches.append((c, mask))
            else:
                caches.append((c, None))
        return h, caches

    def backward(self, dout, caches):
        grads = {}
        g = dout
        for i in reversed(range(len(self.layers))):
            c, mask = caches[i]
            if mask is not None:
                g = g * mask
            g, gw, gb = self.layers[i].backward(g, c)
            grads[f"conv{i}/w"] = gw
            grads[f"conv{i}/b"] = gb
        return g, grads


class Coupling:
    """Affine coupling: y_a = x_a * s(x_b) + t(x_b), y_b = x_b.

    x_a is the first ceil(C/2) channels. s = exp(tanh(raw_s)) keeps the
    per-entry log-det in [-1, 1] and the zero-initialized conditioner
    makes the layer start as the identity.
    """

    def __init__(self, channels: int, hidden: int, kernel: int, rng: Rng):
        if channels < 2:
            raise ShapeError("coupling needs at least 2 channels")
        self.channels = channels
        self.c_a = (channels + 1) // 2
        self.c_b = channels - self.c_a
        self.net = ConditionerNet(self.c_b, 2 * self.c_a, hidden, kernel, rng)

    def params(self):
        return {f"net/{k}": v for k, v in self.net.params().items()}

    def _as4d(self, x):
        if x.ndim == 2:
            return x[:, :, None, None], True
        return x, False

    def _conditioner(self, x_b):
        raw, caches = self.net.forward(x_b)
        raw_s, t = raw[:, :self.c_a], raw[:, self.c_a:]
        th = np.tanh(raw_s)
        s = np.exp(th)
        return s, t, th, caches

    def forward(self, x):
        x4, squeezed = self._as4d(x)
        x_a, x_b = x4[:, :self.c_a], x4[:, self.c_a:]
        s, t, th, caches = self._conditioner(x_b)
        y_a = x_a * s + t
        y = np.concatenate([y_a, x_b], axis=1)
        logdet = th.sum(axis=(1, 2, 3))
        if squeezed:
            y = y[:, :, 0, 0]
        cache = {"x_a": x_a, "s": s, "th": th, "net": caches, "squeezed": squeezed}
        return y, logdet, cache

    def inverse(self, y):
        y4, squeezed = self._as4d(y)
        y_a, y_b = y4[:, :self.c_a], y4[:, self.c_a:]
        s, t, _, _ = self._conditioner(y_b)
        x = np.concatenate([(y_a - t) / s, y_b], axis=1)
        return x[:, :, 0, 0] if squeezed else x

    def backward(self, dy, dlogdet, cache):
        dy4, _ = self._as4d(dy)
        x_a, s, th = cache["x_a"], cache["s"], cache["th"]
        dy_a, dy_b = dy4[:, :self.c_a], dy4[:, self.c_a:]
        dx_a = dy_a * s
        dth = dy_a * x_a * s + dlogdet[:, None, None, None]
        draw_s = dth * (1.0 - th * th)
        draw = np.concatenate([draw_s, dy_a], axis=1)
        dx_b_net, net_grads = self.net.backward(draw, cache["net"])
        dx = np.concatenate([dx_a, dy_b + dx_b_net], axis=1)
        if cache["squeezed"]:
            dx = dx[:, :, 0, 0]
        return dx, {f"net/{k}": v for k, v in net_grads.items()}


class Squeeze:
    """Trade 2x2 spatial blocks for 4x channels; volume preserving."""

    def params(self):
        return {}

    def forward(self, x):
        y = squeeze2x2(x)
        return y, np.zeros(x.shape[0]), {}

    def inverse(self, y):
        return unsqueeze2x2(y)

    def backward(self, dy, dlogdet, cache):
        return unsqueeze2x2(dy), {}


def squeeze2x2(x: np.ndarray) -> np.ndarray:
    """C x H x W -> 4C x H/2 x W/2; block order (tl, tr, bl, br) per channel."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"squeeze needs even spatial extents, got {h}x{w}")
    y = x.reshape(n, c, h // 2, 2, w // 2, 2)
    y = y.transpose(0, 1, 3, 5, 2, 4)
    return np.ascontiguousarray(y.reshape(n, 4 * c, h // 2, w // 2))


def unsqueeze2x2(y: np.ndarray) -> np.ndarray:
    n, c4, h, w = y.shape
    if c4 % 4:
        raise ShapeError(f"unsqueeze needs channels divisible by 4, got {c4}")
    c = c4 // 4
    x = y.reshape(n, c, 2, 2, h, w)
    x = x.transpose(0, 1, 4, 2, 5, 3)
    return np.ascontiguousarray(x.reshape(n, c, 2 * h, 2 * w))


def split_channels(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """First half of channels continues, second half is factored out."""
    c = num_channels(x)
    if c % 2:
        raise ShapeError(f"split needs an even channel count, got {c}")
    half = c // 2
    if x.ndim == 4:
        return x[:, :half].copy(), x[:, half:].copy()
    return x[:, :half].copy(), x[:, half:].copy()


def unsplit_channels(kept: np.ndarray, factored: np.ndarray) -> np.ndarray:
    return np.concatenate([kept, factored], axis=1)


def nxn_conv_forward(shift: Shift, mix: Inv1x1, x: np.ndarray):
    """The invertible n x n convolution: shift, then 1x1 mix."""
    h, ld1, c1 = shift.forward(x)
    y, ld2, c2 = mix.forward(h)
    return y, ld1 + ld2, (c1, c2)


def nxn_conv_inverse(shift: Shift, mix: Inv1x1, y: np.ndarray) -> np.ndarray:
    return shift.inverse(mix.inverse(y))

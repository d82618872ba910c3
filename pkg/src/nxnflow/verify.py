"""Independent numerical oracles: finite-difference Jacobians, the
shifted-1x1 convolution reformulation check, round trips, and density
normalization by grid quadrature.

These deliberately avoid the analytic code paths they certify: Jacobians
are built entry by entry from central differences, the convolution check
compares a brute-force sliding window against the shifted-sum and fused
forms, and quadrature integrates exp(log_prob) on a dense grid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .tensor import Rng, lu_slogdet

FD_STEP = 1e-5  # central-difference step on float64: ~1e-10 entry error


@dataclass
class CheckResult:
    name: str
    passed: bool
    metric: float
    threshold: float

    def line(self) -> str:
        status = "pass" if self.passed else "FAIL"
        return f"{self.name},{status},{self.metric:.6e},{self.threshold:.6e}"


def numerical_jacobian(f, x: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Dense Jacobian of f at x by central differences; rows = outputs."""
    x = np.asarray(x, dtype=np.float64)
    d = x.size
    if d > 64:
        raise ShapeError(f"jacobian build capped at 64 dims, got {d}")
    y0 = np.asarray(f(x)).ravel()
    jac = np.empty((y0.size, d))
    flat = x.ravel().copy()
    for i in range(d):
        orig = flat[i]
        flat[i] = orig + h
        yp = np.asarray(f(flat.reshape(x.shape))).ravel()
        flat[i] = orig - h
        ym = np.asarray(f(flat.reshape(x.shape))).ravel()
        flat[i] = orig
        jac[:, i] = (yp - ym) / (2.0 * h)
    return jac


def numerical_logdet(layer, x: np.ndarray, h: float = FD_STEP) -> float:
    """slogdet of the finite-difference Jacobian of a layer's forward map.

    x is a single sample (no batch axis); the layer sees a batch of one.
    """
    def f(xi):
        y, _, _ = layer.forward(xi[None])
        return y[0]

    jac = numerical_jacobian(f, x, h)
    sign, logabs = lu_slogdet(jac)
    if sign == 0:
        raise ShapeError("numerical Jacobian is singular")
    return logabs


def max_offdiagonal(jac: np.ndarray) -> float:
    off = jac.copy()
    np.fill_diagonal(off, 0.0)
    return float(np.max(np.abs(off))) if off.size else 0.0


# -- Eq. (standard conv = sum of shifted 1x1 convs) check --------------------

@dataclass
class StandardConvSpec:
    """A standard convolution written as K taps: D x C matrices with integer
    spatial offsets, zero padding."""
    taps: np.ndarray     # K x D x C
    offsets: list        # K pairs (di, dj)

    def __post_init__(self):
        if len(self.offsets) != self.taps.shape[0]:
            raise ShapeError("one offset per tap required")


def shift_input(x: np.ndarray, di: int, dj: int) -> np.ndarray:
    """Spatially shift a C x H x W array with zero fill: out[.., i, j] =
    x[.., i + di, j + dj] where in range."""
    c, h, w = x.shape
    out = np.zeros_like(x)
    si0, si1 = max(0, di), min(h, h + di)
    sj0, sj1 = max(0, dj), min(w, w + dj)
    out[:, si0 - di:si1 - di, sj0 - dj:sj1 - dj] = x[:, si0:si1, sj0:sj1]
    return out


def direct_convolution(spec: StandardConvSpec, x: np.ndarray) -> np.ndarray:
    """Brute-force sliding window: y[d,i,j] = sum_k sum_c taps[k,d,c] *
    x[c, i+di_k, j+dj_k], zero padded."""
    k, d, c = spec.taps.shape
    _, h, w = x.shape
    y = np.zeros((d, h, w))
    for i in range(h):
        for j in range(w):
            for t in range(k):
                di, dj = spec.offsets[t]
                ii, jj = i + di, j + dj
                if 0 <= ii < h and 0 <= jj < w:
                    y[:, i, j] += spec.taps[t] @ x[:, ii, jj]
    return y


def shifted_sum_convolution(spec: StandardConvSpec, x: np.ndarray) -> np.ndarray:
    """Sum over taps of a 1x1 convolution applied to the shifted input."""
    _, h, w = x.shape
    d = spec.taps.shape[1]
    y = np.zeros((d, h, w))
    for t, (di, dj) in enumerate(spec.offsets):
        xs = shift_input(x, di, dj)
        y += np.einsum("dc,chw->dhw", spec.taps[t], xs)
    return y


def conv_reformulation_check(spec: StandardConvSpec, x: np.ndarray,
                             shared_shift=None) -> float:
    """Max deviation over (a) direct conv vs shifted-sum form, and (b) with a
    shared shifted input, tap-by-tap application vs the fused single 1x1 conv
    with the summed kernel."""
    direct = direct_convolution(spec, x)
    shifted = shifted_sum_convolution(spec, x)
    dev = float(np.max(np.abs(direct - shifted))) if direct.size else 0.0
    sx = shared_shift(x) if shared_shift is not None else x
    per_tap = np.zeros_like(direct)
    for t in range(spec.taps.shape[0]):
        per_tap += np.einsum("dc,chw->dhw", spec.taps[t], sx)
    fused = np.einsum("dc,chw->dhw", spec.taps.sum(axis=0), sx)
    dev = max(dev, float(np.max(np.abs(per_tap - fused))))
    return dev


# -- round trips and quadrature ----------------------------------------------

@dataclass
class RoundTripReport:
    trials: int
    max_reconstruction: float
    max_logdet_asymmetry: float

    def passed(self, recon_tol: float, logdet_tol: float = 1e-10) -> bool:
        return (self.max_reconstruction <= recon_tol
                and self.max_logdet_asymmetry <= logdet_tol)


def roundtrip_suite(make_layer, make_input, trials: int, rng: Rng) -> RoundTripReport:
    """For each trial, build a fresh layer and input, then measure
    max |x - inv(fwd(x))| and |logdet(fwd) at x + logdet contribution of inv|.

    The inverse log-det is recomputed as the negated forward log-det at the
    reconstructed point, which must agree with the forward value.
    """
    max_rec = 0.0
    max_asym = 0.0
    for t in range(trials):
        tr = rng.child(f"trial{t}")
        layer = make_layer(tr.child("layer"))
        x = make_input(tr.child("input"))
        y, ld_fwd, _ = layer.forward(x)
        x_rec = layer.inverse(y)
        _, ld_again, _ = layer.forward(x_rec)
        max_rec = max(max_rec, float(np.max(np.abs(x - x_rec))))
        max_asym = max(max_asym, float(np.max(np.abs(ld_fwd - ld_again))))
    return RoundTripReport(trials, max_rec, max_asym)


def quadrature_normalization(model, bound: float = 6.0, step: float = 0.05) -> float:
    """Riemann-sum mass of exp(log_prob) for a rank-2 model on [-b, b]^2."""
    if model.config.mode != "rank2" or model.config.dim != 2:
        raise ShapeError("quadrature oracle needs a rank-2 model with dim 2")
    axis = np.arange(-bound, bound + step / 2, step)
    xx, yy = np.meshgrid(axis, axis, indexing="ij")
    pts = np.stack([xx.ravel(), yy.ravel()], axis=1)
    mass = 0.0
    for start in range(0, pts.shape[0], 8192):
        lp = model.log_prob(pts[start:start + 8192])
        mass += float(np.exp(lp).sum())
    return mass * step * step


# -- gradient checking ---------------------------------------------------------

def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.abs(analytic) + np.abs(numeric), 1.0)
    return float(np.max(np.abs(analytic - numeric) / denom))


def check_param_gradients(loss_fn, params: dict, analytic: dict,
                          h: float = FD_STEP) -> float:
    """Max relative error of analytic parameter gradients vs central
    differences of loss_fn(), which must read the live `params` arrays."""
    worst = 0.0
    for name, arr in params.items():
        flat = arr.ravel()
        num = np.empty_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp = loss_fn()
            flat[i] = orig - h
            lm = loss_fn()
            flat[i] = orig
            num[i] = (lp - lm) / (2.0 * h)
        worst = max(worst, relative_error(analytic[name].ravel(), num))
    return worst


def check_input_gradient(loss_of_x, x: np.ndarray, analytic: np.ndarray,
                         h: float = FD_STEP) -> float:
    flat = x.ravel().copy()
    num = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        lp = loss_of_x(flat.reshape(x.shape))
        flat[i] = orig - h
        lm = loss_of_x(flat.reshape(x.shape))
        flat[i] = orig
        num[i] = (lp - lm) / (2.0 * h)
    return relative_error(analytic.ravel(), num)

"""Dense numeric kernel: forward/backward primitives, AdamW, seeded RNG.

Values live in plain float arrays (f32 for training, f64 for gradient
verification); each primitive has a matching backward rule and the whole
network graph is differentiated by chaining those rules by hand.
"""
from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

from .errors import BadProbability, ShapeMismatch

# debug assertion on every primitive output; enabled by the training
# loop's debug flag
CHECK_FINITE = False

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def assert_finite(*arrays: np.ndarray) -> None:
    if not CHECK_FINITE:
        return
    for a in arrays:
        if not np.isfinite(a).all():
            raise AssertionError("non-finite values in tensor")


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape[-1] != b.shape[0]:
        raise ShapeMismatch(f"matmul {a.shape} @ {b.shape}")
    out = a @ b
    assert_finite(out)
    return out


def matmul_bwd(dc: np.ndarray, a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gradients for c = a @ b with a of shape (..., k) and b of (k, m)."""
    k = a.shape[-1]
    m = dc.shape[-1]
    dc2 = np.ascontiguousarray(dc).reshape(-1, m)
    da = (dc2 @ b.T).reshape(a.shape)
    db = a.reshape(-1, k).T @ dc2
    return da, db


def add_bias(x: np.ndarray, b: np.ndarray) -> np.ndarray:
    if x.shape[-1] != b.shape[0]:
        raise ShapeMismatch(f"add_bias {x.shape} + {b.shape}")
    return x + b


def add_bias_bwd(dy: np.ndarray) -> np.ndarray:
    return dy.reshape(-1, dy.shape[-1]).sum(axis=0)


def gelu(x: np.ndarray) -> np.ndarray:
    out = 0.5 * x * (1.0 + erf(x * _INV_SQRT2))
    assert_finite(out)
    return out


def gelu_bwd(dy: np.ndarray, x: np.ndarray) -> np.ndarray:
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
    return dy * (cdf + x * pdf)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_bwd(dy: np.ndarray, x: np.ndarray) -> np.ndarray:
    return dy * (x > 0)


def _param_shape(x: np.ndarray, param_axis: int) -> tuple[int, ...]:
    shape = [1] * x.ndim
    shape[param_axis] = x.shape[param_axis]
    return tuple(shape)


def _sq_mean(xc: np.ndarray, axis: int) -> np.ndarray:
    """Mean of squares over `axis`, keepdims, via a single fused pass."""
    ax = axis % xc.ndim
    n = xc.shape[ax]
    if xc.ndim == 3 and ax == 2:
        out = np.einsum("btd,btd->bt", xc, xc)[:, :, None]
    elif xc.ndim == 3 and ax == 1:
        out = np.einsum("btd,btd->bd", xc, xc)[:, None, :]
    elif xc.ndim == 2 and ax == 1:
        out = np.einsum("bd,bd->b", xc, xc)[:, None]
    else:
        return np.mean(xc * xc, axis=axis, keepdims=True)
    out /= n
    return out


def layernorm(
    x: np.ndarray,
    gain: np.ndarray,
    bias: np.ndarray,
    axis: int = -1,
    param_axis: int = -1,
    eps: float = 1e-5,
):
    """Normalizes over `axis`; gain/bias index `param_axis`.

    The two usually coincide (last-axis norm, per-channel parameters) but
    the gating unit normalizes across tokens while keeping per-channel
    parameters, so they are independent here.
    """
    mu = x.mean(axis=axis, keepdims=True)
    xhat = x - mu
    var = _sq_mean(xhat, axis)
    inv = 1.0 / np.sqrt(var + eps)
    xhat *= inv
    ps = _param_shape(x, param_axis)
    y = xhat * gain.reshape(ps)
    y += bias.reshape(ps)
    assert_finite(y)
    return y, (xhat, inv)


def layernorm_bwd(
    dy: np.ndarray,
    cache,
    gain: np.ndarray,
    axis: int = -1,
    param_axis: int = -1,
):
    xhat, inv = cache
    ps = _param_shape(xhat, param_axis)
    m = xhat.shape[axis]
    reduce_axes = tuple(i for i in range(xhat.ndim) if i != param_axis % xhat.ndim)
    if xhat.ndim == 3 and len(reduce_axes) == 2:
        dgain = np.einsum("btd,btd->d" if param_axis % 3 == 2 else "btd,btd->t", dy, xhat)
    else:
        dgain = (dy * xhat).sum(axis=reduce_axes)
    dbias = dy.sum(axis=reduce_axes)
    dxhat = dy * gain.reshape(ps)
    sum1 = dxhat.sum(axis=axis, keepdims=True)
    sum2 = _sq_mean_pair(dxhat, xhat, axis)
    sum1 /= m
    sum2 /= m
    dxhat -= sum1
    dxhat -= xhat * sum2
    dxhat *= inv
    return dxhat, dgain, dbias


def _sq_mean_pair(a: np.ndarray, b: np.ndarray, axis: int) -> np.ndarray:
    """Sum of a*b over `axis`, keepdims, via a single fused pass."""
    ax = axis % a.ndim
    if a.ndim == 3 and ax == 2:
        return np.einsum("btd,btd->bt", a, b)[:, :, None]
    if a.ndim == 3 and ax == 1:
        return np.einsum("btd,btd->bd", a, b)[:, None, :]
    if a.ndim == 2 and ax == 1:
        return np.einsum("bd,bd->b", a, b)[:, None]
    return (a * b).sum(axis=axis, keepdims=True)


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_xent(logits: np.ndarray, labels: np.ndarray):
    """Mean cross entropy; returns (loss, probabilities)."""
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeMismatch(f"softmax_xent logits {logits.shape} labels {labels.shape}")
    shifted = logits - logits.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1))
    picked = shifted[np.arange(len(labels)), labels]
    loss = float(np.mean(logsumexp - picked))
    probs = np.exp(shifted) / np.exp(shifted).sum(axis=1, keepdims=True)
    return loss, probs


def softmax_xent_bwd(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    n = probs.shape[0]
    d = probs.copy()
    d[np.arange(n), labels] -= 1.0
    return d / n


def mse(pred: np.ndarray, target: np.ndarray) -> float:
    if pred.shape != target.shape:
        raise ShapeMismatch(f"mse {pred.shape} vs {target.shape}")
    diff = pred - target
    return float(np.mean(diff * diff))


def mse_bwd(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    return 2.0 * (pred - target) / pred.size


class AdamW:
    """Adam with decoupled weight decay over a named parameter dict."""

    def __init__(
        self,
        learning_rate: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        weight_decay: float = 1e-5,
    ):
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self._scratch: dict[str, tuple[np.ndarray, np.ndarray]] = {}

    def _buffers(self, p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        # two reusable work arrays per dtype, sized to the largest parameter
        key = p.dtype.str
        pair = self._scratch.get(key)
        if pair is None or pair[0].size < p.size:
            pair = (np.empty(p.size, dtype=p.dtype), np.empty(p.size, dtype=p.dtype))
            self._scratch[key] = pair
        return pair[0][: p.size].reshape(p.shape), pair[1][: p.size].reshape(p.shape)

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for name, p in params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ShapeMismatch(f"grad {name}: {g.shape} vs param {p.shape}")
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m = self.m[name]
            v = self.v[name]
            s1, s2 = self._buffers(p)
            # decay applied to the parameter first, decoupled from the moments
            if self.weight_decay:
                p *= 1.0 - self.learning_rate * self.weight_decay
            m *= self.beta1
            np.multiply(g, 1.0 - self.beta1, out=s1)
            m += s1
            v *= self.beta2
            np.multiply(g, g, out=s2)
            s2 *= 1.0 - self.beta2
            v += s2
            np.divide(m, bc1, out=s1)
            s1 *= self.learning_rate
            np.divide(v, bc2, out=s2)
            np.sqrt(s2, out=s2)
            s2 += self.eps
            s1 /= s2
            p -= s1
            assert_finite(p)


class RngStream:
    """Counter-based generator keyed by (seed, stream id).

    Distinct stream ids give independent reproducible sequences, so
    adding draws to one consumer never shifts another's.
    """

    def __init__(self, seed: int, stream: int):
        self.seed = int(seed)
        self.stream = int(stream)
        self._gen = np.random.Generator(np.random.Philox(key=[self.seed, self.stream]))

    def uniform(self, size=None) -> np.ndarray:
        return self._gen.random(size=size)

    def normal(self, loc=0.0, scale=1.0, size=None) -> np.ndarray:
        return self._gen.normal(loc, scale, size=size)

    def bernoulli(self, p, size=None) -> np.ndarray:
        p = np.asarray(p, dtype=np.float64)
        if ((p < 0) | (p > 1)).any():
            raise BadProbability("probabilities outside [0, 1]")
        if size is None:
            size = p.shape
        u = self._gen.random(size=size)
        return (u < p).astype(np.float64)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

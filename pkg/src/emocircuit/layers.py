"""Layer operations used by the perception channels.

All convolutions are cross-correlations over a leading batch axis:
``x`` is ``(B, C, *spatial)`` and kernels are ``(N, C, *window)``. The
``*_forward`` functions accept unbatched inputs too and add/strip the
batch axis for convenience.
"""

from __future__ import annotations

import itertools
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NumericError, ShapeError, ValidationError
from .tensor import Tensor, add, as_tensor, make_result, numeric_warnings, relu, reshape, sigmoid, tanh

SHUNT_FLOOR = 1e-6
BN_EPS = 1e-5
BN_MOMENTUM = 0.9

_AXES = "DHW"


def _tuple(v, n: int) -> tuple[int, ...]:
    if isinstance(v, int):
        return (v,) * n
    v = tuple(int(i) for i in v)
    if len(v) != n:
        raise ShapeError(f"expected {n} values, got {v}")
    return v


def _axis_name(i: int, nd: int) -> str:
    return _AXES[3 - nd + i] if nd <= 3 else f"spatial[{i}]"


def conv(x: Tensor, kernels: Tensor, bias: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """Valid (or zero-padded) n-d cross-correlation, no activation."""
    x, kernels = as_tensor(x), as_tensor(kernels)
    nd = kernels.ndim - 2
    if x.ndim != nd + 2:
        raise ShapeError(f"input has {x.ndim} axes, kernels imply {nd + 2} (batch, channel, {nd} spatial)")
    if x.shape[1] != kernels.shape[1]:
        raise ShapeError(f"channel axis: input has {x.shape[1]} maps, kernels expect {kernels.shape[1]}")
    stride = _tuple(stride, nd)
    padding = _tuple(padding, nd)
    win = kernels.shape[2:]
    xd = x.data
    if any(padding):
        xd = np.pad(xd, [(0, 0), (0, 0)] + [(p, p) for p in padding])
    for i in range(nd):
        if xd.shape[2 + i] < win[i]:
            raise ShapeError(
                f"axis {_axis_name(i, nd)}: extent {xd.shape[2 + i]} smaller than kernel {win[i]}"
            )
    cols = sliding_window_view(xd, win, axis=tuple(range(2, 2 + nd)))
    cols = cols[(slice(None), slice(None)) + tuple(slice(None, None, s) for s in stride)]
    out_sp = cols.shape[2:2 + nd]
    n_k = kernels.shape[0]
    # one contiguous im2col copy, rows (B, *S'), columns (C, *K); reused by backward
    perm = (0,) + tuple(range(2, 2 + nd)) + (1,) + tuple(range(2 + nd, 2 + 2 * nd))
    colmat = cols.transpose(perm).reshape(-1, kernels.size // n_k)
    y = colmat @ kernels.data.reshape(n_k, -1).T
    y = np.moveaxis(y.reshape((xd.shape[0],) + out_sp + (n_k,)), -1, 1)
    parents = [x, kernels]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (kernels.shape[0],):
            raise ShapeError(f"bias shape {bias.shape} does not match {kernels.shape[0]} kernels")
        y = y + bias.data.reshape((1, -1) + (1,) * nd)
        parents.append(bias)
    padded_shape = xd.shape

    def back(g):
        # g: (B, N, *S')
        gmat = np.moveaxis(g, 1, -1).reshape(-1, n_k)
        gk = (gmat.T @ colmat).reshape(kernels.shape)
        gx = np.zeros(padded_shape)
        for off in itertools.product(*(range(k) for k in win)):
            kk = kernels.data[(slice(None), slice(None)) + off]  # (N, C)
            contrib = np.moveaxis(np.tensordot(g, kk, axes=([1], [0])), -1, 1)
            idx = tuple(slice(o, o + s * (n - 1) + 1, s) for o, s, n in zip(off, stride, out_sp))
            gx[(slice(None), slice(None)) + idx] += contrib
        if any(padding):
            gx = gx[(slice(None), slice(None)) + tuple(slice(p, gx.shape[2 + i] - p) for i, p in enumerate(padding))]
        grads = [gx, gk]
        if bias is not None:
            grads.append(g.sum(axis=(0,) + tuple(range(2, 2 + nd))))
        return tuple(grads)

    return make_result(f"conv{nd}d", y, parents, back)


def _batched(x: Tensor, ndim: int) -> tuple[Tensor, bool]:
    x = as_tensor(x)
    if x.ndim == ndim:
        return reshape(x, (1,) + x.shape), True
    return x, False


def conv3d_forward(input, kernels, bias, stride=1, padding=0) -> Tensor:
    """ReLU(bias + cubic cross-correlation) over ``C x D x H x W`` inputs."""
    x, single = _batched(input, 4)
    y = relu(conv(x, kernels, bias, stride, padding))
    return reshape(y, y.shape[1:]) if single else y


def conv1d_forward(input, kernels, bias, stride=1) -> Tensor:
    """ReLU(bias + 1-D cross-correlation) sliding along the last axis only.

    The channel axis (the MFCC coefficients) is fully connected, so no
    locality across coefficients is assumed.
    """
    x, single = _batched(input, 2)
    y = relu(conv(x, kernels, bias, stride))
    return reshape(y, y.shape[1:]) if single else y


def conv2d_forward(input, kernels, bias, stride=1, padding=0) -> Tensor:
    x, single = _batched(input, 3)
    y = relu(conv(x, kernels, bias, stride, padding))
    return reshape(y, y.shape[1:]) if single else y


def shunting_forward(u: Tensor, inhibition: Tensor, passive_decay: float = 1.0) -> Tensor:
    """Divisive inhibition ``u / (a + I)`` with a sign-preserving floor on ``|a + I|``."""
    u, inhibition = as_tensor(u), as_tensor(inhibition)
    if passive_decay <= 0:
        raise ValueError(f"passive decay must be positive, got {passive_decay}")
    if u.shape != inhibition.shape:
        raise ShapeError(f"shunting: excitatory {u.shape} vs inhibitory {inhibition.shape}")
    den = passive_decay + inhibition.data
    small = np.abs(den) < SHUNT_FLOOR
    if small.any():
        numeric_warnings["shunting_floor"] += int(small.sum())
        den = np.where(small, np.where(den < 0, -SHUNT_FLOOR, SHUNT_FLOOR), den)
    y = u.data / den

    def back(g):
        gi = np.where(small, 0.0, -g * u.data / (den * den))
        return g / den, gi

    return make_result("shunting", y, (u, inhibition), back)


def shunting_layer(x, w_u, b_u, w_i, b_i, passive_decay=1.0, stride=1, padding=0) -> Tensor:
    """Excitatory and inhibitory convolutions over the same receptive field, then shunting."""
    u = relu(conv(x, w_u, b_u, stride, padding))
    inhib = relu(conv(x, w_i, b_i, stride, padding))
    return shunting_forward(u, inhib, passive_decay)


_ACTIVATIONS = {"relu": relu, "tanh": tanh, "sigmoid": sigmoid, "linear": lambda t: t}


def linear(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    x, weights, bias = as_tensor(x), as_tensor(weights), as_tensor(bias)
    if x.shape[-1] != weights.shape[1]:
        raise ShapeError(f"fc: input width {x.shape[-1]} vs weights expecting {weights.shape[1]}")
    if bias.shape != (weights.shape[0],):
        raise ShapeError(f"fc: bias {bias.shape} vs {weights.shape[0]} outputs")
    y = x.data @ weights.data.T + bias.data

    def back(g):
        gw = g.T @ x.data if g.ndim == 2 else np.outer(g, x.data)
        gb = g.sum(axis=0) if g.ndim == 2 else g
        return g @ weights.data, gw, gb

    return make_result("fc", y, (x, weights, bias), back)


def fc_forward(input, weights, bias, activation: str = "linear") -> Tensor:
    try:
        act = _ACTIVATIONS[activation]
    except KeyError:
        raise ValueError(f"unknown activation {activation!r}; choose from {sorted(_ACTIVATIONS)}") from None
    return act(linear(input, weights, bias))


def pool_max(input, window, stride=None, dims: int = 2) -> Tensor:
    """Max over windows on the last ``dims`` axes; ties go to the lowest flat index."""
    x = as_tensor(input)
    window = _tuple(window, dims)
    stride = window if stride is None else _tuple(stride, dims)
    lead = x.ndim - dims
    for i, w in enumerate(window):
        if w > x.shape[lead + i]:
            raise ShapeError(f"pool window {w} exceeds extent {x.shape[lead + i]} on axis {lead + i}")
    axes = tuple(range(lead, x.ndim))
    cols = sliding_window_view(x.data, window, axis=axes)
    cols = cols[(slice(None),) * lead + tuple(slice(None, None, s) for s in stride)]
    flat = cols.reshape(cols.shape[:lead + dims] + (-1,))
    arg = flat.argmax(axis=-1)
    y = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def back(g):
        gx = np.zeros_like(x.data)
        offs = np.unravel_index(arg, window)
        grids = np.indices(arg.shape)
        idx = [grids[i] for i in range(lead)]
        for d in range(dims):
            idx.append(grids[lead + d] * stride[d] + offs[d])
        np.add.at(gx, tuple(idx), g)
        return (gx,)

    return make_result(f"maxpool{dims}d", y, (x,), back)


class RunningStats:
    __slots__ = ("mean", "var")

    def __init__(self, channels: int):
        self.mean = np.zeros(channels)
        self.var = np.ones(channels)


def batchnorm_forward(input, gamma, beta, mode: str = "train", running: RunningStats | None = None,
                      eps: float = BN_EPS, momentum: float = BN_MOMENTUM) -> Tensor:
    """Per-feature-map normalization over the batch and spatial axes of ``(B, C, ...)``."""
    x, gamma, beta = as_tensor(input), as_tensor(gamma), as_tensor(beta)
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm: {c} feature maps, gamma {gamma.shape}, beta {beta.shape}")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, c) + (1,) * (x.ndim - 2)
    if mode == "train":
        if x.shape[0] < 2:
            raise ShapeError("batchnorm in train mode needs a batch of at least 2")
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        if running is not None:
            running.mean = momentum * running.mean + (1 - momentum) * mean
            running.var = momentum * running.var + (1 - momentum) * var
    elif mode == "infer":
        if running is None:
            mean, var = np.zeros(c), np.ones(c)
        else:
            mean, var = running.mean, running.var
    else:
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean.reshape(bshape)) * inv.reshape(bshape)
    y = gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)
    m = x.size // c

    def back(g):
        gg = (g * xhat).sum(axis=axes)
        gb = g.sum(axis=axes)
        gxhat = g * gamma.data.reshape(bshape)
        if mode == "train":
            gx = (inv.reshape(bshape) / m) * (
                m * gxhat - gxhat.sum(axis=axes).reshape(bshape) - xhat * (gxhat * xhat).sum(axis=axes).reshape(bshape)
            )
        else:
            gx = gxhat * inv.reshape(bshape)
        return gx, gg, gb

    return make_result("batchnorm", y, (x, gamma, beta), back)


def dropout(input, rate: float = 0.25, seed=None, mode: str = "train") -> Tensor:
    """Inverted dropout. ``seed`` may be an int or a ``numpy.random.Generator``."""
    x = as_tensor(input)
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if mode == "infer" or rate == 0:
        return x
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return make_result("dropout", x.data * mask, (x,), lambda g: (g * mask,))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_crossentropy(logits, target) -> Tensor:
    """Mean cross-entropy against (possibly soft) target distributions."""
    logits = as_tensor(logits)
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if t.shape != logits.shape:
        raise ShapeError(f"target {t.shape} vs logits {logits.shape}")
    if np.any(t < 0) or not np.allclose(t.sum(axis=-1), 1.0, atol=1e-6):
        raise ValidationError("target rows must be probability distributions summing to 1")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    n = logits.shape[0] if logits.ndim == 2 else 1
    loss = -(t * logp).sum() / n
    return make_result("xent", np.asarray(loss), (logits,), lambda g: (g * (np.exp(logp) - t) / n,))


def mse(pred, target) -> Tensor:
    pred = as_tensor(pred)
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if t.shape != pred.shape:
        raise ShapeError(f"target {t.shape} vs prediction {pred.shape}")
    d = pred.data - t
    return make_result("mse", np.asarray((d * d).mean()), (pred,), lambda g: (g * 2.0 * d / d.size,))


def sgd_l2_step(weights, gradient, eta: float = 0.01, lam: float = 1e-4) -> np.ndarray:
    """One SGD step with L2 weight decay: ``w - eta*g - eta*2*lam*w``.

    Returns the new weights; when ``weights`` is a :class:`Tensor` its data is
    replaced in place as well.
    """
    if eta <= 0 or lam < 0:
        raise ValueError(f"need eta > 0 and lambda >= 0, got eta={eta}, lambda={lam}")
    w = weights.data if isinstance(weights, Tensor) else np.asarray(weights, dtype=np.float64)
    g = np.asarray(gradient, dtype=np.float64)
    if not np.all(np.isfinite(g)):
        raise NumericError("non-finite gradient; step refused")
    new = w - eta * g - eta * 2.0 * lam * w
    if isinstance(weights, Tensor):
        weights.data = new
    return new


def output_length(n: int, k: int, stride: int = 1, padding: int = 0) -> int:
    return (n + 2 * padding - k) // stride + 1


def check_rank(x: Tensor, expected: Sequence[int], what: str) -> None:
    if tuple(x.shape) != tuple(expected):
        raise ShapeError(f"{what}: expected shape {tuple(expected)}, got {x.shape}")

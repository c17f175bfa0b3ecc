"""Central finite-difference verification of tape gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor

DEFAULT_EPS = 1e-5
# keeps relative error meaningful where the true gradient is ~0
ABS_FLOOR = 1e-6


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = ABS_FLOOR) -> np.ndarray:
    a, n = np.asarray(analytic), np.asarray(numeric)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def finite_diff_check(
    fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = DEFAULT_EPS,
    max_probes: int | None = None,
    seed: int = 0,
) -> float:
    """Worst relative error between reverse-mode and central-difference gradients.

    ``fn`` rebuilds the scalar loss from the current values of ``params``
    each time it is called. With ``max_probes`` set, only that many randomly
    chosen coordinates per parameter are perturbed.
    """
    for p in params:
        p.requires_grad = True
    with Tape() as tape:
        loss = fn()
    tape.backward(loss)
    # a parameter the loss never touched has a zero gradient
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_probes is not None and flat.size > max_probes:
            idx = np.sort(rng.choice(flat.size, max_probes, replace=False))
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            up = float(fn().data)
            flat[i] = orig - eps
            down = float(fn().data)
            flat[i] = orig
            num = (up - down) / (2 * eps)
            worst = max(worst, float(relative_error(ga.reshape(-1)[i], num)))
    return worst


THRESHOLD = 1e-4


class _Readout:
    """Fixed random linear read-out, so every output coordinate matters."""

    def __init__(self, seed: int):
        self.rng = np.random.default_rng(seed)
        self.weights: dict[str, np.ndarray] = {}

    def __call__(self, key: str, t: Tensor) -> Tensor:
        from .tensor import mul, tsum
        if key not in self.weights:
            self.weights[key] = self.rng.normal(size=t.shape)
        return tsum(mul(t, self.weights[key]))


def layer_cases(seed: int = 0) -> dict[str, tuple[Callable[[], Tensor], list[Tensor]]]:
    """Small randomized losses over each differentiable operation."""
    from . import layers as L
    from .tensor import tanh

    rng = np.random.default_rng(seed)

    def T(*shape, s=1.0):
        return Tensor(rng.normal(size=shape) * s)

    cases = {}
    x, k, b = Tensor(rng.random((2, 1, 4, 6, 6))), T(2, 1, 2, 3, 3, s=0.5), T(2, s=0.1)
    r = _Readout(seed + 1)
    cases["conv3d"] = (lambda: r("conv3d", L.conv3d_forward(x, k, b, stride=(1, 2, 1), padding=1)), [x, k, b])
    x1, k1, b1 = T(2, 3, 7, 9), T(4, 3, 1, 3, s=0.5), T(4, s=0.1)
    cases["conv1d"] = (lambda: r("conv1d", L.conv1d_forward(x1, k1, b1)), [x1, k1, b1])
    xp = T(2, 2, 6, 6)
    cases["pool"] = (lambda: r("pool", L.pool_max(xp, 2, 2, dims=2)), [xp])
    xs = Tensor(rng.random((2, 2, 2, 5, 5)))
    wu, bu, wi, bi = T(2, 2, 1, 2, 2, s=0.5), T(2, s=0.1), T(2, 2, 1, 2, 2, s=0.5), Tensor(np.full(2, 0.1))
    cases["shunting"] = (lambda: r("shunting", L.shunting_layer(xs, wu, bu, wi, bi, 1.0)), [xs, wu, bu, wi, bi])
    xf, wf, bf = T(3, 6), T(4, 6, s=0.5), T(4, s=0.1)
    for act in ("linear", "relu", "tanh", "sigmoid"):
        cases[f"fc_{act}"] = (lambda act=act: r(act, L.fc_forward(xf, wf, bf, act)), [xf, wf, bf])
    xb, g, be = T(4, 3, 5), Tensor(rng.uniform(0.5, 1.5, 3)), T(3, s=0.1)
    cases["batchnorm"] = (lambda: r("bn", L.batchnorm_forward(xb, g, be, "train")), [xb, g, be])
    logits = T(4, 7)
    target = rng.dirichlet(np.ones(7), 4)
    cases["softmax_crossentropy"] = (lambda: L.softmax_crossentropy(logits, target), [logits])
    pred, ref = T(4, 2), rng.normal(size=(4, 2))
    cases["mse"] = (lambda: L.mse(tanh(pred), ref), [pred])
    return cases


def model_case(seed: int = 0, profile: str = "desk", batch: int = 2):
    """Loss of the full stacked network (both channels, cross-channel, regressor)."""
    from . import layers as L
    from .cccnn import CCCNN, PROFILES, Head
    from .tensor import concat

    cfg = PROFILES[profile]
    model = CCCNN(cfg, seed=seed)
    rng = np.random.default_rng(seed + 7)
    model.regressor = Head(cfg.joint_dim, {"arousal": (1, "tanh"), "valence": (1, "tanh")}, rng, hidden=8)
    clips = rng.random((batch, cfg.depth, cfg.frame_size, cfg.frame_size))
    mfccs = rng.normal(size=(batch, cfg.n_mfcc, cfg.n_time))
    target = rng.uniform(-0.5, 0.5, (batch, 2))
    # zero biases put ReLUs exactly on their kink (e.g. an all-zero map after
    # batch norm over two samples), where only one-sided slopes exist
    for name, t in model.named_params():
        if name.endswith((".b", ".bu", ".bi", ".beta")):
            t.data[...] = rng.normal(0.0, 0.1, t.data.shape)

    def loss():
        out = model.forward(clips, mfccs, mode="train", rng=np.random.default_rng(0))
        h = model.regress(out.joint)
        return L.mse(concat([h["arousal"], h["valence"]], axis=-1), target)

    return loss, [t for _, t in model.named_params()]


def gradient_suite(seed: int = 0, profile: str = "desk", max_probes: int = 3) -> list[tuple[str, float]]:
    """Worst relative error per operation, then for the whole ``profile`` model."""
    rows = [(name, finite_diff_check(fn, params, eps=1e-6, seed=seed))
            for name, (fn, params) in layer_cases(seed).items()]
    fn, params = model_case(seed, profile)
    rows.append((f"model_{profile}", finite_diff_check(fn, params, eps=1e-6, max_probes=max_probes, seed=seed)))
    return rows

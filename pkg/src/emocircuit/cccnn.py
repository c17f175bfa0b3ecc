"""Cross-channel convolutional network: visual and auditory channels joined by
a cross-channel whose output feeds back into each channel's last layer.

Each channel splits at its last convolution. ``front`` runs everything before
it and yields the pre-last activation ``C_x``; ``back`` runs the last layer
(and whatever follows it) on ``M = C_x + gamma * Cc``, where ``Cc`` is the
cross-channel feedback reshaped to ``C_x``'s shape. With ``gamma = 0`` the
channel is exactly its unisensory self.

Everything is batched: clips are ``(B, 1, D, H, W)``, MFCC maps ``(B, 26, T)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import layers as L
from .errors import ShapeError, ValidationError
from .tensor import Tape, Tensor, add, concat, flatten, reshape, scale, stack

log = logging.getLogger(__name__)

GAMMA_VISUAL = 0.7
GAMMA_AUDITORY = 0.4
PROJ_SIDE = 10  # 100-unit projection reshaped to 10 x 10
CROSS_FILTERS = 8
HEAD_HIDDEN = 200
N_CLASSES = 7


# ---------------------------------------------------------------------------
# channel specs


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # "conv", "shunt" or "pool"
    filters: int = 0
    kernel: tuple[int, ...] = ()
    padding: tuple[int, ...] = ()
    window: tuple[int, ...] = ()

    def label(self, i: int) -> str:
        if self.kind == "pool":
            return f"{i}:pool{'x'.join(map(str, self.window))}"
        return f"{i}:{self.kind}{self.filters}"


@dataclass(frozen=True)
class ChannelSpec:
    name: str
    in_channels: int
    input_shape: tuple[int, ...]  # spatial extents, without the channel axis
    layers: tuple[LayerSpec, ...]
    batchnorm: bool = False
    dropout: float = 0.25
    passive_decay: float = 1.0

    @property
    def dims(self) -> int:
        return len(self.input_shape)

    @property
    def last_index(self) -> int:
        return max(i for i, l in enumerate(self.layers) if l.kind in ("conv", "shunt"))

    @property
    def n_conv(self) -> int:
        return sum(l.kind in ("conv", "shunt") for l in self.layers)

    @property
    def n_pool(self) -> int:
        return sum(l.kind == "pool" for l in self.layers)

    def shape_table(self) -> list[tuple[str, tuple[int, ...]]]:
        """Output shape after every layer, by convolution arithmetic alone."""
        c, sp = self.in_channels, list(self.input_shape)
        rows = []
        for i, l in enumerate(self.layers):
            if l.kind == "pool":
                sp = [L.output_length(n, w, w) for n, w in zip(sp, l.window)]
            else:
                sp = [L.output_length(n, k, 1, p) for n, k, p in zip(sp, l.kernel, l.padding)]
                c = l.filters
            if min(sp) < 1:
                raise ShapeError(f"{self.name} layer {l.label(i)} leaves an empty axis: {sp}")
            rows.append((l.label(i), (c, *sp)))
        return rows

    @property
    def pre_last_shape(self) -> tuple[int, ...]:
        i = self.last_index
        return self.shape_table()[i - 1][1] if i else (self.in_channels, *self.input_shape)

    @property
    def output_shape(self) -> tuple[int, ...]:
        return self.shape_table()[-1][1]


def _pool_window(extent: Sequence[int], first: bool) -> tuple[int, ...]:
    # the first pool keeps the temporal axis; later ones halve every axis that can be halved
    return tuple(1 if (first and i == 0) or n < 2 else 2 for i, n in enumerate(extent))


def visual_spec(frame_size: int = 128, depth: int = 9,
                widths: Sequence[int] = (32, 32, 64, 64, 128, 128, 128, 256, 256, 256),
                kernel: int = 3, dropout: float = 0.25) -> ChannelSpec:
    """VGG-style 2-2-3-3 blocks of 3-D convolutions, a pool after each block.

    Convolutions are zero-padded so the 9-frame axis survives all four blocks;
    the tenth convolution is the shunting layer.
    """
    if len(widths) != 10:
        raise ValidationError(f"visual channel needs 10 widths, got {len(widths)}")
    blocks = [2, 2, 3, 3]
    layers, sp, k = [], [depth, frame_size, frame_size], 0
    pad = (kernel // 2,) * 3
    for b, n in enumerate(blocks):
        for _ in range(n):
            kind = "shunt" if k == 9 else "conv"
            layers.append(LayerSpec(kind, widths[k], (kernel,) * 3, pad))
            k += 1
        win = _pool_window(sp, b == 0)
        layers.append(LayerSpec("pool", window=win))
        sp = [s // w for s, w in zip(sp, win)]
    return ChannelSpec("visual", 1, (depth, frame_size, frame_size), tuple(layers), batchnorm=True, dropout=dropout)


def auditory_spec(n_mfcc: int = 26, n_time: int = 35, widths: Sequence[int] = (16, 32, 64),
                  kernel: int = 3, padding: int = 0, dropout: float = 0.25) -> ChannelSpec:
    """Three 1-D convolutions along time (coefficients as input maps), each pooled by 2."""
    if len(widths) != 3:
        raise ValidationError(f"auditory channel needs 3 widths, got {len(widths)}")
    layers, t = [], n_time
    for w in widths:
        layers.append(LayerSpec("conv", w, (kernel,), (padding,)))
        t = L.output_length(t, kernel, 1, padding)
        win = 2 if t >= 2 else 1
        layers.append(LayerSpec("pool", window=(win,)))
        t //= win
    return ChannelSpec("auditory", n_mfcc, (n_time,), tuple(layers), batchnorm=True, dropout=dropout)


# ---------------------------------------------------------------------------
# parameters


def _he(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, gain: float = 1.0) -> Tensor:
    return Tensor(rng.normal(0.0, gain * np.sqrt(2.0 / fan_in), shape))


class Module:
    """Named parameters in insertion order, plus non-trainable buffers."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, L.RunningStats] = {}

    def param_items(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        return [(prefix + k, v) for k, v in self.params.items()]

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {k: v.data for k, v in self.params.items()}
        for k, rs in self.buffers.items():
            out[f"{k}.running_mean"] = rs.mean
            out[f"{k}.running_var"] = rs.var
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, v in self.params.items():
            a = np.asarray(arrays[k], dtype=np.float64)
            if a.shape != v.shape:
                raise ShapeError(f"parameter {k}: stored {a.shape}, model expects {v.shape}")
            v.data = a.copy()
        for k, rs in self.buffers.items():
            rs.mean = np.asarray(arrays[f"{k}.running_mean"], dtype=np.float64).copy()
            rs.var = np.asarray(arrays[f"{k}.running_var"], dtype=np.float64).copy()


class Channel(Module):
    def __init__(self, spec: ChannelSpec, rng: np.random.Generator):
        super().__init__()
        self.spec = spec
        c = spec.in_channels
        for i, l in enumerate(spec.layers):
            if l.kind == "pool":
                continue
            fan_in = c * int(np.prod(l.kernel))
            shape = (l.filters, c, *l.kernel)
            if l.kind == "shunt":
                self.params[f"l{i}.wu"] = _he(rng, shape, fan_in)
                self.params[f"l{i}.bu"] = Tensor(np.zeros(l.filters))
                self.params[f"l{i}.wi"] = _he(rng, shape, fan_in, gain=0.1)
                self.params[f"l{i}.bi"] = Tensor(np.zeros(l.filters))
            else:
                self.params[f"l{i}.w"] = _he(rng, shape, fan_in)
                if self._normalized(i):
                    # batch norm subtracts the mean, so beta stands in for the bias
                    self.params[f"l{i}.gamma"] = Tensor(np.ones(l.filters))
                    self.params[f"l{i}.beta"] = Tensor(np.zeros(l.filters))
                    self.buffers[f"l{i}"] = L.RunningStats(l.filters)
                else:
                    self.params[f"l{i}.b"] = Tensor(np.zeros(l.filters))
            c = l.filters
        log.debug("%s shape table: %s", spec.name, spec.shape_table())

    def _normalized(self, i: int) -> bool:
        return self.spec.batchnorm and i != self.spec.last_index

    def last_layer_params(self) -> list[str]:
        return [k for k in self.params if k.startswith(f"l{self.spec.last_index}.")]

    def _layer(self, i: int, x: Tensor, mode: str, rng) -> Tensor:
        l, p = self.spec.layers[i], self.params
        if l.kind == "pool":
            y = L.pool_max(x, l.window, dims=self.spec.dims)
            if self.spec.dropout and mode == "train":
                y = L.dropout(y, self.spec.dropout, rng, mode)
            return y
        if l.kind == "shunt":
            return L.shunting_layer(x, p[f"l{i}.wu"], p[f"l{i}.bu"], p[f"l{i}.wi"], p[f"l{i}.bi"],
                                    self.spec.passive_decay, padding=l.padding)
        y = L.conv(x, p[f"l{i}.w"], p.get(f"l{i}.b"), padding=l.padding)
        if self._normalized(i):
            y = L.batchnorm_forward(y, p[f"l{i}.gamma"], p[f"l{i}.beta"], mode, self.buffers[f"l{i}"])
        return L.relu(y)

    def _check_input(self, x: Tensor) -> None:
        want = (self.spec.in_channels, *self.spec.input_shape)
        if tuple(x.shape[1:]) != want:
            raise ShapeError(f"{self.spec.name} channel expects (B, {', '.join(map(str, want))}), got {x.shape}")

    def front(self, x, mode: str = "infer", rng=None) -> Tensor:
        """Layers before the last convolution; returns the pre-last activation."""
        x = x if isinstance(x, Tensor) else Tensor(x)
        self._check_input(x)
        for i in range(self.spec.last_index):
            x = self._layer(i, x, mode, rng)
        return x

    def back(self, m: Tensor, mode: str = "infer", rng=None) -> Tensor:
        """The last convolution and everything after it, applied to ``M``."""
        for i in range(self.spec.last_index, len(self.spec.layers)):
            m = self._layer(i, m, mode, rng)
        return m

    def forward(self, x, mode: str = "infer", rng=None) -> tuple[Tensor, Tensor]:
        """Standalone (unisensory) pass: ``(features, pre_last_activation)``."""
        pre = self.front(x, mode, rng)
        return self.back(pre, mode, rng), pre

    def layer_shapes(self, x) -> list[tuple[int, ...]]:
        """Actual per-layer output shapes of one infer pass (batch axis dropped)."""
        x = x if isinstance(x, Tensor) else Tensor(x)
        self._check_input(x)
        shapes = []
        for i in range(len(self.spec.layers)):
            x = self._layer(i, x, "infer", None)
            shapes.append(tuple(x.shape[1:]))
        return shapes


def _size(shape) -> int:
    return int(np.prod(shape))


class CrossChannel(Module):
    """Projections to 10x10 maps, a padded 8-filter 3x3 convolution, and one
    feedback projection per channel back to its pre-last shape. Also holds
    the joint (fusion) layer over both channels' outputs."""

    def __init__(self, vspec: ChannelSpec, aspec: ChannelSpec, joint_dim: int, rng: np.random.Generator):
        super().__init__()
        self.vshape, self.ashape = vspec.pre_last_shape, aspec.pre_last_shape
        self.vout, self.aout = _size(vspec.output_shape), _size(aspec.output_shape)
        n = PROJ_SIDE * PROJ_SIDE
        hidden = CROSS_FILTERS * n
        p = self.params
        p["proj_v.w"] = _he(rng, (n, _size(self.vshape)), _size(self.vshape))
        p["proj_v.b"] = Tensor(np.zeros(n))
        p["proj_a.w"] = _he(rng, (n, _size(self.ashape)), _size(self.ashape))
        p["proj_a.b"] = Tensor(np.zeros(n))
        p["conv.w"] = _he(rng, (CROSS_FILTERS, 2, 3, 3), 18)
        p["conv.b"] = Tensor(np.zeros(CROSS_FILTERS))
        # feedback starts small so an untrained cross-channel barely perturbs the channels
        p["fb_v.w"] = _he(rng, (_size(self.vshape), hidden), hidden, gain=0.1)
        p["fb_v.b"] = Tensor(np.zeros(_size(self.vshape)))
        p["fb_a.w"] = _he(rng, (_size(self.ashape), hidden), hidden, gain=0.1)
        p["fb_a.b"] = Tensor(np.zeros(_size(self.ashape)))
        p["joint.w"] = Tensor(rng.normal(0.0, np.sqrt(1.0 / (self.vout + self.aout)), (joint_dim, self.vout + self.aout)))
        p["joint.b"] = Tensor(np.zeros(joint_dim))
        self.joint_dim = joint_dim


@dataclass
class CrossOutput:
    visual_features: Tensor | None
    auditory_features: Tensor | None
    joint: Tensor
    visual_present: bool
    audio_present: bool
    # instrumentation: feedback Cc, pre-last C_x and last-layer input M per channel
    cc: dict = field(default_factory=dict)
    cx: dict = field(default_factory=dict)
    m: dict = field(default_factory=dict)


class Head(Module):
    """``hidden`` ReLU units, then named linear outputs sharing that hidden layer."""

    def __init__(self, in_dim: int, outputs: dict[str, tuple[int, str]], rng: np.random.Generator, hidden: int = HEAD_HIDDEN):
        super().__init__()
        self.outputs = dict(outputs)
        self.params["hidden.w"] = _he(rng, (hidden, in_dim), in_dim)
        self.params["hidden.b"] = Tensor(np.zeros(hidden))
        for name, (width, _) in self.outputs.items():
            self.params[f"{name}.w"] = Tensor(rng.normal(0.0, np.sqrt(1.0 / hidden), (width, hidden)))
            self.params[f"{name}.b"] = Tensor(np.zeros(width))

    def __call__(self, x: Tensor) -> dict[str, Tensor]:
        h = L.fc_forward(x, self.params["hidden.w"], self.params["hidden.b"], "relu")
        return {name: L.fc_forward(h, self.params[f"{name}.w"], self.params[f"{name}.b"], act)
                for name, (_, act) in self.outputs.items()}


# ---------------------------------------------------------------------------
# the assembled network


@dataclass(frozen=True)
class CccnnConfig:
    frame_size: int = 128
    depth: int = 9
    visual_widths: tuple[int, ...] = (32, 32, 64, 64, 128, 128, 128, 256, 256, 256)
    n_mfcc: int = 26
    n_time: int = 35
    auditory_widths: tuple[int, ...] = (16, 32, 64)
    auditory_padding: int = 0
    joint_dim: int = 100
    dropout: float = 0.25
    gamma_visual: float = GAMMA_VISUAL
    gamma_auditory: float = GAMMA_AUDITORY


PROFILES = {
    "full": CccnnConfig(),
    # 16x16 frames and narrow layers, same topology; dropout off because at
    # these widths it shifts the batch-norm statistics between train and infer
    "desk": CccnnConfig(frame_size=16, visual_widths=(4, 4, 8, 8, 8, 8, 8, 16, 16, 16),
                        auditory_widths=(8, 16, 16), joint_dim=32, dropout=0.0),
    # for end-to-end gradient checks: 2-frame 8x8 clips, 4x6 MFCCs
    "tiny": CccnnConfig(frame_size=8, depth=2, visual_widths=(2,) * 10, n_mfcc=4, n_time=6,
                        auditory_widths=(2, 2, 2), auditory_padding=1, joint_dim=3),
}


class CCCNN:
    def __init__(self, config: CccnnConfig = PROFILES["full"], seed: int = 0):
        for g in (config.gamma_visual, config.gamma_auditory):
            if not 0.0 <= g <= 1.0:
                raise ValidationError(f"gamma must lie in [0, 1], got {g}")
        self.config = config
        rng = np.random.default_rng(seed)
        self.visual = Channel(visual_spec(config.frame_size, config.depth, config.visual_widths,
                                          dropout=config.dropout), rng)
        self.auditory = Channel(auditory_spec(config.n_mfcc, config.n_time, config.auditory_widths,
                                              padding=config.auditory_padding, dropout=config.dropout), rng)
        self.cross = CrossChannel(self.visual.spec, self.auditory.spec, config.joint_dim, rng)
        self.visual_head: Head | None = None
        self.auditory_head: Head | None = None
        self.regressor: Head | None = None
        self.trained = {"visual": False, "auditory": False, "cross": False}

    @property
    def gammas(self) -> tuple[float, float]:
        return self.config.gamma_visual, self.config.gamma_auditory

    def modules(self) -> dict[str, Module]:
        mods = {"visual": self.visual, "auditory": self.auditory, "cross": self.cross}
        for name in ("visual_head", "auditory_head", "regressor"):
            if getattr(self, name) is not None:
                mods[name] = getattr(self, name)
        return mods

    def named_params(self) -> list[tuple[str, Tensor]]:
        return [item for name, m in self.modules().items() for item in m.param_items(name + ".")]

    # -- forward

    def cross_forward(self, pre_v: Tensor | None, pre_a: Tensor | None, gamma_v: float | None = None,
                      gamma_a: float | None = None, mode: str = "infer", rng=None) -> CrossOutput:
        """Feedback modulation: each channel's last layer sees ``M = C_x + gamma * Cc``.

        A missing channel contributes a zero 10x10 map, its gamma is forced to
        0 and its last layer is bypassed (its joint-layer slot is zero).
        """
        if pre_v is None and pre_a is None:
            raise ValidationError("cross_forward needs at least one modality")
        gv = self.config.gamma_visual if gamma_v is None else gamma_v
        ga = self.config.gamma_auditory if gamma_a is None else gamma_a
        if pre_v is None:
            gv = 0.0
        if pre_a is None:
            ga = 0.0
        p = self.cross.params
        ref = pre_v if pre_v is not None else pre_a
        batch = ref.shape[0]
        zeros = Tensor(np.zeros((batch, PROJ_SIDE, PROJ_SIDE)))

        def project(pre, key):
            if pre is None:
                return zeros
            h = L.fc_forward(flatten(pre), p[f"{key}.w"], p[f"{key}.b"], "tanh")
            return reshape(h, (batch, PROJ_SIDE, PROJ_SIDE))

        stacked = stack([project(pre_v, "proj_v"), project(pre_a, "proj_a")], axis=1)  # (B, 2, 10, 10)
        hidden = flatten(L.relu(L.conv(stacked, p["conv.w"], p["conv.b"], padding=1)))
        out = CrossOutput(None, None, zeros, pre_v is not None, pre_a is not None)
        parts = []
        for key, pre, gamma, chan, width in (("v", pre_v, gv, self.visual, self.cross.vout),
                                             ("a", pre_a, ga, self.auditory, self.cross.aout)):
            if pre is None:
                parts.append(Tensor(np.zeros((batch, width))))
                continue
            cc = reshape(L.fc_forward(hidden, p[f"fb_{key}.w"], p[f"fb_{key}.b"]), pre.shape)
            m = add(pre, scale(cc, gamma))
            feats = chan.back(m, mode, rng)
            out.cc[key], out.cx[key], out.m[key] = cc, pre, m
            if key == "v":
                out.visual_features = feats
            else:
                out.auditory_features = feats
            parts.append(flatten(feats))
        out.joint = L.fc_forward(concat(parts, axis=-1), p["joint.w"], p["joint.b"], "tanh")
        return out

    def forward(self, clips=None, mfccs=None, mode: str = "infer", rng=None,
                gamma_v: float | None = None, gamma_a: float | None = None) -> CrossOutput:
        """Full pass on batches; either input may be None."""
        pre_v = self.visual.front(_batch_visual(clips), mode, rng) if clips is not None else None
        pre_a = self.auditory.front(_batch_audio(mfccs), mode, rng) if mfccs is not None else None
        return self.cross_forward(pre_v, pre_a, gamma_v, gamma_a, mode, rng)

    def features(self, clip=None, mfcc=None) -> np.ndarray:
        """Joint expression representation of one event (infer mode)."""
        clips = None if clip is None else np.asarray(clip)[None]
        mfccs = None if mfcc is None else np.asarray(mfcc)[None]
        return self.forward(clips, mfccs).joint.data[0].copy()

    def features_batch(self, clips=None, mfccs=None, batch_size: int = 64) -> np.ndarray:
        n = len(clips) if clips is not None else len(mfccs)
        out = []
        for s in range(0, n, batch_size):
            c = None if clips is None else np.asarray(clips[s:s + batch_size])
            m = None if mfccs is None else np.asarray(mfccs[s:s + batch_size])
            out.append(self.forward(c, m).joint.data)
        return np.concatenate(out) if out else np.zeros((0, self.cross.joint_dim))

    def regress(self, joint: Tensor) -> dict[str, Tensor]:
        if self.regressor is None:
            raise ValidationError("model has no regression head; run the crossmodal fine-tuning first")
        return self.regressor(joint)

    # -- state

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {f"{name}.{k}": v for name, m in self.modules().items() for k, v in m.state_arrays().items()}


def _batch_visual(clips) -> Tensor:
    x = np.asarray(clips, dtype=np.float64)
    if x.ndim == 4:  # (B, D, H, W) -> add the single grey channel
        x = x[:, None]
    return Tensor(x)


def _batch_audio(mfccs) -> Tensor:
    return Tensor(np.asarray(mfccs, dtype=np.float64))


def with_gammas(config: CccnnConfig, gamma_v: float, gamma_a: float) -> CccnnConfig:
    return replace(config, gamma_visual=gamma_v, gamma_auditory=gamma_a)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainParams:
    epochs: int = 20
    batch_size: int = 16
    eta: float = 0.01
    lam: float = 1e-4
    seed: int = 0
    augment: bool = True
    max_shift: int = 1
    max_rotation: float = 8.0  # degrees
    anneal: bool = False  # decay eta linearly towards 0 over the epochs

    def eta_at(self, epoch: int) -> float:
        return self.eta * (1.0 - epoch / self.epochs) if self.anneal else self.eta


def split_indices(n: int, seed: int, fractions=(0.7, 0.15, 0.15)) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Seeded 70/15/15 train/validation/test split."""
    if n == 0:
        raise ValidationError("cannot split an empty dataset")
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(np.floor(fractions[0] * n + 1e-9))
    n_val = int(np.floor(fractions[1] * n + 1e-9))
    return perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:]


def augment_clip(clip: np.ndarray, rng: np.random.Generator, max_shift: int, max_rotation: float) -> np.ndarray:
    """Random translation and in-plane rotation (nearest neighbour, zero fill) of every frame alike."""
    d, h, w = clip.shape
    angle = np.deg2rad(rng.uniform(-max_rotation, max_rotation))
    dy, dx = rng.integers(-max_shift, max_shift + 1, size=2)
    yy, xx = np.mgrid[0:h, 0:w]
    cy, cx = (h - 1) / 2, (w - 1) / 2
    c, s = np.cos(angle), np.sin(angle)
    sy = np.rint(c * (yy - cy - dy) + s * (xx - cx - dx) + cy).astype(int)
    sx = np.rint(-s * (yy - cy - dy) + c * (xx - cx - dx) + cx).astype(int)
    ok = (sy >= 0) & (sy < h) & (sx >= 0) & (sx < w)
    out = np.zeros_like(clip)
    out[:, ok] = clip[:, sy[ok], sx[ok]]
    return out


def _sgd(params: Sequence[Tensor], hp: TrainParams, epoch: int) -> None:
    eta = hp.eta_at(epoch)
    for t in params:
        L.sgd_l2_step(t, t.grad if t.grad is not None else np.zeros_like(t.data), eta, hp.lam)


def _as_distributions(labels, n_classes: int = N_CLASSES) -> np.ndarray:
    y = np.asarray(labels)
    if y.ndim == 1:
        y = np.eye(n_classes)[y.astype(int)]
    y = y.astype(np.float64)
    if np.any(y < 0) or not np.allclose(y.sum(axis=1), 1.0, atol=1e-6):
        raise ValidationError("labels must be class indices or distributions summing to 1")
    return y


def _train_unimodal(model: CCCNN, which: str, inputs: np.ndarray, labels, hp: TrainParams,
                    val: tuple | None = None) -> dict:
    if len(inputs) == 0:
        raise ValidationError("empty training set")
    chan = model.visual if which == "visual" else model.auditory
    targets = _as_distributions(labels)
    rng = np.random.default_rng(hp.seed)
    head = Head(_size(chan.spec.output_shape), {"logits": (N_CLASSES, "linear")}, rng)
    setattr(model, f"{which}_head", head)
    params = [t for _, t in chan.param_items()] + [t for _, t in head.param_items()]
    for t in params:
        t.requires_grad = True
    batcher = _batch_visual if which == "visual" else _batch_audio
    report = {"loss": [], "train_accuracy": [], "val_accuracy": []}
    n = len(inputs)
    try:
        for epoch in range(hp.epochs):
            order = rng.permutation(n)
            total, hits = 0.0, 0
            for s in range(0, n, hp.batch_size):
                idx = order[s:s + hp.batch_size]
                if len(idx) < 2 and chan.spec.batchnorm:
                    continue  # batch norm needs two samples
                x = np.asarray(inputs[idx], dtype=np.float64)
                if which == "visual" and hp.augment:
                    x = np.stack([augment_clip(c, rng, hp.max_shift, hp.max_rotation) for c in x])
                with Tape() as tape:
                    feats, _ = chan.forward(batcher(x), "train", rng)
                    logits = head(flatten(feats))["logits"]
                    loss = L.softmax_crossentropy(logits, targets[idx])
                tape.backward(loss)
                _sgd(params, hp, epoch)
                total += float(loss.data) * len(idx)
                hits += int(np.sum(logits.data.argmax(1) == targets[idx].argmax(1)))
            report["loss"].append(total / n)
            report["train_accuracy"].append(hits / n)
            if val is not None:
                report["val_accuracy"].append(unimodal_accuracy(model, which, *val))
    finally:
        for t in params:
            t.requires_grad = False
    model.trained[which] = True
    report["final_train_accuracy"] = unimodal_accuracy(model, which, inputs, labels)
    return report


def unimodal_predict(model: CCCNN, which: str, inputs, batch_size: int = 64) -> np.ndarray:
    chan = model.visual if which == "visual" else model.auditory
    head = getattr(model, f"{which}_head")
    if head is None:
        raise ValidationError(f"{which} channel has no classification head yet")
    batcher = _batch_visual if which == "visual" else _batch_audio
    out = []
    for s in range(0, len(inputs), batch_size):
        feats, _ = chan.forward(batcher(np.asarray(inputs[s:s + batch_size])), "infer")
        out.append(L.softmax(head(flatten(feats))["logits"].data))
    return np.concatenate(out)


def unimodal_accuracy(model: CCCNN, which: str, inputs, labels) -> float:
    pred = unimodal_predict(model, which, inputs).argmax(1)
    return float(np.mean(pred == _as_distributions(labels).argmax(1)))


def train_unimodal_visual(model: CCCNN, clips, labels, hp: TrainParams = TrainParams(), val=None) -> dict:
    """Visual channel + 200-unit hidden layer + softmax, on (clip, 7-way distribution) pairs."""
    return _train_unimodal(model, "visual", np.asarray(clips, dtype=np.float64), labels, hp, val)


def train_unimodal_auditory(model: CCCNN, mfccs, labels, hp: TrainParams = TrainParams(), val=None) -> dict:
    return _train_unimodal(model, "auditory", np.asarray(mfccs, dtype=np.float64), labels,
                           replace(hp, augment=False), val)


def trainable_for_finetune(model: CCCNN) -> list[str]:
    """Names that fine-tuning may change: cross-channel, joint layer, the channels' last layers, the regressor."""
    names = [f"visual.{k}" for k in model.visual.last_layer_params()]
    names += [f"auditory.{k}" for k in model.auditory.last_layer_params()]
    names += [f"cross.{k}" for k in model.cross.params]
    if model.regressor is not None:
        names += [f"regressor.{k}" for k in model.regressor.params]
    return names


def train_crossmodal_finetune(model: CCCNN, clips, mfccs, arousal, valence, hp: TrainParams = TrainParams()) -> dict:
    """Fine-tune the cross-channel and last layers on (arousal, valence) with MSE.

    The channels' earlier layers are frozen, so their pre-last activations
    are computed once, in infer mode.
    """
    if not (model.trained["visual"] and model.trained["auditory"]):
        raise ValidationError("both channels must be pre-trained before crossmodal fine-tuning")
    n = len(clips)
    if n == 0 or len(mfccs) != n or len(arousal) != n or len(valence) != n:
        raise ValidationError("fine-tuning needs equally many clips, MFCC maps, arousal and valence values")
    rng = np.random.default_rng(hp.seed)
    model.regressor = Head(model.cross.joint_dim, {"arousal": (1, "tanh"), "valence": (1, "tanh")}, rng)
    pre_v = np.concatenate([model.visual.front(_batch_visual(np.asarray(clips[s:s + 64]))).data for s in range(0, n, 64)])
    pre_a = np.concatenate([model.auditory.front(_batch_audio(np.asarray(mfccs[s:s + 64]))).data for s in range(0, n, 64)])
    target = np.stack([np.asarray(arousal, float), np.asarray(valence, float)], axis=1)
    named = dict(model.named_params())
    params = [named[k] for k in trainable_for_finetune(model)]
    for t in params:
        t.requires_grad = True
    report = {"loss": []}
    try:
        for epoch in range(hp.epochs):
            order = rng.permutation(n)
            total = 0.0
            for s in range(0, n, hp.batch_size):
                idx = order[s:s + hp.batch_size]
                with Tape() as tape:
                    out = model.cross_forward(Tensor(pre_v[idx]), Tensor(pre_a[idx]), mode="train", rng=rng)
                    heads = model.regressor(out.joint)
                    pred = concat([heads["arousal"], heads["valence"]], axis=-1)
                    loss = L.mse(pred, target[idx])
                tape.backward(loss)
                _sgd(params, hp, epoch)
                total += float(loss.data) * len(idx)
            report["loss"].append(total / n)
    finally:
        for t in params:
            t.requires_grad = False
    model.trained["cross"] = True
    return report


def predict_av_model(model: CCCNN, clips=None, mfccs=None) -> np.ndarray:
    """Direct (arousal, valence) regression through the fine-tuned network."""
    out = model.forward(clips, mfccs)
    h = model.regress(out.joint)
    return np.concatenate([h["arousal"].data, h["valence"].data], axis=1)

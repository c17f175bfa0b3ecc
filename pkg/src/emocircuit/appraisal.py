"""Perception, per-subject affective memories and the mood.

An event flows through the CCCNN into the Perception GWR; MLP heads read
arousal, valence and a concept distribution off the winning prototype. The
subject's Affective Memory is stepped with that prototype, and the Mood GWR
is stepped with the perceived (arousal, valence) point as many times as the
memory-driven modulator says.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable

import numpy as np

from . import frontend
from . import layers as L
from .cccnn import CCCNN, Head, TrainParams
from .errors import ValidationError
from .gwr import GwrNetwork, GwrParams
from .session import CONCEPTS, SessionEvent
from .tensor import Tape, Tensor, add, concat

MEMORY_PARAMS = GwrParams(insertion_threshold=0.01, max_edge_age=600)
MOOD_PARAMS = GwrParams(insertion_threshold=0.001, max_edge_age=200)
NEUTRAL_MOOD = (0.5, 0.0)  # (arousal, valence)


def to_unit(valence: float) -> float:
    """Map valence from [-1, 1] to [0, 1]."""
    return (valence + 1.0) / 2.0


@dataclass
class Percept:
    bmu_index: int
    bmu_prototype: np.ndarray
    arousal: float
    valence: float
    concept_distribution: np.ndarray

    @property
    def concept(self) -> str:
        return CONCEPTS[int(np.argmax(self.concept_distribution))]

    @property
    def concept_index(self) -> int:
        return int(np.argmax(self.concept_distribution))

    def validate(self) -> "Percept":
        if not 0.0 <= self.arousal <= 1.0:
            raise ValidationError(f"percept arousal {self.arousal} outside [0, 1]")
        if not -1.0 <= self.valence <= 1.0:
            raise ValidationError(f"percept valence {self.valence} outside [-1, 1]")
        p = self.concept_distribution
        if p.shape != (len(CONCEPTS),) or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
            raise ValidationError("concept distribution must be 7 non-negative values summing to 1")
        return self

    def same_as(self, other: "Percept") -> bool:
        return (self.bmu_index == other.bmu_index and np.array_equal(self.bmu_prototype, other.bmu_prototype)
                and self.arousal == other.arousal and self.valence == other.valence
                and np.array_equal(self.concept_distribution, other.concept_distribution))


# ---------------------------------------------------------------------------
# heads


class AppraisalHeads:
    """Two MLPs on BMU prototypes: (arousal, valence) and a 7-way concept softmax."""

    def __init__(self, dim: int, seed: int = 0, hidden: int = 200):
        rng = np.random.default_rng(seed)
        self.dim = dim
        self.av = Head(dim, {"arousal": (1, "sigmoid"), "valence": (1, "tanh")}, rng, hidden)
        self.concept = Head(dim, {"logits": (len(CONCEPTS), "linear")}, rng, hidden)
        self.trained = False

    def fit(self, prototypes, arousal, valence, concepts, hp: TrainParams = TrainParams(epochs=200, eta=0.05)) -> dict:
        x = np.asarray(prototypes, dtype=np.float64)
        if len(x) == 0:
            raise ValidationError("no training pairs for the heads")
        c = np.asarray(concepts)
        target_c = np.eye(len(CONCEPTS))[c.astype(int)] if c.ndim == 1 else c.astype(np.float64)
        target_av = np.stack([np.asarray(arousal, float), np.asarray(valence, float)], axis=1)
        rng = np.random.default_rng(hp.seed)
        params = [t for _, t in self.av.param_items()] + [t for _, t in self.concept.param_items()]
        for t in params:
            t.requires_grad = True
        losses = []
        try:
            for epoch in range(hp.epochs):
                order = rng.permutation(len(x))
                total = 0.0
                for s in range(0, len(x), hp.batch_size):
                    idx = order[s:s + hp.batch_size]
                    xb = Tensor(x[idx])
                    with Tape() as tape:
                        av = self.av(xb)
                        logits = self.concept(xb)["logits"]
                        loss = add(L.mse(concat([av["arousal"], av["valence"]], axis=-1), target_av[idx]),
                                   L.softmax_crossentropy(logits, target_c[idx]))
                    tape.backward(loss)
                    for t in params:
                        L.sgd_l2_step(t, t.grad, hp.eta_at(epoch), hp.lam)
                    total += float(loss.data) * len(idx)
                losses.append(total / len(x))
        finally:
            for t in params:
                t.requires_grad = False
        self.trained = True
        return {"loss": losses}

    def _check(self, x) -> np.ndarray:
        if not self.trained:
            raise ValidationError("appraisal heads are untrained")
        x = np.asarray(x, dtype=np.float64)
        return x[None] if x.ndim == 1 else x

    def predict_av(self, prototype) -> tuple[float, float] | np.ndarray:
        x = self._check(prototype)
        out = self.av(Tensor(x))
        av = np.concatenate([out["arousal"].data, out["valence"].data], axis=1)
        return (float(av[0, 0]), float(av[0, 1])) if np.ndim(prototype) == 1 else av

    def predict_concept(self, prototype) -> np.ndarray:
        x = self._check(prototype)
        p = L.softmax(self.concept(Tensor(x))["logits"].data)
        return p[0] if np.ndim(prototype) == 1 else p

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {**{f"av.{k}": v for k, v in self.av.state_arrays().items()},
                **{f"concept.{k}": v for k, v in self.concept.state_arrays().items()}}

    def load_arrays(self, arrays: dict) -> None:
        self.av.load_arrays({k[3:]: v for k, v in arrays.items() if k.startswith("av.")})
        self.concept.load_arrays({k[8:]: v for k, v in arrays.items() if k.startswith("concept.")})
        self.trained = True


# ---------------------------------------------------------------------------
# perception


def event_inputs(event: SessionEvent, model: CCCNN) -> tuple[np.ndarray | None, np.ndarray | None]:
    """Clip (downsampled to the model's frame size) and MFCC map of one event."""
    clip = mfcc = None
    if event.visual is not None:
        clip = frontend.downsample_frames(event.visual, model.config.frame_size)
    if event.audio is not None:
        mfcc = frontend.mfcc_extract(event.audio)
    if clip is None and mfcc is None:
        raise ValidationError(f"event at t_ms={event.t_ms} has no modality")
    return clip, mfcc


@dataclass
class Perception:
    model: CCCNN
    gwr: GwrNetwork
    heads: AppraisalHeads
    mode: str = "frozen"  # or "online"

    def features(self, event: SessionEvent) -> np.ndarray:
        return self.model.features(*event_inputs(event, self.model))

    def appraise(self, joint: np.ndarray) -> Percept:
        if self.mode == "online":
            o = self.gwr.step(joint)
            b = o.bmu - sum(1 for r in o.removed_neurons if r < o.bmu)
        elif self.mode == "frozen":
            b = self.gwr.find_bmu(joint, use_contexts=False)[0]
        else:
            raise ValidationError(f"perception mode must be 'frozen' or 'online', got {self.mode!r}")
        proto = self.gwr.weights[b].copy()
        arousal, valence = self.heads.predict_av(proto)
        dist = self.heads.predict_concept(proto)
        return Percept(b, proto, arousal, valence, dist)

    def perceive(self, event: SessionEvent) -> Percept:
        return self.appraise(self.features(event))


def perceive(event: SessionEvent, perception: Perception) -> Percept:
    return perception.perceive(event)


def fit_perception(model: CCCNN, events: list[SessionEvent], params: GwrParams | None = None,
                   epochs: int = 5, seed: int = 0, head_params: TrainParams | None = None,
                   shuffle: bool = False) -> tuple[Perception, dict]:
    """Train the Perception GWR on joint features, then the heads on BMU prototypes.

    ``shuffle=False`` keeps the event order so the temporal contexts see real
    sequences.
    """
    labelled = [e for e in events if e.annotation is not None]
    if not labelled:
        raise ValidationError("fit_perception needs annotated events")
    feats = np.stack([model.features(*event_inputs(e, model)) for e in labelled])
    anns = [(e.annotation.arousal, e.annotation.valence, e.annotation.concept_index) for e in labelled]
    gwr = GwrNetwork.from_samples(feats, params or GwrParams())
    report = gwr.train(feats, epochs=epochs, seed=seed, shuffle=shuffle, annotations=anns)
    protos = np.stack([gwr.weights[gwr.find_bmu(f, use_contexts=False)[0]] for f in feats])
    heads = AppraisalHeads(feats.shape[1], seed=seed)
    hp = head_params or TrainParams(epochs=150, eta=0.05, batch_size=16, seed=seed, anneal=True)
    report["heads"] = heads.fit(protos, [a[0] for a in anns], [a[1] for a in anns], [a[2] for a in anns], hp)
    return Perception(model, gwr, heads), report


# ---------------------------------------------------------------------------
# affective memory


@dataclass
class AffectiveMemory:
    subject_id: str
    params: GwrParams = field(default_factory=lambda: MEMORY_PARAMS)
    gwr: GwrNetwork | None = None

    def update(self, percept: Percept) -> None:
        percept.validate()
        if self.gwr is None:
            self.gwr = GwrNetwork.from_samples([percept.bmu_prototype], self.params)
        self.gwr.step(percept.bmu_prototype, (percept.arousal, percept.valence, percept.concept_index))

    def mean_av(self) -> tuple[float, float]:
        """Mean (arousal, valence) over neurons that hold annotations; neutral when none do."""
        if self.gwr is None or not self.gwr.annotated_mask().any():
            return NEUTRAL_MOOD
        av = self.gwr.ann_av[self.gwr.annotated_mask()]
        return float(np.mean(av[:, 0])), float(np.mean(av[:, 1]))

    def bmu_av(self, prototype: np.ndarray) -> tuple[float, float]:
        """Annotation of the memory neuron closest to ``prototype``."""
        if self.gwr is None or not self.gwr.annotated_mask().any():
            return NEUTRAL_MOOD
        idx = np.flatnonzero(self.gwr.annotated_mask())
        d = np.sum((self.gwr.weights[idx] - prototype) ** 2, axis=1)
        a, v = self.gwr.ann_av[idx[int(np.argmin(d))]]
        return float(a), float(v)

    @property
    def n_neurons(self) -> int:
        return 0 if self.gwr is None else self.gwr.n_neurons


def mean_memory_valence(memory: AffectiveMemory) -> float:
    """Mean valence annotation over the memory's neurons; 0 (neutral) when empty."""
    return memory.mean_av()[1]


def memory_update(registry: dict[str, AffectiveMemory], subject_id: str, percept: Percept,
                  params: GwrParams | None = None) -> AffectiveMemory:
    mem = registry.get(subject_id)
    if mem is None:
        mem = registry[subject_id] = AffectiveMemory(subject_id, params or MEMORY_PARAMS)
    mem.update(percept)
    return mem


# ---------------------------------------------------------------------------
# mood


def mood_modulator(v_p: float, v_m: float, e: float = 1.0) -> tuple[float, int]:
    """Modulation strength ``M`` and the repetition count ``max(0, round(M))``.

    ``v_p`` is on the [0, 1] scale; ``v_m`` is used as given in the exponent.
    """
    if e <= 0:
        raise ValidationError(f"modulator strength must be positive, got {e}")
    if v_p > 0.5:
        m = e * (1.0 + math.exp(v_m))
    elif v_p == 0.5:
        m = e
    else:
        m = e * (1.0 - math.exp(v_m))
    return m, max(0, int(round(m)))


@dataclass
class MoodConfig:
    strength: float = 1.0  # e
    vm_scale: str = "mapped"  # or "raw"
    inject_memory: bool = False  # also step with the memory BMU's (arousal, valence)
    params: GwrParams = field(default_factory=lambda: MOOD_PARAMS)


@dataclass
class MoodUpdate:
    modulation: float
    reps: int
    steps: int


class MoodState:
    def __init__(self, config: MoodConfig | None = None):
        self.config = config or MoodConfig()
        if self.config.vm_scale not in ("mapped", "raw"):
            raise ValidationError(f"vm_scale must be 'mapped' or 'raw', got {self.config.vm_scale!r}")
        self.gwr = GwrNetwork.from_samples([np.array(NEUTRAL_MOOD)], self.config.params)
        self.update_count = 0

    def mean_av(self) -> tuple[float, float]:
        a, v = self.gwr.weights.mean(axis=0)
        return float(a), float(v)

    @property
    def e(self) -> float:
        return self.config.strength


def clip_av(arousal: float, valence: float) -> np.ndarray:
    return np.array([min(max(arousal, 0.0), 1.0), min(max(valence, -1.0), 1.0)])


def mood_update(mood: MoodState, percept: Percept, memory: AffectiveMemory | None) -> MoodUpdate:
    percept.validate()
    cfg = mood.config
    v_m = mean_memory_valence(memory) if memory is not None else 0.0
    if cfg.vm_scale == "mapped":
        v_m = to_unit(v_m)
    m, reps = mood_modulator(to_unit(percept.valence), v_m, cfg.strength)
    point = clip_av(percept.arousal, percept.valence)
    for _ in range(reps):
        mood.gwr.step(point)
    steps = reps
    if cfg.inject_memory and memory is not None and memory.gwr is not None:
        mood.gwr.step(clip_av(*memory.bmu_av(percept.bmu_prototype)))
        steps += 1
    mood.update_count += steps
    return MoodUpdate(m, reps, steps)


# ---------------------------------------------------------------------------
# replay and trajectories


TRAJECTORY_COLUMNS = ("t_ms", "arousal", "valence", "neuron_count")


def memory_trajectory(snapshots: Iterable[tuple[int, AffectiveMemory | GwrNetwork | dict]]) -> list[tuple]:
    """Rows ``(t_ms, mean arousal, mean valence, neuron count)`` from memory snapshots.

    A snapshot may be a memory, a bare network or a ``state_dict`` of one.
    """
    rows = []
    for t, snap in snapshots:
        if isinstance(snap, dict):
            snap = GwrNetwork.from_state(snap)
        if isinstance(snap, GwrNetwork):
            snap = AffectiveMemory("", snap.params, snap)
        a, v = snap.mean_av()
        rows.append((int(t), a, v, snap.n_neurons))
    if not rows:
        raise ValidationError("memory_trajectory needs at least one snapshot")
    return rows


@dataclass
class ReplayResult:
    percepts: list[tuple[SessionEvent, Percept]] = field(default_factory=list)
    memory_rows: dict[str, list[tuple]] = field(default_factory=dict)
    mood_rows: list[tuple] = field(default_factory=list)
    mood_updates: list[MoodUpdate] = field(default_factory=list)


class Appraiser:
    """Sequential event loop: perceive, update the subject's memory, update the mood."""

    def __init__(self, perception: Perception, mood: MoodState | None = None,
                 memory_params: GwrParams | None = None, snapshot_every: int = 1):
        if snapshot_every < 1:
            raise ValidationError("snapshot_every must be at least 1")
        self.perception = perception
        self.mood = mood or MoodState()
        self.memories: dict[str, AffectiveMemory] = {}
        self.memory_params = memory_params or MEMORY_PARAMS
        self.snapshot_every = snapshot_every
        self._seen: dict[str, int] = {}
        self._events = 0

    def process(self, event: SessionEvent, result: ReplayResult) -> Percept:
        percept = self.perception.perceive(event)
        mem = memory_update(self.memories, event.subject, percept, self.memory_params)
        upd = mood_update(self.mood, percept, mem)
        result.percepts.append((event, percept))
        result.mood_updates.append(upd)
        n = self._seen[event.subject] = self._seen.get(event.subject, 0) + 1
        if n % self.snapshot_every == 0:
            result.memory_rows.setdefault(event.subject, []).extend(memory_trajectory([(event.t_ms, mem)]))
        self._events += 1
        if self._events % self.snapshot_every == 0:
            a, v = self.mood.mean_av()
            result.mood_rows.append((event.t_ms, a, v, self.mood.gwr.n_neurons))
        return percept

    def replay(self, events: Iterable[SessionEvent]) -> ReplayResult:
        result = ReplayResult()
        for ev in events:
            self.process(ev, result)
        return result


def with_threshold(params: GwrParams, a_t: float) -> GwrParams:
    return replace(params, insertion_threshold=a_t)

"""Recurrent Growing-When-Required network with temporal contexts.

Each neuron keeps a weight vector, ``K`` context vectors, a habituation
counter and an annotation accumulator. The best-matching unit minimises

    alpha_0 * |x - w_j|^2 + sum_k alpha_k * |C_k - c_kj|^2

where the global contexts ``C_k`` mix the previous winner's weight and
context. A neuron is inserted between the winner and the input when the
winner's activity ``exp(-d)`` is below the insertion threshold *and* the
winner is already habituated; otherwise winner and neighbours move toward
the input. Edges age every time their endpoint wins and are pruned past
``max_edge_age``, taking isolated neurons with them.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import ShapeError
from .session import CONCEPTS

N_CONCEPTS = len(CONCEPTS)


@dataclass
class GwrParams:
    insertion_threshold: float = 0.35  # a_T
    firing_threshold: float = 0.1  # h_T
    eps_b: float = 0.1
    eps_n: float = 0.01
    tau_b: float = 0.3
    tau_n: float = 0.1
    kappa: float = 1.05
    alphas: tuple[float, ...] = (0.5, 0.3, 0.2)
    beta: float = 0.7
    max_edge_age: int = 100
    h_floor: float = 1e-6

    @property
    def n_contexts(self) -> int:
        return len(self.alphas) - 1


def habituate(h: float | np.ndarray, tau: float, kappa: float = 1.05, floor: float = 1e-6):
    """One habituation update ``h + tau*kappa*(1 - h) - tau`` clamped to ``[floor, 1]``."""
    return np.clip(h + tau * kappa * (1.0 - h) - tau, floor, 1.0)


@dataclass
class StepOutcome:
    bmu: int
    second: int | None
    distance: float
    activity: float
    bmu_habituation: float
    event: str  # "adapted" | "inserted"
    error: float = 0.0  # |x - w_b| before any update
    inserted: int | None = None
    removed_neurons: list[int] = field(default_factory=list)
    removed_edges: list[tuple[int, int]] = field(default_factory=list)


class GwrNetwork:
    """Growing network over R^n; see the module docstring for the update rule."""

    def __init__(self, dim: int, params: GwrParams | None = None):
        self.dim = int(dim)
        self.params = params or GwrParams()
        k = self.params.n_contexts
        self.weights = np.zeros((0, dim))
        self.contexts = np.zeros((0, k, dim))
        self.habituation = np.zeros(0)
        self.created = np.zeros(0, dtype=np.int64)
        self.last_bmu = np.zeros(0, dtype=np.int64)
        self.ann_count = np.zeros(0, dtype=np.int64)
        self.ann_av = np.zeros((0, 2))
        self.ann_tally = np.zeros((0, N_CONCEPTS), dtype=np.int64)
        self.edges: dict[tuple[int, int], int] = {}
        self.global_contexts = np.zeros((k, dim))
        self._prev: tuple[np.ndarray, np.ndarray] | None = None
        self.steps = 0

    # -- construction

    @classmethod
    def from_samples(cls, samples: Iterable[np.ndarray], params: GwrParams | None = None) -> "GwrNetwork":
        """Two neurons placed at the first two distinct samples (the same one twice if all agree)."""
        samples = [np.asarray(s, dtype=np.float64) for s in samples]
        if not samples:
            raise ValueError("need at least one sample to initialise a network")
        first = samples[0]
        second = next((s for s in samples[1:] if not np.array_equal(s, first)), first)
        net = cls(first.shape[0], params)
        net.add_neuron(first)
        net.add_neuron(second)
        return net

    def add_neuron(self, w: np.ndarray, contexts: np.ndarray | None = None) -> int:
        w = self._check(w)
        k = self.params.n_contexts
        c = np.zeros((k, self.dim)) if contexts is None else np.asarray(contexts, dtype=np.float64)
        self.weights = np.vstack([self.weights, w[None]])
        self.contexts = np.concatenate([self.contexts, c[None]], axis=0)
        self.habituation = np.append(self.habituation, 1.0)
        self.created = np.append(self.created, self.steps)
        self.last_bmu = np.append(self.last_bmu, -1)
        self.ann_count = np.append(self.ann_count, 0)
        self.ann_av = np.vstack([self.ann_av, np.zeros((1, 2))])
        self.ann_tally = np.vstack([self.ann_tally, np.zeros((1, N_CONCEPTS), dtype=np.int64)])
        return len(self.weights) - 1

    def _check(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.dim,):
            raise ShapeError(f"expected a vector of length {self.dim}, got shape {x.shape}")
        return x

    @property
    def n_neurons(self) -> int:
        return len(self.weights)

    # -- distances and global contexts

    def distances(self, x: np.ndarray, use_contexts: bool = True) -> np.ndarray:
        a = self.params.alphas
        d = a[0] * np.sum((self.weights - x) ** 2, axis=1)
        for k in range(self.params.n_contexts if use_contexts else 0):
            d = d + a[k + 1] * np.sum((self.global_contexts[k] - self.contexts[:, k]) ** 2, axis=1)
        return d

    def find_bmu(self, x, use_contexts: bool = True) -> tuple[int, float, int | None]:
        """Context-weighted winner and runner-up; ``use_contexts=False`` drops the context terms."""
        x = self._check(x)
        if self.n_neurons == 0:
            raise ValueError("network has no neurons")
        d = self.distances(x, use_contexts)
        b = int(np.argmin(d))
        if self.n_neurons == 1:
            return b, float(d[b]), None
        rest = d.copy()
        rest[b] = np.inf
        return b, float(d[b]), int(np.argmin(rest))

    def update_global_context(self) -> np.ndarray:
        """Refresh ``C_1..C_K`` from the previous winner; zeros before the first step."""
        if self._prev is None:
            self.global_contexts = np.zeros_like(self.global_contexts)
            return self.global_contexts
        w_prev, c_prev = self._prev
        beta = self.params.beta
        new = np.empty_like(self.global_contexts)
        for k in range(self.params.n_contexts):
            lower = w_prev if k == 0 else c_prev[k - 1]
            new[k] = beta * w_prev + (1.0 - beta) * lower
        self.global_contexts = new
        return new

    # -- topology helpers

    def neighbours(self, i: int) -> list[int]:
        return sorted(b if a == i else a for (a, b) in self.edges if i in (a, b))

    @staticmethod
    def _key(i: int, j: int) -> tuple[int, int]:
        return (i, j) if i < j else (j, i)

    def _remove_neurons(self, dead: Sequence[int]) -> None:
        if not dead:
            return
        keep = np.setdiff1d(np.arange(self.n_neurons), dead)
        remap = {int(old): new for new, old in enumerate(keep)}
        for name in ("weights", "contexts", "habituation", "created", "last_bmu", "ann_count", "ann_av", "ann_tally"):
            setattr(self, name, getattr(self, name)[keep])
        self.edges = {self._key(remap[a], remap[b]): age for (a, b), age in self.edges.items()}

    # -- learning

    def step(self, x, annotation: tuple[float, float, int] | None = None, learn: bool = True) -> StepOutcome:
        """Present one sample. ``annotation`` is ``(arousal, valence, concept_index)``.

        With ``learn=False`` nothing is modified, global contexts included.
        """
        x = self._check(x)
        p = self.params
        if learn:
            self.update_global_context()
        b, d_b, s = self.find_bmu(x)
        activity = math.exp(-d_b)
        h_b = float(self.habituation[b])
        out = StepOutcome(b, s, d_b, activity, h_b, "adapted", float(np.linalg.norm(x - self.weights[b])))
        if not learn:
            return out
        self.steps += 1

        if s is not None:
            for key in list(self.edges):
                if b in key:
                    self.edges[key] += 1
            self.edges[self._key(b, s)] = 0

        if activity < p.insertion_threshold and h_b < p.firing_threshold:
            w_r = 0.5 * (self.weights[b] + x)
            c_r = 0.5 * (self.contexts[b] + self.global_contexts)
            r = self.add_neuron(w_r, c_r)
            self.edges[self._key(r, b)] = 0
            if s is not None:
                self.edges[self._key(r, s)] = 0
                self.edges.pop(self._key(b, s), None)
            out.event, out.inserted = "inserted", r
        else:
            rate = p.eps_b * self.habituation[b]
            self.weights[b] += rate * (x - self.weights[b])
            self.contexts[b] += rate * (self.global_contexts - self.contexts[b])
            for n in self.neighbours(b):
                rn = p.eps_n * self.habituation[n]
                self.weights[n] += rn * (x - self.weights[n])
                self.contexts[n] += rn * (self.global_contexts - self.contexts[n])

        self.habituation[b] = habituate(self.habituation[b], p.tau_b, p.kappa, p.h_floor)
        for n in self.neighbours(b):
            self.habituation[n] = habituate(self.habituation[n], p.tau_n, p.kappa, p.h_floor)
        self.last_bmu[b] = self.steps

        if annotation is not None:
            arousal, valence, concept = annotation
            n = self.ann_count[b] + 1
            self.ann_av[b] += (np.array([arousal, valence]) - self.ann_av[b]) / n
            self.ann_count[b] = n
            self.ann_tally[b, int(concept)] += 1

        # remember the winner for the next step's contexts, before any pruning renumbers neurons
        self._prev = (self.weights[b].copy(), self.contexts[b].copy())

        stale = sorted(k for k, age in self.edges.items() if age > p.max_edge_age)
        for k in stale:
            del self.edges[k]
        out.removed_edges = stale
        linked = {i for e in self.edges for i in e}
        dead = [i for i in range(self.n_neurons) if i not in linked]
        if len(dead) > self.n_neurons - 2:
            dead = []  # never shrink below two neurons
        out.removed_neurons = dead
        self._remove_neurons(dead)
        return out

    def train(self, data: np.ndarray, epochs: int = 1, seed: int = 0, shuffle: bool = True,
              annotations: Sequence | None = None) -> dict:
        data = np.asarray(data, dtype=np.float64)
        if len(data) == 0:
            raise ValueError("empty dataset")
        rng = np.random.default_rng(seed)
        report = {"neurons": [], "quantization_error": [], "insertions": []}
        for _ in range(epochs):
            order = rng.permutation(len(data)) if shuffle else np.arange(len(data))
            errs, ins = [], 0
            for i in order:
                ann = None if annotations is None else annotations[i]
                o = self.step(data[i], ann)
                ins += o.event == "inserted"
                errs.append(o.error)
            report["neurons"].append(self.n_neurons)
            report["quantization_error"].append(float(np.mean(errs)))
            report["insertions"].append(ins)
        return report

    # -- annotations

    def annotated_mask(self) -> np.ndarray:
        return self.ann_count > 0

    def neuron_concepts(self) -> np.ndarray:
        """Majority concept per neuron, -1 where unannotated."""
        out = self.ann_tally.argmax(axis=1)
        out[~self.annotated_mask()] = -1
        return out

    # -- persistence and export

    def state_dict(self) -> dict:
        return {
            "dim": self.dim,
            "params": {**asdict(self.params), "alphas": list(self.params.alphas)},
            "steps": self.steps,
            "weights": self.weights,
            "contexts": self.contexts,
            "habituation": self.habituation,
            "created": self.created.astype(np.float64),
            "last_bmu": self.last_bmu.astype(np.float64),
            "ann_count": self.ann_count.astype(np.float64),
            "ann_av": self.ann_av,
            "ann_tally": self.ann_tally.astype(np.float64),
            "edges": [[int(a), int(b), int(age)] for (a, b), age in sorted(self.edges.items())],
            "global_contexts": self.global_contexts,
            "prev_weight": None if self._prev is None else self._prev[0],
            "prev_contexts": None if self._prev is None else self._prev[1],
        }

    @classmethod
    def from_state(cls, st: dict) -> "GwrNetwork":
        params = GwrParams(**{**st["params"], "alphas": tuple(st["params"]["alphas"])})
        net = cls(int(st["dim"]), params)
        k = params.n_contexts
        net.steps = int(st["steps"])
        net.weights = np.asarray(st["weights"], dtype=np.float64).reshape(-1, net.dim)
        net.contexts = np.asarray(st["contexts"], dtype=np.float64).reshape(-1, k, net.dim)
        net.habituation = np.asarray(st["habituation"], dtype=np.float64)
        net.created = np.asarray(st["created"]).astype(np.int64)
        net.last_bmu = np.asarray(st["last_bmu"]).astype(np.int64)
        net.ann_count = np.asarray(st["ann_count"]).astype(np.int64)
        net.ann_av = np.asarray(st["ann_av"], dtype=np.float64).reshape(-1, 2)
        net.ann_tally = np.asarray(st["ann_tally"]).astype(np.int64).reshape(-1, N_CONCEPTS)
        net.edges = {(int(a), int(b)): int(age) for a, b, age in st["edges"]}
        net.global_contexts = np.asarray(st["global_contexts"], dtype=np.float64).reshape(k, net.dim)
        if st.get("prev_weight") is not None:
            net._prev = (np.asarray(st["prev_weight"], dtype=np.float64),
                         np.asarray(st["prev_contexts"], dtype=np.float64).reshape(k, net.dim))
        return net

    def check_well_formed(self) -> None:
        """Raise AssertionError on dangling/self edges, negative ages or isolated neurons."""
        n = self.n_neurons
        assert n >= 2, "fewer than two neurons"
        for (a, b), age in self.edges.items():
            assert a != b, f"self edge on {a}"
            assert 0 <= a < n and 0 <= b < n, f"dangling edge {(a, b)}"
            assert age >= 0, f"negative age on {(a, b)}"
        if self.steps:
            linked = {i for e in self.edges for i in e}
            assert linked == set(range(n)), f"isolated neurons {sorted(set(range(n)) - linked)}"
        assert np.all((self.habituation > 0) & (self.habituation <= 1)), "habituation left (0, 1]"


CSV_COLUMNS = ("id", "habituation", "age", "n_annotations", "arousal", "valence", "concept")


def export_csv(net: GwrNetwork) -> str:
    """One row per neuron: id, habituation, age (steps since creation), annotation means,
    majority concept, then the weight vector as w0..w{n-1}."""
    header = list(CSV_COLUMNS) + [f"w{i}" for i in range(net.dim)]
    lines = [",".join(header)]
    concepts = net.neuron_concepts()
    for i in range(net.n_neurons):
        row = [
            str(i), repr(float(net.habituation[i])), str(int(net.steps - net.created[i])),
            str(int(net.ann_count[i])), repr(float(net.ann_av[i, 0])), repr(float(net.ann_av[i, 1])),
            CONCEPTS[concepts[i]] if concepts[i] >= 0 else "",
        ] + [repr(float(v)) for v in net.weights[i]]
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"


def export_dot(net: GwrNetwork, name: str = "gwr") -> str:
    concepts = net.neuron_concepts()
    lines = [f"graph {name} {{"]
    for i in range(net.n_neurons):
        label = CONCEPTS[concepts[i]] if concepts[i] >= 0 else "?"
        lines.append(f'  n{i} [label="{i}: {label} v={net.ann_av[i, 1]:.2f}"];')
    for (a, b), age in sorted(net.edges.items()):
        lines.append(f"  n{a} -- n{b} [age={age}];")
    lines.append("}")
    return "\n".join(lines) + "\n"

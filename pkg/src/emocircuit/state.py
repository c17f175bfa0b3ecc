"""Versioned JSON container for everything a replay needs.

Layout (``format_version`` 1)::

    {"format": "emocircuit-state", "format_version": 1,
     "seeds": {...}, "hyperparameters": {...},
     "model": {"config": {...}, "trained": {...}, "heads": {...}, "arrays": {...}},
     "perception": {"mode": ..., "gwr": {...}, "heads": {...}} | null,
     "memories": {"s0": {"params": {...}, "gwr": {...} | null}, ...},
     "mood": {"config": {...}, "gwr": {...}, "update_count": n} | null}

Every numpy array becomes ``{"tensor": <base64>}`` holding the
little-endian tensor encoding, or ``{"file": <name>}`` when blobs are
side-filed next to the JSON. Plain floats use Python's shortest
round-trip repr and keys are sorted, so save -> load -> save reproduces
the same bytes.
"""

from __future__ import annotations

import base64
import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .appraisal import AffectiveMemory, AppraisalHeads, MoodConfig, MoodState, Perception
from .cccnn import CCCNN, CccnnConfig, Head
from .errors import MigrationRefused, ShapeError, StateError
from .gwr import GwrNetwork, GwrParams
from .tensor import tensor_from_bytes, tensor_to_bytes

FORMAT = "emocircuit-state"
FORMAT_VERSION = 1
HEAD_SLOTS = ("visual_head", "auditory_head", "regressor")


@dataclass
class ModelState:
    model: CCCNN
    perception: Perception | None = None
    memories: dict[str, AffectiveMemory] = field(default_factory=dict)
    mood: MoodState | None = None
    hyperparameters: dict = field(default_factory=dict)
    seeds: dict[str, int] = field(default_factory=dict)


# ---------------------------------------------------------------------------
# array packing


class _Blobs:
    """Collects side-filed tensors by content digest, or inlines them."""

    def __init__(self, side_files: bool):
        self.side_files = side_files
        self.files: dict[str, bytes] = {}

    def pack(self, obj):
        if isinstance(obj, np.ndarray):
            raw = tensor_to_bytes(obj)
            if not self.side_files:
                return {"tensor": base64.b64encode(raw).decode("ascii")}
            name = hashlib.sha256(raw).hexdigest()[:24] + ".f8"
            self.files[name] = raw
            return {"file": name}
        if isinstance(obj, dict):
            return {str(k): self.pack(v) for k, v in obj.items()}
        if isinstance(obj, (list, tuple)):
            return [self.pack(v) for v in obj]
        if isinstance(obj, np.integer):
            return int(obj)
        if isinstance(obj, np.floating):
            return float(obj)
        return obj


def _unpack(obj, blob_dir: Path | None):
    if isinstance(obj, dict):
        if obj.keys() == {"tensor"}:
            return _decode(base64.b64decode(obj["tensor"], validate=True))
        if obj.keys() == {"file"}:
            if blob_dir is None:
                raise StateError("state references side-filed tensors but was read from memory")
            path = blob_dir / obj["file"]
            try:
                raw = path.read_bytes()
            except OSError as exc:
                raise StateError(f"missing tensor blob {path}") from exc
            if hashlib.sha256(raw).hexdigest()[:24] + ".f8" != obj["file"]:
                raise StateError(f"tensor blob {path} does not match its digest")
            return _decode(raw)
        return {k: _unpack(v, blob_dir) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_unpack(v, blob_dir) for v in obj]
    return obj


def _decode(raw: bytes) -> np.ndarray:
    try:
        return tensor_from_bytes(raw)
    except (struct.error, ShapeError) as exc:
        raise StateError(f"corrupt tensor blob: {exc}") from exc


# ---------------------------------------------------------------------------
# object <-> dict


def _params_dict(p: GwrParams) -> dict:
    return {**asdict(p), "alphas": list(p.alphas)}


def _params(d: dict) -> GwrParams:
    return GwrParams(**{**d, "alphas": tuple(d["alphas"])})


def _gwr(d: dict | None) -> GwrNetwork | None:
    return None if d is None else GwrNetwork.from_state(d)


def _model_dict(model: CCCNN) -> dict:
    cfg = asdict(model.config)
    return {
        "config": {k: list(v) if isinstance(v, tuple) else v for k, v in cfg.items()},
        "trained": dict(model.trained),
        "heads": {name: {k: list(v) for k, v in getattr(model, name).outputs.items()}
                  for name in HEAD_SLOTS if getattr(model, name) is not None},
        "arrays": model.state_arrays(),
    }


def _model(d: dict) -> CCCNN:
    cfg = CccnnConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in d["config"].items()})
    model = CCCNN(cfg, seed=0)
    arrays = d["arrays"]
    for name, outputs in d["heads"].items():
        if name not in HEAD_SLOTS:
            raise StateError(f"unknown head slot {name!r}")
        w = arrays[f"{name}.hidden.w"]
        head = Head(w.shape[1], {k: (int(v[0]), str(v[1])) for k, v in outputs.items()},
                    np.random.default_rng(0), hidden=w.shape[0])
        setattr(model, name, head)
    for name, module in model.modules().items():
        prefix = name + "."
        module.load_arrays({k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)})
    model.trained = {k: bool(v) for k, v in d["trained"].items()}
    return model


def _heads_dict(heads: AppraisalHeads) -> dict:
    return {"dim": heads.dim, "hidden": int(heads.av.params["hidden.w"].shape[0]),
            "trained": heads.trained, "arrays": heads.state_arrays()}


def _heads(d: dict) -> AppraisalHeads:
    heads = AppraisalHeads(int(d["dim"]), hidden=int(d["hidden"]))
    heads.load_arrays(d["arrays"])
    heads.trained = bool(d["trained"])
    return heads


def _mood_dict(mood: MoodState) -> dict:
    cfg = mood.config
    return {"config": {"strength": cfg.strength, "vm_scale": cfg.vm_scale, "inject_memory": cfg.inject_memory,
                       "params": _params_dict(cfg.params)},
            "gwr": mood.gwr.state_dict(), "update_count": mood.update_count}


def _mood(d: dict) -> MoodState:
    c = d["config"]
    mood = MoodState(MoodConfig(float(c["strength"]), c["vm_scale"], bool(c["inject_memory"]), _params(c["params"])))
    mood.gwr = GwrNetwork.from_state(d["gwr"])
    mood.update_count = int(d["update_count"])
    return mood


def to_document(state: ModelState) -> dict:
    """Plain-dict form with numpy arrays still in place."""
    p = state.perception
    return {
        "format": FORMAT,
        "format_version": FORMAT_VERSION,
        "seeds": dict(state.seeds),
        "hyperparameters": state.hyperparameters,
        "model": _model_dict(state.model),
        "perception": None if p is None else {"mode": p.mode, "gwr": p.gwr.state_dict(), "heads": _heads_dict(p.heads)},
        "memories": {sid: {"params": _params_dict(m.params), "gwr": None if m.gwr is None else m.gwr.state_dict()}
                     for sid, m in sorted(state.memories.items())},
        "mood": None if state.mood is None else _mood_dict(state.mood),
    }


def from_document(doc: dict) -> ModelState:
    if not isinstance(doc, dict) or doc.get("format") != FORMAT:
        raise StateError("not an emocircuit state file")
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise MigrationRefused(f"state format_version {version!r} cannot be loaded by this version "
                               f"(expects {FORMAT_VERSION}); no migration is provided")
    try:
        model = _model(doc["model"])
        perception = None
        if doc["perception"] is not None:
            pd = doc["perception"]
            perception = Perception(model, GwrNetwork.from_state(pd["gwr"]), _heads(pd["heads"]), pd["mode"])
        memories = {sid: AffectiveMemory(sid, _params(m["params"]), _gwr(m["gwr"]))
                    for sid, m in doc["memories"].items()}
        mood = None if doc["mood"] is None else _mood(doc["mood"])
        return ModelState(model, perception, memories, mood, doc["hyperparameters"],
                          {k: int(v) for k, v in doc["seeds"].items()})
    except (KeyError, TypeError, IndexError, AttributeError) as exc:
        raise StateError(f"malformed state file: {exc!r}") from exc
    except ShapeError as exc:
        raise StateError(f"state arrays do not fit the stored configuration: {exc}") from exc


# ---------------------------------------------------------------------------
# bytes and files


def _encode(doc: dict) -> bytes:
    return (json.dumps(doc, sort_keys=True, indent=1, allow_nan=False) + "\n").encode("utf-8")


def dumps_state(state: ModelState) -> bytes:
    """Self-contained bytes with every tensor inlined as base64."""
    return _encode(_Blobs(False).pack(to_document(state)))


def loads_state(raw: bytes, blob_dir: Path | None = None) -> ModelState:
    try:
        doc = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise StateError(f"state file does not parse (truncated or corrupt): {exc}") from exc
    if isinstance(doc, dict) and doc.get("format") == FORMAT and doc.get("format_version") != FORMAT_VERSION:
        return from_document(doc)  # raises the migration error before touching any blob
    try:
        doc = _unpack(doc, blob_dir)
    except (ValueError, TypeError) as exc:
        raise StateError(f"state file holds an undecodable tensor: {exc}") from exc
    return from_document(doc)


def blob_dir_for(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".blobs")


def save_state(state: ModelState, path: str | Path, side_files: bool = False) -> Path:
    """Write ``state`` to ``path``; with ``side_files`` tensors go to ``<path>.blobs/``."""
    path = Path(path)
    blobs = _Blobs(side_files)
    raw = _encode(blobs.pack(to_document(state)))
    if side_files:
        d = blob_dir_for(path)
        d.mkdir(parents=True, exist_ok=True)
        for name, data in sorted(blobs.files.items()):
            (d / name).write_bytes(data)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(raw)
    return path


def load_state(path: str | Path) -> ModelState:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise StateError(f"cannot read state file {path}: {exc}") from exc
    return loads_state(raw, blob_dir_for(path))

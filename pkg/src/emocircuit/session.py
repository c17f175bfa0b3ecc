"""Session events and their JSON-lines file format.

One event per line::

    {"t_ms": 1000, "subject": "s0", "topic": "lottery",
     "visual": "s_blobs/000001.u8", "frame_size": 128,
     "audio": "s_blobs/000001.pcm", "audio_rate": 16000,
     "annotation": {"arousal": 0.7, "valence": 0.8, "dominance": 0.5,
                    "concept": "Happiness"}}

``visual`` points at a raw ``9 x S x S`` byte blob or at a directory of
grayscale images; ``audio`` at 16-bit little-endian PCM. Paths are
relative to the session file. Either modality may be ``null`` but not both.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from . import frontend
from .errors import ValidationError

CONCEPTS = ("Anger", "Disgust", "Fear", "Happiness", "Neutral", "Sadness", "Surprise")


@dataclass
class Annotation:
    arousal: float
    valence: float
    dominance: float = 0.5
    concept: str = "Neutral"

    def validate(self) -> "Annotation":
        if not 0.0 <= self.arousal <= 1.0:
            raise ValidationError(f"annotation.arousal={self.arousal} outside [0, 1]")
        if not -1.0 <= self.valence <= 1.0:
            raise ValidationError(f"annotation.valence={self.valence} outside [-1, 1]")
        if not 0.0 <= self.dominance <= 1.0:
            raise ValidationError(f"annotation.dominance={self.dominance} outside [0, 1]")
        if self.concept not in CONCEPTS:
            raise ValidationError(f"annotation.concept={self.concept!r} is not one of {CONCEPTS}")
        return self

    @property
    def concept_index(self) -> int:
        return CONCEPTS.index(self.concept)


@dataclass(eq=False)
class SessionEvent:
    t_ms: int
    subject: str
    visual: np.ndarray | None = None
    audio: np.ndarray | None = None
    annotation: Annotation | None = None
    topic: str | None = None
    meta: dict = field(default_factory=dict)

    def validate(self) -> "SessionEvent":
        if self.visual is None and self.audio is None:
            raise ValidationError(f"event at t_ms={self.t_ms} carries neither visual nor audio")
        if self.annotation is not None:
            self.annotation.validate()
        return self


def events_equal(a: SessionEvent, b: SessionEvent) -> bool:
    def same(x, y):
        if x is None or y is None:
            return x is y
        return x.shape == y.shape and np.array_equal(x, y)

    return (
        a.t_ms == b.t_ms and a.subject == b.subject and a.topic == b.topic
        and a.annotation == b.annotation and same(a.visual, b.visual) and same(a.audio, b.audio)
    )


def _load_visual(ref: str, base: Path, frame_size: int) -> np.ndarray:
    p = base / ref
    if p.is_dir():
        frames = frontend.read_frame_dir(p)
        return frontend.assemble_visual_clip(frames, mode="infer")
    return frontend.read_frame_blob(p.read_bytes(), frame_size)


def load_session(path: str | Path) -> list[SessionEvent]:
    path = Path(path)
    base = path.parent
    events: list[SessionEvent] = []
    last_t, last_line = None, None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
            try:
                t_ms = obj["t_ms"]
                subject = obj["subject"]
            except KeyError as exc:
                raise ValidationError(f"{path}:{lineno}: missing field {exc.args[0]!r}") from None
            if not isinstance(t_ms, int):
                raise ValidationError(f"{path}:{lineno}: t_ms must be an integer")
            if last_t is not None and t_ms < last_t:
                raise ValidationError(
                    f"{path}: t_ms goes backwards between line {last_line} ({last_t}) and line {lineno} ({t_ms})"
                )
            ann = obj.get("annotation")
            try:
                annotation = Annotation(**ann).validate() if ann is not None else None
            except TypeError as exc:
                raise ValidationError(f"{path}:{lineno}: bad annotation ({exc})") from None
            except ValidationError as exc:
                raise ValidationError(f"{path}:{lineno}: {exc}") from None
            visual = audio = None
            if obj.get("visual") is not None:
                visual = _load_visual(obj["visual"], base, int(obj.get("frame_size", frontend.FRAME_SIZE)))
            if obj.get("audio") is not None:
                audio = frontend.read_pcm16((base / obj["audio"]).read_bytes(), int(obj.get("audio_rate", frontend.SAMPLE_RATE)))
            ev = SessionEvent(t_ms, str(subject), visual, audio, annotation, obj.get("topic"))
            try:
                ev.validate()
            except ValidationError as exc:
                raise ValidationError(f"{path}:{lineno}: {exc}") from None
            events.append(ev)
            last_t, last_line = t_ms, lineno
    return events


def write_session(events: Iterable[SessionEvent], path: str | Path) -> Path:
    """Write events as JSON lines, side-filing media blobs in ``<stem>_blobs/``."""
    path = Path(path)
    blob_dir = path.parent / f"{path.stem}_blobs"
    blob_dir.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for i, ev in enumerate(events):
            ev.validate()
            obj = {"t_ms": int(ev.t_ms), "subject": ev.subject}
            if ev.topic is not None:
                obj["topic"] = ev.topic
            if ev.visual is not None:
                name = f"{i:06d}.u8"
                (blob_dir / name).write_bytes(frontend.frame_blob(ev.visual))
                obj["visual"] = f"{blob_dir.name}/{name}"
                obj["frame_size"] = int(ev.visual.shape[-1])
            else:
                obj["visual"] = None
            if ev.audio is not None:
                name = f"{i:06d}.pcm"
                (blob_dir / name).write_bytes(frontend.pcm16_blob(ev.audio))
                obj["audio"] = f"{blob_dir.name}/{name}"
                obj["audio_rate"] = frontend.SAMPLE_RATE
            else:
                obj["audio"] = None
            if ev.annotation is not None:
                a = ev.annotation
                obj["annotation"] = {
                    "arousal": a.arousal, "valence": a.valence, "dominance": a.dominance, "concept": a.concept,
                }
            else:
                obj["annotation"] = None
            fh.write(json.dumps(obj) + "\n")
    return path

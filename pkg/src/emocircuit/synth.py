"""Parametric stand-in for recorded interaction corpora.

Each of the seven concepts owns a spatial grating pattern (visual) and a
pair of tones (audio). Valence shifts frame brightness linearly and
arousal scales loudness, so both are recoverable from the media. Noise is
added on top; at ``noise=0`` the concept templates are exactly separable.

Sessions follow a topic profile: each subject meets each topic in turn,
opens with a few neutral events, then settles on the concept the topic
evokes for their temperament. The balanced training pool draws a random
temperament per event so valence varies within each concept.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import frontend
from .errors import ValidationError
from .session import CONCEPTS, Annotation, SessionEvent

# canonical (arousal, valence) per concept
CONCEPT_AV = {
    "Anger": (0.80, -0.60),
    "Disgust": (0.55, -0.70),
    "Fear": (0.75, -0.50),
    "Happiness": (0.70, 0.80),
    "Neutral": (0.30, 0.00),
    "Sadness": (0.25, -0.70),
    "Surprise": (0.85, 0.35),
}

# topic -> concept evoked for (positive, negative) temperament; in this order
# each subject drifts from neutral towards their own pole
TOPIC_PROFILE = {
    "school": ("Neutral", "Neutral"),
    "pet": ("Surprise", "Fear"),
    "food": ("Surprise", "Disgust"),
    "family": ("Happiness", "Sadness"),
    "lottery": ("Happiness", "Anger"),
}

_TONES = {  # Hz, a rough pitch/formant pair per concept
    "Anger": (220.0, 1800.0),
    "Disgust": (160.0, 900.0),
    "Fear": (330.0, 2600.0),
    "Happiness": (280.0, 1400.0),
    "Neutral": (130.0, 500.0),
    "Sadness": (110.0, 700.0),
    "Surprise": (390.0, 3200.0),
}


@dataclass
class SubjectProfile:
    id: str
    temperament: float  # sign picks the concept per topic; see SynthConfig.valence_shift


@dataclass
class SynthConfig:
    subjects: list[SubjectProfile] = field(default_factory=lambda: [
        SubjectProfile("s0", 1.0), SubjectProfile("s1", -1.0),
        SubjectProfile("s2", 0.5), SubjectProfile("s3", -0.5),
    ])
    topics: list[str] = field(default_factory=lambda: list(TOPIC_PROFILE))
    events_per_topic: int = 20
    onset_events: int = 3
    noise: float = 0.1
    frame_size: int = frontend.FRAME_SIZE
    valence_jitter: float = 0.05
    # annotation shift per unit temperament; the media carry it only as a few
    # grey levels, below what desk-scale perception resolves, so sessions default to 0
    valence_shift: float = 0.0
    interleave: bool = False


def _grating(concept: str, size: int) -> np.ndarray:
    i = CONCEPTS.index(concept)
    theta = np.pi * i / len(CONCEPTS)
    cycles = 2.0 + (i % 3)
    yy, xx = np.mgrid[0:size, 0:size] / size - 0.5
    wave = np.cos(2 * np.pi * cycles * (xx * np.cos(theta) + yy * np.sin(theta)) + i)
    envelope = np.exp(-(xx ** 2 + yy ** 2) / 0.18)
    return wave * envelope


def visual_stream(concept: str, valence: float, arousal: float, noise: float, size: int,
                  rng: np.random.Generator) -> np.ndarray:
    """Thirty frames (1 s at 30 fps), quantised to 8-bit levels."""
    if concept not in CONCEPTS:
        raise ValidationError(f"unknown concept {concept!r}")
    pattern = _grating(concept, size)
    t = np.arange(frontend.FPS) / frontend.FPS
    amp = 0.22 * (0.8 + 0.2 * np.sin(np.pi * t))[:, None, None]
    frames = 0.5 + amp * pattern[None] + 0.15 * valence + 0.05 * (arousal - 0.5)
    if noise > 0:
        frames = frames + rng.normal(0.0, 0.25 * noise, frames.shape)
    return np.round(np.clip(frames, 0.0, 1.0) * 255.0) / 255.0


def audio_clip(concept: str, valence: float, arousal: float, noise: float, rng: np.random.Generator) -> np.ndarray:
    """One second of two-tone audio, quantised to 16-bit levels."""
    if concept not in CONCEPTS:
        raise ValidationError(f"unknown concept {concept!r}")
    f0, f1 = _TONES[concept]
    t = np.arange(frontend.CLIP_SAMPLES) / frontend.SAMPLE_RATE
    loud = 0.15 + 0.35 * arousal
    bright = 0.5 + 0.4 * valence
    x = loud * (np.sin(2 * np.pi * f0 * t) + bright * np.sin(2 * np.pi * f1 * t)) / 2.0
    if noise > 0:
        x = x + rng.normal(0.0, 0.2 * noise, x.shape)
    return np.round(np.clip(x, -1.0, 1.0) * 32767.0) / 32767.0


def make_sample(concept: str, valence: float, arousal: float, noise: float, size: int,
                rng: np.random.Generator, crop_mode: str = "train") -> tuple[np.ndarray, np.ndarray]:
    frames = visual_stream(concept, valence, arousal, noise, size, rng)
    clip = frontend.assemble_visual_clip(frames, seed=rng, mode=crop_mode)
    return clip, audio_clip(concept, valence, arousal, noise, rng)


def annotate(concept: str, temperament: float, rng: np.random.Generator, jitter: float,
             shift: float = 0.2) -> Annotation:
    arousal, valence = CONCEPT_AV[concept]
    valence = valence + shift * temperament + (rng.normal(0.0, jitter) if jitter > 0 else 0.0)
    arousal = arousal + (rng.normal(0.0, jitter) if jitter > 0 else 0.0)
    return Annotation(
        arousal=float(np.clip(arousal, 0.0, 1.0)),
        valence=float(np.clip(valence, -1.0, 1.0)),
        dominance=0.5,
        concept=concept,
    )


def session_plan(cfg: SynthConfig) -> list[tuple[str, str, str, float]]:
    """Ordered (subject, topic, concept, temperament) for every event."""
    for t in cfg.topics:
        if t not in TOPIC_PROFILE:
            raise ValidationError(f"unknown topic {t!r}; known: {sorted(TOPIC_PROFILE)}")
    blocks = []
    for s in cfg.subjects:
        rows = []
        for topic in cfg.topics:
            concept = TOPIC_PROFILE[topic][0 if s.temperament >= 0 else 1]
            for k in range(cfg.events_per_topic):
                rows.append((s.id, topic, "Neutral" if k < cfg.onset_events else concept, s.temperament))
        blocks.append(rows)
    if not cfg.interleave:
        return [r for b in blocks for r in b]
    # round-robin whole topic blocks across subjects
    out = []
    n = cfg.events_per_topic
    for ti in range(len(cfg.topics)):
        for b in blocks:
            out.extend(b[ti * n:(ti + 1) * n])
    return out


def synth_stream(cfg: SynthConfig, seed: int) -> list[SessionEvent]:
    """Deterministic annotated session; events are 1 s apart."""
    rng = np.random.default_rng(seed)
    events = []
    for i, (subject, topic, concept, temperament) in enumerate(session_plan(cfg)):
        ann = annotate(concept, temperament, rng, cfg.valence_jitter, cfg.valence_shift)
        clip, audio = make_sample(concept, ann.valence, ann.arousal, cfg.noise, cfg.frame_size, rng)
        events.append(SessionEvent(i * 1000, subject, clip, audio, ann, topic))
    return events


def labelled_set(n_per_concept: int, noise: float, seed: int, size: int = frontend.FRAME_SIZE,
                 concepts=CONCEPTS, valence_jitter: float = 0.1, valence_shift: float = 0.2) -> list[SessionEvent]:
    """Balanced training pool: ``n_per_concept`` events per concept, temperament drawn at random."""
    rng = np.random.default_rng(seed)
    events = []
    t = 0
    for rep in range(n_per_concept):
        for concept in concepts:
            ann = annotate(concept, float(rng.uniform(-1, 1)), rng, valence_jitter, valence_shift)
            clip, audio = make_sample(concept, ann.valence, ann.arousal, noise, size, rng)
            events.append(SessionEvent(t, "pool", clip, audio, ann, None))
            t += 1000
    return events

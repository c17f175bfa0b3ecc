"""Experiment configuration files: ``key = value`` under named sections.

::

    [model]
    profile = desk

    [train.cross]
    epochs = 40
    eta = 0.05

    [session]
    subjects = s0:1.0, s1:-1.0
    events_per_topic = 20

Every section and key is optional; anything unset keeps the default of
:class:`~emocircuit.experiment.ExperimentConfig`. Unknown sections or
keys are rejected with the list of valid ones. Per-stage training seeds
are derived from ``--seed`` and cannot be set here.
"""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import asdict, fields, replace
from pathlib import Path

from .appraisal import MoodConfig
from .cccnn import PROFILES, TrainParams
from .experiment import ExperimentConfig
from .gwr import GwrParams
from .synth import SubjectProfile, SynthConfig


class ConfigError(ValueError):
    """Unknown section or key, or a value of the wrong type."""


_TRAIN_KEYS = tuple(f.name for f in fields(TrainParams) if f.name != "seed")
_GWR_KEYS = tuple(f.name for f in fields(GwrParams))
_SESSION_KEYS = tuple(f.name for f in fields(SynthConfig) if f.name != "frame_size")

SECTIONS: dict[str, tuple[str, ...]] = {
    "model": ("profile",),
    "pool": ("per_concept", "noise"),
    "train.visual": _TRAIN_KEYS,
    "train.auditory": _TRAIN_KEYS,
    "train.cross": _TRAIN_KEYS,
    "perception": _GWR_KEYS + ("epochs",),
    "session": _SESSION_KEYS,
    "memory": _GWR_KEYS,
    "mood": ("strength", "vm_scale", "inject_memory") + _GWR_KEYS,
    "replay": ("snapshot_every",),
}


def _convert(raw: str, like, where: str):
    raw = raw.strip()
    try:
        if isinstance(like, bool):
            lowered = raw.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
        if isinstance(like, tuple):
            return tuple(float(x) for x in raw.replace(",", " ").split())
    except ValueError:
        raise ConfigError(f"{where}: cannot read {raw!r} as {type(like).__name__}") from None
    return raw


def _apply(obj, values: dict[str, str], section: str):
    changes = {k: _convert(v, getattr(obj, k), f"[{section}] {k}") for k, v in values.items()}
    return replace(obj, **changes)


def _subjects(raw: str) -> list[SubjectProfile]:
    out = []
    for item in raw.replace(",", " ").split():
        sid, _, temperament = item.partition(":")
        try:
            out.append(SubjectProfile(sid, float(temperament)))
        except ValueError:
            raise ConfigError(f"[session] subjects: expected id:temperament, got {item!r}") from None
    if not out:
        raise ConfigError("[session] subjects: empty list")
    return out


def check_keys(sections: dict[str, dict[str, str]]) -> None:
    for name, values in sections.items():
        if name not in SECTIONS:
            raise ConfigError(f"unknown section [{name}]; valid sections: {', '.join(SECTIONS)}")
        for key in values:
            if key not in SECTIONS[name]:
                raise ConfigError(f"unknown key {key!r} in [{name}]; valid keys: {', '.join(SECTIONS[name])}")


def build_config(sections: dict[str, dict[str, str]]) -> ExperimentConfig:
    check_keys(sections)
    cfg = ExperimentConfig()
    s = {k: dict(v) for k, v in sections.items()}
    if "model" in s:
        profile = s["model"]["profile"].strip()
        if profile not in PROFILES:
            raise ConfigError(f"[model] profile must be one of {', '.join(PROFILES)}, got {profile!r}")
        cfg = replace(cfg, profile=profile)
    if "pool" in s:
        p = s["pool"]
        cfg = replace(cfg, pool_per_concept=_convert(p.get("per_concept", str(cfg.pool_per_concept)), 0, "[pool] per_concept"),
                      pool_noise=_convert(p.get("noise", str(cfg.pool_noise)), 0.0, "[pool] noise"))
    for section, attr in (("train.visual", "visual"), ("train.auditory", "auditory"), ("train.cross", "finetune")):
        if section in s:
            cfg = replace(cfg, **{attr: _apply(getattr(cfg, attr), s[section], section)})
    if "perception" in s:
        p = dict(s["perception"])
        if "epochs" in p:
            cfg = replace(cfg, perception_epochs=_convert(p.pop("epochs"), 0, "[perception] epochs"))
        cfg = replace(cfg, perception=_apply(cfg.perception, p, "perception"))
    if "session" in s:
        p = dict(s["session"])
        session = cfg.session
        if "subjects" in p:
            session = replace(session, subjects=_subjects(p.pop("subjects")))
        if "topics" in p:
            session = replace(session, topics=p.pop("topics").replace(",", " ").split())
        cfg = replace(cfg, session=_apply(session, p, "session"))
    if "memory" in s:
        cfg = replace(cfg, memory=_apply(cfg.memory, s["memory"], "memory"))
    if "mood" in s:
        p = dict(s["mood"])
        own = {k: p.pop(k) for k in ("strength", "vm_scale", "inject_memory") if k in p}
        mood = _apply(cfg.mood, own, "mood")
        cfg = replace(cfg, mood=replace(mood, params=_apply(mood.params, p, "mood")))
    if "replay" in s:
        cfg = replace(cfg, snapshot_every=_convert(s["replay"]["snapshot_every"], 0, "[replay] snapshot_every"))
    return cfg


def parse_overrides(items: list[str]) -> dict[str, dict[str, str]]:
    """``section.key=value`` strings; the key is everything after the last dot."""
    out: dict[str, dict[str, str]] = {}
    for item in items:
        lhs, sep, value = item.partition("=")
        section, dot, key = lhs.strip().rpartition(".")
        if not sep or not dot or not section or not key:
            raise ConfigError(f"override {item!r} is not section.key=value")
        out.setdefault(section, {})[key] = value
    return out


def read_sections(path: str | Path | None) -> dict[str, dict[str, str]]:
    if path is None:
        return {}
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except configparser.Error as exc:
        raise ConfigError(f"config {path}: {exc}") from exc
    return {name: dict(parser[name]) for name in parser.sections()}


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> ExperimentConfig:
    sections = read_sections(path)
    for section, values in parse_overrides(overrides or []).items():
        sections.setdefault(section, {}).update(values)
    return build_config(sections)


def config_to_dict(cfg: ExperimentConfig) -> dict:
    d = asdict(cfg)
    return json.loads(json.dumps(d))  # tuples -> lists, as stored in state files


def config_from_dict(d: dict) -> ExperimentConfig:
    def gwr(p):
        return GwrParams(**{**p, "alphas": tuple(p["alphas"])})

    def train(p):
        return TrainParams(**p)

    session = dict(d["session"])
    session["subjects"] = [SubjectProfile(**x) for x in session["subjects"]]
    mood = dict(d["mood"])
    mood["params"] = gwr(mood["params"])
    return ExperimentConfig(
        profile=d["profile"], pool_per_concept=d["pool_per_concept"], pool_noise=d["pool_noise"],
        visual=train(d["visual"]), auditory=train(d["auditory"]), finetune=train(d["finetune"]),
        perception=gwr(d["perception"]), perception_epochs=d["perception_epochs"],
        session=SynthConfig(**session), memory=gwr(d["memory"]), mood=MoodConfig(**mood),
        snapshot_every=d["snapshot_every"])


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(json.dumps(config_to_dict(cfg), sort_keys=True).encode()).hexdigest()

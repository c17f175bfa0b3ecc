"""Report figures, rendered off-screen to PNG files."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import concept_balanced_mean, cumulative_mean  # noqa: E402


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def memory_figure(path: Path, events, memory_rows: dict[str, list[tuple]], every: int) -> Path:
    subjects = sorted(memory_rows)
    fig, axes = plt.subplots(len(subjects), 1, figsize=(7, 1.9 * len(subjects)), sharex=False, squeeze=False)
    for ax, sid in zip(axes[:, 0], subjects):
        mine = [e for e in events if e.subject == sid]
        v = [e.annotation.valence for e in mine]
        x = np.arange(1, len(mine) + 1)
        ax.plot(x, concept_balanced_mean(v, [e.annotation.concept for e in mine]), color="0.3", lw=1.2,
                label="reference")
        ax.plot(x, cumulative_mean(v), color="0.6", lw=0.8, ls="--", label="running mean")
        ax.plot(x[every - 1::every], [r[2] for r in memory_rows[sid]], color="C0", lw=1.5, label="memory")
        ax.axhline(0.0, color="0.85", lw=0.6)
        ax.set_ylim(-1, 1)
        ax.set_ylabel(f"{sid} valence")
    axes[0, 0].legend(loc="upper right", fontsize=7, ncol=3)
    axes[-1, 0].set_xlabel("subject event")
    return _save(fig, path)


def mood_figure(path: Path, events, mood_rows: list[tuple], every: int) -> Path:
    fig, ax = plt.subplots(figsize=(7, 2.4))
    x = np.arange(1, len(events) + 1)
    ax.plot(x, cumulative_mean([e.annotation.valence for e in events]), color="0.3", lw=1.2,
            label="session mean")
    ax.plot(x[every - 1::every], [r[2] for r in mood_rows], color="C3", lw=1.5, label="mood")
    ax.set_ylim(-1, 1)
    ax.set_xlabel("session event")
    ax.set_ylabel("valence")
    ax.legend(loc="upper right", fontsize=7)
    return _save(fig, path)


def ccc_figure(path: Path, metrics: dict) -> Path:
    subjects = sorted(metrics["memory_ccc"])
    fig, ax = plt.subplots(figsize=(4.5, 2.6))
    ax.bar(subjects, [metrics["memory_ccc"][s] for s in subjects], color="C0")
    ax.axhline(0.8, color="0.4", lw=0.8, ls=":")
    ax.set_ylim(min(0.0, *[metrics["memory_ccc"][s] for s in subjects]) - 0.05, 1.0)
    ax.set_ylabel("memory CCC")
    return _save(fig, path)


def report_figures(out: Path, events, memory_rows, mood_rows, every: int, metrics: dict) -> list[Path]:
    out = Path(out)
    return [memory_figure(out / "memory.png", events, memory_rows, every),
            mood_figure(out / "mood.png", events, mood_rows, every),
            ccc_figure(out / "memory_ccc.png", metrics)]

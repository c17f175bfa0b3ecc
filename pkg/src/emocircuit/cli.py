"""Command-line entry point.

Training is staged: ``train-visual`` creates a state file from the config
and seed, and each later stage reads the previous state and writes a new
one. The seed given to every stochastic stage must match the one the
state was started with, since the training pool is rebuilt from it.

Exit codes: 0 success, 1 usage or configuration error, 2 invalid data or
state, 3 numeric failure (including a failed gradient check).
"""

from __future__ import annotations

import argparse
import csv
import json
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__, experiment, gwr as gwr_mod, plots
from .appraisal import TRAJECTORY_COLUMNS, Appraiser, MoodState
from .config import ConfigError, config_from_dict, config_hash, config_to_dict, load_config
from .errors import NumericError, ShapeError, ValidationError
from .gradcheck import THRESHOLD, gradient_suite
from .metrics import ccc, concept_balanced_mean
from .session import load_session, write_session
from .state import ModelState, load_state, save_state

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# helpers


def _versions() -> dict[str, str]:
    import matplotlib

    return {"emocircuit": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "matplotlib": matplotlib.__version__}


def write_manifest(where: Path, command: str, cfg: experiment.ExperimentConfig | None, seed: int | None,
                   outputs: list[Path], inputs: dict[str, str] | None = None) -> Path:
    """``manifest.json`` in ``where`` if it is a directory, else ``<where>.manifest.json``."""
    path = where / "manifest.json" if where.is_dir() else where.with_name(where.name + ".manifest.json")
    doc = {"command": command, "seed": seed, "config_hash": None if cfg is None else config_hash(cfg),
           "versions": _versions(), "inputs": inputs or {}, "outputs": sorted(str(p) for p in outputs)}
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _require_seed(args) -> int:
    if args.seed is None:
        raise UsageError(f"{args.command} is stochastic; --seed is required")
    return args.seed


def _fresh_config(args) -> experiment.ExperimentConfig:
    return load_config(args.config, args.set)


def _staged(args) -> tuple[ModelState, experiment.ExperimentConfig, dict[str, int]]:
    """Previous state plus its stored config; the seed must be the one it started with."""
    st = load_state(args.state)
    seed = _require_seed(args)
    if st.seeds.get("master") != seed:
        raise ValidationError(f"--seed {seed} does not match the seed {st.seeds.get('master')} "
                              f"this state was trained with")
    return st, config_from_dict(st.hyperparameters), st.seeds


def _write_rows(path: Path, header, rows) -> Path:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return path


def _read_rows(path: Path) -> list[tuple[int, float, float, int]]:
    with open(path, newline="", encoding="utf-8") as fh:
        r = csv.reader(fh)
        header = next(r, None)
        if header is None or tuple(header) != TRAJECTORY_COLUMNS:
            raise ValidationError(f"{path}: expected columns {', '.join(TRAJECTORY_COLUMNS)}")
        return [(int(t), float(a), float(v), int(n)) for t, a, v, n in r]


# ---------------------------------------------------------------------------
# commands


def cmd_gradcheck(args) -> int:
    rows = gradient_suite(args.seed, args.profile, args.max_probes)
    worst = 0.0
    for name, err in rows:
        flag = "ok" if err < args.threshold else "FAIL"
        print(f"{name:24s} {err:.3e}  {flag}")
        worst = max(worst, err)
    if args.out:
        out = Path(args.out)
        _write_rows(out, ("operation", "max_relative_error"), [(n, repr(e)) for n, e in rows])
        write_manifest(out, "gradcheck", None, args.seed, [out])
    if worst >= args.threshold:
        print(f"gradient check failed: worst relative error {worst:.3e} >= {args.threshold:g}", file=sys.stderr)
        return EXIT_NUMERIC
    return 0


def cmd_synth(args) -> int:
    seed = _require_seed(args)
    cfg = _fresh_config(args)
    events = experiment.session_events(cfg, experiment.seed_record(seed))
    out = write_session(events, args.out)
    write_manifest(out, "synth", cfg, seed, [out, out.parent / f"{out.stem}_blobs"])
    print(f"wrote {len(events)} events to {out}")
    return 0


def _save(args, st: ModelState, cfg, seed: int, report: dict) -> int:
    out = save_state(st, args.out, side_files=args.side_files)
    inputs = {"state": str(args.state)} if getattr(args, "state", None) else {}
    write_manifest(out, args.command, cfg, seed, [out], inputs)
    summary = {k: (v[-1] if isinstance(v, list) and v else v) for k, v in report.items()
               if isinstance(v, (int, float, list)) and not isinstance(v, bool)}
    print(f"{args.command}: wrote {out}  {json.dumps(summary, default=float)}")
    return 0


def cmd_train_visual(args) -> int:
    seed = _require_seed(args)
    cfg = _fresh_config(args)
    seeds = experiment.seed_record(seed)
    pool = experiment.build_pool(cfg, seeds)
    model = experiment.new_model(cfg, seeds)
    report = experiment.train_visual_stage(model, cfg, pool, seeds)
    return _save(args, ModelState(model, hyperparameters=config_to_dict(cfg), seeds=seeds), cfg, seed, report)


def cmd_train_audio(args) -> int:
    st, cfg, seeds = _staged(args)
    pool = experiment.build_pool(cfg, seeds)
    report = experiment.train_auditory_stage(st.model, cfg, pool, seeds)
    return _save(args, st, cfg, seeds["master"], report)


def cmd_train_cross(args) -> int:
    st, cfg, seeds = _staged(args)
    pool = experiment.build_pool(cfg, seeds)
    report = experiment.train_cross_stage(st.model, cfg, pool, seeds)
    return _save(args, st, cfg, seeds["master"], report)


def cmd_fit_perception(args) -> int:
    st, cfg, seeds = _staged(args)
    pool = experiment.build_pool(cfg, seeds)
    st.perception, report = experiment.fit_perception_stage(st.model, cfg, pool, seeds)
    report = {"neurons": st.perception.gwr.n_neurons, "head_loss": report["heads"]["loss"]}
    return _save(args, st, cfg, seeds["master"], report)


def cmd_replay(args) -> int:
    st = load_state(args.state)
    if st.perception is None:
        raise ValidationError(f"{args.state} has no fitted perception; run fit-perception first")
    cfg = config_from_dict(st.hyperparameters)
    events = load_session(args.session)
    st.perception.mode = args.mode
    app = Appraiser(st.perception, st.mood or MoodState(cfg.mood), cfg.memory, snapshot_every=cfg.snapshot_every)
    app.memories.update(st.memories)
    res = app.replay(events)
    st.memories, st.mood = app.memories, app.mood

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = [_write_rows(out / f"memory_{sid}.csv", TRAJECTORY_COLUMNS, rows)
               for sid, rows in sorted(res.memory_rows.items())]
    written.append(_write_rows(out / "mood.csv", TRAJECTORY_COLUMNS, res.mood_rows))
    written.append(_write_rows(
        out / "percepts.csv", ("t_ms", "subject", "bmu", "arousal", "valence", "concept", "mood_reps"),
        [(e.t_ms, e.subject, p.bmu_index, p.arousal, p.valence, p.concept, u.reps)
         for (e, p), u in zip(res.percepts, res.mood_updates)]))
    written.append(save_state(st, out / "final_state.json", side_files=args.side_files))
    write_manifest(out, "replay", cfg, st.seeds.get("master"), written,
                   {"state": str(Path(args.state).resolve()), "session": str(Path(args.session).resolve()),
                    "mode": args.mode})
    print(f"replayed {len(events)} events: {len(res.memory_rows)} memories, mood {app.mood.gwr.n_neurons} neurons")
    return 0


def _segments(events, subject: str):
    """(topic, start, stop) runs of one subject's events, in order."""
    mine = [e for e in events if e.subject == subject]
    out, start = [], 0
    for i in range(1, len(mine) + 1):
        if i == len(mine) or mine[i].topic != mine[start].topic:
            out.append((mine[start].topic, start, i))
            start = i
    return mine, out


def cmd_report(args) -> int:
    run = Path(args.run)
    try:
        manifest = json.loads((run / "manifest.json").read_text(encoding="utf-8"))
        session = Path(manifest["inputs"]["session"])
    except (OSError, KeyError, json.JSONDecodeError) as exc:
        raise ValidationError(f"{run} is not a replay output directory ({exc})") from exc
    st = load_state(run / "final_state.json")
    cfg = config_from_dict(st.hyperparameters)
    events = load_session(session)
    memory_rows = {p.stem[len("memory_"):]: _read_rows(p) for p in sorted(run.glob("memory_*.csv"))}
    mood_rows = _read_rows(run / "mood.csv")
    pool = experiment.build_pool(cfg, st.seeds)
    means = {sid: m.mean_av()[1] for sid, m in st.memories.items()}
    metrics = experiment.evaluate(cfg, pool, st.perception, events, memory_rows, mood_rows, means,
                                  st.mood.update_count)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    temperament = {s.id: s.temperament for s in cfg.session.subjects}
    subject_rows, topic_rows = [], []
    k = cfg.snapshot_every
    for sid, rows in memory_rows.items():
        mine, segs = _segments(events, sid)
        subject_rows.append((sid, temperament.get(sid, ""), len(mine), metrics["memory_ccc"][sid],
                             metrics["memory_ccc_cumulative"][sid], means.get(sid, 0.0)))
        ref = concept_balanced_mean([e.annotation.valence for e in mine], [e.annotation.concept for e in mine])
        traj = np.full(len(mine), np.nan)
        traj[k - 1::k] = [r[2] for r in rows]
        for topic, a, b in segs:
            idx = [i for i in range(a, b) if not np.isnan(traj[i])]
            seg_ccc = ccc(traj[idx], ref[idx]) if len(idx) >= 2 else float("nan")
            topic_rows.append((sid, topic, b - a, float(np.mean([e.annotation.valence for e in mine[a:b]])),
                               float(traj[idx[-1]]) if idx else float("nan"), seg_ccc))
    written = [
        _write_rows(out / "subjects.csv", ("subject", "temperament", "events", "memory_ccc",
                                           "memory_ccc_cumulative", "memory_mean_valence"), subject_rows),
        _write_rows(out / "topics.csv", ("subject", "topic", "events", "annotated_valence",
                                         "memory_valence_end", "memory_ccc"), topic_rows),
    ]
    summary = out / "metrics.json"
    summary.write_text(json.dumps(metrics, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    written.append(summary)
    written += plots.report_figures(out, events, memory_rows, mood_rows, cfg.snapshot_every, metrics)
    write_manifest(out, "report", cfg, st.seeds.get("master"), written, {"run": str(run.resolve())})
    print(json.dumps({k: v for k, v in metrics.items() if k != "memory_ccc_cumulative"}, indent=1, sort_keys=True))
    return 0


def cmd_export_gwr(args) -> int:
    st = load_state(args.state)
    which = args.which
    if which == "perception":
        if st.perception is None:
            raise ValidationError("state has no perception network")
        net = st.perception.gwr
    elif which == "mood":
        if st.mood is None:
            raise ValidationError("state has no mood network")
        net = st.mood.gwr
    elif which.startswith("memory:"):
        sid = which.split(":", 1)[1]
        mem = st.memories.get(sid)
        if mem is None or mem.gwr is None:
            raise ValidationError(f"state has no memory for subject {sid!r}; known: {sorted(st.memories)}")
        net = mem.gwr
    else:
        raise UsageError("--which must be perception, mood or memory:<subject>")
    text = gwr_mod.export_dot(net, which.replace(":", "_")) if args.format == "dot" else gwr_mod.export_csv(net)
    out = Path(args.out)
    out.write_text(text, encoding="utf-8")
    write_manifest(out, "export-gwr", None, st.seeds.get("master"), [out], {"state": str(args.state)})
    print(f"wrote {which} ({net.n_neurons} neurons) to {out}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="emocircuit", description="Crossmodal affect perception, memory and mood.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def stage(name, help, needs_state=True):
        sp = sub.add_parser(name, help=help)
        sp.add_argument("--seed", type=int)
        if needs_state:
            sp.add_argument("--state", required=True)
        else:
            sp.add_argument("--config", help="key = value config file")
            sp.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
        sp.add_argument("--out", required=True)
        sp.add_argument("--side-files", action="store_true", help="store tensors in <out>.blobs/")
        return sp

    g = sub.add_parser("gradcheck", help="finite-difference check of every layer and a whole model")
    g.add_argument("--seed", type=int, default=0, help="probe seed (fixed default: the check is reproducible)")
    g.add_argument("--profile", default="desk", choices=("desk", "tiny"))
    g.add_argument("--max-probes", type=int, default=3)
    g.add_argument("--threshold", type=float, default=THRESHOLD)
    g.add_argument("--out", help="CSV of per-operation errors")

    s = sub.add_parser("synth", help="write a synthetic session (JSON lines + blobs)")
    s.add_argument("--seed", type=int)
    s.add_argument("--config")
    s.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    s.add_argument("--out", required=True)

    stage("train-visual", "create a state and train the visual channel", needs_state=False)
    stage("train-audio", "train the auditory channel")
    stage("train-cross", "fine-tune the cross-channel and regressor")
    stage("fit-perception", "fit the Perception GWR and appraisal heads")

    r = sub.add_parser("replay", help="run a session through perception, memories and mood")
    r.add_argument("--state", required=True)
    r.add_argument("--session", required=True)
    r.add_argument("--out", required=True, help="output directory")
    r.add_argument("--mode", default="frozen", choices=("frozen", "online"))
    r.add_argument("--side-files", action="store_true")

    rep = sub.add_parser("report", help="CCC tables and figures for a replay directory")
    rep.add_argument("--run", required=True)
    rep.add_argument("--out", required=True)

    e = sub.add_parser("export-gwr", help="write a GWR network as DOT or CSV")
    e.add_argument("--state", required=True)
    e.add_argument("--which", required=True, help="perception, mood or memory:<subject>")
    e.add_argument("--format", default="dot", choices=("dot", "csv"))
    e.add_argument("--out", required=True)
    return p


COMMANDS = {
    "gradcheck": cmd_gradcheck, "synth": cmd_synth, "train-visual": cmd_train_visual,
    "train-audio": cmd_train_audio, "train-cross": cmd_train_cross, "fit-perception": cmd_fit_perception,
    "replay": cmd_replay, "report": cmd_report, "export-gwr": cmd_export_gwr,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"emocircuit {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValidationError, ShapeError) as exc:
        print(f"emocircuit {args.command}: invalid data: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as exc:
        print(f"emocircuit {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())

import json
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from emocircuit import cli
from emocircuit.config import ConfigError, build_config, config_from_dict, config_to_dict, load_config
from emocircuit.errors import MigrationRefused, StateError
from emocircuit.experiment import ExperimentConfig, run_experiment
from emocircuit.state import FORMAT_VERSION, ModelState, dumps_state, load_state, loads_state, save_state

SMALL_INI = """
[pool]
per_concept = 6
[train.visual]
epochs = 1
[train.auditory]
epochs = 1
[train.cross]
epochs = 1
[perception]
epochs = 1
[session]
events_per_topic = 4   # keeps the session at 80 events
"""


def desk_state(run) -> ModelState:
    return ModelState(run.model, run.perception, run.appraiser.memories, run.appraiser.mood,
                      config_to_dict(run.config), run.seeds)


# --- state container


@pytest.fixture(scope="module")
def state_bytes(desk_run):
    return dumps_state(desk_state(desk_run))


def test_save_load_save_is_byte_identical(state_bytes):
    assert dumps_state(loads_state(state_bytes)) == state_bytes


def test_side_filed_tensors_round_trip(tmp_path, state_bytes):
    st = loads_state(state_bytes)
    path = save_state(st, tmp_path / "s.json", side_files=True)
    blobs = list((tmp_path / "s.json.blobs").iterdir())
    assert blobs and len(path.read_bytes()) < len(state_bytes) / 10
    assert dumps_state(load_state(path)) == state_bytes


def test_reloaded_model_gives_identical_percepts(desk_run, state_bytes):
    again = loads_state(state_bytes)
    probe = desk_run.pool.subset(desk_run.pool.test) + desk_run.events[::25]
    for ev in probe:
        assert desk_run.perception.perceive(ev).same_as(again.perception.perceive(ev))
    assert again.perception.model is again.model


def test_reloaded_state_keeps_memories_and_mood(desk_run, state_bytes):
    again = loads_state(state_bytes)
    assert sorted(again.memories) == sorted(desk_run.appraiser.memories)
    for sid, mem in desk_run.appraiser.memories.items():
        assert again.memories[sid].mean_av() == mem.mean_av()
    assert again.mood.update_count == desk_run.appraiser.mood.update_count
    assert config_from_dict(again.hyperparameters) == desk_run.config


@pytest.mark.parametrize("keep", [0.0, 0.3, 0.999])
def test_truncated_state_is_a_parse_error(tmp_path, state_bytes, keep):
    path = tmp_path / "cut.json"
    path.write_bytes(state_bytes[:int(len(state_bytes) * keep)])
    with pytest.raises(StateError, match="does not parse"):
        load_state(path)


def test_version_mismatch_is_refused(state_bytes):
    doc = json.loads(state_bytes)
    doc["format_version"] = FORMAT_VERSION + 1
    with pytest.raises(MigrationRefused):
        loads_state(json.dumps(doc).encode())


def test_foreign_or_damaged_documents(tmp_path, state_bytes):
    with pytest.raises(StateError, match="not an emocircuit"):
        loads_state(b'{"hello": 1}')
    doc = json.loads(state_bytes)
    del doc["model"]["arrays"]["cross.joint.w"]
    with pytest.raises(StateError, match="malformed"):
        loads_state(json.dumps(doc).encode())


def test_corrupt_side_file_is_detected(tmp_path, state_bytes):
    path = save_state(loads_state(state_bytes), tmp_path / "s.json", side_files=True)
    blob = sorted((tmp_path / "s.json.blobs").iterdir())[0]
    raw = bytearray(blob.read_bytes())
    raw[-1] ^= 0xFF
    blob.write_bytes(bytes(raw))
    with pytest.raises(StateError, match="digest"):
        load_state(path)


# --- config files


def test_unknown_key_lists_valid_keys():
    with pytest.raises(ConfigError, match=r"unknown key 'epoch' in \[train.visual\]; valid keys: epochs, batch_size"):
        build_config({"train.visual": {"epoch": "3"}})
    with pytest.raises(ConfigError, match="valid sections: model, pool"):
        build_config({"trainer": {}})


def test_config_values_and_overrides(tmp_path):
    ini = tmp_path / "c.ini"
    ini.write_text("[mood]\nstrength = 2.5\ninject_memory = yes\ninsertion_threshold = 0.002\n"
                   "[session]\nsubjects = a:1, b:-0.5\ntopics = school food\n[perception]\nalphas = 0.6 0.4\n")
    cfg = load_config(ini, ["replay.snapshot_every=5", "train.cross.eta=0.1"])
    assert cfg.mood.strength == 2.5 and cfg.mood.inject_memory is True
    assert cfg.mood.params.insertion_threshold == 0.002
    assert [(s.id, s.temperament) for s in cfg.session.subjects] == [("a", 1.0), ("b", -0.5)]
    assert cfg.session.topics == ["school", "food"]
    assert cfg.perception.alphas == (0.6, 0.4)
    assert cfg.snapshot_every == 5 and cfg.finetune.eta == 0.1
    assert load_config() == ExperimentConfig()


@pytest.mark.parametrize("sections", [{"pool": {"noise": "lots"}}, {"mood": {"inject_memory": "maybe"}},
                                      {"model": {"profile": "huge"}}, {"session": {"subjects": "a"}}])
def test_bad_values_are_config_errors(sections):
    with pytest.raises(ConfigError):
        build_config(sections)


def test_config_dict_round_trip():
    cfg = load_config(None, ["mood.vm_scale=raw", "session.subjects=x:0.25", "memory.max_edge_age=9"])
    assert config_from_dict(json.loads(json.dumps(config_to_dict(cfg)))) == cfg


# --- command line


def run_cli(*argv) -> int:
    return cli.main([str(a) for a in argv])


def test_synth_twice_gives_identical_files(tmp_path):
    ini = tmp_path / "c.ini"
    ini.write_text(SMALL_INI)
    for name in ("a", "b"):
        assert run_cli("synth", "--seed", 7, "--config", ini, "--out", tmp_path / name / "s.jsonl") == 0
    files_a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file()
                     and not p.name.endswith("manifest.json"))
    assert len(files_a) == 1 + 2 * 80
    for rel in files_a:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_missing_seed_is_a_usage_error(tmp_path, capsys):
    assert run_cli("synth", "--out", tmp_path / "s.jsonl") == 1
    assert "--seed is required" in capsys.readouterr().err


def test_unknown_config_key_exits_1(tmp_path, capsys):
    assert run_cli("synth", "--seed", 1, "--set", "session.speed=3", "--out", tmp_path / "s.jsonl") == 1
    assert "valid keys" in capsys.readouterr().err


def test_bad_arguments_exit_1():
    with pytest.raises(SystemExit) as exc:
        run_cli("train-audio", "--seed", 1)
    assert exc.value.code == 1


def test_gradcheck_exit_codes(tmp_path, capsys):
    assert run_cli("gradcheck", "--profile", "tiny", "--out", tmp_path / "g.csv") == 0
    rows = (tmp_path / "g.csv").read_text().splitlines()
    assert rows[0] == "operation,max_relative_error" and any(r.startswith("model_tiny,") for r in rows)
    assert run_cli("gradcheck", "--profile", "tiny", "--threshold", "1e-30") == 3
    assert "gradient check failed" in capsys.readouterr().err


def test_unreadable_state_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"format": "emocircuit-state", "format_vers')
    assert run_cli("replay", "--state", bad, "--session", bad, "--out", tmp_path / "r") == 2
    assert "invalid data" in capsys.readouterr().err


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    ini = d / "small.ini"
    ini.write_text(SMALL_INI)
    seed = 5
    steps = [
        ("synth", "--seed", seed, "--config", ini, "--out", d / "session.jsonl"),
        ("train-visual", "--seed", seed, "--config", ini, "--out", d / "s1.json"),
        ("train-audio", "--seed", seed, "--state", d / "s1.json", "--out", d / "s2.json"),
        ("train-cross", "--seed", seed, "--state", d / "s2.json", "--out", d / "s3.json", "--side-files"),
        ("fit-perception", "--seed", seed, "--state", d / "s3.json", "--out", d / "s4.json"),
        ("replay", "--state", d / "s4.json", "--session", d / "session.jsonl", "--out", d / "run"),
        ("report", "--run", d / "run", "--out", d / "report"),
    ]
    for argv in steps:
        assert run_cli(*argv) == 0, argv
    return d, seed, load_config(ini)


def test_replay_then_report_reproduces_the_library_numbers(pipeline):
    d, seed, cfg = pipeline
    reported = json.loads((d / "report" / "metrics.json").read_text())
    expected = run_experiment(cfg, seed).metrics
    assert json.dumps(reported, sort_keys=True) == json.dumps(expected, sort_keys=True)


def test_report_outputs(pipeline):
    d, _, _ = pipeline
    rep = d / "report"
    for name in ("subjects.csv", "topics.csv", "metrics.json", "memory.png", "mood.png", "memory_ccc.png"):
        assert (rep / name).stat().st_size > 0
    subjects = (rep / "subjects.csv").read_text().splitlines()
    assert subjects[0].startswith("subject,temperament,events,memory_ccc")
    assert len(subjects) == 5
    assert len((rep / "topics.csv").read_text().splitlines()) == 1 + 4 * 5
    assert (d / "run" / "mood.csv").read_text().splitlines()[0] == "t_ms,arousal,valence,neuron_count"


def test_every_run_writes_a_manifest(pipeline):
    d, seed, cfg = pipeline
    for m in [d / "session.jsonl.manifest.json", d / "s4.json.manifest.json", d / "run" / "manifest.json",
              d / "report" / "manifest.json"]:
        doc = json.loads(m.read_text())
        assert doc["seed"] == seed and len(doc["config_hash"]) == 64
        assert {"emocircuit", "python", "numpy", "matplotlib"} <= set(doc["versions"])


def test_replay_is_byte_deterministic(pipeline, tmp_path):
    d, _, _ = pipeline
    assert run_cli("replay", "--state", d / "s4.json", "--session", d / "session.jsonl", "--out", tmp_path) == 0
    for f in sorted((d / "run").iterdir()):
        if f.name != "manifest.json":
            assert (tmp_path / f.name).read_bytes() == f.read_bytes(), f.name


def test_stage_seed_must_match(pipeline, tmp_path):
    d, seed, _ = pipeline
    assert run_cli("train-audio", "--seed", seed + 1, "--state", d / "s1.json", "--out", tmp_path / "x.json") == 2


def test_export_gwr(pipeline, tmp_path):
    d, _, _ = pipeline
    state = d / "run" / "final_state.json"
    assert run_cli("export-gwr", "--state", state, "--which", "memory:s1", "--out", tmp_path / "m.dot") == 0
    assert (tmp_path / "m.dot").read_text().lstrip().startswith("graph")
    assert run_cli("export-gwr", "--state", state, "--which", "mood", "--format", "csv",
                   "--out", tmp_path / "mood.csv") == 0
    assert (tmp_path / "mood.csv").read_text().startswith("id,habituation")
    assert run_cli("export-gwr", "--state", state, "--which", "memory:nobody", "--out", tmp_path / "n.dot") == 2
    assert run_cli("export-gwr", "--state", state, "--which", "brain", "--out", tmp_path / "n.dot") == 1

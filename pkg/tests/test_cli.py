from __future__ import annotations

import csv
import json

import pytest

from fidlab.cli import load_config, main, ConfigError

TINY = {
    "seeds": [0],
    "corpus": {"n_questions": 40, "relevant_pool_size": 12, "irrelevant_pool_size": 70},
    "model": {"vocab_size": 200, "d_model": 16, "n_heads": 2, "ff_dim": 32},
    "pretrain": {"enabled": True, "n_questions": 60, "max_steps": 2, "eval_every": 1, "n_dev": 10},
    "train": {"max_steps": 2, "eval_every": 1, "batch_size": 2},
    "eval": {"n_passage_sets": 1},
}


def _config(tmp_path, **sections):
    cfg = json.loads(json.dumps(TINY))
    for key, value in sections.items():
        cfg[key] = {**cfg.get(key, {}), **value} if isinstance(value, dict) else value
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    return str(path)


def _run(tmp_path, command, *extra, **sections):
    out = tmp_path / command
    code = main([command, "--config", _config(tmp_path, **sections), "--out", str(out), *extra])
    return code, out


def test_overrides_and_unknown_keys(tmp_path):
    cfg = load_config(_config(tmp_path), ["train.max_steps=7", "env.train=[1,9]"])
    assert cfg.train.max_steps == 7 and cfg.env.train == [1, 9]
    with pytest.raises(ConfigError, match="bogus"):
        load_config(_config(tmp_path), ["train.bogus=1"])


def test_unknown_key_exits_2(tmp_path, capsys):
    code, _ = _run(tmp_path, "gen-corpus", "--set", "corpus.colour=3")
    assert code == 2
    assert "colour" in capsys.readouterr().err


def test_gen_corpus_writes_files_and_echoes_config(tmp_path):
    code, out = _run(tmp_path, "gen-corpus", "--seed", "4")
    assert code == 0
    records = json.loads((out / "corpus.json").read_text())
    assert len(records) == 40
    assert (out / "relevance_labels.jsonl").exists() and (out / "reading_corpus.json").exists()
    echo = json.loads((out / "resolved_config.json").read_text())
    assert echo["command"] == "gen-corpus" and echo["seeds"] == [4]
    assert echo["config"]["corpus"]["n_questions"] == 40


def test_ingest_round_trip(tmp_path):
    _, gen = _run(tmp_path, "gen-corpus")
    code, out = _run(
        tmp_path, "ingest", paths={"corpus": str(gen / "corpus.json"), "labels": str(gen / "relevance_labels.jsonl")}
    )
    assert code == 0
    summary = json.loads((out / "ingest_summary.json").read_text())
    assert summary["n_questions"] == 40 and summary["n_kept"] > 0


def test_missing_checkpoint_exits_3_naming_path(tmp_path, capsys):
    missing = tmp_path / "nope" / "best.fidl"
    code, _ = _run(tmp_path, "eval", paths={"checkpoints": [str(missing)]})
    assert code == 3
    assert str(missing) in capsys.readouterr().err


def test_missing_corpus_exits_3(tmp_path):
    code, _ = _run(tmp_path, "ingest", paths={"corpus": str(tmp_path / "absent.json")})
    assert code == 3


def test_train_then_eval_and_adapt(tmp_path):
    code, trained = _run(tmp_path, "train", env={"train": [1, 3]})
    assert code == 0
    ck = trained / "seed0" / "best.fidl"
    assert ck.exists() and (trained / "seed0" / "history.jsonl").exists()

    code, out = _run(tmp_path, "eval", paths={"checkpoints": [str(ck)]}, env={"eval": [[1, 3], [2, 2]]})
    assert code == 0
    rows = list(csv.DictReader(open(out / "eval.csv")))
    assert [r["eval_env"] for r in rows] == ["(1,3)", "(2,2)"]
    preds = [json.loads(line) for line in open(out / "predictions.jsonl")]
    assert {p["env"] for p in preds} == {"(1,3)", "(2,2)"}
    em = 100.0 * sum(p["em"] for p in preds if p["env"] == "(1,3)") / sum(p["env"] == "(1,3)" for p in preds)
    assert em == pytest.approx(float(rows[0]["em_mean"]), abs=1e-3)

    code, out = _run(
        tmp_path, "adapt-temperature", paths={"checkpoints": [str(ck)]}, adapt={"grid": [0.5, 1.0], "env": [2, 2]}
    )
    assert code == 0
    payload = json.loads((out / "temperature_search.json").read_text())
    assert payload["grid"] == [0.5, 1.0] and len(payload["folds"]) == 2
    assert all(f["t_star"] in (0.5, 1.0) for f in payload["folds"])

    code, out = _run(tmp_path, "intervene", paths={"checkpoints": {"m": [str(ck)]}}, env={"eval": [[2, 2]]})
    assert code == 0
    rows = list(csv.DictReader(open(out / "intervention.csv")))
    assert {r["r"] for r in rows} == {"none", "1.0", "0.1", "0.0"}

    code, out = _run(tmp_path, "probe-attention", paths={"checkpoints": [str(ck)]}, env={"eval": [[2, 2]]})
    assert code == 0
    assert (out / "attention_layers.csv").exists()


def test_small_quality_sweep(tmp_path):
    code, out = _run(
        tmp_path, "sweep-quality", sweep={"n_values": [4], "n_plus_values": [1, 2]}, pretrain={"enabled": False}
    )
    assert code == 0
    matrix = list(csv.DictReader(open(out / "quality_sweep_matrix.csv")))
    assert [r["train_env"] for r in matrix] == ["(1,3)", "(2,2)"]
    assert (out / "checkpoints" / "(1,3)" / "seed0.fidl").exists()


def test_annotate_writes_labels_for_every_passage(tmp_path):
    code, out = _run(tmp_path, "annotate", corpus={"n_questions": 80})
    assert code == 0
    labels = [json.loads(line) for line in (out / "relevance_labels.jsonl").read_text().splitlines()]
    assert len(labels) == 80 * 82
    assert {row["label"] for row in labels} <= {"relevant", "irrelevant", "discarded"}
    summary = json.loads((out / "annotation_summary.json").read_text())
    assert sum(summary["split_sizes"].values()) == 60
    assert sum(summary["label_counts"].values()) == len(labels)

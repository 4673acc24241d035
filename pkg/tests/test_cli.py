"""End-to-end CLI tests over a miniature corpus."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest

from plangen import cli
from plangen.cli import main, read_config_file
from plangen.corpus import read_corpus, read_schema
from plangen.inference import read_generations


@pytest.fixture(scope="module")
def workdir(tmp_path_factory) -> Path:
    root = tmp_path_factory.mktemp("cli")
    rc = main(["make-toy", "--seed", "3", "--n-train", "14", "--n-valid", "3",
               "--n-test", "4", "--out", str(root / "data")])
    assert rc == 0
    return root


@pytest.fixture(scope="module")
def trained_dir(workdir) -> Path:
    rc = main([
        "train", "--profile", "toy",
        "--schema", str(workdir / "data" / "schema.json"),
        "--train", str(workdir / "data" / "train.jsonl"),
        "--valid", str(workdir / "data" / "valid.jsonl"),
        "--checkpoint", str(workdir / "model.ckpt"),
        "--loss-log", str(workdir / "loss.tsv"),
        "--hidden", "8", "--embed", "8", "--epochs", "2", "--seed", "5",
    ])
    assert rc == 0
    return workdir


def test_make_toy_outputs(workdir):
    data = workdir / "data"
    schema = read_schema(data / "schema.json")
    assert schema.name == "toy-v1"
    train_games = read_corpus(data / "train.jsonl")
    assert len(train_games) == 14
    assert all(g.oracle is not None for g in train_games)
    test_games = read_corpus(data / "test.jsonl")
    assert len(test_games) == 4
    assert all(g.oracle is None for g in test_games)


def test_make_toy_seed_determinism(tmp_path):
    for sub in ("a", "b"):
        rc = main(["make-toy", "--seed", "9", "--n-train", "5", "--n-valid", "2",
                   "--n-test", "2", "--out", str(tmp_path / sub)])
        assert rc == 0
    for name in ("schema.json", "train.jsonl", "valid.jsonl", "test.jsonl"):
        assert (tmp_path / "a" / name).read_bytes() == \
               (tmp_path / "b" / name).read_bytes()


def test_make_toy_empty(tmp_path):
    rc = main(["make-toy", "--n-train", "0", "--n-valid", "0", "--n-test", "0",
               "--out", str(tmp_path / "empty")])
    assert rc == 0
    assert (tmp_path / "empty" / "train.jsonl").read_text() == ""


def test_train_writes_checkpoint_and_loss_log(trained_dir):
    assert (trained_dir / "model.ckpt").exists()
    log = (trained_dir / "loss.tsv").read_text().splitlines()
    assert log[0].split("\t")[:3] == ["epoch", "step", "loss"]
    assert len(log) > 2


def test_generate_and_evaluate(trained_dir):
    data = trained_dir / "data"
    gen_path = trained_dir / "gen.jsonl"
    rc = main(["generate", "--checkpoint", str(trained_dir / "model.ckpt"),
               "--schema", str(data / "schema.json"),
               "--corpus", str(data / "test.jsonl"),
               "--out", str(gen_path), "--beam-size", "1"])
    assert rc == 0
    rows = read_generations(gen_path)
    assert len(rows) == 4
    for row in rows:
        assert len(row.paragraphs) == len(row.plan_indices)

    report_path = trained_dir / "report.txt"
    rc = main(["evaluate", "--generated", str(gen_path),
               "--gold", str(data / "test.jsonl"),
               "--schema", str(data / "schema.json"),
               "--out", str(report_path)])
    assert rc == 0
    text = report_path.read_text()
    assert "RG #" in text and "BLEU" in text and "plan CS F%" in text


def test_generate_deterministic(trained_dir):
    data = trained_dir / "data"
    outs = []
    for name in ("g1.jsonl", "g2.jsonl"):
        rc = main(["generate", "--checkpoint", str(trained_dir / "model.ckpt"),
                   "--schema", str(data / "schema.json"),
                   "--corpus", str(data / "test.jsonl"),
                   "--out", str(trained_dir / name), "--beam-size", "2"])
        assert rc == 0
        outs.append((trained_dir / name).read_bytes())
    assert outs[0] == outs[1]


def test_evaluate_gold_vs_gold_is_perfect(trained_dir):
    data = trained_dir / "data"
    gold = read_corpus(data / "test.jsonl")
    from plangen.corpus import build_plan_pool, extract_oracle_plan, serialize_summary
    from plangen.cli import read_schema as _rs

    schema = read_schema(data / "schema.json")
    self_gen = trained_dir / "self.jsonl"
    with open(self_gen, "w", encoding="utf-8") as fh:
        for g in gold:
            pool = build_plan_pool(schema, g.table)
            oracle = extract_oracle_plan(g.table, g.document, pool)
            fh.write(json.dumps({
                "plan": [pool[s].label for s in oracle.steps],
                "plan_indices": oracle.steps,
                "terminated": True,
                "summary": serialize_summary(g.document),
            }) + "\n")
    report_path = trained_dir / "self_report.txt"
    rc = main(["evaluate", "--generated", str(self_gen),
               "--gold", str(data / "test.jsonl"),
               "--schema", str(data / "schema.json"),
               "--out", str(report_path)])
    assert rc == 0
    tsv = [l for l in report_path.read_text().splitlines() if "\t" in l]
    values = dict(zip(tsv[0].split("\t"), tsv[1].split("\t")))
    assert float(values["RG P%"]) == 100.0
    assert float(values["CS F%"]) == 100.0
    assert float(values["CO DLD%"]) == 100.0
    assert float(values["BLEU"]) == 100.0


def test_exit_codes():
    rc = main(["evaluate", "--generated", "/nonexistent/gen.jsonl",
               "--gold", "/nonexistent/gold.jsonl",
               "--schema", "/nonexistent/schema.json"])
    assert rc == cli.EXIT_DATA
    with pytest.raises(SystemExit) as exc:
        main(["train"])  # missing required flags
    assert exc.value.code == cli.EXIT_USAGE


def test_config_file_and_flag_precedence(tmp_path, workdir):
    cfg_file = tmp_path / "run.cfg"
    cfg_file.write_text("epochs = 1\nhidden = 6\nembed = 6\nseed = 4\n# comment\n")
    parsed = read_config_file(cfg_file)
    assert parsed == {"epochs": 1, "hidden": 6, "embed": 6, "seed": 4}
    data = workdir / "data"
    rc = main(["train", "--config", str(cfg_file),
               "--schema", str(data / "schema.json"),
               "--train", str(data / "train.jsonl"),
               "--valid", str(data / "valid.jsonl"),
               "--checkpoint", str(tmp_path / "m.ckpt"),
               "--epochs", "1"])  # flag wins over file, file wins over profile
    assert rc == 0
    from plangen.training import load_checkpoint

    ckpt = load_checkpoint(tmp_path / "m.ckpt")
    assert ckpt.model.config.hidden == 6
    assert ckpt.config["epochs"] == 1


def test_profiles_fix_documented_defaults():
    assert cli.PROFILES["toy"]["max_paragraphs"] == 8
    assert cli.PROFILES["rotowire-like"]["max_paragraphs"] == 15
    assert cli.PROFILES["mlb-like"]["max_paragraphs"] == 20
    assert cli.PROFILES["rotowire-like"]["decay_slope"] == pytest.approx(1 / 50000)
    assert cli.PROFILES["mlb-like"]["decay_slope"] == pytest.approx(1 / 100000)
    assert cli.PROFILES["mlb-like"]["batch_size"] == 8
    assert cli.PROFILES["rotowire-like"]["batch_size"] == 5
    assert cli.PROFILES["mlb-like"]["block_plan_bigrams"]
    assert not cli.PROFILES["rotowire-like"]["block_plan_bigrams"]


def test_grad_check_command_exits_zero():
    assert main(["grad-check", "--hidden", "3"]) == 0

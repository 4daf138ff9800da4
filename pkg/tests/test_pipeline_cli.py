import json

import pytest

from wayfinder import cli
from wayfinder import pipeline as pl


def run(*argv):
    return cli.main([*map(str, argv), "--quiet"])


def test_run_all_writes_every_artifact_with_header(tiny_config, tmp_path, capsys):
    out = tmp_path / "out"
    assert run("run-all", "--config", tiny_config, "--out", out) == 0
    assert "Ablation grid" in capsys.readouterr().out
    digest = pl.load_config(tiny_config).digest()
    files = [p for p in out.rglob("*") if p.is_file()]
    assert {p.parent.name for p in files} == {"world", "corpus", "pairs", "ckpt", "reports"}
    for p in files:
        text = p.read_text()
        if p.suffix == ".jsonl":
            head = json.loads(text.splitlines()[0])["header"]
        elif p.suffix == ".json":
            head = json.loads(text)["header"]
        elif p.suffix == ".svg":
            head = json.loads(text.split("<!--", 1)[1].split("-->", 1)[0])
        else:
            head = json.loads(text.splitlines()[0].lstrip("# "))
        assert head["config_digest"] == digest, p
        assert head["seed"] == 3 and head["tool_version"]


def test_stages_compose_and_count_override(tiny_config, tmp_path):
    out = tmp_path / "o"
    for cmd in ("gen-world", "gen-corpus"):
        assert run(cmd, "--config", tiny_config, "--out", out) == 0
    assert run("train", "--baseline", "speaker", "--config", tiny_config, "--out", out) == 0
    assert run("synth-pairs", "--count", 100, "--config", tiny_config, "--out", out) == 0
    pairs, dev, test = pl.load_pairs(out)
    assert len(pairs) == 100 and len(dev) == 30 and len(test) == 30


def test_evaluate_without_checkpoint_is_stage_order_error(tiny_config, tmp_path, capsys):
    out = tmp_path / "o"
    for cmd in ("gen-world", "gen-corpus"):
        run(cmd, "--config", tiny_config, "--out", out)
    code = run("evaluate", "--objective", "contrastive", "--pretrain", "on", "--config", tiny_config, "--out", out)
    assert code == 3
    assert "run" in capsys.readouterr().err


def test_missing_upstream_stage(tiny_config, tmp_path, capsys):
    assert run("gen-corpus", "--config", tiny_config, "--out", tmp_path / "empty") == 3
    assert "gen-world" in capsys.readouterr().err


def test_config_errors_list_every_problem(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"seed": -1, "model": {"hidden": 30, "heads": 4}, "train": {"lr": -1.0}}))
    assert run("gen-world", "--config", bad, "--out", tmp_path / "o") == 2
    err = capsys.readouterr().err
    assert "seed" in err and "hidden" in err and "lr" in err
    assert len([l for l in err.splitlines() if l.startswith("  - ")]) >= 3


def test_threads_must_be_positive(tiny_config, tmp_path):
    assert run("gen-world", "--config", tiny_config, "--threads", 0, "--out", tmp_path) == 2


def test_out_dir_from_environment(tiny_config, tmp_path, monkeypatch):
    monkeypatch.setenv("WAYFINDER_OUT", str(tmp_path / "env"))
    assert run("gen-world", "--config", tiny_config) == 0
    assert (tmp_path / "env" / "world" / "houses.jsonl").exists()


def test_seed_flag_overrides_config(tiny_config, tmp_path):
    run("gen-world", "--config", tiny_config, "--out", tmp_path / "a")
    run("gen-world", "--config", tiny_config, "--seed", 4, "--out", tmp_path / "b")
    a = (tmp_path / "a" / "world" / "houses.jsonl").read_text()
    b = (tmp_path / "b" / "world" / "houses.jsonl").read_text()
    assert a != b


def test_stage_is_idempotent(tiny_config, tmp_path):
    out = tmp_path / "o"
    run("gen-world", "--config", tiny_config, "--out", out)
    first = (out / "world" / "houses.jsonl").read_bytes()
    run("gen-world", "--config", tiny_config, "--out", out)
    assert (out / "world" / "houses.jsonl").read_bytes() == first


def test_shipped_desk_config_is_valid():
    cfg = pl.load_config(pl.shipped_config_path("desk"))
    assert cfg.corpus.n_houses == 2000
    assert cfg.corpus.train_pairs == 5000
    assert (cfg.corpus.dev_examples, cfg.corpus.test_examples) == (209, 632)


def test_unknown_config_key_is_rejected(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"model": {"hiddn": 8}}))
    assert run("gen-world", "--config", bad, "--out", tmp_path / "o") == 2
    assert "hiddn" in capsys.readouterr().err

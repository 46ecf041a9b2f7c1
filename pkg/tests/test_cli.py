import json

import pytest

from lowrank_serve.checkpoint import load_checkpoint
from lowrank_serve.cli import main
from lowrank_serve.harness import CSV_COLUMNS

FAST = ["--prompt-len", "8", "--gen", "4", "--warmup", "0", "--runs", "3"]


@pytest.fixture(scope="module")
def ckpt(tmp_path_factory):
    path = tmp_path_factory.mktemp("ckpt") / "tiny.fsvd"
    assert main(["compress", "--config", "tiny", "--seed", "3", "--ratio", "0.5", "--out", str(path)]) == 0
    return path


def test_no_arguments_is_usage_error(capsys):
    assert main([]) == 2
    assert "usage" in capsys.readouterr().err


def test_unknown_subcommand_is_usage_error():
    assert main(["frobnicate"]) == 2


def test_bad_flag_value_is_usage_error(ckpt):
    assert main(["bench", "--ckpt", str(ckpt), "--plan", "graph"]) == 2


def test_help_exits_zero():
    assert main(["--help"]) == 0


def test_compress_writes_family(tmp_path):
    out = tmp_path / "w.fsvd"
    args = ["compress", "--config", "tiny", "--method", "whitened", "--calib-tokens", "32", "--out", str(out)]
    assert main(args) == 0
    assert load_checkpoint(out).family == "B"


def test_compress_bad_ratio_is_runtime_error(tmp_path):
    assert main(["compress", "--config", "tiny", "--ratio", "1.5", "--out", str(tmp_path / "x")]) == 1


def test_normalize_round_trip(ckpt, tmp_path):
    out = tmp_path / "n.fsvd"
    assert main(["normalize", "--in", str(ckpt), "--out", str(out)]) == 0
    assert load_checkpoint(out).family == "A"


def test_generate(ckpt, tmp_path, capsys):
    prompt = tmp_path / "p.txt"
    prompt.write_text("1 2 3, 4 5")
    out = tmp_path / "g.json"
    assert main(["generate", "--ckpt", str(ckpt), "--prompt-file", str(prompt), "--max-new", "5",
                 "--plan", "per-layer", "--json", str(out)]) == 0
    toks = [int(t) for t in capsys.readouterr().out.split()]
    rec = json.loads(out.read_text())
    assert toks == rec["tokens"] and len(toks) == 5 and len(rec["steps"]) == 5


def test_bench_json_has_all_fields(ckpt, tmp_path):
    out, table = tmp_path / "b.json", tmp_path / "b.csv"
    assert main(["bench", "--ckpt", str(ckpt), *FAST, "--json", str(out), "--csv", str(table)]) == 0
    rec = json.loads(out.read_text())
    assert set(CSV_COLUMNS) <= set(rec)
    assert table.read_text().splitlines()[0] == ",".join(CSV_COLUMNS)


def test_audit(ckpt, tmp_path, capsys):
    out = tmp_path / "a.json"
    assert main(["audit", "--ckpt", str(ckpt), "--prompts", "2", "--max-new", "4", "--json", str(out)]) == 0
    assert "pairwise exact" in capsys.readouterr().out
    assert json.loads(out.read_text())["n_prompts"] == 2


def test_sweeps_and_ablation(ckpt, tmp_path):
    assert main(["sweep-ratio", "--config", "tiny", "--ratios", "0.4,0.8", *FAST,
                 "--json", str(tmp_path / "r.json")]) == 0
    assert len(json.loads((tmp_path / "r.json").read_text())) == 2
    assert main(["sweep-cached-len", "--ckpt", str(ckpt), "--lengths", "4,8", "--runs", "2", "--steps", "2",
                 "--csv", str(tmp_path / "c.csv")]) == 0
    assert len((tmp_path / "c.csv").read_text().splitlines()) == 5
    assert main(["graph-ablation", "--ckpt", str(ckpt), *FAST, "--json", str(tmp_path / "g.json")]) == 0
    assert [r["plan"] for r in json.loads((tmp_path / "g.json").read_text())] == ["eager", "split", "per_layer"]


def test_missing_checkpoint_is_runtime_error(tmp_path):
    assert main(["audit", "--ckpt", str(tmp_path / "nope.fsvd")]) == 1


def test_corrupt_checkpoint_is_runtime_error(ckpt, tmp_path):
    bad = tmp_path / "bad.fsvd"
    bad.write_bytes(ckpt.read_bytes()[:-8] + b"\0" * 8)
    assert main(["audit", "--ckpt", str(bad), "--prompts", "1", "--max-new", "1"]) == 1


def test_capacity_error_is_runtime_error(ckpt, tmp_path):
    prompt = tmp_path / "p.txt"
    prompt.write_text("100000")
    assert main(["generate", "--ckpt", str(ckpt), "--prompt-file", str(prompt)]) == 1


def test_compress_accepts_hyphenated_method(tmp_path):
    out = tmp_path / "c.fsvd"
    assert main(["compress", "--config", "tiny", "--method", "basis-shared", "--group-size", "2", "--out", str(out)]) == 0
    assert load_checkpoint(out).family == "C"

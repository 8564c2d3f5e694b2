import csv
import json

import pytest

from cftrec.cli import build_parser, load_run_config, main
from cftrec.decoding import Recommendation, write_recommendations
from cftrec.errors import ConfigError

SMALL_INI = """\
[gen]
n_users = 40
n_items = 30
n_categories = 3
history_len = 3
stream_len = 10
seed = 5

[model]
d_model = 16
n_heads = 2
d_ff = 32

[train]
max_epochs = 1
batch_size = 16
learning_rate = 0.001
"""


@pytest.fixture
def ini(tmp_path):
    path = tmp_path / "small.ini"
    path.write_text(SMALL_INI)
    return str(path)


def run(*argv):
    return main([str(a) for a in argv])


def test_help_lists_flags(capsys):
    with pytest.raises(SystemExit) as exc:
        build_parser().parse_args(["train", "--help"])
    assert exc.value.code == 0
    text = capsys.readouterr().out
    for flag in ("--lambda", "--beta-prime", "--no-causal-loss", "--no-token-weights", "--seed", "--config"):
        assert flag in text


def test_unknown_flag_exits_2():
    with pytest.raises(SystemExit) as exc:
        main(["gen", "--out", "x", "--bogus"])
    assert exc.value.code == 2


def test_config_errors(tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text("[gen]\nn_itemz = 4\n")
    assert run("gen", "--out", tmp_path / "d", "--config", bad) == 2
    assert "n_itemz" in capsys.readouterr().err
    bad.write_text("[extra]\na = 1\n")
    with pytest.raises(ConfigError):
        load_run_config(str(bad))
    bad.write_text("[gen]\nn_items = 5\nn_categories = 10\n")
    assert run("gen", "--out", tmp_path / "d", "--config", bad) == 2


def test_missing_data_exits_3(tmp_path):
    assert run("train", "--data", tmp_path / "nowhere", "--out", tmp_path / "r") == 3


def test_eval_perfect_ranking(tmp_path, ini):
    data = tmp_path / "data"
    assert run("gen", "--out", data, "--config", ini) == 0
    rows = [json.loads(line) for line in (data / "interactions.jsonl").open()]
    test = [r for r in rows if r["split"] == "test"]
    recs = []
    for r in test:
        rest = [i for i in range(30) if i != r["target"]]
        recs.append(Recommendation(r["user"], r["order_index"], True, [r["target"]] + rest[:19], [0.0] * 20))
    write_recommendations(recs, tmp_path / "perfect.jsonl")
    assert run("eval", "--recs", tmp_path / "perfect.jsonl", "--data", data, "--out", tmp_path / "m.csv", "--config", ini) == 0
    row = next(csv.DictReader(open(tmp_path / "m.csv")))
    assert float(row["HR@5"]) == 1.0 and float(row["NDCG@10"]) == 1.0


def _pipeline(root, ini):
    data, run_dir, res = root / "data", root / "run", root / "res"
    assert run("gen", "--out", data, "--config", ini) == 0
    assert run("train", "--data", data, "--out", run_dir, "--lambda", 0.05, "--config", ini) == 0
    for flag, name in (("--with-history", "with.jsonl"), ("--no-history", "without.jsonl")):
        assert run("recommend", "--ckpt", run_dir / "model.ckpt", "--data", data, "--out", res / name, flag, "--config", ini) == 0
    assert run("eval", "--recs", res / "with.jsonl", res / "without.jsonl", "--data", data, "--out", res / "metrics.csv", "--config", ini) == 0
    assert run("analyze", "--recs-with", res / "with.jsonl", "--recs-without", res / "without.jsonl", "--data", data, "--out", res / "analysis", "--config", ini) == 0
    return (res / "metrics.csv").read_bytes(), (res / "analysis" / "groups.csv").read_bytes()


def test_pipeline_is_reproducible(tmp_path, ini):
    a = _pipeline(tmp_path / "a", ini)
    b = _pipeline(tmp_path / "b", ini)
    assert a == b
    metrics = list(csv.DictReader(a[0].decode().splitlines()))
    assert [m["variant"] for m in metrics] == ["with", "without"]
    assert float(metrics[0]["JS_vs_with_history"]) == 0.0
    groups = list(csv.DictReader(a[1].decode().splitlines()))
    assert len(groups) == 5
    assert abs(sum(float(g["share_with"]) for g in groups) - 1.0) < 1e-12
    manifest = json.loads((tmp_path / "a" / "run" / "run_manifest.json").read_text())
    assert "train" in manifest


def test_sweep_rows(tmp_path, ini):
    out = tmp_path / "sweep.csv"
    assert run("sweep", "--param", "lambda", "--values", "0,0.1", "--seeds", "0", "--out", out, "--config", ini) == 0
    rows = list(csv.DictReader(open(out)))
    assert [(r["value"], r["status"]) for r in rows] == [("0.0", "ok"), ("0.1", "ok")]

import csv
import json
import subprocess
import sys

import jsonschema
import pytest

from mplssl.cli import ADAPTER_WIDTHS, main, parse_kinds, params_table
from mplssl.errors import ConfigurationError
from mplssl.probe import REPORT_SCHEMA

TINY = {"seed": 3,
        "model": {"conv_channels": 8, "n_layers": 2, "d_model": 32, "d_ffn": 32, "n_heads": 2,
                  "proj_dim": 8, "n_classes": 6},
        "train": {"batch_size": 2},
        "adapter": {"hidden": 4},
        "probe": {"steps": 3, "hidden": 16, "batch_size": 2}}


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr().out
    return code, (json.loads(out) if code == 0 else None)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps(TINY))
    assert main(["corpus", "--config", str(cfg), "--n", "8", "--duration", "0.5", "--out", str(root / "c")]) == 0
    assert main(["cluster", "--config", str(cfg), "--manifest", str(root / "c/manifest.jsonl"),
                 "--iters", "5", "--out", str(root / "l")]) == 0
    assert main(["pretrain", "--config", str(cfg), "--manifest", str(root / "c/manifest.jsonl"),
                 "--labels", str(root / "l/labels"), "--steps", "4", "--heads", "1", "--kinds", "raw",
                 "--out", str(root / "base")]) == 0
    assert main(["adapt", "--config", str(cfg), "--checkpoint", str(root / "base/final.ckpt"), "--insert",
                 "--manifest", str(root / "c/manifest.jsonl"), "--labels", str(root / "l/labels"),
                 "--steps", "2", "--out", str(root / "ad")]) == 0
    return root, cfg


def test_corpus_counts_and_hash(tmp_path, capsys):
    a = run(capsys, "corpus", "--seed", 1, "--n", 8, "--duration", 0.5, "--out", tmp_path / "a")[1]
    b = run(capsys, "corpus", "--seed", 1, "--n", 8, "--duration", 0.5, "--out", tmp_path / "b",
            "--no-audio")[1]
    assert set(a["counts"].values()) == {2}
    assert a["manifest_sha256"] == b["manifest_sha256"]
    assert list((tmp_path / "a/sources").glob("*.wav"))
    assert not (tmp_path / "b/sources").exists()


def test_corpus_bad_n(tmp_path, capsys):
    assert run(capsys, "corpus", "--seed", 1, "--n", 3, "--out", tmp_path)[0] == 2


def test_seed_required(tmp_path, capsys):
    assert run(capsys, "corpus", "--n", 4, "--out", tmp_path)[0] == 2


def test_usage_errors_exit_two(capsys):
    assert main(["nope"]) == 2
    assert main(["probe", "--seed", "1"]) == 2


def test_missing_config_file(tmp_path, capsys):
    assert run(capsys, "params", "--config", tmp_path / "none.json")[0] == 2


def test_cluster_deterministic(workspace, tmp_path, capsys):
    root, cfg = workspace
    a = run(capsys, "cluster", "--config", cfg, "--manifest", root / "c/manifest.jsonl", "--iters", 5,
            "--out", tmp_path)[1]
    b = run(capsys, "cluster", "--config", cfg, "--manifest", root / "c/manifest.jsonl", "--iters", 5,
            "--out", tmp_path / "again")[1]
    assert a["codebook_sha256"] == b["codebook_sha256"] and a["labels_sha256"] == b["labels_sha256"]


def test_cluster_too_many_classes(workspace, tmp_path, capsys):
    root, cfg = workspace
    code, _ = run(capsys, "cluster", "--config", cfg, "--manifest", root / "c/manifest.jsonl",
                  "--classes", 10 ** 6, "--out", tmp_path)
    assert code == 2


def test_pretrain_outputs(workspace):
    root, _ = workspace
    rows = list(csv.DictReader(open(root / "base/loss.csv")))
    assert len(rows) == 4
    assert (root / "base/final.ckpt").exists()


def test_adapt_refuses_without_adapters(workspace, tmp_path, capsys):
    root, cfg = workspace
    code, _ = run(capsys, "adapt", "--config", cfg, "--checkpoint", root / "base/final.ckpt",
                  "--manifest", root / "c/manifest.jsonl", "--labels", root / "l/labels", "--out", tmp_path)
    assert code == 2


def test_adapt_keeps_frozen_weights(workspace, tmp_path, capsys):
    root, cfg = workspace
    code, res = run(capsys, "adapt", "--config", cfg, "--checkpoint", root / "base/final.ckpt", "--insert",
                    "--manifest", root / "c/manifest.jsonl", "--labels", root / "l/labels", "--steps", 5,
                    "--out", tmp_path)
    assert code == 0
    assert res["frozen_unchanged"] and res["frozen_hash_before"] == res["frozen_hash_after"]
    assert res["adapter_hidden"] == 4 and res["steps"] == 5
    assert len(list(csv.DictReader(open(tmp_path / "loss.csv")))) == 5


def test_pretrain_rejects_adapter_mode(workspace, tmp_path, capsys):
    root, cfg = workspace
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({**TINY, "train": {"mode": "adapter"}}))
    code, _ = run(capsys, "pretrain", "--config", bad, "--manifest", root / "c/manifest.jsonl",
                  "--labels", root / "l/labels", "--steps", 1, "--out", tmp_path)
    assert code == 2


def test_params_json_and_table(capsys):
    code = main(["params", "--full"])
    captured = capsys.readouterr()
    rows = json.loads(captured.out)["rows"]
    assert code == 0 and "backbone+2 heads" in captured.err
    assert rows[0]["total"] == 94_696_448
    assert [r["row"] for r in rows[2:]] == [f"adapter h={h}" for h in ADAPTER_WIDTHS]


def test_params_table_deltas():
    rows = params_table(True)
    deltas = [r["delta"] for r in rows[2:]]
    assert deltas == sorted(deltas)
    assert all(r["trainable"] < r["total"] for r in rows[2:])


@pytest.mark.parametrize("route", ["I", "II"])
@pytest.mark.parametrize("task", ["se", "retention"])
def test_probe_both_routes(workspace, tmp_path, capsys, route, task):
    root, cfg = workspace
    extra = ["--labels", root / "l/labels"] if task == "retention" else []
    code, rep = run(capsys, "probe", "--config", cfg, "--checkpoint", root / "ad/final.ckpt", "--task", task,
                    "--manifest", root / "c/manifest.jsonl", "--route", route, "--test-fraction", 0.5,
                    "--out", tmp_path, *extra)
    assert code == 0
    jsonschema.validate(rep, REPORT_SCHEMA)
    saved = json.loads((tmp_path / f"{task}_route{route}.json").read_text())
    assert saved == rep


def test_route_two_needs_adapters(workspace, tmp_path, capsys):
    root, cfg = workspace
    code, _ = run(capsys, "probe", "--config", cfg, "--checkpoint", root / "base/final.ckpt", "--task", "se",
                  "--manifest", root / "c/manifest.jsonl", "--route", "II", "--out", tmp_path)
    assert code == 2


def test_eval(workspace, tmp_path, capsys):
    root, cfg = workspace
    code, res = run(capsys, "eval", "--config", cfg, "--checkpoint", root / "base/final.ckpt",
                    "--manifest", root / "c/manifest.jsonl", "--labels", root / "l/labels",
                    "--test-fraction", 0.5, "--out", tmp_path)
    assert code == 0 and res["n_records"] == 4
    assert (tmp_path / "eval.json").exists()


def test_parse_kinds():
    assert parse_kinds("raw, NOISY,Overlapped,noisy_overlapped") == ("Raw", "Noisy", "Overlapped",
                                                                      "NoisyOverlapped")
    with pytest.raises(ConfigurationError):
        parse_kinds("loud")


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "mplssl", "params", "--json-only"], capture_output=True,
                         text=True)
    assert out.returncode == 0 and json.loads(out.stdout)["config"] == "desk"

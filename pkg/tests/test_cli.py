import csv
import json

import pytest

from mgrnet import cli

SMALL = {
    "model": {"P": 4, "D": 8, "H": 2, "k": 1, "num_classes": 4},
    "train": {"epochs": 2, "batch_size": 4, "identities_per_batch": 2},
    "data": {"num_identities": 4, "samples_per_identity": 6, "P": 4, "D": 8},
    "holdout_per_identity": 2,
    "scenarios": ["ALL", "N"],
    "sweep_k": [0, 1],
}


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({**SMALL, "output_dir": str(tmp_path / "run")}))
    return str(path)


def _run(capsys, *argv):
    code = cli.main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_gen_train_eval(config, tmp_path, capsys):
    run = tmp_path / "run"
    assert _run(capsys, "gen", "--config", config)[0] == 0
    assert (run / "bank.mgfb").exists()
    code, out, _ = _run(capsys, "train", "--config", config)
    assert code == 0 and json.loads(out)["final_loss"] > 0
    code, out, _ = _run(capsys, "eval", "--config", config)
    assert code == 0
    metrics = json.loads((run / "metrics_M-N.json").read_text())
    assert metrics["scenario"] == "M(N)" and 0 <= metrics["mAP"] <= 1
    manifest = json.loads((run / "manifest_eval.json").read_text())
    assert manifest["command"] == "eval" and len(manifest["config_sha256"]) == 64
    assert "metrics_ALL.json" in " ".join(manifest["artifacts"])


def test_eval_is_byte_deterministic(config, tmp_path, capsys):
    blobs = []
    for sub in ("a", "b"):
        out = str(tmp_path / sub)
        _run(capsys, "train", "--config", config, "--out", out, "--seed", "4")
        _run(capsys, "eval", "--config", config, "--out", out, "--seed", "4")
        blobs.append((tmp_path / sub / "metrics_ALL.json").read_bytes())
    assert blobs[0] == blobs[1]


def test_ablate_writes_seven_rows(config, tmp_path, capsys):
    code, out, _ = _run(capsys, "ablate", "--config", config, "--missing", "ALL")
    assert code == 0
    rows = list(csv.reader(open(tmp_path / "run" / "ablation.csv")))
    assert [r[0] for r in rows[1:]] == list("abcdefg")


def test_sweep_and_report_commands(config, tmp_path, capsys):
    assert _run(capsys, "sweep-k", "--config", config, "--missing", "ALL")[0] == 0
    rows = list(csv.reader(open(tmp_path / "run" / "sweep_k.csv")))
    assert [r[0] for r in rows[1:]] == ["0", "1"]
    assert _run(capsys, "train", "--config", config)[0] == 0
    assert _run(capsys, "swap-report", "--config", config, "--sample", "1")[0] == 0
    report = json.loads((tmp_path / "run" / "swap_report_1.json").read_text())
    assert set(report["swap"]) == {"R", "N", "T"}
    assert all(len(v["poor_indices"]) == 1 for v in report["swap"].values())


def test_gradcheck_and_recon_baselines(config, tmp_path, capsys):
    code, out, _ = _run(capsys, "gradcheck", "--config", config)
    assert code == 0 and json.loads(out)["max_rel_error"] <= 1e-4
    assert _run(capsys, "recon-baselines", "--config", config, "--missing", "N")[0] == 0
    rows = list(csv.DictReader(open(tmp_path / "run" / "recon_baselines.csv")))
    assert {r["method"] for r in rows} == {"zero", "random", "feature", "grmm"}
    zero = next(r for r in rows if r["method"] == "zero")
    assert float(zero["recon_mse"]) > 0


def test_error_paths_emit_json(config, tmp_path, capsys):
    code, _, err = _run(capsys, "eval", "--config", config, "--out", str(tmp_path / "empty"))
    assert code == 2 and "train first" in json.loads(err)["message"]
    code, _, err = _run(capsys, "eval", "--config", config, "--missing", "RNT")
    assert code == 2 and json.loads(err)["error"] == "ConfigError"
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"model": {"P": 5}}))
    code, _, err = _run(capsys, "gen", "--config", str(bad))
    assert code == 2 and json.loads(err)["error"] == "ConfigError"
    bad.write_text("{not json")
    assert _run(capsys, "gen", "--config", str(bad))[0] == 2

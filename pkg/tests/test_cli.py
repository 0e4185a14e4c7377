import csv
import json

import pytest

from dact.cli import main
from dact.decoder import read_trace

SMALL = {
    "data": {"n_tasks": 300},
    "train": {"steps": 15, "optimizer": "adam", "lr": 0.003, "warmup_steps": 5, "log_every": 0},
    "model": {"embed_dim": 16, "ff_dim": 32, "heads": 2, "layers": 1},
}


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "config.json"
    cfg.write_text(json.dumps(SMALL))
    assert main(["gen-data", "--config", str(cfg), "--out", str(root / "data")]) == 0
    assert main(["train", "--config", str(cfg), "--out", str(root / "model"),
                 "--dataset", str(root / "data" / "dataset.bin")]) == 0
    return root, cfg


def common(root, cfg):
    return ["--config", str(cfg), "--dataset", str(root / "data" / "dataset.bin"),
            "--checkpoint", str(root / "model" / "model")]


def test_gen_data_manifest(run_dir):
    root, _ = run_dir
    man = json.loads((root / "data" / "manifest.json").read_text())
    assert man["command"] == "gen-data" and man["seed"] == 0
    assert set(man["outputs"]) == {"dataset.bin", "tokenizer.json"}
    assert man["config"]["data"]["n_tasks"] == 300
    assert {"numpy", "python", "dact", "kernel_backend"} <= set(man["versions"])


def test_rerun_is_bit_exact(run_dir, tmp_path):
    root, cfg = run_dir
    assert main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "again")]) == 0
    a = json.loads((root / "data" / "manifest.json").read_text())
    b = json.loads((tmp_path / "again" / "manifest.json").read_text())
    assert a["outputs"] == b["outputs"] and a["config_fingerprint"] == b["config_fingerprint"]
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "m2"),
                 "--dataset", str(root / "data" / "dataset.bin")]) == 0
    assert (tmp_path / "m2" / "model.bin").read_bytes() == (root / "model" / "model.bin").read_bytes()


def test_decode_trace_has_one_line_per_round(run_dir, tmp_path):
    root, cfg = run_dir
    assert main(["decode", *common(root, cfg), "--out", str(tmp_path), "--trace", "--rounds", "7"]) == 0
    recs = read_trace(tmp_path / "trace.jsonl")
    assert len(recs) == 7
    chunk = json.loads((tmp_path / "chunks.jsonl").read_text().splitlines()[0])
    assert len(chunk["tokens"]) == 56 and chunk["nfe"] == 7


def test_eval_and_ablate(run_dir, tmp_path):
    root, cfg = run_dir
    assert main(["eval", *common(root, cfg), "--out", str(tmp_path / "e"), "--episodes", "3"]) == 0
    rows = list(csv.DictReader((tmp_path / "e" / "eval.csv").open()))
    assert rows[0]["episodes"] == "3"
    assert main(["ablate", *common(root, cfg), "--out", str(tmp_path / "a"), "--episodes", "2", "--rounds", "4"]) == 0
    rows = list(csv.DictReader((tmp_path / "a" / "ablation.csv").open()))
    assert len(rows) == 12
    assert {r["mean_nfe"] for r in rows if r["strategy"] == "max_confidence"} == {"4.000"}


def test_verify_prints_each_suite(tmp_path, capsys):
    cfg = tmp_path / "v.json"
    cfg.write_text(json.dumps({"verify": {"suites": ["schedule_exactness", "grad_check", "decode_oracle"]}}))
    assert main(["verify", "--config", str(cfg), "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out.splitlines()
    assert len(out) == 3 and all(line.startswith("PASS") for line in out)


def test_unknown_config_key_is_usage_error(tmp_path):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"train": {"stepz": 3}}))
    with pytest.raises(SystemExit) as exc:
        main(["verify", "--config", str(cfg), "--out", str(tmp_path)])
    assert exc.value.code == 2


@pytest.mark.parametrize("argv", [["nope"], ["train", "--seed", "x"], ["train", "--out", "/tmp/x"]])
def test_bad_invocations_exit_2(argv):
    with pytest.raises(SystemExit) as exc:
        main(argv)
    assert exc.value.code == 2


def test_invariant_failure_exits_1_and_names_it(tmp_path, capsys, monkeypatch):
    import dact.verify as verify

    monkeypatch.setitem(verify.SUITES, "schedule_exactness", lambda: (False, "forced", {}))
    cfg = tmp_path / "v.json"
    cfg.write_text(json.dumps({"verify": {"suites": ["schedule_exactness"]}}))
    assert main(["verify", "--config", str(cfg), "--out", str(tmp_path)]) == 1
    assert "invariant violated: verify suite schedule_exactness" in capsys.readouterr().err


def test_corrupt_checkpoint_exits_1(run_dir, tmp_path, capsys):
    root, cfg = run_dir
    ck = tmp_path / "model"
    (tmp_path / "model.bin").write_bytes(b"\0" + (root / "model" / "model.bin").read_bytes()[1:])
    (tmp_path / "model.manifest.json").write_text((root / "model" / "model.manifest.json").read_text())
    rc = main(["eval", "--config", str(cfg), "--dataset", str(root / "data" / "dataset.bin"),
               "--checkpoint", str(ck), "--out", str(tmp_path / "o"), "--episodes", "1"])
    assert rc == 1
    assert "checksum" in capsys.readouterr().err


def test_thread_env_var(tmp_path, monkeypatch):
    monkeypatch.setenv("DACT_NUM_THREADS", "1")
    cfg = tmp_path / "v.json"
    cfg.write_text(json.dumps({"verify": {"suites": ["schedule_exactness"]}}))
    assert main(["verify", "--config", str(cfg), "--out", str(tmp_path)]) == 0
    monkeypatch.setenv("DACT_NUM_THREADS", "zero")
    with pytest.raises(SystemExit) as exc:
        main(["verify", "--config", str(cfg), "--out", str(tmp_path)])
    assert exc.value.code == 2

import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from tokenmark.checkpoint import load_checkpoint, save_checkpoint
from tokenmark.cli import REPORT_KEYS, main, read_pgm
from tokenmark.config import tiny_config
from tokenmark.model import OmniModel
from tokenmark.synth import read_dataset


def write_config(path, **kw):
    path.write_text(json.dumps(tiny_config(**kw).to_dict()))
    return path


@pytest.fixture
def tiny(tmp_path):
    cfg = write_config(tmp_path / "tiny.json", n_samples=12, steps=6, checkpoint_every=4)
    data = tmp_path / "data.bin"
    assert main(["gen-data", "--config", str(cfg), "--out", str(data)]) == 0
    return cfg, data


def test_gen_data_empty(tmp_path):
    out = tmp_path / "empty.bin"
    assert main(["gen-data", "--out", str(out), "--count", "0"]) == 0
    assert len(read_dataset(out)) == 0
    echoed = json.loads((tmp_path / "empty.bin.config.json").read_text())
    assert echoed["n_samples"] == 0 and echoed["d_model"] == 64


def test_gen_data_same_seed_same_bytes(tmp_path):
    a, b, c = tmp_path / "a.bin", tmp_path / "b.bin", tmp_path / "c.bin"
    for path, seed in ((a, 3), (b, 3), (c, 4)):
        assert main(["gen-data", "--out", str(path), "--count", "20", "--seed", str(seed)]) == 0
    assert a.read_bytes() == b.read_bytes() != c.read_bytes()


def test_gen_data_thousand_samples(tmp_path):
    out = tmp_path / "k.bin"
    assert main(["gen-data", "--out", str(out), "--count", "1000"]) == 0
    ds = read_dataset(out)
    assert len(ds) == 1000 and ds[999].scene.frames.shape == (4, 3, 48, 48)


def test_train_writes_log_and_checkpoints(tiny, tmp_path):
    cfg, data = tiny
    run = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--data", str(data), "--out", str(run)]) == 0
    names = sorted(p.name for p in run.iterdir())
    assert names == ["checkpoint_000000.omtm", "checkpoint_000004.omtm", "checkpoint_000006.omtm",
                     "config.json", "metrics.csv"]
    rows = list(csv.reader((run / "metrics.csv").open()))
    assert rows[0] == ["step", "llm_loss", "aux_loss", "total"] and len(rows) == 7
    for step, llm, aux, total in rows[1:]:
        assert float(total) == float(llm) + 0.05 * float(aux)
    assert load_checkpoint(run / "checkpoint_000006.omtm")[1] == 6


def test_train_zero_steps(tiny, tmp_path):
    _, data = tiny
    cfg = write_config(tmp_path / "zero.json", n_samples=12, steps=0)
    run = tmp_path / "run0"
    assert main(["train", "--config", str(cfg), "--data", str(data), "--out", str(run)]) == 0
    assert sorted(p.name for p in run.glob("*.omtm")) == ["checkpoint_000000.omtm"]
    assert (run / "metrics.csv").read_text() == "step,llm_loss,aux_loss,total\n"


def test_train_alpha_zero_logs_aux(tiny, tmp_path):
    _, data = tiny
    cfg = write_config(tmp_path / "a0.json", n_samples=12, steps=3, alpha=0.0)
    run = tmp_path / "a0"
    assert main(["train", "--config", str(cfg), "--data", str(data), "--out", str(run)]) == 0
    rows = list(csv.reader((run / "metrics.csv").open()))[1:]
    assert rows and all(total == llm and float(aux) > 0 for _, llm, aux, total in rows)


def test_train_is_byte_deterministic(tiny, tmp_path):
    cfg, data = tiny
    logs = []
    for name in ("r1", "r2"):
        assert main(["train", "--config", str(cfg), "--data", str(data), "--out", str(tmp_path / name)]) == 0
        logs.append((tmp_path / name / "metrics.csv").read_bytes())
    assert logs[0] == logs[1]
    assert (tmp_path / "r1" / "checkpoint_000006.omtm").read_bytes() == \
        (tmp_path / "r2" / "checkpoint_000006.omtm").read_bytes()


def test_eval_report_schema(tiny, tmp_path):
    cfg, data = tiny
    run = tmp_path / "run"
    main(["train", "--config", str(cfg), "--data", str(data), "--out", str(run)])
    out = tmp_path / "eval"
    assert main(["eval", "--checkpoint", str(run / "checkpoint_000006.omtm"), "--data", str(data),
                 "--out", str(out)]) == 0
    report = json.loads((out / "report.json").read_text())
    assert set(report) == set(REPORT_KEYS) | {"checkpoint_step"}
    assert report["n_samples"] == 12 and report["checkpoint_step"] == 6
    assert set(report["answer_accuracy"]) == {"attribute", "motion", "relation"}
    assert len(report["aux_region_iou"]) == 2
    assert (out / "config.json").exists()


def test_eval_rejects_mismatched_data(tiny, tmp_path):
    _, data = tiny
    ckpt = tmp_path / "big.omtm"
    save_checkpoint(ckpt, OmniModel(tiny_config(frame_size=16, max_seq_len=48)))
    out = tmp_path / "never"
    assert main(["eval", "--checkpoint", str(ckpt), "--data", str(data), "--out", str(out)]) == 1
    assert not out.exists()


def test_heatmap_uniform_model(tiny, tmp_path):
    _, data = tiny
    model = OmniModel(tiny_config(n_samples=12))
    model.head.classifier.weight.data[:] = 0.0
    model.head.classifier.bias.data[:] = 0.0
    ckpt = tmp_path / "flat.omtm"
    save_checkpoint(ckpt, model)
    out = tmp_path / "maps"
    assert main(["heatmap", "--checkpoint", str(ckpt), "--data", str(data), "--sample", "0",
                 "--out", str(out)]) == 0
    gray = round(255 / (model.config.n_marks + 1))
    for t in range(2):
        pgm = read_pgm(out / f"frame_{t}.pgm")
        assert pgm.shape == model.config.token_grid and np.all(pgm == gray)
        assert (out / f"frame_{t}.pgm").read_bytes().startswith(b"P5\n2 2\n255\n")


def test_heatmap_csv_agrees_with_pgm(tiny, tmp_path):
    cfg, data = tiny
    run = tmp_path / "run"
    main(["train", "--config", str(cfg), "--data", str(data), "--out", str(run)])
    out = tmp_path / "maps"
    assert main(["heatmap", "--checkpoint", str(run / "checkpoint_000006.omtm"), "--data", str(data),
                 "--sample", "1", "--out", str(out)]) == 0
    for t in range(2):
        p = np.loadtxt(out / f"frame_{t}.csv", delimiter=",", ndmin=2)
        assert np.all(np.abs(255 * p - read_pgm(out / f"frame_{t}.pgm")) <= 0.5)


def test_heatmap_missing_region(tiny, tmp_path):
    _, data = tiny
    ckpt = tmp_path / "m.omtm"
    save_checkpoint(ckpt, OmniModel(tiny_config(n_samples=12)))
    out = tmp_path / "maps"
    assert main(["heatmap", "--checkpoint", str(ckpt), "--data", str(data), "--sample", "0",
                 "--region", "5", "--out", str(out)]) == 1
    assert not out.exists()


def test_grad_check_command(capsys):
    assert main(["grad-check"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert any(line.startswith("bank.marks") for line in lines)
    assert all(line.endswith("ok") for line in lines)


def test_invalid_config_touches_nothing(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"n_marks": 4, "not_a_key": 1}))
    out = tmp_path / "out" / "data.bin"
    assert main(["gen-data", "--config", str(bad), "--out", str(out)]) == 1
    assert "not_a_key" in capsys.readouterr().err
    assert not (tmp_path / "out").exists()
    run = tmp_path / "run"
    assert main(["train", "--config", str(bad), "--data", str(out), "--out", str(run)]) == 1
    assert not run.exists()


def test_missing_dataset_is_runtime_error(tmp_path):
    assert main(["train", "--data", str(tmp_path / "nope.bin"), "--out", str(tmp_path / "r")]) == 2


def test_module_entry_point(tmp_path):
    out = tmp_path / "d.bin"
    proc = subprocess.run([sys.executable, "-m", "tokenmark.cli", "gen-data", "--count", "2", "--out", str(out)],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert len(read_dataset(out)) == 2

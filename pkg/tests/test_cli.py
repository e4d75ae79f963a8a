import csv
import hashlib
import json

import numpy as np
import pytest

from diva.cli import main
from diva.data import load_dataset
from diva.sweep import worker_count

TINY = {
    "synth": {"n_train_classes": 6, "n_test_classes": 4, "samples_per_class": 8, "obs_dim": 10},
    "train": {
        "encoder": {"hidden_dims": [12], "feature_dim": 8},
        "embed_dim": 4,
        "batch": {"n_classes": 4, "m_per_class": 3},
        "epochs": 2,
        "lr": 0.001,
        "queue_size": 16,
        "eval_every": 0,
    },
}


def write_config(path, cfg=TINY):
    path.write_text(json.dumps(cfg))
    return str(path)


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    cfg = write_config(d / "tiny.json")
    assert main(["gen-data", "--config", cfg, "--out", str(d / "data.bin")]) == 0
    assert main(["train", "--config", cfg, "--data", str(d / "data.bin"), "--out", str(d / "full")]) == 0
    assert main(["train", "--config", cfg, "--data", str(d / "data.bin"), "--out", str(d / "base"), "--tasks", "D"]) == 0
    return d


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_gen_data_defaults(tmp_path, capsys):
    assert main(["gen-data", "--out", str(tmp_path / "a.bin")]) == 0
    assert "1200 samples" in capsys.readouterr().out
    assert load_dataset(tmp_path / "a.bin").n_total == 1200
    assert main(["gen-data", "--out", str(tmp_path / "b.bin")]) == 0
    assert sha(tmp_path / "a.bin") == sha(tmp_path / "b.bin")


def test_gen_data_csv(tmp_path, workdir):
    out = tmp_path / "d.csv"
    assert main(["gen-data", "--config", str(workdir / "tiny.json"), "--out", str(out)]) == 0
    assert len(out.read_text().splitlines()) == 80


def test_bad_json_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"synth": {\n  "noise": 0.1,\n}')
    assert main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "x.bin")]) == 2
    assert "line 3 column 1" in capsys.readouterr().err


def test_missing_config_exits_3(tmp_path):
    assert main(["gen-data", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path / "x.bin")]) == 3


def test_train_outputs(workdir):
    report = json.loads((workdir / "full" / "report.json").read_text())
    assert set(report["heads"]) == {"disc", "shared", "intra", "dance"}
    base = json.loads((workdir / "base" / "report.json").read_text())
    assert set(base["heads"]) == {"disc"}
    hist = json.loads((workdir / "full" / "history.json").read_text())
    assert hist["evals"][-1]["report"] == report


def test_train_is_idempotent(workdir, tmp_path):
    args = ["train", "--config", str(workdir / "tiny.json"), "--data", str(workdir / "data.bin"), "--tasks", "D"]
    assert main(args + ["--out", str(tmp_path / "again")]) == 0
    for name in ("checkpoint.bin", "history.json", "report.json"):
        assert sha(workdir / "base" / name) == sha(tmp_path / "again" / name)


def test_tasks_without_disc_exit_2(workdir, tmp_path):
    args = ["train", "--config", str(workdir / "tiny.json"), "--data", str(workdir / "data.bin")]
    assert main(args + ["--out", str(tmp_path / "r"), "--tasks", "S,I"]) == 2
    assert main(args + ["--out", str(tmp_path / "r"), "--tasks", "D,X"]) == 2


def test_missing_data_exit_3(workdir, tmp_path):
    args = ["train", "--config", str(workdir / "tiny.json"), "--data", str(tmp_path / "none.bin")]
    assert main(args + ["--out", str(tmp_path / "r")]) == 3


def test_divergence_exit_4(workdir, tmp_path):
    cfg = json.loads(json.dumps(TINY))
    cfg["train"]["lr"] = 1e200
    path = write_config(tmp_path / "boom.json", cfg)
    with np.errstate(all="ignore"):
        code = main(["train", "--config", path, "--data", str(workdir / "data.bin"), "--out", str(tmp_path / "r")])
    assert code == 4
    dump = json.loads((tmp_path / "r" / "divergence.json").read_text())
    assert dump["epoch"] == 0 and "total" in dump["breakdown"]


def test_resume_finishes_run(workdir, tmp_path):
    cfg = json.loads(json.dumps(TINY))
    cfg["train"]["epochs"] = 1
    short = write_config(tmp_path / "short.json", cfg)
    data = str(workdir / "data.bin")
    assert main(["train", "--config", short, "--data", data, "--out", str(tmp_path / "a")]) == 0
    # the stored config says one epoch, so resuming changes nothing
    assert main(["train", "--resume", str(tmp_path / "a" / "checkpoint.bin"), "--data", data,
                 "--out", str(tmp_path / "b")]) == 0
    assert sha(tmp_path / "a" / "checkpoint.bin") == sha(tmp_path / "b" / "checkpoint.bin")


def test_eval_schema_and_idempotence(workdir, tmp_path):
    args = ["eval", "--checkpoint", str(workdir / "full" / "checkpoint.bin"), "--data", str(workdir / "data.bin")]
    assert main(args + ["--out", str(tmp_path / "a.json")]) == 0
    assert main(args + ["--out", str(tmp_path / "b.json")]) == 0
    assert sha(tmp_path / "a.json") == sha(tmp_path / "b.json")
    report = json.loads((tmp_path / "a.json").read_text())
    for block in [report["ensemble"], *report["heads"].values()]:
        assert {"recall@1", "recall@2", "recall@4", "recall@8", "nmi", "spectral_decay"} <= set(block)
    assert report == json.loads((workdir / "full" / "report.json").read_text())


def test_eval_dimension_mismatch_exit_5(workdir, tmp_path):
    cfg = json.loads(json.dumps(TINY))
    cfg["synth"]["obs_dim"] = 12
    path = write_config(tmp_path / "wide.json", cfg)
    assert main(["gen-data", "--config", path, "--out", str(tmp_path / "wide.bin")]) == 0
    args = ["--checkpoint", str(workdir / "full" / "checkpoint.bin"), "--data", str(tmp_path / "wide.bin")]
    assert main(["eval", *args, "--out", str(tmp_path / "r.json")]) == 5
    assert main(["spectrum", *args, "--out", str(tmp_path / "s")]) == 5


def test_eval_corrupt_checkpoint_exit_3(workdir, tmp_path):
    bad = tmp_path / "bad.bin"
    bad.write_bytes((workdir / "full" / "checkpoint.bin").read_bytes()[:100])
    assert main(["eval", "--checkpoint", str(bad), "--data", str(workdir / "data.bin"),
                 "--out", str(tmp_path / "r.json")]) == 3


def test_spectrum_outputs(workdir, tmp_path):
    args = ["spectrum", "--data", str(workdir / "data.bin"), "--out", str(tmp_path / "spec")]
    for run in ("base", "full"):
        args += ["--checkpoint", str(workdir / run / "checkpoint.bin"), "--label", run]
    assert main(args) == 0
    for run, dim in (("base", 4), ("full", 16)):
        with open(tmp_path / f"spec_{run}.csv") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["index", "singular_value_normalized"]
        vals = [float(r[1]) for r in rows[1:]]
        assert len(vals) == dim and abs(sum(vals) - 1) < 1e-9
    svg = (tmp_path / "spec.svg").read_text()
    assert svg.startswith("<svg") and svg.count("<polyline") == 2


def test_spectrum_label_count_mismatch(workdir, tmp_path):
    args = ["spectrum", "--data", str(workdir / "data.bin"), "--out", str(tmp_path / "s"),
            "--checkpoint", str(workdir / "full" / "checkpoint.bin"), "--label", "a", "--label", "b"]
    assert main(args) == 2


def test_ablate_tiny(workdir, tmp_path, monkeypatch):
    cfg = json.loads(json.dumps(TINY))
    cfg["train"]["epochs"] = 1
    path = write_config(tmp_path / "abl.json", cfg)
    monkeypatch.setenv("DIVA_THREADS", "1")
    out = tmp_path / "abl"
    assert main(["ablate", "--config", path, "--data", str(workdir / "data.bin"), "--out", str(out),
                 "--seeds", "2", "--nce"]) == 0
    with open(out / "runs.csv") as fh:
        runs = list(csv.DictReader(fh))
    assert len(runs) == 11 * 2 and all(r["status"] == "ok" for r in runs)
    with open(out / "summary.csv") as fh:
        cells = [r["cell"] for r in csv.DictReader(fh)]
    assert cells[:8] == ["D", "D+S", "D+I", "D+Da", "D+S+I", "D+S+Da", "D+I+Da", "D+S+I+Da"]
    assert cells[8:] == ["no-decorrelation", "separate", "D+NCE"]


def test_ablate_bad_threads(workdir, tmp_path, monkeypatch):
    monkeypatch.setenv("DIVA_THREADS", "zero")
    assert main(["ablate", "--config", str(workdir / "tiny.json"), "--data", str(workdir / "data.bin"),
                 "--out", str(tmp_path / "x"), "--seeds", "1"]) == 2


def test_worker_count(monkeypatch):
    monkeypatch.setenv("DIVA_THREADS", "3")
    assert worker_count(10) == 3 and worker_count(2) == 2
    monkeypatch.delenv("DIVA_THREADS")
    assert worker_count(1) == 1
    monkeypatch.setenv("DIVA_THREADS", "0")
    with pytest.raises(ValueError):
        worker_count(4)

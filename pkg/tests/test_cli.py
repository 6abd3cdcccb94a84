import csv
import os

import pytest

from frustumkit import cli, gradsuite
from frustumkit.config import ablation_config, read_experiment_config
from frustumkit.losses import LossBreakdown

TINY = """\
[train]
train_count = 4
val_count = 2
batch_size = 4
steps = 1
"""


def write(path, text):
    path.write_text(text)
    return str(path)


def read_log(run_dir):
    with open(os.path.join(run_dir, "train_log.csv"), newline="") as fh:
        return list(csv.DictReader(fh))


def test_one_step_train(tmp_path, capsys):
    cfg = write(tmp_path / "tiny.ini", TINY)
    out = tmp_path / "run"
    assert cli.main(["train", "--config", cfg, "--out", str(out)]) == 0
    assert (out / "model.fpk").stat().st_size > 0
    rows = read_log(out)
    assert len(rows) == 1
    loss_cols = [c for c in rows[0] if c not in ("step", "lr")]
    assert loss_cols == list(LossBreakdown.columns()) and len(loss_cols) == 9
    assert (out / "metrics.csv").exists() and (out / "config.resolved.ini").exists()
    assert "seg_accuracy" in capsys.readouterr().out


def test_same_seed_identical_checkpoint(tmp_path):
    cfg = write(tmp_path / "tiny.ini", TINY.replace("steps = 1", "steps = 2"))
    blobs = []
    for name in ("a", "b"):
        assert cli.main(["train", "--config", cfg, "--seed", "5", "--out", str(tmp_path / name)]) == 0
        blobs.append((tmp_path / name / "model.fpk").read_bytes())
    assert blobs[0] == blobs[1]
    assert cli.main(["train", "--config", cfg, "--seed", "6", "--out", str(tmp_path / "c")]) == 0
    assert (tmp_path / "c" / "model.fpk").read_bytes() != blobs[0]


def test_lr_halves_after_one_decay_interval(tmp_path):
    cfg = write(tmp_path / "lr.ini", TINY.replace("steps = 1", "steps = 3\ndecay_every = 2").replace("val_count = 2", "val_count = 0"))
    out = tmp_path / "run"
    assert cli.main(["train", "--config", cfg, "--out", str(out)]) == 0
    lrs = [float(r["lr"]) for r in read_log(out)]
    assert lrs == [0.001, 0.001, 0.0005]


def test_resolved_config_reproduces_run(tmp_path):
    cfg = write(tmp_path / "tiny.ini", TINY)
    out = tmp_path / "run"
    assert cli.main(["train", "--config", cfg, "--out", str(out)]) == 0
    resolved = str(out / "config.resolved.ini")
    assert read_experiment_config(resolved) == read_experiment_config(cfg)
    assert cli.main(["train", "--config", resolved, "--out", str(tmp_path / "again")]) == 0
    assert (tmp_path / "again" / "model.fpk").read_bytes() == (out / "model.fpk").read_bytes()


def test_exit_code_config_error(tmp_path, capsys):
    bad = write(tmp_path / "bad.ini", "[train]\nstepz = 3\n")
    assert cli.main(["train", "--config", bad, "--out", str(tmp_path / "x")]) == 2
    assert "unknown key" in capsys.readouterr().err
    assert cli.main(["train", "--config", str(tmp_path / "missing.ini"), "--out", str(tmp_path / "x")]) == 2


def test_exit_code_data_error(tmp_path):
    assert cli.main(["frustumize", "--dataset", str(tmp_path / "nowhere"), "--out", str(tmp_path / "o")]) == 3
    (tmp_path / "junk.bin").write_bytes(b"\x00" * 7)
    assert cli.main(["inspect", str(tmp_path / "junk.bin")]) == 3


def test_exit_code_check_failure(monkeypatch, capsys):
    bad = [gradsuite.CaseResult("linear", 0, False, 1.0, "W")]
    monkeypatch.setattr(gradsuite, "run_suite", lambda n, seed: bad)
    assert cli.main(["gradcheck", "--configs", "1"]) == 4
    assert "FAIL linear" in capsys.readouterr().out


def test_gradcheck_passes():
    assert cli.main(["gradcheck", "--configs", "1"]) == 0


def test_synth_frustumize_detect_eval(tmp_path, capsys):
    spec = write(tmp_path / "scene.txt", "min_objects = 2\nmax_objects = 2\n")
    data = tmp_path / "data"
    assert cli.main(["synth", "--spec", spec, "--count", "2", "--out", str(data)]) == 0
    assert sorted(os.listdir(data / "velodyne")) == ["000000.bin", "000001.bin"]
    assert "max_objects = 2" in (data / "config.resolved.ini").read_text()
    assert cli.main(["frustumize", "--dataset", str(data), "--out", str(tmp_path / "fs")]) == 0
    assert cli.main(["inspect", str(tmp_path / "fs")]) == 0
    cfg = write(tmp_path / "tiny.ini", TINY)
    assert cli.main(["train", "--config", cfg, "--samples", str(tmp_path / "fs"), "--out", str(tmp_path / "run")]) == 0
    ck = str(tmp_path / "run" / "model.fpk")
    assert cli.main(["detect", "--config", cfg, "--checkpoint", ck, "--dataset", str(data), "--out", str(tmp_path / "det")]) == 0
    assert cli.main(["eval", "--labels", str(data / "label_2"), "--detections", str(tmp_path / "det"), "--out", str(tmp_path / "ev")]) == 0
    assert (tmp_path / "ev" / "ap.csv").read_text().startswith("category,metric,iou,difficulty,ap\n")
    assert cli.main(["fuse", "--frustum", str(tmp_path / "det"), "--bv", str(tmp_path / "det"), "--out", str(tmp_path / "fu")]) == 0
    assert cli.main(["bv-raster", "--velodyne", str(data / "velodyne" / "000000.bin"), "--out", str(tmp_path / "g.bvg")]) == 0
    capsys.readouterr()
    assert cli.main(["inspect", str(tmp_path / "g.bvg")]) == 0
    assert "600, 600, 9" in capsys.readouterr().out


def test_ablate_defaults_to_ablation_config(tmp_path):
    cfg = write(tmp_path / "abl.ini", TINY)
    out = tmp_path / "abl"
    assert cli.main(["ablate", "--config", cfg, "--rows", "none", "--seeds", "1", "--out", str(out)]) == 0
    resolved = read_experiment_config(str(out / "config.resolved.ini"))
    base = ablation_config()
    assert resolved.train.iou_threshold == base.train.iou_threshold == 0.7
    assert resolved.train.mask_source == "oracle" and not resolved.train.train_seg
    assert (out / "summary.csv").read_text().splitlines()[1].startswith("none,1,")
    with pytest.raises(SystemExit):
        cli.main(["ablate", "--table", "nope", "--out", str(out)])
    assert cli.main(["ablate", "--config", cfg, "--rows", "nope", "--out", str(out)]) == 2

import json

import numpy as np
from filelock import FileLock
from PIL import Image

from xmod import config as xc
from xmod.cli import main, run_pipeline
from xmod.evaluation import MetricsReport


def desk_config(tmp_path, phantoms, **over):
    cfg = {
        "preset": "desk",
        "data": {k: str(phantoms["root"] / k) for k in ("a", "b", "test")},
        "essnet": {"epochs": 1, "checkpoint_every": 1},
        "unet": {"epochs": 1, "checkpoint_every": 1, "arrangements": [0, 5]},
    }
    for k, v in over.items():
        cfg.setdefault(k, {}).update(v) if isinstance(v, dict) else cfg.__setitem__(k, v)
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(cfg))
    return p


def test_validate_exit_codes(tmp_path, capsys):
    good, bad = tmp_path / "good.json", tmp_path / "bad.json"
    good.write_text("{}")
    bad.write_text(json.dumps({"loss": {"lambda3": -1}}))
    assert main(["validate", "--config", str(good)]) == 0
    assert main(["validate", "--config", str(bad)]) == 2
    assert "loss.lambda3 must be ≥ 0" in capsys.readouterr().out


def test_paper_preset_without_data_fails_at_prep_check(tmp_path, capsys):
    cfg = tmp_path / "paper.json"
    cfg.write_text(json.dumps({"preset": "paper"}))
    assert main(["pipeline", "--config", str(cfg), "--out", str(tmp_path / "runs")]) == 3
    err = capsys.readouterr().err
    assert "prep-check" in err and "data.a" in err


def test_bad_config_exit_2(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"essnet": {"batch_size": 0}}))
    assert run_pipeline(cfg, tmp_path / "runs") == 2


def test_phantom_and_prep_commands(tmp_path):
    assert main(["phantom", "--style", "a", "--size", "16", "--count", "2", "--out", str(tmp_path / "ph")]) == 0
    assert (tmp_path / "ph" / "manifest.json").is_file()
    src = tmp_path / "src"
    (src / "images").mkdir(parents=True)
    (src / "labels").mkdir()
    Image.fromarray(np.zeros((16, 16), np.uint8)).save(src / "images" / "x.png")
    lab = np.zeros((16, 16), np.uint8)
    lab[2:6, 2:6] = 60
    Image.fromarray(lab).save(src / "labels" / "x.png")
    out = tmp_path / "prep"
    assert main(["prep", "--src", str(src), "--modality", "mr", "--liver-range", "55:70", "--size", "16", "--out", str(out)]) == 0
    assert json.loads((out / "manifest.json").read_text())["entries"][0]["liver_visible"] is True
    assert main(["prep", "--src", str(tmp_path / "nothing"), "--modality", "ct", "--out", str(out)]) == 3


def test_summary_command(capsys):
    cfg_free = main(["summary", "--net", "discriminator", "--size", "256"])
    assert cfg_free == 0
    out = capsys.readouterr().out
    assert "(1, 1, 30, 30)" in out and "28,256,644" in out and "31,031,685" in out


def test_pipeline_end_to_end_and_resume(tmp_path, phantoms, capsys):
    cfg_path = desk_config(tmp_path, phantoms)
    assert main(["pipeline", "--config", str(cfg_path), "--out", str(tmp_path / "runs")]) == 0
    cfg = xc.load_config(cfg_path)
    run = tmp_path / "runs" / cfg["run_id"]
    assert (run / "config.json").read_text() == xc.dumps(cfg)
    assert xc.resolve(json.loads((run / "config.json").read_text())) == cfg
    for d in ("essnet", "synth", "unet_0", "unet_5", "reports"):
        assert (run / d).is_dir(), d
    labels = [MetricsReport.read(run / "reports" / f"unet_{n}.json").arrangement for n in (0, 5)]
    assert labels == ["Real only (20)", "Combined (25)"]
    assert "Real only (20)" in (run / "reports" / "table3.csv").read_text()
    capsys.readouterr()

    before = {p: p.stat().st_mtime_ns for p in run.rglob("*.pt")}
    assert run_pipeline(cfg_path, tmp_path / "runs") == 0
    assert {p: p.stat().st_mtime_ns for p in run.rglob("*.pt")} == before


def test_pipeline_cyclegan_arm(tmp_path, phantoms):
    cfg_path = desk_config(tmp_path, phantoms, unet={"arrangements": [0, 5]}, pipeline={"cyclegan_ablation": True, "ablation_takes": [5]})
    assert run_pipeline(cfg_path, tmp_path / "runs") == 0
    run = tmp_path / "runs" / xc.load_config(cfg_path)["run_id"]
    t4 = (run / "reports" / "table4.csv").read_text()
    assert "Real images only (20)" in t4 and "Combined (25) Real+Synthetic" in t4


def test_pipeline_lock(tmp_path, phantoms, capsys):
    cfg_path = desk_config(tmp_path, phantoms)
    run = tmp_path / "runs" / xc.load_config(cfg_path)["run_id"]
    run.mkdir(parents=True)
    with FileLock(str(run / ".lock")):
        assert run_pipeline(cfg_path, tmp_path / "runs") == 2
    assert "locked" in capsys.readouterr().err


def test_pipeline_stage_failure_named(tmp_path, phantoms, capsys, monkeypatch):
    import xmod.cli as cli
    from xmod.training import TrainingAborted

    def boom(*a, **k):
        raise TrainingAborted("step 3: loss term cycle_A is not finite (nan)")

    monkeypatch.setattr(cli, "train_unet", boom)
    cfg_path = desk_config(tmp_path, phantoms)
    assert run_pipeline(cfg_path, tmp_path / "runs") == 4
    assert "train-unet_0" in capsys.readouterr().err
    run = tmp_path / "runs" / xc.load_config(cfg_path)["run_id"]
    assert (run / "essnet" / "checkpoints").is_dir()  # partial artifacts kept


def test_evaluate_and_report_commands(tmp_path, phantoms, capsys):
    from xmod.models import UNetConfig
    from xmod.training import UNetTrainConfig, train_unet

    train_unet(UNetTrainConfig(epochs=1, unet=UNetConfig(base_width=2)), phantoms["b"], tmp_path / "u")
    rep = tmp_path / "r.json"
    assert main(["evaluate", "--ckpt", str(tmp_path / "u"), "--data", str(phantoms["root"] / "test"),
                 "--out", str(rep), "--arrangement", "Real only (20)", "--roc-csv", str(tmp_path / "roc.csv")]) == 0
    assert MetricsReport.read(rep).auc is not None
    assert (tmp_path / "roc.csv").read_text().startswith("threshold,fpr,tpr")
    capsys.readouterr()
    assert main(["report", "--runs", str(rep), "--format", "csv"]) == 0
    assert "Real only (20)" in capsys.readouterr().out
    assert main(["evaluate", "--ckpt", str(tmp_path / "nope"), "--data", str(phantoms["root"] / "test"), "--out", str(rep)]) == 4

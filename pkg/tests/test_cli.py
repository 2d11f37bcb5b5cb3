import csv
import json

import pytest

from splitdp.cli import build_parser, main, resolve_config

FAST = ["--dataset", "synthetic", "--train-size", "120", "--test-size", "40",
        "--widths", "4,4,8,8,8,8", "--epochs", "1", "--batch-size", "40",
        "--attack-iters", "5", "--attack-step", "300", "--attack-samples", "2",
        "--runs", "1", "--seed", "2"]


def test_parser_accepts_all_verbs():
    for verb in ("fetch-data", "pretrain", "train", "attack", "sweep", "report"):
        assert build_parser().parse_args([verb]).verb == verb
    with pytest.raises(SystemExit):
        build_parser().parse_args(["launch"])


def test_flags_override_config_file(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps(
        {"dataset": {"name": "svhn"}, "case": 2, "runs": 3, "train": {"epochs": 7}}))
    args = build_parser().parse_args(["sweep", "--config", str(tmp_path / "c.json"),
                                      "--case", "3", "--epsilon-grid", "1,10",
                                      "--desk-scale", "0.1", "--workers", "2"])
    cfg = resolve_config(args)
    assert (cfg.case, cfg.runs, cfg.workers, cfg.train.epochs) == (3, 3, 2, 7)
    assert cfg.epsilon_grid == (1.0, 10.0)
    assert (cfg.dataset.train_size, cfg.dataset.test_size) == (7320, 2600)


def test_sweep_then_report(tmp_path, capsys):
    out = tmp_path / "run"
    code = main(["sweep", *FAST, "--epsilon-grid", "1,1000", "--out", str(out),
                 "--data-root", str(tmp_path / "data")])
    assert code == 0
    with open(out / "results.csv") as fh:
        rows = list(csv.reader(fh))
    assert [r[2] for r in rows[1:]] == ["1.0", "1000.0", "inf"]
    capsys.readouterr()
    assert main(["report", "--out", str(out)]) == 0
    text = capsys.readouterr().out
    assert text.startswith("synthetic case 1\t1\t1000")


def test_train_and_attack_verbs(tmp_path, capsys):
    common = [*FAST, "--out", str(tmp_path / "run"), "--data-root", str(tmp_path / "data")]
    assert main(["train", *common]) == 0
    assert "baseline accuracy" in capsys.readouterr().out
    assert main(["attack", *common, "--epsilon-grid", "5"]) == 0
    assert (tmp_path / "run" / "grids" / "eps_5.0.png").exists()


def test_pretrain_verb(tmp_path, capsys):
    code = main(["pretrain", "--dataset", "synthetic", "--train-size", "60", "--test-size", "10",
                 "--widths", "4,4,4", "--epochs", "1", "--batch-size", "30",
                 "--out", str(tmp_path), "--data-root", str(tmp_path / "data")])
    assert code == 0
    assert (tmp_path / "checkpoints" / "extractor.pt").exists()
    path = capsys.readouterr().out.split("\t")[0]
    code = main(["train", *FAST[:-2], "--widths", "4,4,4", "--pretrained", path,
                 "--out", str(tmp_path / "run"), "--data-root", str(tmp_path / "data")])
    assert code == 0


def test_failure_sets_exit_status(tmp_path):
    code = main(["sweep", "--dataset", "svhn", "--train-size", "10", "--test-size", "5",
                 "--epsilon-grid", "1", "--out", str(tmp_path / "run"),
                 "--data-root", str(tmp_path / "empty")])
    assert code == 1

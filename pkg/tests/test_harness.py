import csv
import json
import math
import shutil
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from splitdp.attack import AttackConfig
from splitdp.data import DatasetSpec
from splitdp.errors import ConfigurationError
from splitdp.harness import (DEFAULT_EPSILONS, NO_NOISE, RESULT_COLUMNS, ExperimentConfig,
                             ExperimentRecord, derive_seed, epsilon_label, export_grid,
                             format_pivot, pivot, prepare, read_results, run_cell, sweep,
                             write_results)
from splitdp.splitnet import ArchitectureSpec
from splitdp.training import TrainConfig, evaluate


def tiny_config(out, data, **kw):
    base = dict(
        dataset=DatasetSpec("synthetic", train_size=200, test_size=60, seed=1),
        case=1, runs=2, attack_sample_size=4,
        attack=AttackConfig(max_iters=15, step_size=300.0, tv_weight=0.0),
        train=TrainConfig(learning_rate=2e-3, batch_size=50, epochs=1),
        architecture=ArchitectureSpec.from_widths((4, 4, 8, 8, 8, 8)),
        output_dir=str(out), data_root=str(data), seed=3, bound_sample_size=20)
    base.update(kw)
    return ExperimentConfig(**base)


@pytest.fixture(scope="module")
def swept(tmp_path_factory):
    root = tmp_path_factory.mktemp("sweep")
    cfg = tiny_config(root / "out", root / "data")
    return cfg, sweep(cfg)


def test_sweep_record_count_and_order(swept):
    cfg, recs = swept
    assert len(cfg.epsilon_grid) == len(DEFAULT_EPSILONS) == 15
    assert len(recs) == 16
    assert [r.epsilon for r in recs] == sorted(DEFAULT_EPSILONS) + [math.inf]
    assert all(not r.failed for r in recs), [r.status for r in recs if r.failed]
    assert all(r.n_attacked == 4 for r in recs)


def test_sweep_outputs(swept):
    cfg, recs = swept
    out = cfg.output_dir
    with open(f"{out}/results.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == RESULT_COLUMNS
    assert [r[2] for r in rows[1:]] == [epsilon_label(e) for e in sorted(DEFAULT_EPSILONS)] + ["inf"]
    lock = json.loads(open(f"{out}/config.lock").read())
    assert lock["config"]["seed"] == 3 and "cell/inf" in lock["seeds"]
    assert ExperimentConfig.from_dict(lock["config"]) == cfg
    payload = json.loads(open(f"{out}/results.json").read())
    assert payload["config"] == cfg.to_dict()
    for name in ("grids/sweep.png", "grids/eps_inf.png", "checkpoints/baseline.pt",
                 "checkpoints/eps_5000.0.pt", "cells/eps_0.1/record.json"):
        assert Path(out, name).exists(), name


def test_baseline_row_equals_baseline_evaluation(swept):
    cfg, recs = swept
    ctx = prepare(cfg)
    base = recs[-1]
    assert base.epsilon == NO_NOISE
    seed = cfg.seeds()["cell/inf"]["eval"]
    assert base.accuracy == evaluate(ctx.baseline, ctx.test_set, None, cfg.runs, seed).accuracy
    assert base.normalized_accuracy_loss == 0.0


def test_normalized_loss_matches_baseline(swept):
    _, recs = swept
    base = recs[-1].accuracy
    for r in recs[:-1]:
        assert r.normalized_accuracy_loss == pytest.approx(100 * (base - r.accuracy) / base)


def test_results_round_trip(swept, tmp_path):
    cfg, recs = swept
    assert read_results(cfg.output_dir) == recs
    back = read_results(f"{cfg.output_dir}/results.csv")
    for a, b in zip(back, recs):
        assert (a.epsilon, a.accuracy, a.mean_mse, a.mean_ssim, a.mean_psnr) == \
               (b.epsilon, b.accuracy, b.mean_mse, b.mean_ssim, b.mean_psnr)
    csv_path, _ = write_results(recs[:1], tmp_path)
    assert len(csv_path.read_text().splitlines()) == 2
    with pytest.raises(ConfigurationError):
        write_results([], tmp_path)


def test_pivot_agrees_with_records(swept):
    _, recs = swept
    table = pivot(recs, "synthetic", 1)
    assert list(table) == ["Accuracy", "MSE", "SSIM", "PSNR"]
    assert list(table["SSIM"]) == sorted(DEFAULT_EPSILONS)
    for r in recs[:-1]:
        assert table["Accuracy"][r.epsilon] == r.accuracy
        assert table["MSE"][r.epsilon] == r.mean_mse
        assert table["PSNR"][r.epsilon] == r.mean_psnr
    text = format_pivot(recs, "synthetic", 1)
    assert len(text.splitlines()) == 5
    assert text.splitlines()[0].split("\t")[1:] == [f"{e:g}" for e in sorted(DEFAULT_EPSILONS)]


def test_cell_rerun_is_byte_identical(swept):
    cfg, recs = swept
    cell = f"{cfg.output_dir}/cells/eps_20.0"
    grid = f"{cfg.output_dir}/grids/eps_20.0.png"
    before = (open(f"{cell}/record.json", "rb").read(), open(grid, "rb").read())
    row = next(r for r in recs if r.epsilon == 20.0).row()
    shutil.rmtree(cell)
    rec = run_cell(cfg, 20.0)
    assert rec.row() == row
    assert (open(f"{cell}/record.json", "rb").read(), open(grid, "rb").read()) == before


def test_failed_cell_is_isolated(tmp_path):
    cfg = tiny_config(tmp_path / "out", tmp_path / "data", epsilon_grid=(1.0,),
                      dataset=DatasetSpec("svhn", train_size=10, test_size=5))
    recs = sweep(cfg)
    assert len(recs) == 2 and all(r.failed for r in recs)
    assert "IngestionError" in recs[0].status
    assert (tmp_path / "out" / "results.csv").exists()


def test_parallel_workers_match_serial(tmp_path):
    kw = dict(epsilon_grid=(1.0, 100.0), attack_sample_size=2)
    a = sweep(tiny_config(tmp_path / "a", tmp_path / "data", **kw), train=False)
    b = sweep(tiny_config(tmp_path / "b", tmp_path / "data", workers=2, **kw), train=False)
    assert [r.row() for r in a] == [r.row() for r in b]
    assert math.isnan(a[0].accuracy)


def test_export_grid_layout(tmp_path):
    rng = np.random.default_rng(0)
    orig = rng.uniform(0, 255, (4, 32, 32, 3))
    recon = rng.uniform(0, 255, (4, 15, 32, 32, 3))
    p = export_grid(orig, recon, [str(e) for e in DEFAULT_EPSILONS], tmp_path / "g.png")
    w, h = Image.open(p).size
    tile, pad, margin = 64, 2, 14
    assert ((w - pad) // (tile + pad), (h - margin - pad) // (tile + pad)) == (16, 4)
    p1 = export_grid(orig[:1], recon[:1, :1], ["1"], tmp_path / "one.png")
    w, h = Image.open(p1).size
    assert ((w - pad) // (tile + pad), (h - margin - pad) // (tile + pad)) == (2, 1)
    p2 = export_grid(orig[:1], recon[:1, :1], ["1"], tmp_path / "two.png")
    assert p1.read_bytes() == p2.read_bytes()
    img = np.asarray(Image.open(p1))
    np.testing.assert_array_equal(img[margin + pad:margin + pad + tile:2, pad:pad + tile:2],
                                  np.clip(np.rint(orig[0]), 0, 255).astype(np.uint8))
    with pytest.raises(ConfigurationError):
        export_grid(orig[:0], recon[:0], [], tmp_path / "e.png")


def test_derive_seed():
    assert derive_seed(0, "a", 1.0) == derive_seed(0, "a", 1.0)
    assert derive_seed(0, "a", 1.0) != derive_seed(0, "a", 2.0)
    assert derive_seed(0, "a") != derive_seed(1, "a")
    assert derive_seed(0, "eval", math.inf) != derive_seed(0, "eval", 5000.0)
    assert 0 <= derive_seed(5, 3, "x") < 2 ** 64


def test_config_validation_and_desk_scale():
    ds = DatasetSpec("svhn")
    cfg = ExperimentConfig(dataset=ds, desk_scale=0.1)
    assert (cfg.dataset.train_size, cfg.dataset.test_size) == (7320, 2600)
    assert ExperimentConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigurationError):
        ExperimentConfig(dataset=DatasetSpec("svhn", desk_scale=0.5), desk_scale=0.1)
    with pytest.raises(ConfigurationError):
        ExperimentConfig(dataset=ds, epsilon_grid=(1.0, -2.0))
    with pytest.raises(ConfigurationError):
        ExperimentConfig(dataset=ds, runs=0)


def test_record_row_format():
    r = ExperimentRecord("svhn", 1, math.inf, 0, 93.5, 0.0, 1.5, 0.25, 20.0)
    assert r.row() == ["svhn", "1", "inf", "0", "93.5", "0.0", "1.5", "0.25", "20.0"]

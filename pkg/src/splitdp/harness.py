"""Epsilon sweeps: one experiment cell per privacy budget, plus a no-noise
baseline cell, with results tables and reconstruction grids on disk.

Output layout under ``output_dir``::

    config.lock               resolved configuration (JSON) incl. all seeds
    results.csv               one row per cell, sorted by epsilon (baseline last)
    results.json              the same records with the full config
    checkpoints/baseline.pt   frozen client + trained remote part
    checkpoints/eps_<e>.pt    noisy-fine-tuned models
    cells/eps_<e>/            record.json, recon.npy, train.log
    grids/eps_<e>.png         originals next to reconstructions for one cell
    grids/sweep.png           originals next to every cell's reconstructions

Seeds: every random stream is derived from the root seed with
:func:`derive_seed`, keyed by a purpose tag and, for cells, the epsilon
value.  Rerunning one cell therefore reproduces it without rerunning the
others.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from .attack import AttackConfig, attack_batch
from .data import DatasetSpec, ImageDataset, load_dataset
from .errors import ConfigurationError
from .privacy import PrivacyParams, bound_from_norms, estimate_bound
from .splitnet import (ArchitectureSpec, build_model, install_local, load_checkpoint,
                       load_extractor, save_checkpoint)
from .training import (TrainConfig, evaluate, noisy_finetune, normalized_accuracy_loss,
                       train_baseline)

log = logging.getLogger(__name__)

DEFAULT_EPSILONS = (0.1, 0.2, 0.5, 1, 2, 5, 10, 20, 50, 100, 200, 500, 1000, 2000, 5000)
NO_NOISE = math.inf
RESULT_COLUMNS = ["dataset", "case", "epsilon", "run", "accuracy", "norm_acc_loss",
                  "mse", "ssim", "psnr"]


def derive_seed(root: int, *keys) -> int:
    """64-bit seed from the root seed and a path of keys.

    Integer keys are used as-is, anything else through ``crc32(str(key))``;
    the resulting integer sequence seeds a :class:`numpy.random.SeedSequence`.
    """
    words = [int(root)]
    for k in keys:
        if isinstance(k, (int, np.integer)) and not isinstance(k, bool) and k >= 0:
            words.append(int(k))
        else:
            words.append(zlib.crc32(_key_text(k).encode()))
    return int(np.random.SeedSequence(words).generate_state(1, dtype=np.uint64)[0])


def _key_text(k) -> str:
    if isinstance(k, float):
        return epsilon_label(k)
    return str(k)


def epsilon_label(eps: float) -> str:
    if math.isinf(eps):
        return "inf"
    return repr(float(eps))


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetSpec
    case: int = 1
    epsilon_grid: tuple[float, ...] = DEFAULT_EPSILONS
    runs: int = 5
    attack_sample_size: int = 100
    attack: AttackConfig = field(default_factory=AttackConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    finetune: TrainConfig | None = None
    architecture: ArchitectureSpec = field(default_factory=ArchitectureSpec)
    output_dir: str = "runs"
    data_root: str = "data"
    desk_scale: float = 1.0
    seed: int = 0
    replicate: int = 0
    pretrained_local: str | None = None
    bound_sample_size: int = 100
    grid_samples: int = 4
    workers: int = 1

    def __post_init__(self):
        grid = tuple(float(e) for e in self.epsilon_grid)
        if not grid or any(not e > 0 for e in grid):
            raise ConfigurationError("epsilon grid must be nonempty and positive")
        object.__setattr__(self, "epsilon_grid", grid)
        if self.runs < 1 or self.attack_sample_size < 1 or self.workers < 1:
            raise ConfigurationError("runs, attack_sample_size and workers must be >= 1")
        if self.desk_scale != self.dataset.desk_scale:
            # sizes are recomputed from the full ones
            if self.dataset.desk_scale != 1.0:
                raise ConfigurationError("conflicting desk_scale in config and dataset")
            object.__setattr__(self, "dataset", dataclasses.replace(
                self.dataset, train_size=None, test_size=None, desk_scale=self.desk_scale))

    @property
    def finetune_config(self) -> TrainConfig:
        return self.finetune or self.train

    def to_dict(self) -> dict:
        return {
            "dataset": _plain(dataclasses.asdict(self.dataset)),
            "case": self.case,
            "epsilon_grid": list(self.epsilon_grid),
            "runs": self.runs,
            "attack_sample_size": self.attack_sample_size,
            "attack": _plain(dataclasses.asdict(self.attack)),
            "train": _train_dict(self.train),
            "finetune": _train_dict(self.finetune) if self.finetune else None,
            "architecture": self.architecture.to_dict(),
            "output_dir": str(self.output_dir),
            "data_root": str(self.data_root),
            "desk_scale": self.desk_scale,
            "seed": self.seed,
            "replicate": self.replicate,
            "pretrained_local": self.pretrained_local,
            "bound_sample_size": self.bound_sample_size,
            "grid_samples": self.grid_samples,
            "workers": self.workers,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        ds = dict(d.pop("dataset"))
        if ds.get("class_filter") is not None:
            ds["class_filter"] = tuple(ds["class_filter"])
        ds["image_shape"] = tuple(ds.get("image_shape", (32, 32, 3)))
        kw = {"dataset": DatasetSpec(**ds)}
        if "attack" in d:
            a = dict(d.pop("attack"))
            a["pixel_range"] = tuple(a.get("pixel_range", (0.0, 255.0)))
            kw["attack"] = AttackConfig(**a)
        for key in ("train", "finetune"):
            if d.get(key) is not None:
                kw[key] = TrainConfig(**d.pop(key))
            else:
                d.pop(key, None)
        if "architecture" in d:
            kw["architecture"] = ArchitectureSpec.from_dict(d.pop("architecture"))
        if "epsilon_grid" in d:
            kw["epsilon_grid"] = tuple(d.pop("epsilon_grid"))
        kw.update(d)
        return cls(**kw)

    def seeds(self) -> dict:
        """Every derived seed that a sweep over this config uses."""
        out = {k: derive_seed(self.seed, self.replicate, k)
               for k in ("model", "baseline", "bound", "attack-images")}
        for eps in self.epsilon_grid + (NO_NOISE,):
            lab = epsilon_label(eps)
            out[f"cell/{lab}"] = {p: derive_seed(self.seed, self.replicate, p, eps)
                                  for p in ("finetune", "eval", "attack")}
        return out


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _train_dict(cfg: TrainConfig) -> dict:
    d = dataclasses.asdict(cfg)
    d.pop("noise_params")
    d["noisy"] = False
    return d


@dataclass
class ExperimentRecord:
    dataset: str
    case: int
    epsilon: float
    run: int
    accuracy: float
    normalized_accuracy_loss: float
    mean_mse: float
    mean_ssim: float
    mean_psnr: float
    artifact_paths: list[str] = field(default_factory=list)
    status: str = "ok"
    n_attacked: int = 0
    n_failed_attacks: int = 0
    bound: float = float("nan")

    @property
    def failed(self) -> bool:
        return self.status != "ok"

    def row(self) -> list[str]:
        vals = [self.dataset, str(self.case), epsilon_label(self.epsilon), str(self.run),
                self.accuracy, self.normalized_accuracy_loss, self.mean_mse, self.mean_ssim,
                self.mean_psnr]
        return [v if isinstance(v, str) else repr(float(v)) for v in vals]


# ---------------------------------------------------------------------------
# shared state of a sweep


@dataclass
class Context:
    """Data, baseline model and clipping bound shared by all cells of a config."""

    config: ExperimentConfig
    train_set: ImageDataset
    test_set: ImageDataset
    baseline: object
    baseline_accuracy: float
    bound: float
    attack_images: np.ndarray
    attack_ids: list[str]


def _baseline_key(config: ExperimentConfig) -> str:
    d = config.to_dict()
    keep = {k: d[k] for k in ("dataset", "case", "train", "architecture", "seed",
                              "replicate", "pretrained_local", "bound_sample_size", "runs")}
    return hashlib.sha256(json.dumps(keep, sort_keys=True).encode()).hexdigest()[:16]


def prepare(config: ExperimentConfig) -> Context:
    """Load data and obtain the baseline model, reusing a matching checkpoint."""
    out = Path(config.output_dir)
    train_set, test_set = load_dataset(config.dataset, config.data_root)
    seeds = config.seeds()
    ckpt, meta_path = out / "checkpoints" / "baseline.pt", out / "checkpoints" / "baseline.json"
    key = _baseline_key(config)
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    if ckpt.exists() and meta.get("key") == key:
        baseline = load_checkpoint(ckpt)
        bound = bound_from_norms(meta["bound_norms"]).bound
        accuracy = meta["accuracy"]
    else:
        model = build_model(config.architecture, config.case, seed=seeds["model"])
        if config.pretrained_local:
            model = install_local(model, load_extractor(config.pretrained_local))
        else:
            log.warning("no pretrained client weights given; using a random frozen client")
            model.provenance = f"random init seed={seeds['model']}"
            model.freeze_local()
        tcfg = replace(config.train, seed=seeds["baseline"],
                       log_path=str(out / "cells" / "eps_inf" / "train.log"))
        baseline = train_baseline(model, train_set, tcfg)
        rng = np.random.default_rng(seeds["bound"])
        n_b = min(config.bound_sample_size, len(train_set))
        idx = np.sort(rng.choice(len(train_set), n_b, replace=False))
        est = estimate_bound(baseline, train_set.images[idx])
        bound = est.bound
        accuracy = evaluate(baseline, test_set, None, config.runs,
                            seeds["cell/inf"]["eval"]).accuracy
        save_checkpoint(baseline, ckpt)
        meta_path.write_text(json.dumps({"key": key, "accuracy": accuracy, "bound": bound,
                                         "bound_norms": list(est.per_sample_norms)}))
    rng = np.random.default_rng(seeds["attack-images"])
    n_a = min(config.attack_sample_size, len(test_set))
    idx = np.sort(rng.choice(len(test_set), n_a, replace=False))
    return Context(config, train_set, test_set, baseline, accuracy, bound,
                   test_set.images[idx].astype(np.float64),
                   [test_set.source_ids[i] for i in idx])


def _cell_dir(config: ExperimentConfig, eps: float) -> Path:
    return Path(config.output_dir) / "cells" / f"eps_{epsilon_label(eps)}"


def run_cell(config: ExperimentConfig, epsilon: float, context: Context | None = None,
             train: bool = True) -> ExperimentRecord:
    """Fine-tune, evaluate and attack at one privacy budget.

    ``epsilon = inf`` is the no-noise control: the baseline model is evaluated
    and attacked on clean feature maps.  With ``train=False`` the cell skips
    fine-tuning and accuracy (attack only).  Stage failures are caught and
    reported in the record's ``status``.
    """
    stage = "prepare"
    eps = float(epsilon)
    rec = ExperimentRecord(config.dataset.name, config.case, eps, config.replicate,
                           math.nan, math.nan, math.nan, math.nan, math.nan)
    try:
        ctx = context or prepare(config)
        rec.bound = ctx.bound
        seeds = {p: derive_seed(config.seed, config.replicate, p, eps)
                 for p in ("finetune", "eval", "attack")}
        cdir = _cell_dir(config, eps)
        cdir.mkdir(parents=True, exist_ok=True)
        privacy = None if math.isinf(eps) else PrivacyParams(eps, ctx.bound)
        model = ctx.baseline
        if train:
            if privacy is not None:
                stage = "finetune"
                ft = replace(config.finetune_config, seed=seeds["finetune"], noisy=True,
                             noise_params=privacy, log_path=str(cdir / "train.log"))
                log_file = cdir / "train.log"
                if log_file.exists():
                    log_file.unlink()
                model = noisy_finetune(ctx.baseline, ctx.train_set, ft)
                path = save_checkpoint(model, Path(config.output_dir) / "checkpoints"
                                       / f"eps_{epsilon_label(eps)}.pt")
                rec.artifact_paths.append(str(path))
                stage = "evaluate"
                rec.accuracy = evaluate(model, ctx.test_set, privacy, config.runs,
                                        seeds["eval"]).accuracy
            else:
                rec.accuracy = ctx.baseline_accuracy
            rec.normalized_accuracy_loss = normalized_accuracy_loss(ctx.baseline_accuracy,
                                                                    rec.accuracy)
        stage = "attack"
        acfg = replace(config.attack, seed=seeds["attack"])
        outcomes = attack_batch(ctx.baseline, ctx.attack_images, privacy, acfg, ctx.attack_ids)
        good = [o for o in outcomes if not o.failed]
        rec.n_attacked, rec.n_failed_attacks = len(outcomes), len(outcomes) - len(good)
        if good:
            rec.mean_mse = float(np.mean([o.metrics.mse for o in good]))
            rec.mean_ssim = float(np.mean([o.metrics.ssim for o in good]))
            rec.mean_psnr = float(np.mean([o.metrics.psnr for o in good]))
        stage = "artifacts"
        k = min(config.grid_samples, len(outcomes))
        recon = np.stack([o.reconstructed if o.reconstructed is not None
                          else np.zeros_like(o.original) for o in outcomes[:k]])
        np.save(cdir / "recon.npy", recon)
        grid = export_grid(ctx.attack_images[:k], recon[:, None], [epsilon_label(eps)],
                           Path(config.output_dir) / "grids" / f"eps_{epsilon_label(eps)}.png")
        rec.artifact_paths += [str(cdir / "recon.npy"), str(grid)]
        if rec.n_failed_attacks:
            rec.status = f"partial: {rec.n_failed_attacks} attack item(s) failed"
    except Exception as exc:  # a cell must never abort the sweep
        log.exception("cell eps=%s failed in stage %s", epsilon_label(eps), stage)
        rec.status = f"failed: {stage}: {type(exc).__name__}: {exc}"
    _cell_dir(config, eps).mkdir(parents=True, exist_ok=True)
    (_cell_dir(config, eps) / "record.json").write_text(
        json.dumps(_record_dict(rec), indent=1, sort_keys=True))
    return rec


def sweep(config: ExperimentConfig, train: bool = True) -> list[ExperimentRecord]:
    """All cells of the grid plus the no-noise baseline row, then the summary files."""
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.lock").write_text(json.dumps(
        {"config": config.to_dict(), "seeds": config.seeds()}, indent=1, sort_keys=True))
    try:
        ctx = prepare(config)
    except Exception as exc:
        log.exception("sweep preparation failed")
        recs = [ExperimentRecord(config.dataset.name, config.case, float(e), config.replicate,
                                 math.nan, math.nan, math.nan, math.nan, math.nan,
                                 status=f"failed: prepare: {type(exc).__name__}: {exc}")
                for e in sorted(config.epsilon_grid) + [NO_NOISE]]
        write_results(recs, out, config)
        return recs
    grid = sorted(set(config.epsilon_grid)) + [NO_NOISE]
    if config.workers > 1:
        with ThreadPoolExecutor(config.workers) as pool:
            recs = list(pool.map(lambda e: run_cell(config, e, ctx, train), grid))
    else:
        recs = [run_cell(config, e, ctx, train) for e in grid]
    write_results(recs, out, config)
    _sweep_grid(config, ctx, recs)
    return recs


def _sweep_grid(config, ctx, recs):
    cols, labels = [], []
    for r in recs:
        p = _cell_dir(config, r.epsilon) / "recon.npy"
        if p.exists() and not r.failed:
            cols.append(np.load(p))
            labels.append(epsilon_label(r.epsilon))
    if cols:
        recon = np.stack(cols, axis=1)
        export_grid(ctx.attack_images[:len(recon)], recon, labels,
                    Path(config.output_dir) / "grids" / "sweep.png")


# ---------------------------------------------------------------------------
# artifacts


def export_grid(originals, reconstructions, epsilons: Sequence[str], path,
                zoom: int = 2) -> Path:
    """PNG grid: one row per sample, the original in column 0, then one
    reconstruction per epsilon, with the column labels in a top margin.

    ``reconstructions`` has shape ``(n_samples, n_eps, H, W, C)``.
    """
    from PIL import Image, ImageDraw, ImageFont

    originals = np.asarray(originals, dtype=np.float64)
    recon = np.asarray(reconstructions, dtype=np.float64)
    if originals.size == 0 or recon.size == 0 or len(epsilons) == 0:
        raise ConfigurationError("export_grid needs at least one sample and one epsilon")
    if recon.ndim == 4:
        recon = recon[:, None]
    if len(originals) != len(recon) or recon.shape[1] != len(epsilons):
        raise ConfigurationError("originals, reconstructions and labels disagree in length")
    n, e = recon.shape[:2]
    h, w = originals.shape[1:3]
    th, tw, pad, margin = h * zoom, w * zoom, 2, 14
    canvas = Image.new("RGB", ((e + 1) * (tw + pad) + pad, margin + n * (th + pad) + pad),
                       (255, 255, 255))
    draw = ImageDraw.Draw(canvas)
    font = ImageFont.load_default()
    labels = ["orig"] + [f"e={lab}" for lab in epsilons]
    for j, lab in enumerate(labels):
        draw.text((pad + j * (tw + pad), 1), lab, fill=(0, 0, 0), font=font)
    for i in range(n):
        tiles = [originals[i]] + [recon[i, j] for j in range(e)]
        for j, tile in enumerate(tiles):
            arr = np.clip(np.rint(tile), 0, 255).astype(np.uint8)
            im = Image.fromarray(arr).resize((tw, th), Image.NEAREST)
            canvas.paste(im, (pad + j * (tw + pad), margin + pad + i * (th + pad)))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    canvas.save(path, format="PNG")
    return path


def _record_dict(rec: ExperimentRecord) -> dict:
    d = dataclasses.asdict(rec)
    for k, v in d.items():
        if isinstance(v, float) and not math.isfinite(v):
            d[k] = repr(v)
    return d


def _record_from_dict(d: dict) -> ExperimentRecord:
    d = dict(d)
    for k, v in d.items():
        if isinstance(v, str) and v in ("inf", "nan", "-inf"):
            d[k] = float(v)
    return ExperimentRecord(**d)


def write_results(records: Sequence[ExperimentRecord], out_dir,
                  config: ExperimentConfig | None = None) -> tuple[Path, Path]:
    """``results.csv`` (sorted by epsilon, no-noise row last) and ``results.json``."""
    if not records:
        raise ConfigurationError("no records to write")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    recs = sorted(records, key=lambda r: (r.dataset, r.case, r.run, r.epsilon))
    csv_path = out / "results.csv"
    with open(csv_path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(RESULT_COLUMNS)
        for r in recs:
            wr.writerow(r.row())
    payload = {"records": [_record_dict(r) for r in recs]}
    if config is not None:
        payload["config"] = config.to_dict()
        payload["seeds"] = config.seeds()
    json_path = out / "results.json"
    json_path.write_text(json.dumps(payload, indent=1, sort_keys=True))
    return csv_path, json_path


def read_results(path) -> list[ExperimentRecord]:
    """Records from ``results.json`` (full) or ``results.csv`` (table columns only)."""
    path = Path(path)
    if path.is_dir():
        path = path / "results.json"
    if path.suffix == ".json":
        return [_record_from_dict(d) for d in json.loads(path.read_text())["records"]]
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [ExperimentRecord(r["dataset"], int(r["case"]), float(r["epsilon"]), int(r["run"]),
                             float(r["accuracy"]), float(r["norm_acc_loss"]), float(r["mse"]),
                             float(r["ssim"]), float(r["psnr"])) for r in rows]


def reference_accuracy() -> dict[tuple[str, int], dict[float, float]]:
    """Accuracy per epsilon of the original full-scale runs, keyed by ``(dataset, case)``.

    Only meaningful for full-size datasets, full training schedules and the
    CIFAR-100 pretrained client; desk-scale runs are not expected to match.
    """
    text = resources.files("splitdp.resources").joinpath("reference_accuracy.csv").read_text()
    rows = csv.reader(line for line in text.splitlines() if not line.startswith("#"))
    header = next(rows)
    eps = [float(e) for e in header[2:]]
    return {(r[0], int(r[1])): dict(zip(eps, map(float, r[2:]))) for r in rows}


PIVOT_METRICS = (("Accuracy", "accuracy"), ("MSE", "mean_mse"), ("SSIM", "mean_ssim"),
                 ("PSNR", "mean_psnr"))


def pivot(records: Sequence[ExperimentRecord], dataset: str, case: int
          ) -> dict[str, dict[float, float]]:
    """Metric name to ``{epsilon: value}`` for one (dataset, case), noisy cells only."""
    sel = sorted((r for r in records if r.dataset == dataset and r.case == case
                  and math.isfinite(r.epsilon)), key=lambda r: r.epsilon)
    return {name: {r.epsilon: getattr(r, attr) for r in sel} for name, attr in PIVOT_METRICS}


def format_pivot(records: Sequence[ExperimentRecord], dataset: str, case: int) -> str:
    table = pivot(records, dataset, case)
    eps = list(table["Accuracy"])
    lines = [f"{dataset} case {case}\t" + "\t".join(f"{e:g}" for e in eps)]
    for name, values in table.items():
        lines.append(f"{name}\t" + "\t".join(f"{values[e]:.3f}" for e in eps))
    return "\n".join(lines)

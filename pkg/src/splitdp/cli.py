"""Command line entry point: ``splitdp <verb> [flags]``.

Verbs: fetch-data, pretrain, train, attack, sweep, report.  A JSON config
file (``--config``) provides defaults in the layout of ``config.lock``;
flags override individual keys.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .data import DatasetSpec, fetch_dataset, load_dataset
from .harness import ExperimentConfig, format_pivot, prepare, read_results, sweep
from .splitnet import ArchitectureSpec, pretrain_local, save_extractor

DATASETS = ["svhn", "gtsrb", "stl10", "cifar10", "cifar100", "synthetic"]


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(",") if v.strip())


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="splitdp", description=__doc__.splitlines()[0])
    p.add_argument("verb", choices=["fetch-data", "pretrain", "train", "attack", "sweep",
                                    "report"])
    p.add_argument("--config", type=Path, help="JSON config file")
    p.add_argument("--dataset", choices=DATASETS)
    p.add_argument("--case", type=int, choices=[1, 2, 3])
    p.add_argument("--epsilon-grid", type=_floats, help="comma separated budgets")
    p.add_argument("--runs", type=int)
    p.add_argument("--attack-samples", type=int)
    p.add_argument("--desk-scale", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=str)
    p.add_argument("--workers", type=int)
    p.add_argument("--data-root", type=str)
    p.add_argument("--pretrained", type=str, help="extractor file from `pretrain`")
    p.add_argument("--train-size", type=int)
    p.add_argument("--test-size", type=int)
    p.add_argument("--widths", type=_ints, help="conv channel widths, comma separated")
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--finetune-epochs", type=int)
    p.add_argument("--attack-iters", type=int)
    p.add_argument("--attack-step", type=float)
    p.add_argument("--tv-weight", type=float)
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    base = json.loads(args.config.read_text()) if args.config else {}
    base = base.get("config", base)
    d = dict(base)
    ds = dict(d.get("dataset", {"name": "svhn"}))
    if args.dataset:
        ds = {"name": args.dataset, "seed": ds.get("seed", 0)}
    for flag, key in (("train_size", "train_size"), ("test_size", "test_size")):
        if getattr(args, flag) is not None:
            ds[key] = getattr(args, flag)
    if args.desk_scale is not None:
        d["desk_scale"] = args.desk_scale
        if args.train_size is None and args.test_size is None:
            ds.pop("train_size", None)
            ds.pop("test_size", None)
            ds["desk_scale"] = 1.0
    d["dataset"] = ds
    simple = {"case": "case", "epsilon_grid": "epsilon_grid", "runs": "runs",
              "attack_samples": "attack_sample_size", "seed": "seed", "out": "output_dir",
              "workers": "workers", "data_root": "data_root", "pretrained": "pretrained_local"}
    for flag, key in simple.items():
        if getattr(args, flag) is not None:
            d[key] = getattr(args, flag)
    if args.widths:
        d["architecture"] = ArchitectureSpec.from_widths(args.widths).to_dict()
    train = dict(d.get("train") or {})
    for flag, key in (("lr", "learning_rate"), ("batch_size", "batch_size"),
                      ("epochs", "epochs")):
        if getattr(args, flag) is not None:
            train[key] = getattr(args, flag)
    if train:
        d["train"] = train
    if args.finetune_epochs is not None:
        ft = dict(d.get("finetune") or train)
        ft["epochs"] = args.finetune_epochs
        d["finetune"] = ft
    attack = dict(d.get("attack") or {})
    for flag, key in (("attack_iters", "max_iters"), ("attack_step", "step_size"),
                      ("tv_weight", "tv_weight")):
        if getattr(args, flag) is not None:
            attack[key] = getattr(args, flag)
    if attack:
        d["attack"] = attack
    return ExperimentConfig.from_dict(d)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.verb == "report":
        out = Path(args.out or "runs")
        recs = read_results(out)
        for ds, case in sorted({(r.dataset, r.case) for r in recs}):
            print(format_pivot(recs, ds, case))
            print()
        return 0
    if args.verb == "fetch-data":
        path = fetch_dataset(args.dataset or "svhn", args.data_root or "data")
        print(path)
        return 0
    config = resolve_config(args)
    if args.verb == "pretrain":
        spec = DatasetSpec(args.dataset or "cifar100", desk_scale=config.desk_scale,
                           train_size=args.train_size, test_size=args.test_size)
        train_set, _ = load_dataset(spec, config.data_root)
        extractor = pretrain_local(config.architecture, train_set, config.train)
        path = save_extractor(extractor, Path(config.output_dir) / "checkpoints" / "extractor.pt")
        print(f"{path}\t{extractor.provenance}")
        return 0
    if args.verb == "train":
        ctx = prepare(config)
        print(f"baseline accuracy {ctx.baseline_accuracy:.3f}%  bound {ctx.bound:.6g}")
        return 0
    records = sweep(config, train=(args.verb == "sweep"))
    for r in records:
        print("\t".join(r.row()), r.status, sep="\t")
    failures = sum(r.failed for r in records)
    return 1 if failures else 0


if __name__ == "__main__":
    sys.exit(main())

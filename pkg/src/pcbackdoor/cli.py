"""Command-line experiment runner.

    pcbackdoor init-config > exp.toml
    pcbackdoor gen-synthetic --config exp.toml --out runs/data
    pcbackdoor run --config exp.toml --trigger ball --pipeline "sor(k=30,n_remove=100),rotate_z(max_deg=20)"

Exit status: 0 on success, 2 for configuration errors, 1 for runtime errors.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig, load_config
from .dataset import (
    LabeledDataset,
    PoisonPlan,
    generate_synthetic_corpus,
    load_manifest_datasets,
    poison_dataset,
    write_manifest,
    write_xyz,
)
from .metrics import EvalReport, evaluate
from .model import TrainConfig, load_checkpoint, save_checkpoint, train
from .preprocess import PipelineSpec, parse_pipeline
from .trigger import TRIGGER_KINDS

log = logging.getLogger("pcbackdoor")

RESULTS_HEADER = ["run_id", "trigger", "pipeline", "acc", "asr", "cd_x100", "seed"]


# -- helpers -----------------------------------------------------------------------


def _resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    data = cfg.to_dict()
    if args.seed is not None:
        data["seed"] = args.seed
    if args.out is not None:
        data["out"] = args.out
    if getattr(args, "trigger", None):
        data["poison"]["trigger"] = args.trigger
    if getattr(args, "pipeline", None) is not None:
        try:
            data["train"]["pipeline"] = parse_pipeline(args.pipeline).to_list()
        except ValueError as exc:
            raise ConfigError(f"--pipeline: {exc}") from exc
    return ExperimentConfig.from_dict(data)


def _out_dir(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_text(path: Path, text: str):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def load_data(cfg: ExperimentConfig) -> tuple[LabeledDataset, LabeledDataset]:
    d = cfg.dataset
    if d.source == "synthetic":
        kw = dict(classes=d.classes, n_points=d.points, noise_sigma=d.noise_sigma,
                  seed=cfg.seed, pose_jitter_deg=d.pose_jitter_deg, vary_proportions=d.vary_proportions)
        train_set = generate_synthetic_corpus(per_class=d.per_class_train, split="train", **kw)
        test_set = generate_synthetic_corpus(per_class=d.per_class_test, split="test", **kw)
        return train_set, test_set
    train_set, test_set = load_manifest_datasets(d.source, n_points=d.points, seed=cfg.seed)
    if not 0 <= cfg.poison.target < train_set.n_classes:
        raise ConfigError(f"poison.target {cfg.poison.target} out of range for {train_set.n_classes} classes")
    return train_set, test_set


def poisoned_training_set(cfg: ExperimentConfig, train_set: LabeledDataset):
    if cfg.poison.rate == 0:
        return train_set, []
    plan = PoisonPlan(cfg.poison.rate, cfg.poison.target, cfg.trigger(), cfg.seed)
    result = poison_dataset(train_set, plan)
    return result.dataset, result.records


def _train_config(cfg: ExperimentConfig) -> TrainConfig:
    t = cfg.train
    return TrainConfig(t.epochs, t.batch_size, t.lr, cfg.seed, cfg.train_pipeline())


def upsert_results(path: Path, row: dict):
    """Insert or replace the row with the same run_id; rows stay sorted by run_id."""
    rows = {}
    if path.exists():
        with open(path, encoding="utf-8", newline="") as fh:
            for r in csv.DictReader(fh):
                rows[r["run_id"]] = r
    rows[row["run_id"]] = {k: row[k] for k in RESULTS_HEADER}
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=RESULTS_HEADER, lineterminator="\n")
        w.writeheader()
        for key in sorted(rows):
            w.writerow(rows[key])


# -- commands ------------------------------------------------------------------------


def cmd_init_config(cfg: ExperimentConfig, args) -> int:
    text = cfg.to_toml()
    if args.output:
        _write_text(Path(args.output), text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_gen_synthetic(cfg: ExperimentConfig, args) -> int:
    if cfg.dataset.source != "synthetic":
        raise ConfigError("gen-synthetic needs dataset.source = 'synthetic'")
    out = _out_dir(cfg)
    rows = []
    for ds in load_data(cfg):
        counters: dict[int, int] = {}
        for cloud, label in zip(ds.clouds, ds.labels.tolist()):
            name = ds.class_names[label]
            i = counters.get(label, 0)
            counters[label] = i + 1
            rel = Path(ds.split) / name / f"{name}_{i:04d}.xyz"
            (out / rel.parent).mkdir(parents=True, exist_ok=True)
            write_xyz(out / rel, cloud)
            rows.append((rel.as_posix(), name, ds.split))
    write_manifest(out / "manifest.csv", rows)
    _write_text(out / "config.toml", cfg.to_toml())
    log.info("wrote %d clouds to %s", len(rows), out)
    return 0


def cmd_poison(cfg: ExperimentConfig, args) -> int:
    out = _out_dir(cfg)
    train_set, test_set = load_data(cfg)
    if cfg.poison.rate == 0:
        raise ConfigError("poison.rate is 0; nothing to poison")
    poisoned, records = poisoned_training_set(cfg, train_set)
    (out / "poisoned").mkdir(exist_ok=True)
    rows = []
    for ds in (poisoned, test_set):
        for i, (cloud, label) in enumerate(zip(ds.clouds, ds.labels.tolist())):
            if ds.split == "train" and ds.poison_mask[i]:
                rel = f"poisoned/{i:05d}.xyz"
                write_xyz(out / rel, cloud)
            elif ds.paths is not None:
                rel = str(Path(cfg.dataset.source).resolve().parent / ds.paths[i])
            else:
                rel = f"{ds.split}/{i:05d}.xyz"
                (out / ds.split).mkdir(exist_ok=True)
                write_xyz(out / rel, cloud)
            rows.append((rel, ds.class_names[label], ds.split))
    write_manifest(out / "manifest.csv", rows)
    with open(out / "poison_manifest.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "path", "original_label", "target_label", "trigger", "seed", "fps_start", "cd_x100"])
        for r in records:
            w.writerow([r.index, f"poisoned/{r.index:05d}.xyz", r.original_label, cfg.poison.target,
                        cfg.poison.trigger, cfg.seed, r.info.get("fps_start", ""), repr(r.cd_x100)])
    meta = {
        "rate": cfg.poison.rate,
        "target": cfg.poison.target,
        "seed": cfg.seed,
        "n_poisoned": len(records),
        "trigger": cfg.trigger().describe(),
        "mean_cd_x100": float(np.mean([r.cd_x100 for r in records])) if records else 0.0,
    }
    _write_text(out / "poison_params.json", json.dumps(meta, indent=2, sort_keys=True) + "\n")
    log.info("poisoned %d of %d training samples", len(records), len(poisoned))
    return 0


def _train(cfg: ExperimentConfig, out: Path):
    train_set, test_set = load_data(cfg)
    poisoned, _ = poisoned_training_set(cfg, train_set)
    model, state, logs = train(poisoned, _train_config(cfg))
    save_checkpoint(out / "model.ckpt", model, state)
    with open(out / "loss_log.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss", "train_acc"])
        for e in logs:
            w.writerow([e.epoch, repr(e.loss), repr(e.train_acc)])
    _write_text(out / "config.toml", cfg.to_toml())
    return model, test_set


def _eval(cfg: ExperimentConfig, model, test_set, out: Path, results: Path | None) -> EvalReport:
    trigger = cfg.trigger()
    report = evaluate(model, test_set, trigger, cfg.poison.target, cfg.eval_pipeline(), seed=cfg.seed)
    report.pipeline = cfg.train_pipeline().label()
    report.extra = {"run_id": cfg.digest(), "eval_pipeline": cfg.eval_pipeline().label()}
    _write_text(out / "report.json", report.to_json() + "\n")
    row = {
        "run_id": cfg.digest(),
        "trigger": trigger.kind,
        "pipeline": report.pipeline,
        "acc": repr(report.acc),
        "asr": repr(report.asr),
        "cd_x100": repr(report.cd_x100),
        "seed": cfg.seed,
    }
    with open(out / "report.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=RESULTS_HEADER, lineterminator="\n")
        w.writeheader()
        w.writerow(row)
    if results is not None:
        upsert_results(results, row)
    return report


def _results_path(cfg: ExperimentConfig, args) -> Path:
    if getattr(args, "results", None):
        return Path(args.results)
    return Path(cfg.out).parent / "results.csv"


def cmd_train(cfg: ExperimentConfig, args) -> int:
    out = _out_dir(cfg)
    model, _ = _train(cfg, out)
    log.info("trained model %s", model.digest()[:12])
    return 0


def cmd_eval(cfg: ExperimentConfig, args) -> int:
    out = _out_dir(cfg)
    ckpt = Path(args.checkpoint) if args.checkpoint else out / "model.ckpt"
    model, _ = load_checkpoint(ckpt)
    _, test_set = load_data(cfg)
    report = _eval(cfg, model, test_set, out, _results_path(cfg, args))
    print(f"acc={report.acc:.4f} asr={report.asr:.4f} cd_x100={report.cd_x100:.4f}")
    return 0


def cmd_run(cfg: ExperimentConfig, args) -> int:
    out = _out_dir(cfg)
    model, test_set = _train(cfg, out)
    report = _eval(cfg, model, test_set, out, _results_path(cfg, args))
    print(f"acc={report.acc:.4f} asr={report.asr:.4f} cd_x100={report.cd_x100:.4f}")
    return 0


def cmd_export_features(cfg: ExperimentConfig, args) -> int:
    out = _out_dir(cfg)
    ckpt = Path(args.checkpoint) if args.checkpoint else out / "model.ckpt"
    model, _ = load_checkpoint(ckpt)
    train_set, _ = load_data(cfg)
    ds, _ = poisoned_training_set(cfg, train_set)
    dest = Path(args.output) if args.output else out / "features.csv"
    with open(dest, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        feats = None
        for i, (cloud, label) in enumerate(zip(ds.clouds, ds.labels.tolist())):
            f = model.features(cloud)
            if feats is None:
                w.writerow(["index", "label", "poisoned"] + [f"f{j}" for j in range(len(f))])
                feats = len(f)
            w.writerow([i, label, int(ds.poison_mask[i])] + [repr(float(v)) for v in f])
    log.info("wrote features for %d samples to %s", len(ds), dest)
    return 0


COMMANDS = {
    "init-config": cmd_init_config,
    "gen-synthetic": cmd_gen_synthetic,
    "poison": cmd_poison,
    "train": cmd_train,
    "eval": cmd_eval,
    "run": cmd_run,
    "export-features": cmd_export_features,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML experiment config (defaults are used when omitted)")
    common.add_argument("--seed", type=int, help="override the global seed")
    common.add_argument("--out", help="override the output directory")
    common.add_argument("--trigger", choices=TRIGGER_KINDS, help="override poison.trigger")
    common.add_argument("--pipeline", help="training pipeline, e.g. 'sor(k=30,n_remove=100),rotate_z(max_deg=20)'")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="pcbackdoor", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("init-config", parents=[common], help="print the default config")
    p.add_argument("-o", "--output")
    sub.add_parser("gen-synthetic", parents=[common], help="write the synthetic corpus and manifest")
    sub.add_parser("poison", parents=[common], help="write the poisoned training set")
    sub.add_parser("train", parents=[common], help="train and write checkpoint + loss log")
    for name in ("eval", "run"):
        p = sub.add_parser(name, parents=[common], help="evaluate ACC / ASR / CD" if name == "eval" else "train then eval")
        if name == "eval":
            p.add_argument("--checkpoint")
        p.add_argument("--results", help="cumulative results CSV (default: <out>/../results.csv)")
    p = sub.add_parser("export-features", parents=[common], help="dump pooled features of the training set")
    p.add_argument("--checkpoint")
    p.add_argument("-o", "--output")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        cfg = _resolve_config(args)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return 2
    except (OSError, ValueError, RuntimeError) as exc:
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())

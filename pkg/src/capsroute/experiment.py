"""Five-fold holdout experiments: orchestration, report files, staged reruns.

An experiment directory is reproducible byte-for-byte from its config
snapshot: split plans derive from the dataset labels and the seed, training
is deterministic per fold, and every emitted file uses fixed formatting.

Stages (train -> eval -> report) can run separately through the stage
functions; ``run_experiment`` composes all three in one pass.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .augment import AugmentConfig, audit_lineage, expand_dataset
from .config import TrainConfig
from .metrics import TABLE_COLUMNS, ConfusionMatrix, MetricsReport, aggregate, metrics, normalize_confusion
from .signal import SpectrogramImage, load_dataset
from .splits import SplitPlan, make_splits
from .training import evaluate, images_to_arrays, load_model, save_model, train_model

__all__ = [
    "FoldOutcome",
    "ExperimentReport",
    "ExperimentError",
    "worker_count",
    "config_snapshot_text",
    "plan_for",
    "run_experiment",
    "stage_train",
    "stage_eval",
    "stage_report",
]


class ExperimentError(RuntimeError):
    pass


@dataclass
class FoldOutcome:
    fold: int
    confusion: ConfusionMatrix
    report: MetricsReport
    curve: list[dict]


@dataclass
class ExperimentReport:
    folds: list[FoldOutcome]
    aggregate: dict
    snapshot: str


def worker_count() -> int:
    """Fold-level parallelism cap from CAPSROUTE_THREADS (default 1)."""
    raw = os.environ.get("CAPSROUTE_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _fmt(value) -> str:
    if value is None:
        return ""
    return repr(float(value))


def config_snapshot_text(
    cfg: TrainConfig,
    dataset_ref: str,
    folds: int,
    train_frac: float,
    split_mode: str,
    subject_grouped: bool,
) -> str:
    entries = {
        "augment": cfg.augment,
        "augment_factor": cfg.augment_factor,
        "batch_size": cfg.batch_size,
        "beta1": cfg.beta1,
        "beta2": cfg.beta2,
        "dataset": dataset_ref,
        "dropout_keep": cfg.dropout_keep,
        "early_stop_train_acc": cfg.early_stop_train_acc,
        "epochs": cfg.epochs,
        "eps": cfg.eps,
        "folds": folds,
        "l2_beta": cfg.l2_beta,
        "learning_rate": cfg.learning_rate,
        "model": cfg.kind,
        "precision": cfg.precision,
        "seed": cfg.seed,
        "split_mode": split_mode,
        "subject_grouped": subject_grouped,
        "train_frac": train_frac,
    }
    return "".join(f"{k}={entries[k]}\n" for k in sorted(entries))


def _load_images(dataset: Union[Path, str, Sequence[SpectrogramImage]]) -> tuple[list[SpectrogramImage], str]:
    if isinstance(dataset, (str, Path)):
        return load_dataset(dataset), str(dataset)
    return list(dataset), "<in-memory>"


def plan_for(images: Sequence[SpectrogramImage], seed: int, folds: int, train_frac: float, split_mode: str, subject_grouped: bool) -> SplitPlan:
    _, labels = images_to_arrays(images)
    groups = [img.subject_id for img in images] if subject_grouped else None
    return make_splits(labels, k=folds, train_frac=train_frac, seed=seed, mode=split_mode, groups=groups)


def _fold_seed(seed: int, fold: int) -> int:
    return int(np.random.default_rng((seed, 0xF0, fold)).integers(0, 2**31))


def _train_one_fold(fold_idx: int, images, plan: SplitPlan, cfg: TrainConfig, out_dir: Path):
    fold = plan.folds[fold_idx]
    train_images = [images[i].copy_with(split="train") for i in fold.train_indices]
    fold_cfg = replace(cfg, seed=_fold_seed(cfg.seed, fold_idx))
    if cfg.augment:
        aug_cfg = AugmentConfig(expansion_factor=cfg.augment_factor, seed=_fold_seed(cfg.seed, fold_idx) ^ 0x5EED)
        train_images, lineage = expand_dataset(train_images, aug_cfg)
        audit_lineage(lineage, fold.train_indices, fold.test_indices)
        _write_lineage(out_dir / f"augmented_fold{fold_idx}.csv", lineage)
    params, curve = train_model(cfg.kind, train_images, fold_cfg)
    save_model(out_dir / f"model_fold{fold_idx}.ckpt", params)
    _write_curve(out_dir / f"curve_fold{fold_idx}.csv", curve)
    return params, curve, train_images


def _eval_one_fold(fold_idx: int, images, plan: SplitPlan, model, train_paths) -> ConfusionMatrix:
    fold = plan.folds[fold_idx]
    test_images = [images[i].copy_with(split="test") for i in fold.test_indices]
    return evaluate(model, test_images, train_paths=train_paths)


# ---------------------------------------------------------------------------
# file emission
# ---------------------------------------------------------------------------


def _write_curve(path: Path, curve: list[dict]) -> None:
    lines = ["epoch,mean_loss,train_accuracy\n"]
    lines += [f"{row['epoch']},{_fmt(row['mean_loss'])},{_fmt(row['train_accuracy'])}\n" for row in curve]
    path.write_text("".join(lines))


def _write_lineage(path: Path, lineage: list[dict]) -> None:
    lines = ["parent_path,parent_index,copy_index,seed\n"]
    lines += [f"{r['parent_path']},{r['parent_index']},{r['copy_index']},{r['seed']}\n" for r in lineage]
    path.write_text("".join(lines))


def _write_confusion(path: Path, cm: ConfusionMatrix) -> None:
    path.write_text(
        "true\\predicted,Alert,Drowsy\n"
        f"Alert,{cm.tn},{cm.fp}\n"
        f"Drowsy,{cm.fn},{cm.tp}\n"
    )


def _read_confusion(path: Path) -> ConfusionMatrix:
    lines = path.read_text().strip().splitlines()
    if len(lines) != 3:
        raise ExperimentError(f"malformed confusion file {path}")
    alert_row = lines[1].split(",")
    drowsy_row = lines[2].split(",")
    return ConfusionMatrix(tn=int(alert_row[1]), fp=int(alert_row[2]), fn=int(drowsy_row[1]), tp=int(drowsy_row[2]))


def _write_normalized(path: Path, cm: ConfusionMatrix) -> None:
    grid = normalize_confusion(cm)
    path.write_text(
        "true\\predicted,Alert,Drowsy\n"
        f"Alert,{_fmt(grid[0, 0])},{_fmt(grid[0, 1])}\n"
        f"Drowsy,{_fmt(grid[1, 0])},{_fmt(grid[1, 1])}\n"
    )


def _write_report(path: Path, reports: list[MetricsReport]) -> None:
    lines = ["fold," + ",".join(TABLE_COLUMNS) + "\n"]
    for i, rep in enumerate(reports):
        lines.append(f"{i}," + ",".join(_fmt(v) for v in rep.as_row()) + "\n")
    path.write_text("".join(lines))


def _write_aggregate(path: Path, agg: dict) -> None:
    lines = ["metric,mean,std\n"]
    for column in TABLE_COLUMNS:
        mean, std = agg[column]
        lines.append(f"{column},{_fmt(mean)},{_fmt(std)}\n")
    path.write_text("".join(lines))


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------


def stage_train(
    dataset: Union[Path, str, Sequence[SpectrogramImage]],
    cfg: TrainConfig,
    out_dir: Path,
    folds: int = 5,
    train_frac: float = 0.8,
    split_mode: str = "holdout",
    subject_grouped: bool = False,
) -> list:
    """Train every fold; writes checkpoints, curves, and the config snapshot."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    images, dataset_ref = _load_images(dataset)
    plan = plan_for(images, cfg.seed, folds, train_frac, split_mode, subject_grouped)
    (out_dir / "config.snapshot").write_text(
        config_snapshot_text(cfg, dataset_ref, folds, train_frac, split_mode, subject_grouped)
    )

    def work(i):
        return _train_one_fold(i, images, plan, cfg, out_dir)

    workers = worker_count()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(work, range(folds)))
    else:
        results = [work(i) for i in range(folds)]
    return results


def stage_eval(
    dataset: Union[Path, str, Sequence[SpectrogramImage]],
    cfg: TrainConfig,
    out_dir: Path,
    folds: int = 5,
    train_frac: float = 0.8,
    split_mode: str = "holdout",
    subject_grouped: bool = False,
    trained: Optional[list] = None,
) -> list[ConfusionMatrix]:
    """Evaluate each fold's checkpoint; writes confusion files and report.csv."""
    out_dir = Path(out_dir)
    images, _ = _load_images(dataset)
    plan = plan_for(images, cfg.seed, folds, train_frac, split_mode, subject_grouped)
    confusions = []
    for i in range(folds):
        if trained is not None:
            model, _, train_images = trained[i]
        else:
            ckpt = out_dir / f"model_fold{i}.ckpt"
            if not ckpt.exists():
                raise ExperimentError(f"missing checkpoint {ckpt}; run the train stage first")
            stored_kind, model = load_model(ckpt)
            if stored_kind != cfg.kind:
                raise ExperimentError(f"{ckpt} holds a {stored_kind} model but the config requests {cfg.kind}")
            train_images = [images[j] for j in plan.folds[i].train_indices]
        train_paths = {img.source_path for img in train_images if img.source_path}
        cm = _eval_one_fold(i, images, plan, model, train_paths)
        _write_confusion(out_dir / f"confusion_fold{i}.csv", cm)
        confusions.append(cm)
    _write_report(out_dir / "report.csv", [metrics(cm) for cm in confusions])
    return confusions


def stage_report(out_dir: Path, folds: int = 5) -> dict:
    """Aggregate fold metrics; writes aggregate.csv and normalized confusions."""
    out_dir = Path(out_dir)
    confusions = []
    for i in range(folds):
        path = out_dir / f"confusion_fold{i}.csv"
        if not path.exists():
            raise ExperimentError(f"missing {path}; run the eval stage first")
        confusions.append(_read_confusion(path))
    reports = [metrics(cm) for cm in confusions]
    agg = aggregate(reports)
    _write_aggregate(out_dir / "aggregate.csv", agg)
    for i, cm in enumerate(confusions):
        _write_normalized(out_dir / f"confusion_fold{i}_normalized.csv", cm)
    return agg


def run_experiment(
    dataset: Union[Path, str, Sequence[SpectrogramImage]],
    cfg: TrainConfig,
    out_dir: Path,
    folds: int = 5,
    train_frac: float = 0.8,
    split_mode: str = "holdout",
    subject_grouped: bool = False,
) -> ExperimentReport:
    """make_splits -> (augment) -> train -> evaluate -> metrics, with all report files."""
    out_dir = Path(out_dir)
    trained = stage_train(dataset, cfg, out_dir, folds, train_frac, split_mode, subject_grouped)
    confusions = stage_eval(dataset, cfg, out_dir, folds, train_frac, split_mode, subject_grouped, trained=trained)
    agg = stage_report(out_dir, folds)
    outcomes = [
        FoldOutcome(fold=i, confusion=cm, report=metrics(cm), curve=trained[i][1])
        for i, cm in enumerate(confusions)
    ]
    snapshot = (out_dir / "config.snapshot").read_text()
    return ExperimentReport(folds=outcomes, aggregate=agg, snapshot=snapshot)

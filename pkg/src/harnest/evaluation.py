"""Leave-one-subject-out evaluation, ablations, lambda_MMD sweeps and report files."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import multiprocessing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .datapipe.types import WindowedDataset
from .trainer import TrainConfig, predict, run_variant

logger = logging.getLogger(__name__)

METRICS = ("acc", "f_weighted", "f_macro")
ABLATION_VARIANTS = ("no_adv", "only_supervised", "no_mmd", "one_stage", "proposed")
SWEEP_VALUES = (0.01, 0.05, 0.1, 0.5, 1.0, 5.0)
POOLING_NOTE = "mean and std pool every (subject, repeat) run; std is the population std (ddof=0)"


class LeakageError(AssertionError):
    pass


@dataclass
class FoldSpec:
    test_subject: int
    train_subjects: list
    repeats: int = 2
    repeat: int = 0

    def __post_init__(self):
        if self.test_subject in self.train_subjects:
            raise ValueError(f"test subject {self.test_subject} is also a training subject")
        if not self.train_subjects:
            raise ValueError("train_subjects must be non-empty")


@dataclass
class FoldReport:
    variant: str
    per_fold: list = field(default_factory=list)
    aggregate: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    metrics: tuple = METRICS
    failed: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    @property
    def complete(self) -> bool:
        return not self.failed

    def recompute_aggregate(self) -> dict:
        self.aggregate = aggregate(self.per_fold, self.metrics)
        return self.aggregate

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def loso_folds(dataset: WindowedDataset, repeats: int = 2) -> list[FoldSpec]:
    subjects = sorted(set(int(s) for s in np.unique(dataset.S)))
    if len(subjects) < 2:
        raise ValueError(f"leave-one-subject-out needs at least 2 subjects, found {len(subjects)}")
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    return [
        FoldSpec(test_subject=s, train_subjects=[t for t in subjects if t != s], repeats=repeats, repeat=r)
        for s in subjects
        for r in range(repeats)
    ]


def confusion_matrix(pred, truth, n_a: int) -> np.ndarray:
    pred = np.asarray(pred, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if pred.shape != truth.shape:
        raise ValueError(f"length mismatch: pred {pred.shape} vs truth {truth.shape}")
    if pred.size == 0:
        raise ValueError("need at least one prediction")
    for name, arr in (("pred", pred), ("truth", truth)):
        if arr.min() < 0 or arr.max() >= n_a:
            raise ValueError(f"{name} labels outside [0, {n_a})")
    cm = np.zeros((n_a, n_a), dtype=np.int64)
    np.add.at(cm, (truth, pred), 1)
    return cm


def metrics(pred, truth, n_a: int, macro_present_only: bool = False) -> dict:
    """Accuracy, support-weighted F1 and macro F1.

    Macro F1 averages over all ``n_a`` classes, so classes missing from
    ``truth`` and ``pred`` count as zero; ``macro_present_only`` restricts the
    average to classes present in ``truth``.
    """
    cm = confusion_matrix(pred, truth, n_a)
    tp = np.diag(cm).astype(float)
    support = cm.sum(axis=1).astype(float)
    predicted = cm.sum(axis=0).astype(float)
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(predicted > 0, tp / predicted, 0.0)
        recall = np.where(support > 0, tp / support, 0.0)
        denom = precision + recall
        f1 = np.where(denom > 0, 2 * precision * recall / np.where(denom > 0, denom, 1.0), 0.0)
    total = support.sum()
    present = support > 0
    f_macro = f1[present].mean() if macro_present_only else f1.mean()
    return {
        "acc": float(tp.sum() / total),
        "f_weighted": float((f1 * support).sum() / total),
        "f_macro": float(f_macro),
    }


def aggregate(per_fold: list, metric_names: Sequence[str] = METRICS) -> dict:
    out = {}
    for m in metric_names:
        vals = np.array([r[m] for r in per_fold if r.get(m) is not None], dtype=float)
        if vals.size == 0:
            continue
        out[m] = {"mean": float(vals.mean()), "std": float(vals.std()), "quantiles": quantiles(vals)}
    return out


def quantiles(values) -> dict:
    v = np.asarray(values, dtype=float)
    q = np.percentile(v, [0, 25, 50, 75, 100])
    return dict(zip(("min", "q1", "median", "q3", "max"), (float(x) for x in q)))


def index_hash(idx) -> str:
    return hashlib.sha256(np.asarray(sorted(int(i) for i in idx), dtype=np.int64).tobytes()).hexdigest()


def split_fold(dataset: WindowedDataset, spec: FoldSpec):
    train_idx = np.flatnonzero(np.isin(dataset.S, spec.train_subjects))
    test_idx = np.flatnonzero(dataset.S == spec.test_subject)
    train = dataset.subset(train_idx)
    assert_no_leakage(train, spec)
    return train, dataset.subset(test_idx), test_idx


def assert_no_leakage(train: WindowedDataset, spec: FoldSpec) -> None:
    if np.any(train.S == spec.test_subject):
        raise LeakageError(f"test subject {spec.test_subject} present in the labeled training set")


def _fold_seed(cfg: TrainConfig, repeat: int) -> int:
    return cfg.seed + 1000 * repeat


def run_fold(dataset: WindowedDataset, spec: FoldSpec, train_cfg: TrainConfig, model_cfg=None,
             acc_only: bool = False, macro_present_only: bool = False) -> dict:
    train, test, test_idx = split_fold(dataset, spec)
    cfg = dataclasses.replace(train_cfg, seed=_fold_seed(train_cfg, spec.repeat))
    # the test subject's windows go in unlabeled; run_variant drops their labels
    state = run_variant(cfg, train, target=test, model_cfg=model_cfg)
    assert_no_leakage(train, spec)
    pred = predict(state, test.X)
    m = metrics(pred, test.Y, dataset.n_a, macro_present_only)
    row = {"subject": spec.test_subject, "repeat": spec.repeat, "variant": state.variant,
           "seed": cfg.seed, "test_index_hash": index_hash(test_idx), "n_test": int(test.n)}
    for k in METRICS:
        row[k] = m[k] if (k == "acc" or not acc_only) else None
    return row


def _fold_worker(args):
    dataset, spec, cfg, model_cfg, acc_only, present_only = args
    try:
        return run_fold(dataset, spec, cfg, model_cfg, acc_only, present_only), None
    except LeakageError:
        raise
    except Exception as exc:  # recorded; the report is marked incomplete
        logger.exception("fold subject=%s repeat=%s failed", spec.test_subject, spec.repeat)
        return None, {"subject": spec.test_subject, "repeat": spec.repeat, "error": repr(exc)}


def run_loso(dataset: WindowedDataset, train_cfg: TrainConfig, model_cfg=None, repeats: int = 2,
             jobs: int = 1, acc_only: bool = False, macro_present_only: bool = False,
             folds: Optional[list] = None, label: Optional[str] = None) -> FoldReport:
    """Train and test once per (held-out subject, repeat) and aggregate."""
    folds = folds if folds is not None else loso_folds(dataset, repeats)
    args = [(dataset, f, train_cfg, model_cfg, acc_only, macro_present_only) for f in folds]
    if jobs > 1:
        ctx = multiprocessing.get_context("spawn")
        with ProcessPoolExecutor(max_workers=jobs, mp_context=ctx) as pool:
            results = list(pool.map(_fold_worker, args))
    else:
        results = [_fold_worker(a) for a in args]
    names = ("acc",) if acc_only else METRICS
    report = FoldReport(
        variant=label or train_cfg.variant,
        per_fold=[r for r, _ in results if r is not None],
        failed=[e for _, e in results if e is not None],
        config={"train": train_cfg.to_dict(),
                "model": model_cfg.to_dict() if hasattr(model_cfg, "to_dict") else (model_cfg or {}),
                "discriminator": train_cfg.variant != "no_adv",
                "repeats": repeats},
        metrics=names,
        metadata={"pooling": POOLING_NOTE, "macro_f1": "present classes only" if macro_present_only
                  else "all classes, absent classes score 0"},
    )
    report.recompute_aggregate()
    if report.failed:
        logger.warning("%s: %d fold(s) failed; report is incomplete", report.variant, len(report.failed))
    return report


def run_ablation_suite(dataset: WindowedDataset, base_cfg: TrainConfig, model_cfg=None,
                       repeats: int = 2, jobs: int = 1, acc_only: bool = False,
                       variants: Sequence[str] = ABLATION_VARIANTS) -> list[FoldReport]:
    """One report per variant; folds and seeds are shared so comparisons are paired."""
    folds = loso_folds(dataset, repeats)
    return [
        run_loso(dataset, dataclasses.replace(base_cfg, variant=v), model_cfg, repeats, jobs,
                 acc_only, folds=folds)
        for v in variants
    ]


def lambda_mmd_sweep(dataset: WindowedDataset, base_cfg: TrainConfig, values: Sequence[float] = SWEEP_VALUES,
                     model_cfg=None, repeats: int = 2, jobs: int = 1, acc_only: bool = False) -> list[FoldReport]:
    folds = loso_folds(dataset, repeats)
    reports = []
    for v in values:
        cfg = dataclasses.replace(base_cfg, weights=dataclasses.replace(base_cfg.weights, lambda_mmd=float(v)))
        reports.append(run_loso(dataset, cfg, model_cfg, repeats, jobs, acc_only, folds=folds,
                                label=f"{base_cfg.variant}[lambda_mmd={v:g}]"))
    return reports


# --- report files ------------------------------------------------------------

def format_mean_std(mean: float, std: float, scale: float = 1.0) -> str:
    return f"{mean * scale:.2f} ± {std * scale:.2f}"


def emit_report(reports: Sequence[FoldReport], out_dir, plots: bool = False) -> dict:
    """Write per-fold CSV, summary JSON/Markdown, quantile CSV and optional box plots."""
    if not reports:
        raise ValueError("no reports to emit")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = [m for m in METRICS if any(m in r.metrics for r in reports)]
    files = {}

    path = out / "per_fold.csv"
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["subject", "repeat", "variant", *names])
        for r in reports:
            for row in r.per_fold:
                wr.writerow([row["subject"], row["repeat"], r.variant,
                             *["" if row.get(m) is None else repr(row[m]) for m in names]])
    files["per_fold"] = path

    summary = {r.variant: {m: r.aggregate[m] for m in names if m in r.aggregate} for r in reports}
    path = out / "summary.json"
    path.write_text(json.dumps({"variants": summary, "pooling": POOLING_NOTE,
                                "incomplete": {r.variant: r.failed for r in reports if r.failed}},
                               indent=2, sort_keys=True))
    files["summary_json"] = path

    path = out / "summary.md"
    lines = ["| variant | " + " | ".join(names) + " |", "|---" * (len(names) + 1) + "|"]
    for r in reports:
        cells = [format_mean_std(r.aggregate[m]["mean"], r.aggregate[m]["std"], 100.0)
                 if m in r.aggregate else "-" for m in names]
        lines.append(f"| {r.variant} | " + " | ".join(cells) + " |")
    path.write_text("\n".join(lines) + "\n\nValues in percent, mean ± std over all folds and repeats.\n")
    files["summary_table"] = path

    path = out / "quantiles.csv"
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["variant", "metric", "min", "q1", "median", "q3", "max"])
        for r in reports:
            for m in names:
                if m in r.aggregate:
                    q = r.aggregate[m]["quantiles"]
                    wr.writerow([r.variant, m, *(repr(q[k]) for k in ("min", "q1", "median", "q3", "max"))])
    files["quantiles"] = path

    if plots:
        files.update(_box_plots(reports, names, out))
    return files


def _box_plots(reports, names, out: Path) -> dict:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    files = {}
    for m in names:
        data = [[row[m] * 100 for row in r.per_fold if row.get(m) is not None] for r in reports]
        fig, ax = plt.subplots(figsize=(1.6 * len(reports) + 2, 4))
        ax.boxplot(data)
        ax.set_xticks(range(1, len(reports) + 1), [r.variant for r in reports], rotation=20)
        ax.set_ylabel(f"{m} (%)")
        fig.tight_layout()
        path = out / f"box_{m}.png"
        fig.savefig(path, dpi=100)
        plt.close(fig)
        files[f"plot_{m}"] = path
    return files

"""Test metrics: group-wise accuracy, macro-F1, worst-k accuracy.

Metric functions take either a classifier or an array of predicted labels, so
they can be checked against brute-force oracles without a model.
"""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .classifier import Classifier
from .data import DataBundle, Dataset

log = logging.getLogger(__name__)

GROUPS = ("many", "medium", "few")


def predictions(clf_or_pred, test: Dataset) -> np.ndarray:
    if isinstance(clf_or_pred, Classifier):
        return clf_or_pred.logits(test.images).argmax(axis=1)
    pred = np.asarray(clf_or_pred, dtype=np.int64)
    if pred.shape != (len(test),):
        raise ValueError(f"expected {len(test)} predictions, got shape {pred.shape}")
    return pred


def per_class_accuracy(pred: np.ndarray, labels: np.ndarray) -> dict[int, float]:
    """Top-1 accuracy of each class present in ``labels``."""
    return {int(k): float(np.mean(pred[labels == k] == k)) for k in np.unique(labels)}


def groupwise_accuracy(clf_or_pred, test: Dataset, group_of_class: dict[int, str]) -> dict[str, float]:
    """Class-balanced accuracy overall and within each frequency group.

    Groups without any test class are left out of the result.
    """
    pca = per_class_accuracy(predictions(clf_or_pred, test), test.labels)
    out = {"all": float(np.mean(list(pca.values())))}
    for g in GROUPS:
        accs = [a for k, a in pca.items() if group_of_class.get(k) == g]
        if accs:
            out[g] = float(np.mean(accs))
    return out


def macro_f1(clf_or_pred, test: Dataset) -> float:
    """Unweighted mean of per-class F1 over the classes present in ``test``."""
    if len(test) == 0:
        raise ValueError("macro F1 needs a non-empty test set")
    pred = predictions(clf_or_pred, test)
    scores = []
    for k in np.unique(test.labels):
        tp = int(np.sum((pred == k) & (test.labels == k)))
        fp = int(np.sum((pred == k) & (test.labels != k)))
        fn = int(np.sum((pred != k) & (test.labels == k)))
        denom = 2 * tp + fp + fn
        scores.append(2.0 * tp / denom if denom else 0.0)
    return float(np.mean(scores))


def worst_k_accuracy(clf_or_pred, test: Dataset, k: int) -> float:
    """Mean accuracy of the ``k`` worst classes; ties go to the lower class index."""
    pca = per_class_accuracy(predictions(clf_or_pred, test), test.labels)
    if not (1 <= k <= len(pca)):
        raise ValueError(f"k must lie in [1, {len(pca)}], got {k}")
    worst = sorted(pca.items(), key=lambda kv: (kv[1], kv[0]))[:k]
    return float(np.mean([a for _, a in worst]))


@dataclass
class MetricsReport:
    accuracy_all: float
    accuracy_many: float | None
    accuracy_medium: float | None
    accuracy_few: float | None
    macro_f1_id: float
    macro_f1_ood: float
    accuracy_ood: float
    worst_k: dict[int, float] = field(default_factory=dict)
    per_class: dict[int, float] = field(default_factory=dict)

    def scalars(self) -> dict[str, float]:
        """Flat metric name -> value map; absent groups are skipped."""
        out = {
            "accuracy_all": self.accuracy_all,
            "accuracy_many": self.accuracy_many,
            "accuracy_medium": self.accuracy_medium,
            "accuracy_few": self.accuracy_few,
            "macro_f1_id": self.macro_f1_id,
            "macro_f1_ood": self.macro_f1_ood,
            "accuracy_ood": self.accuracy_ood,
        }
        out.update({f"worst_{k}": v for k, v in sorted(self.worst_k.items())})
        return {k: float(v) for k, v in out.items() if v is not None}

    def to_dict(self) -> dict:
        return {
            **self.scalars(),
            "worst_k": {str(k): v for k, v in sorted(self.worst_k.items())},
            "per_class": {str(k): v for k, v in sorted(self.per_class.items())},
        }


def evaluate(clf: Classifier, bundle: DataBundle, ks: tuple[int, ...] = (1, 3)) -> MetricsReport:
    pred_id = predictions(clf, bundle.id_test)
    pred_ood = predictions(clf, bundle.ood_test)
    groups = groupwise_accuracy(pred_id, bundle.id_test, bundle.group_of_class)
    report = MetricsReport(
        accuracy_all=groups["all"],
        accuracy_many=groups.get("many"),
        accuracy_medium=groups.get("medium"),
        accuracy_few=groups.get("few"),
        macro_f1_id=macro_f1(pred_id, bundle.id_test),
        macro_f1_ood=macro_f1(pred_ood, bundle.ood_test),
        accuracy_ood=groupwise_accuracy(pred_ood, bundle.ood_test, bundle.group_of_class)["all"],
        worst_k={k: worst_k_accuracy(pred_id, bundle.id_test, k) for k in ks},
        per_class=per_class_accuracy(pred_id, bundle.id_test.labels),
    )
    for name, v in report.scalars().items():
        if not np.isfinite(v):
            raise FloatingPointError(f"metric {name} is not finite")
    return report


def aggregate(rows: list[dict[str, float]]) -> dict[str, tuple[float, float, int]]:
    """Per-metric (mean, sample std, count) over the rows that carry the metric."""
    keys = sorted({k for r in rows for k in r})
    out = {}
    for k in keys:
        vals = np.array([r[k] for r in rows if k in r], dtype=np.float64)
        std = float(vals.std(ddof=1)) if vals.size > 1 else 0.0
        out[k] = (float(vals.mean()), std, int(vals.size))
    return out


# -- ablation battery ------------------------------------------------------------

# Presets echoing the published threshold choices, on the scale of our filter.
THRESHOLD_PRESET_ARMS = (0.25, 0.30)
PRIMARY_METRIC = {"longtail": "accuracy_few", "lowquality": "macro_f1_ood"}
RESULT_COLUMNS = ("arm", "seed", "metric", "value")
SUMMARY_COLUMNS = ("arm", "metric", "mean", "std", "n")


@dataclass(frozen=True)
class Arm:
    """One ablation arm: a strategy plus the single knob it varies."""

    name: str
    strategy: str
    fixed_level: float | None = None
    scale: float | None = None
    h_filter: float | None = None
    text_only: bool = False

    def key(self) -> tuple:
        return (self.strategy, self.fixed_level, self.scale, self.h_filter, self.text_only)


def default_arms(cfg, calibrated: float) -> list[Arm]:
    """Every arm of the battery for ``cfg``; sweeps use the task's default strategy."""
    arms = [Arm("real_only", "real_only"), Arm("text_only", "fixed", 0.0, text_only=True)]
    arms += [Arm(f"fixed_{lam:g}", "fixed", lam) for lam in cfg.grid]
    arms += [Arm(s, s) for s in ("all_levels", "diverse_to_specific", "specific_to_diverse", "random", "adaptive")]
    hs = sorted({round(calibrated + d, 6) for d in cfg.threshold_offsets} | set(THRESHOLD_PRESET_ARMS))
    arms += [Arm(f"threshold_{h:.4f}", cfg.strategy, h_filter=h) for h in hs]
    arms += [Arm(f"scale_{s:g}x", cfg.strategy, scale=s) for s in cfg.scale_sweep]
    return arms


@dataclass
class BatteryResult:
    reports: dict[tuple[str, int], MetricsReport]
    failures: dict[tuple[str, int], str]
    summary: dict[str, dict[str, tuple[float, float, int]]]
    directory: Path

    def values(self, arm: str, metric: str) -> list[float]:
        return [r.scalars()[metric] for (a, _), r in sorted(self.reports.items()) if a == arm]

    def mean(self, arm: str, metric: str) -> float:
        return self.summary[arm][metric][0]


def _text_only_spectrum(ctx, path: Path):
    """Kept λ=0 entries for the text-only arm when the grid lacks level 0."""
    from .pipeline import hard_split, schedule_of
    from .spectrum import filter_spectrum, generate_spectrum, read_spectrum, score_spectrum, write_spectrum

    if path.is_file():
        return read_spectrum(path)
    cfg = ctx.cfg
    bundle = ctx.bundle()
    D_h, _ = hard_split(bundle.train, ctx.hard()["indices"])
    S = generate_spectrum(
        D_h, ctx.noise_model(), (0.0,), cfg.seeds_per_image, cfg.guidance_weight, schedule_of(cfg), cfg.seed,
        sampler=cfg.sampler, workers=ctx.workers, ddim_steps=cfg.ddim_steps,
    )
    S.info["image_shape"] = list(bundle.train.images.shape[1:])
    S = filter_spectrum(score_spectrum(S, ctx.filter_model()), ctx.filter_summary()["h_filter"])
    path.parent.mkdir(parents=True, exist_ok=True)
    write_spectrum(path, S)
    return S


def _run_arm(job) -> tuple[str, object]:
    from .pipeline import ArmInputs, RunContext, train_arm
    from .spectrum import read_spectrum

    cfg, seed_dir, arm = job
    try:
        inputs = ArmInputs.load(RunContext(cfg, Path(seed_dir)))
        if arm.text_only and 0.0 not in cfg.grid:
            inputs.spectrum = read_spectrum(Path(seed_dir) / "battery" / "text_only.dssp")
        clf, _ = train_arm(inputs, arm.strategy, arm.fixed_level, arm.scale, arm.h_filter)
        return "ok", evaluate(clf, inputs.bundle)
    except Exception as exc:  # an arm failure must not stop the battery
        return "error", f"{type(exc).__name__}: {exc}"


def run_ablation_battery(
    cfg,
    arms: list | None = None,
    seeds: list[int] | None = None,
    workers: int | None = None,
    out_dir: str | Path | None = None,
) -> BatteryResult:
    """Run every arm for every seed and write the result tables.

    Per seed, the shared stages (data, generator, pretraining, hard set,
    spectrum, filter) are prepared once under ``<out>/seeds/seed-<n>``; arms
    then differ only in their ablated knob. ``arms`` may name arms of
    ``default_arms`` or pass ``Arm`` objects. Arms with identical settings are
    trained once.
    """
    from .pipeline import RunContext, run_pipeline

    root = Path(out_dir) if out_dir is not None else cfg.run_dir()
    seeds = list(seeds) if seeds is not None else [cfg.seed + i for i in range(cfg.battery_seeds)]
    workers = workers or cfg.workers
    base = cfg.replace(cache_dir=cfg.cache_dir or str(root / "cache"))
    prepared = {}
    for s in seeds:
        scfg = base.replace(seed=s)
        seed_dir = run_pipeline(scfg, root / "seeds" / f"seed-{s}", resume=True, workers=workers, stop_after="filter")
        prepared[s] = (scfg, seed_dir)
    calibrated = RunContext(*prepared[seeds[0]]).filter_summary()["calibrated_threshold"]
    catalog = default_arms(cfg, calibrated)
    by_name = {a.name: a for a in catalog}
    chosen = []
    for a in arms if arms is not None else catalog:
        if isinstance(a, str):
            if a not in by_name:
                raise ValueError(f"unknown arm {a!r}; known arms: {sorted(by_name)}")
            a = by_name[a]
        chosen.append(a)
    if any(a.text_only for a in chosen) and 0.0 not in cfg.grid:
        for s, (scfg, seed_dir) in prepared.items():
            _text_only_spectrum(RunContext(scfg, seed_dir, workers), seed_dir / "battery" / "text_only.dssp")

    jobs, owners = [], {}
    for a in chosen:
        for s in seeds:
            k = (a.key(), s)
            if k not in owners:
                owners[k] = len(jobs)
                scfg, seed_dir = prepared[s]
                jobs.append((scfg, str(seed_dir), a))
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_run_arm, jobs))
    else:
        outcomes = [_run_arm(j) for j in jobs]

    reports, failures = {}, {}
    for a in chosen:
        for s in seeds:
            status, value = outcomes[owners[(a.key(), s)]]
            if status == "ok":
                reports[(a.name, s)] = value
            else:
                failures[(a.name, s)] = value
                log.error("arm %s seed %d failed: %s", a.name, s, value)
    summary = {
        a.name: aggregate([reports[(a.name, s)].scalars() for s in seeds if (a.name, s) in reports])
        for a in chosen
    }
    out = root / "battery"
    write_battery(out, cfg, chosen, seeds, reports, failures, summary)
    return BatteryResult(reports, failures, summary, out)


def best_fixed_arm(cfg, summary: dict) -> str | None:
    metric = PRIMARY_METRIC[cfg.task]
    fixed = [a for a in summary if a.startswith("fixed_") and metric in summary[a]]
    return max(fixed, key=lambda a: (summary[a][metric][0], a)) if fixed else None


def write_battery(out: Path, cfg, arms, seeds, reports, failures, summary) -> None:
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "results.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULT_COLUMNS)
        for a in arms:
            for s in seeds:
                if (a.name, s) in reports:
                    for metric, v in reports[(a.name, s)].scalars().items():
                        w.writerow((a.name, s, metric, repr(v)))
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        for a in arms:
            for metric, (mean, std, n) in summary[a.name].items():
                w.writerow((a.name, metric, repr(mean), repr(std), n))
    manifest = {
        "task": cfg.task,
        "seeds": list(seeds),
        "arms": [{"name": a.name, "strategy": a.strategy, "fixed_level": a.fixed_level, "scale": a.scale,
                  "h_filter": a.h_filter, "text_only": a.text_only} for a in arms],
        "primary_metric": PRIMARY_METRIC[cfg.task],
        "best_fixed": best_fixed_arm(cfg, summary),
        "failures": [{"arm": a, "seed": s, "error": e} for (a, s), e in sorted(failures.items())],
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))

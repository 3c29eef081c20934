"""Stage-wise training over guidance levels: fixed schedules and adaptive selection.

Both loops finetune a pretrained classifier for ``E`` epochs. The first
``E_CL`` epochs mix synthetic spectrum data into the stage dataset; the rest
train on real data only (cool-down).
"""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .classifier import Classifier, TrainConfig, train_epochs, true_class_proba
from .data import Dataset, undersample_nontail
from .rng import derive_seed, make_rng
from .spectrum import LONGTAIL_GRID, Spectrum

log = logging.getLogger(__name__)

STRATEGIES = (
    "diverse_to_specific",
    "specific_to_diverse",
    "random",
    "fixed",
    "all_levels",
    "adaptive",
)
STAGE_TAG = "stage"
PROBE_TAG = "probe"
TAIL_FRACTION = 0.136


@dataclass(frozen=True)
class CurriculumConfig:
    strategy: str = "diverse_to_specific"
    grid: tuple[float, ...] = LONGTAIL_GRID
    train: TrainConfig = field(default_factory=TrainConfig)
    fixed_level: float | None = None
    probe_fraction: float = 0.1
    validation_per_lambda: int = 16
    # Long-tail protocol: undersample non-tail reals at every stage. None disables.
    tail_fraction: float | None = None
    rollback_probe: bool = False

    def __post_init__(self):
        object.__setattr__(self, "grid", tuple(sorted(float(v) for v in self.grid)))
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if not self.grid:
            raise ValueError("grid must not be empty")
        if self.strategy == "fixed":
            if self.fixed_level is None or not any(np.float32(self.fixed_level) == np.float32(v) for v in self.grid):
                raise ValueError(f"fixed strategy needs fixed_level in the grid {self.grid}")
        if not (0.0 <= self.probe_fraction <= 1.0):
            raise ValueError("probe_fraction must lie in [0, 1]")
        if self.validation_per_lambda < 1:
            raise ValueError("validation_per_lambda must be positive")

    @property
    def E(self) -> int:
        return self.train.epochs

    @property
    def E_CL(self) -> int:
        return self.train.curriculum_epochs

    @property
    def seed(self) -> int:
        return self.train.seed


@dataclass
class ProgressReport:
    epoch: int
    p_bef: dict[float, float]
    p_aft: dict[float, float]
    chosen: float
    tie_broken: bool

    def deltas(self) -> dict[float, float]:
        return {lam: self.p_aft[lam] - self.p_bef[lam] for lam in self.p_bef}

    def to_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "p_bef": {repr(k): v for k, v in self.p_bef.items()},
            "p_aft": {repr(k): v for k, v in self.p_aft.items()},
            "chosen": self.chosen,
            "tie_broken": self.tie_broken,
        }


# -- schedules ---------------------------------------------------------------


def guidance_schedule_linear(grid, E_CL: int, strategy: str = "diverse_to_specific", seed: int = 0) -> list[float]:
    """Equal-duration schedule over the grid.

    Levels ascend for diverse_to_specific, each held ``E_CL // |grid|`` epochs
    with leftover epochs going to the earliest levels. specific_to_diverse is
    the reversed list and random a seeded permutation of it.
    """
    levels = sorted(float(v) for v in grid)
    if E_CL < len(levels):
        raise ValueError(f"need E_CL >= |grid| ({len(levels)}), got {E_CL}")
    reps, rem = divmod(E_CL, len(levels))
    out: list[float] = []
    for i, lam in enumerate(levels):
        out += [lam] * (reps + (1 if i < rem else 0))
    if strategy == "diverse_to_specific":
        return out
    if strategy == "specific_to_diverse":
        return out[::-1]
    if strategy == "random":
        perm = make_rng(seed, "guidance-schedule").permutation(len(out))
        return [out[i] for i in perm]
    raise ValueError(f"strategy {strategy!r} has no linear schedule")


def schedule_for(cfg: CurriculumConfig) -> list[float | None]:
    """Per-epoch level for non-adaptive strategies; None means all levels at once."""
    if cfg.E_CL == 0:
        return []
    if cfg.strategy == "fixed":
        return [float(cfg.fixed_level)] * cfg.E_CL
    if cfg.strategy == "all_levels":
        return [None] * cfg.E_CL
    if cfg.strategy == "adaptive":
        raise ValueError("adaptive strategy has no predefined schedule")
    return guidance_schedule_linear(cfg.grid, cfg.E_CL, cfg.strategy, cfg.seed)


# -- stage datasets ----------------------------------------------------------


def synthetic_at(S: Spectrum, lam: float | None) -> Dataset:
    return S.to_dataset(kept_only=True, lam=lam)


def stage_dataset_nonadaptive(
    lam_e: float | None,
    S: Spectrum,
    D_nh: Dataset,
    D_h: Dataset,
    tail_fraction: float | None = None,
    seed: int = 0,
    epoch: int = 0,
) -> Dataset:
    """Kept entries at ``lam_e`` plus non-hard and hard reals.

    With ``tail_fraction`` set, the non-hard reals are undersampled so that
    synthetic plus hard samples make up that fraction of the stage.
    """
    syn = synthetic_at(S, lam_e)
    if len(syn) == 0:
        warnings.warn(f"no kept synthetic samples at level {lam_e}; stage uses reals only", RuntimeWarning, stacklevel=2)
    if tail_fraction is None:
        return Dataset.concat([syn, D_nh, D_h]).sorted()
    pool = Dataset.concat([syn, D_h, D_nh])
    is_tail = np.zeros(len(pool), dtype=bool)
    is_tail[: len(syn) + len(D_h)] = True
    out = undersample_nontail(pool, is_tail, tail_fraction, derive_seed(seed, "stage-undersample", epoch))
    return out.sorted()


def stage_dataset_adaptive(lam_e: float, S: Spectrum, D_nh: Dataset) -> Dataset:
    return Dataset.concat([synthetic_at(S, lam_e), D_nh]).sorted()


def _record(epoch: int, phase: str, strategy: str, lam, data: Dataset, rec) -> dict:
    n_syn = int((data.origin == 1).sum())
    return {
        "epoch": epoch,
        "phase": phase,
        "strategy": strategy,
        "lam": lam,
        "size": len(data),
        "n_synthetic": n_syn,
        "n_real": len(data) - n_syn,
        "loss": rec.loss,
        "accuracy": rec.accuracy,
        "lr": rec.lr,
    }


def train_real_only(clf: Classifier, train: TrainConfig, D_all: Dataset) -> tuple[Classifier, list[dict]]:
    """Baseline finetuning on real data for all ``E`` epochs."""
    return _cooldown(clf, train, D_all.sorted(), 0, "real_only")


def _cooldown(clf: Classifier, train: TrainConfig, data: Dataset, start: int, strategy: str):
    logs = []
    n = train.epochs - start
    clf, recs = train_epochs(clf, data, train, n, start_epoch=start, tag=STAGE_TAG)
    for r in recs:
        logs.append(_record(r.epoch, "cooldown", strategy, None, data, r))
    return clf, logs


def run_nonadaptive(
    clf: Classifier, cfg: CurriculumConfig, S: Spectrum, D_nh: Dataset, D_h: Dataset
) -> tuple[Classifier, list[dict]]:
    """Fixed guidance schedule for ``E_CL`` epochs, then real-data epochs."""
    schedule = schedule_for(cfg)
    logs: list[dict] = []
    for e, lam in enumerate(schedule):
        D_e = stage_dataset_nonadaptive(lam, S, D_nh, D_h, cfg.tail_fraction, cfg.seed, e)
        clf, recs = train_epochs(clf, D_e, cfg.train, 1, start_epoch=e, tag=STAGE_TAG)
        logs.append(_record(e, "curriculum", cfg.strategy, lam, D_e, recs[0]))
    clf, cool = _cooldown(clf, cfg.train, Dataset.concat([D_nh, D_h]).sorted(), len(schedule), cfg.strategy)
    return clf, logs + cool


# -- adaptive ------------------------------------------------------------------


def measure_confidence(clf: Classifier, V_lam: Dataset) -> float:
    """Mean ground-truth class probability over a validation subset."""
    if len(V_lam) == 0:
        raise ValueError("cannot measure confidence on an empty subset")
    return float(np.mean(true_class_proba(clf, V_lam)))


def build_validation_set(S: Spectrum, per_lambda: int, seed: int) -> tuple[dict[float, Dataset], Spectrum]:
    """Hold out ``per_lambda`` kept entries per level; returns (V, spectrum without them).

    Every level gets the same count, capped by the scarcest level.
    """
    levels = S.levels()
    counts = [int((S.kept & (S.lam == np.float32(l))).sum()) for l in levels]
    n = min([per_lambda, *counts])
    if n < per_lambda:
        warnings.warn(f"validation subsets shrunk to {n} per level", RuntimeWarning, stacklevel=2)
    if n == 0:
        raise ValueError("some guidance level has no kept entries to validate on")
    held = np.zeros(len(S), dtype=bool)
    for i, lam in enumerate(levels):
        idx = np.flatnonzero(S.kept & (S.lam == np.float32(lam)))
        pick = make_rng(seed, "validation", i).choice(idx, size=n, replace=False)
        held[pick] = True
    V = {lam: S.subset(np.flatnonzero(held & (S.lam == np.float32(lam)))).to_dataset(kept_only=True) for lam in levels}
    rest = S.subset(np.flatnonzero(~held))
    return V, rest


def probe_and_select(
    clf: Classifier,
    V: dict[float, Dataset],
    D_all: Dataset,
    probe_size: int,
    train: TrainConfig,
    epoch: int = 0,
    rollback: bool = False,
) -> tuple[Classifier, ProgressReport]:
    """Train one epoch on a random real subset and pick the level that gained most.

    Ties go to the smallest level. The probe update is kept unless ``rollback``.
    """
    if probe_size > len(D_all):
        raise ValueError(f"probe size {probe_size} exceeds |D_all| = {len(D_all)}")
    levels = sorted(V)
    p_bef = {lam: measure_confidence(clf, V[lam]) for lam in levels}
    if probe_size == 0:
        probed = clf
    else:
        idx = np.sort(make_rng(train.seed, "probe-set", epoch).choice(len(D_all), size=probe_size, replace=False))
        probed, _ = train_epochs(clf, D_all.subset(idx), train, 1, start_epoch=epoch, tag=PROBE_TAG)
    p_aft = {lam: measure_confidence(probed, V[lam]) for lam in levels}
    chosen, tie = select_level(p_bef, p_aft)
    report = ProgressReport(epoch, p_bef, p_aft, chosen, tie)
    return (clf if rollback else probed), report


def select_level(p_bef: dict[float, float], p_aft: dict[float, float]) -> tuple[float, bool]:
    """Level with the largest confidence gain and whether a tie was broken (toward the smallest level)."""
    levels = sorted(p_bef)
    deltas = [p_aft[lam] - p_bef[lam] for lam in levels]
    best = max(deltas)
    winners = [lam for lam, d in zip(levels, deltas) if d == best]
    return winners[0], len(winners) > 1


def run_adaptive(
    clf: Classifier, cfg: CurriculumConfig, S: Spectrum, D_nh: Dataset, D_all: Dataset, V: dict[float, Dataset]
) -> tuple[Classifier, list[dict]]:
    """Per-epoch level selection by validation progress, then real-data epochs."""
    held = set(int(i) for v in V.values() for i in v.sample_ids)
    if held & set(int(i) for i in D_all.sample_ids) or held & set(int(i) for i in synthetic_at(S, None).sample_ids):
        raise ValueError("validation set overlaps the training data")
    probe_size = int(math.floor(cfg.probe_fraction * len(D_all) + 0.5))
    logs: list[dict] = []
    for e in range(cfg.E_CL):
        clf, report = probe_and_select(clf, V, D_all, probe_size, cfg.train, e, cfg.rollback_probe)
        D_e = stage_dataset_adaptive(report.chosen, S, D_nh)
        clf, recs = train_epochs(clf, D_e, cfg.train, 1, start_epoch=e, tag=STAGE_TAG)
        row = _record(e, "curriculum", "adaptive", report.chosen, D_e, recs[0])
        row["progress"] = report.to_dict()
        logs.append(row)
    clf, cool = _cooldown(clf, cfg.train, D_all.sorted(), cfg.E_CL, "adaptive")
    return clf, logs + cool


def run_curriculum(
    clf: Classifier,
    cfg: CurriculumConfig,
    S: Spectrum,
    D_nh: Dataset,
    D_h: Dataset,
    V: dict[float, Dataset] | None = None,
) -> tuple[Classifier, list[dict]]:
    """Dispatch on ``cfg.strategy``; ``V`` is required for the adaptive loop."""
    if cfg.strategy == "adaptive":
        if V is None:
            raise ValueError("adaptive strategy needs a validation set")
        return run_adaptive(clf, cfg, S, D_nh, Dataset.concat([D_nh, D_h]), V)
    return run_nonadaptive(clf, cfg, S, D_nh, D_h)


# -- synthetic budget ----------------------------------------------------------


def limit_synthetic(S: Spectrum, n_hard: int, scale: float, seed: int) -> Spectrum:
    """Keep at most ``round(scale * n_hard)`` kept entries per level.

    ``scale`` counts the synthetic images a single stage sees relative to the
    number of hard reals. Unselected kept entries are marked discarded.
    """
    if scale < 0:
        raise ValueError("scale must be non-negative")
    levels = S.levels()
    out = S.subset(np.arange(len(S)))
    if not levels:
        return out
    quota = int(math.floor(scale * n_hard + 0.5))
    kept = np.zeros(len(S), dtype=bool)
    for i, lam in enumerate(levels):
        idx = np.flatnonzero(S.kept & (S.lam == np.float32(lam)))
        if quota >= idx.size:
            if quota > idx.size:
                log.warning("level %.3g has %d kept entries, fewer than the quota %d", lam, idx.size, quota)
            kept[idx] = True
        else:
            kept[np.sort(make_rng(seed, "synthetic-quota", i).choice(idx, size=quota, replace=False))] = True
    out.kept = kept
    return out


def write_stage_log(path: str | Path, rows: list[dict]) -> None:
    with open(path, "w") as fh:
        for r in rows:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def read_stage_log(path: str | Path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]

"""Staged experiment runner with a content-hash manifest.

Each stage writes its artifacts to ``<run>/<stage>/`` and records the sha256 of
every output file in ``<run>/manifest.json`` together with a fingerprint of the
config keys it reads and the output hashes of the stages it depends on. A
stage is reusable when its fingerprint still matches and its files are intact.

The generator and the fidelity filter do not depend on the experiment seed, so
when a cache directory is configured they are trained once and copied in.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import shutil
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .classifier import Classifier, TrainConfig, identify_hard, identify_tail, train_epochs, true_class_proba
from .config import ExperimentConfig
from .curriculum import (
    CurriculumConfig,
    build_validation_set,
    limit_synthetic,
    run_curriculum,
    train_real_only,
    write_stage_log,
)
from .data import (
    DataBundle,
    Dataset,
    filter_backgrounds,
    make_longtail_dataset,
    make_lowquality_dataset,
    make_prototype_corpus,
    read_bundle,
    write_bundle,
)
from .diffusion import NoiseModel, train_noise_model
from .eval import MetricsReport, evaluate
from .rng import derive_seed
from .schedule import VarianceSchedule, make_linear_schedule
from .spectrum import (
    FilterModel,
    Spectrum,
    calibrate_threshold,
    filter_spectrum,
    generate_spectrum,
    read_spectrum,
    score_spectrum,
    train_filter_model,
    write_spectrum,
)

log = logging.getLogger(__name__)

STAGES = (
    "gen-data",
    "train-diffusion",
    "pretrain-classifier",
    "identify-hard",
    "gen-spectrum",
    "filter",
    "curriculum-train",
    "evaluate",
)

DEPENDS = {
    "gen-data": (),
    "train-diffusion": (),
    "pretrain-classifier": ("gen-data",),
    "identify-hard": ("gen-data", "pretrain-classifier"),
    "gen-spectrum": ("gen-data", "identify-hard", "train-diffusion"),
    "filter": ("gen-spectrum",),
    "curriculum-train": ("gen-data", "pretrain-classifier", "identify-hard", "filter"),
    "evaluate": ("gen-data", "curriculum-train"),
}

_WORLD = ("num_classes", "image_size", "world_seed")
_SCHEDULE = ("diffusion_steps", "beta_min", "beta_max")
_CLASSIFIER = ("batch_size", "learn_rate", "momentum", "weight_decay", "seed")
FILTER_MODEL_KEYS = _WORLD + ("filter_per_class", "filter_epochs", "diffusion_seed")

# Config keys each stage reads. Keys absent from every list (workers, out_dir,
# cache_dir, battery settings) never change an artifact.
STAGE_KEYS = {
    "gen-data": (
        "task", "num_classes", "head_count", "imbalance_ratio", "image_size", "test_per_class",
        "corruption_fraction", "world_seed", "data_seed",
    ),
    "train-diffusion": _WORLD + _SCHEDULE + (
        "corpus_per_class", "diffusion_epochs", "diffusion_learn_rate", "diffusion_batch_size",
        "diffusion_width", "diffusion_depth", "cond_dropout", "diffusion_seed",
    ),
    "pretrain-classifier": ("pretrain_epochs",) + _CLASSIFIER,
    "identify-hard": ("hard_rule", "h_hard"),
    "gen-spectrum": _SCHEDULE + ("grid", "seeds_per_image", "guidance_weight", "sampler", "ddim_steps", "seed"),
    "filter": FILTER_MODEL_KEYS + ("calibration_per_class", "h_filter"),
    "curriculum-train": (
        "strategy", "grid", "fixed_level", "epochs", "curriculum_epochs", "synthetic_scale", "tail_fraction",
        "probe_fraction", "validation_per_lambda", "rollback_probe",
    ) + _CLASSIFIER,
    "evaluate": (),
}

# Fields of each curriculum-train stage log record.
STAGE_LOG_FIELDS = ("epoch", "phase", "strategy", "lam", "size", "n_synthetic", "n_real", "loss", "accuracy", "lr")

MANIFEST = "manifest.json"


class StageFailure(RuntimeError):
    def __init__(self, stage: str, cause: str):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


def config_digest(cfg: ExperimentConfig) -> str:
    d = cfg.to_dict()
    for k in ("workers", "out_dir", "cache_dir"):
        d.pop(k)
    return _digest(d)


def schedule_of(cfg: ExperimentConfig) -> VarianceSchedule:
    return make_linear_schedule(cfg.diffusion_steps, cfg.beta_min, cfg.beta_max)


def train_config(cfg: ExperimentConfig, epochs: int | None = None, curriculum_epochs: int | None = None) -> TrainConfig:
    return TrainConfig(
        epochs=cfg.epochs if epochs is None else epochs,
        curriculum_epochs=cfg.curriculum_epochs if curriculum_epochs is None else curriculum_epochs,
        batch_size=cfg.batch_size, learn_rate=cfg.learn_rate, momentum=cfg.momentum,
        weight_decay=cfg.weight_decay, seed=cfg.seed,
    )


# -- run context and artifact loaders ------------------------------------------------


@dataclass
class RunContext:
    cfg: ExperimentConfig
    run_dir: Path
    workers: int = 1

    def stage_dir(self, stage: str) -> Path:
        return self.run_dir / stage

    @property
    def cache(self) -> Path | None:
        return Path(self.cfg.cache_dir) if self.cfg.cache_dir else None

    def bundle(self) -> DataBundle:
        return read_bundle(self.stage_dir("gen-data"))

    def noise_model(self) -> NoiseModel:
        return NoiseModel.load(self.stage_dir("train-diffusion") / "noise_model.dsnm")

    def pretrained(self) -> Classifier:
        return Classifier.load(self.stage_dir("pretrain-classifier") / "classifier.dscf")

    def hard(self) -> dict:
        return json.loads((self.stage_dir("identify-hard") / "hard.json").read_text())

    def raw_spectrum(self) -> Spectrum:
        return read_spectrum(self.stage_dir("gen-spectrum") / "spectrum.dssp")

    def filter_model(self) -> FilterModel:
        d = self.stage_dir("filter")
        refs = json.loads((d / "filter_model.json").read_text())["references"]
        return FilterModel(Classifier.load(d / "filter_model.dscf"), np.asarray(refs))

    def filter_summary(self) -> dict:
        return json.loads((self.stage_dir("filter") / "summary.json").read_text())

    def spectrum(self) -> Spectrum:
        return read_spectrum(self.stage_dir("filter") / "spectrum.dssp")

    def classifier(self) -> Classifier:
        return Classifier.load(self.stage_dir("curriculum-train") / "classifier.dscf")


def _cached_build(ctx: RunContext, kind: str, keys: tuple[str, ...], build, out: Path) -> None:
    """Run ``build(dir)`` into ``out``, going through the shared cache when one is set."""
    if ctx.cache is None:
        build(out)
        return
    cfg = ctx.cfg.to_dict()
    entry = ctx.cache / f"{kind}-{_digest({'kind': kind, 'code': __version__, 'config': {k: cfg[k] for k in keys}})[:24]}"
    if not entry.is_dir():
        ctx.cache.mkdir(parents=True, exist_ok=True)
        tmp = ctx.cache / f".{entry.name}.{os.getpid()}.tmp"
        shutil.rmtree(tmp, ignore_errors=True)
        tmp.mkdir()
        build(tmp)
        try:
            tmp.rename(entry)
        except OSError:
            # another process filled the entry first; its content is identical
            shutil.rmtree(tmp, ignore_errors=True)
    else:
        log.info("reusing cached %s from %s", kind, entry)
    for f in sorted(entry.iterdir()):
        shutil.copyfile(f, out / f.name)


# -- stages ------------------------------------------------------------------


def _gen_data(ctx: RunContext, out: Path) -> None:
    spec = ctx.cfg.dataset_spec()
    bundle = make_longtail_dataset(spec) if ctx.cfg.task == "longtail" else make_lowquality_dataset(spec)
    write_bundle(out, bundle)


def _train_diffusion(ctx: RunContext, out: Path) -> None:
    cfg = ctx.cfg

    def build(d: Path) -> None:
        corpus = make_prototype_corpus(cfg.dataset_spec(), cfg.corpus_per_class)
        model, train_log = train_noise_model(
            corpus.images, corpus.labels, schedule_of(cfg), cfg.num_classes,
            cond_dropout_p=cfg.cond_dropout, epochs=cfg.diffusion_epochs, learn_rate=cfg.diffusion_learn_rate,
            seed=cfg.diffusion_seed, batch_size=cfg.diffusion_batch_size,
            hidden=(cfg.diffusion_width,) * cfg.diffusion_depth,
        )
        model.save(d / "noise_model.dsnm")
        (d / "train_log.json").write_text(json.dumps({"epoch_loss": train_log.epoch_loss}, indent=1))

    _cached_build(ctx, "train-diffusion", STAGE_KEYS["train-diffusion"], build, out)


def _pretrain(ctx: RunContext, out: Path) -> None:
    cfg = ctx.cfg
    bundle = ctx.bundle()
    clf = Classifier.init(cfg.num_classes, bundle.train.images.shape[1:], seed=derive_seed(cfg.seed, "pretrain"))
    records = []
    if cfg.pretrain_epochs:
        tc = train_config(cfg, cfg.pretrain_epochs, 0)
        clf, records = train_epochs(clf, bundle.train, tc, cfg.pretrain_epochs, tag="pretrain")
    clf.save(out / "classifier.dscf")
    rows = [{"epoch": r.epoch, "loss": r.loss, "accuracy": r.accuracy, "lr": r.lr} for r in records]
    (out / "log.json").write_text(json.dumps(rows, indent=1))


def _identify_hard(ctx: RunContext, out: Path) -> None:
    cfg = ctx.cfg
    bundle = ctx.bundle()
    pre = ctx.pretrained()
    p_true = true_class_proba(pre, bundle.train)
    if cfg.hard_rule == "tail":
        idx = identify_tail(bundle.train, bundle.group_of_class)
    else:
        idx = identify_hard(pre, bundle.train, cfg.h_hard)
    record = {
        "rule": cfg.hard_rule,
        "h_hard": cfg.h_hard,
        "indices": [int(i) for i in idx],
        "sample_ids": [int(bundle.train.sample_ids[i]) for i in idx],
        "p_true": [float(p) for p in p_true],
    }
    (out / "hard.json").write_text(json.dumps(record))


def hard_split(train: Dataset, indices) -> tuple[Dataset, Dataset]:
    """(D_h, D_nh) for the given hard indices."""
    idx = np.asarray(indices, dtype=np.int64)
    is_hard = np.zeros(len(train), dtype=bool)
    is_hard[idx] = True
    return train.subset(idx), train.mask(~is_hard)


def _gen_spectrum(ctx: RunContext, out: Path) -> None:
    cfg = ctx.cfg
    bundle = ctx.bundle()
    D_h, _ = hard_split(bundle.train, ctx.hard()["indices"])
    S = generate_spectrum(
        D_h, ctx.noise_model(), cfg.grid, cfg.seeds_per_image, cfg.guidance_weight, schedule_of(cfg),
        cfg.seed, sampler=cfg.sampler, workers=ctx.workers, ddim_steps=cfg.ddim_steps,
    )
    S.info["image_shape"] = list(bundle.train.images.shape[1:])
    write_spectrum(out / "spectrum.dssp", S)


def train_shared_filter(cfg: ExperimentConfig) -> FilterModel:
    spec = cfg.dataset_spec()
    corpus = make_prototype_corpus(spec, cfg.filter_per_class, backgrounds=filter_backgrounds(spec))
    return train_filter_model(
        corpus, cfg.num_classes,
        TrainConfig(epochs=cfg.filter_epochs, curriculum_epochs=0, learn_rate=3e-2, seed=cfg.diffusion_seed),
        seed=cfg.diffusion_seed,
    )


def calibration_set(cfg: ExperimentConfig) -> Dataset:
    spec = cfg.dataset_spec()
    return make_prototype_corpus(
        spec, cfg.calibration_per_class, split="heldout", seed=derive_seed(cfg.diffusion_seed, "calibration"),
        backgrounds=filter_backgrounds(spec),
    )


def level_summary(S: Spectrum) -> list[dict]:
    rows = []
    for lam in S.levels():
        m = S.lam == np.float32(lam)
        fid = S.fidelity[m].astype(np.float64)
        rows.append({
            "lam": lam,
            "count": int(m.sum()),
            "kept": int((m & S.kept).sum()),
            "mean_fidelity": float(fid.mean()),
            "std_fidelity": float(fid.std()),
        })
    return rows


def _filter(ctx: RunContext, out: Path) -> None:
    cfg = ctx.cfg

    def build(d: Path) -> None:
        F = train_shared_filter(cfg)
        F.clf.save(d / "filter_model.dscf")
        (d / "filter_model.json").write_text(json.dumps({"references": F.references.tolist()}))

    _cached_build(ctx, "filter-model", FILTER_MODEL_KEYS, build, out)
    refs = json.loads((out / "filter_model.json").read_text())["references"]
    F = FilterModel(Classifier.load(out / "filter_model.dscf"), np.asarray(refs))
    calibrated = calibrate_threshold(F, calibration_set(cfg))
    h = calibrated if cfg.h_filter == "calibrated" else float(cfg.h_filter)
    S = filter_spectrum(score_spectrum(ctx.raw_spectrum(), F), h)
    write_spectrum(out / "spectrum.dssp", S)
    summary = {"h_filter": h, "calibrated_threshold": calibrated, "levels": level_summary(S)}
    (out / "summary.json").write_text(json.dumps(summary, indent=1))


@dataclass
class ArmInputs:
    """Everything a curriculum run consumes, loaded from a prepared run directory."""

    cfg: ExperimentConfig
    bundle: DataBundle
    pretrained: Classifier
    hard_indices: list[int]
    spectrum: Spectrum

    @classmethod
    def load(cls, ctx: RunContext) -> "ArmInputs":
        return cls(ctx.cfg, ctx.bundle(), ctx.pretrained(), ctx.hard()["indices"], ctx.spectrum())


def train_arm(
    inputs: ArmInputs,
    strategy: str,
    fixed_level: float | None = None,
    scale: float | None = None,
    h_filter: float | None = None,
) -> tuple[Classifier, list[dict]]:
    """Finetune the pretrained classifier under one strategy.

    ``real_only`` or a zero synthetic scale trains on the real split alone. For
    everything else the validation subsets are held out of the spectrum first,
    whatever the strategy, so all strategies draw from the same synthetic pool.
    """
    cfg = inputs.cfg
    scale = cfg.synthetic_scale if scale is None else scale
    train = train_config(cfg)
    clf = inputs.pretrained.copy()
    clf.velocity = None
    if strategy == "real_only" or scale == 0:
        return train_real_only(clf, train, inputs.bundle.train)
    S = inputs.spectrum if h_filter is None else filter_spectrum(inputs.spectrum, h_filter)
    D_h, D_nh = hard_split(inputs.bundle.train, inputs.hard_indices)
    levels = tuple(S.levels())
    if not levels:
        raise ValueError("the spectrum is empty; there are no hard samples to interpolate")
    V = None
    has_kept = all((S.kept & (S.lam == np.float32(l))).any() for l in levels)
    if has_kept or strategy == "adaptive":
        V, S = build_validation_set(S, cfg.validation_per_lambda, cfg.seed)
    else:
        log.warning("a guidance level has no kept entries; no validation hold-out for %s", strategy)
    S = limit_synthetic(S, len(D_h), scale, cfg.seed)
    cc = CurriculumConfig(
        strategy=strategy, grid=levels, train=train, fixed_level=fixed_level,
        probe_fraction=cfg.probe_fraction, validation_per_lambda=cfg.validation_per_lambda,
        tail_fraction=cfg.tail_fraction or None, rollback_probe=cfg.rollback_probe,
    )
    return run_curriculum(clf, cc, S, D_nh, D_h, V)


def _curriculum(ctx: RunContext, out: Path) -> None:
    cfg = ctx.cfg
    clf, logs = train_arm(ArmInputs.load(ctx), cfg.strategy, cfg.fixed_level)
    clf.save(out / "classifier.dscf")
    write_stage_log(out / "stages.jsonl", logs)


def metrics_record(cfg: ExperimentConfig, report: MetricsReport) -> dict:
    return {"task": cfg.task, "seed": cfg.seed, "strategy": cfg.strategy, "metrics": report.to_dict()}


def _evaluate(ctx: RunContext, out: Path) -> None:
    report = evaluate(ctx.classifier(), ctx.bundle())
    (out / "metrics.json").write_text(json.dumps(metrics_record(ctx.cfg, report), indent=1))


RUNNERS = {
    "gen-data": _gen_data,
    "train-diffusion": _train_diffusion,
    "pretrain-classifier": _pretrain,
    "identify-hard": _identify_hard,
    "gen-spectrum": _gen_spectrum,
    "filter": _filter,
    "curriculum-train": _curriculum,
    "evaluate": _evaluate,
}


# -- manifest ------------------------------------------------------------------


def read_manifest(run_dir: str | Path) -> dict:
    path = Path(run_dir) / MANIFEST
    if not path.is_file():
        return {"stages": {}}
    return json.loads(path.read_text())


def _write_manifest(run_dir: Path, manifest: dict) -> None:
    tmp = run_dir / f".{MANIFEST}.tmp"
    tmp.write_text(json.dumps(manifest, sort_keys=True, indent=1))
    tmp.replace(run_dir / MANIFEST)


def stage_fingerprint(stage: str, cfg: ExperimentConfig, manifest: dict) -> str:
    d = cfg.to_dict()
    upstream = {dep: manifest["stages"].get(dep, {}).get("outputs") for dep in DEPENDS[stage]}
    return _digest({
        "stage": stage, "code": __version__, "config": {k: d[k] for k in STAGE_KEYS[stage]}, "upstream": upstream,
    })


def stage_valid(stage: str, cfg: ExperimentConfig, run_dir: Path, manifest: dict, _memo=None) -> bool:
    """True when ``stage`` and everything it depends on can be reused as is."""
    memo = {} if _memo is None else _memo
    if stage in memo:
        return memo[stage]
    entry = manifest["stages"].get(stage)
    ok = (
        entry is not None
        and all(stage_valid(dep, cfg, run_dir, manifest, memo) for dep in DEPENDS[stage])
        and entry.get("fingerprint") == stage_fingerprint(stage, cfg, manifest)
        and all((run_dir / rel).is_file() and sha256_file(run_dir / rel) == h for rel, h in entry["outputs"].items())
    )
    memo[stage] = ok
    return ok


def _stage_outputs(run_dir: Path, stage: str) -> dict[str, str]:
    d = run_dir / stage
    return {
        p.relative_to(run_dir).as_posix(): sha256_file(p)
        for p in sorted(d.rglob("*")) if p.is_file()
    }


def run_stage(ctx: RunContext, stage: str, manifest: dict) -> None:
    run_dir = ctx.run_dir
    for dep in DEPENDS[stage]:
        if not stage_valid(dep, ctx.cfg, run_dir, manifest):
            raise StageFailure(stage, f"prerequisite stage {dep!r} has no valid artifacts in {run_dir}")
    tmp = run_dir / f".{stage}.tmp"
    shutil.rmtree(tmp, ignore_errors=True)
    tmp.mkdir(parents=True)
    log.info("running stage %s", stage)
    try:
        RUNNERS[stage](ctx, tmp)
    except StageFailure:
        raise
    except Exception as exc:
        shutil.rmtree(tmp, ignore_errors=True)
        raise StageFailure(stage, f"{type(exc).__name__}: {exc}") from exc
    final = ctx.stage_dir(stage)
    shutil.rmtree(final, ignore_errors=True)
    tmp.rename(final)
    manifest["stages"][stage] = {
        "fingerprint": stage_fingerprint(stage, ctx.cfg, manifest),
        "outputs": _stage_outputs(run_dir, stage),
    }
    _write_manifest(run_dir, manifest)


def run_pipeline(
    cfg: ExperimentConfig,
    run_dir: str | Path | None = None,
    resume: bool = False,
    workers: int | None = None,
    stages: tuple[str, ...] | None = None,
    stop_after: str | None = None,
) -> Path:
    """Run the selected stages in order and return the run directory.

    With ``resume`` a stage whose artifacts are still valid is skipped. Stages
    outside the selection are never run; a selected stage whose prerequisites
    are missing fails.
    """
    if stages is None:
        end = STAGES.index(stop_after) + 1 if stop_after else len(STAGES)
        stages = STAGES[:end]
    unknown = [s for s in stages if s not in STAGES]
    if unknown:
        raise ValueError(f"unknown stages {unknown}")
    if cfg.strategy is None:
        raise ValueError("config is not resolved; build it with parse_config or ExperimentConfig.preset")
    run_dir = Path(run_dir) if run_dir is not None else cfg.run_dir()
    run_dir.mkdir(parents=True, exist_ok=True)
    ctx = RunContext(cfg, run_dir, workers or cfg.workers)
    manifest = read_manifest(run_dir)
    manifest.update({"code_version": __version__, "config_digest": config_digest(cfg), "task": cfg.task, "seed": cfg.seed})
    (run_dir / "config.yaml").write_text(cfg.to_yaml())
    for stage in STAGES:
        if stage not in stages:
            continue
        if resume and stage_valid(stage, cfg, run_dir, manifest):
            log.info("stage %s is up to date", stage)
            continue
        run_stage(ctx, stage, manifest)
    _write_manifest(run_dir, manifest)
    return run_dir


def manifest_hashes(run_dir: str | Path) -> dict[str, dict[str, str]]:
    """Stage name -> {file: sha256}, the content identity of a run."""
    return {k: v["outputs"] for k, v in read_manifest(run_dir)["stages"].items()}


"""Acceptance criteria, one test each.

The expensive inputs (generator, filter, prepared runs, ablation batteries) are
built once per session. Set DIFFCURRICULUM_TEST_CACHE to a directory to keep
the trained generator and filter between sessions.
"""

import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

from diffcurriculum.classifier import Classifier
from diffcurriculum.config import ExperimentConfig
from diffcurriculum.data import (
    DatasetSpec,
    make_longtail_dataset,
    undersample_nontail,
)
from diffcurriculum.classifier import identify_tail
from diffcurriculum.curriculum import TAIL_FRACTION
from diffcurriculum.diffusion import (
    UNCONDITIONAL,
    GenerationConfig,
    NoiseModel,
    analytic_gaussian_model,
    cfg_noise,
    generate_guided,
    generate_guided_batch,
)
from diffcurriculum.eval import run_ablation_battery
from diffcurriculum.pipeline import RunContext, manifest_hashes, run_pipeline, schedule_of
from diffcurriculum.schedule import make_linear_schedule, start_step
from diffcurriculum.spectrum import (
    LONGTAIL_GRID,
    fidelity_scores,
    filter_spectrum,
    generate_spectrum,
    score_spectrum,
)

from conftest import TINY_CONFIG, record_criterion

pytestmark = pytest.mark.slow


@pytest.fixture(scope="session")
def cache_dir(tmp_path_factory):
    env = os.environ.get("DIFFCURRICULUM_TEST_CACHE")
    if env:
        Path(env).mkdir(parents=True, exist_ok=True)
        return Path(env)
    return tmp_path_factory.mktemp("acceptance-cache")


@pytest.fixture(scope="session")
def longtail_ctx(cache_dir, tmp_path_factory):
    """Default longtail preset, prepared up to the filter stage."""
    cfg = ExperimentConfig.preset("longtail", 0, cache_dir=str(cache_dir))
    run = run_pipeline(cfg, tmp_path_factory.mktemp("longtail") / "seed-0", stop_after="filter")
    return RunContext(cfg, run)


@pytest.fixture(scope="session")
def longtail_battery(cache_dir, tmp_path_factory):
    cfg = ExperimentConfig.preset("longtail", 0, cache_dir=str(cache_dir), seeds_per_image=8)
    arms = ["real_only", "diverse_to_specific", "specific_to_diverse"] + [
        f"scale_{s:g}x" for s in cfg.scale_sweep
    ]
    t0 = time.perf_counter()
    result = run_ablation_battery(cfg, arms=arms, out_dir=tmp_path_factory.mktemp("lt-battery"))
    return result, time.perf_counter() - t0


@pytest.fixture(scope="session")
def lowquality_battery(cache_dir, tmp_path_factory):
    cfg = ExperimentConfig.preset("lowquality", 0, cache_dir=str(cache_dir))
    t0 = time.perf_counter()
    result = run_ablation_battery(cfg, arms=["real_only", "all_levels", "adaptive"],
                                  out_dir=tmp_path_factory.mktemp("lq-battery"))
    return result, time.perf_counter() - t0


def test_criterion_01_lambda_identity():
    t0 = time.perf_counter()
    sched = make_linear_schedule(200, 5e-4, 0.06)
    model = NoiseModel.init(10, sched, seed=0)
    rng = np.random.default_rng(1)
    images = rng.random((100, 16, 16)).astype(np.float32)
    labels = rng.integers(0, 10, 100)
    levels = [lam for lam in (1.0, 0.998) if start_step(lam, sched.T) == 0]
    identical = True
    for sampler in ("ancestral", "ddim"):
        for lam in levels:
            for i in range(100):
                cfg = GenerationConfig(lam=lam, sampler=sampler, seed=i)
                out = generate_guided(model, images[i], int(labels[i]), cfg, sched)
                identical &= out.tobytes() == images[i].tobytes()
    elapsed = time.perf_counter() - t0
    ok = identical and len(levels) == 2 and elapsed < 10
    record_criterion(1, "lambda identity", ok, f"bit-identical={identical}, levels={levels}, {elapsed:.2f}s")
    assert ok


def test_criterion_02_monotone_fidelity(longtail_ctx):
    t0 = time.perf_counter()
    ctx = longtail_ctx
    bundle = ctx.bundle()
    counts = bundle.train.class_counts(ctx.cfg.num_classes)
    # hard sources: every sample of the rarest classes, at least 200 of them
    order = np.argsort(counts, kind="stable")
    classes = order[: int(np.searchsorted(np.cumsum(counts[order]), 200)) + 1]
    hard = bundle.train.mask(np.isin(bundle.train.labels, classes))
    grid = (0.0, 0.3, 0.5, 0.7, 0.9)
    S = generate_spectrum(hard, ctx.noise_model(), grid, 3, ctx.cfg.guidance_weight, schedule_of(ctx.cfg),
                          ctx.cfg.seed, sampler=ctx.cfg.sampler, ddim_steps=ctx.cfg.ddim_steps)
    S = score_spectrum(S, ctx.filter_model())
    src = {int(i): k for k, i in enumerate(hard.sample_ids)}
    mse = ((S.images - hard.images[[src[int(i)] for i in S.source_ids]]) ** 2).mean(axis=(1, 2))
    rows = []
    for lam in grid:
        m = S.lam == np.float32(lam)
        n = int(m.sum())
        rows.append((lam, float(mse[m].mean()), float(mse[m].std(ddof=1)) / math.sqrt(n),
                     float(S.fidelity[m].mean()), float(S.fidelity[m].std(ddof=1)) / math.sqrt(n)))
    mse_ok = all(b[1] < a[1] - math.hypot(a[2], b[2]) for a, b in zip(rows, rows[1:]))
    fid_ok = all(b[3] > a[3] + math.hypot(a[4], b[4]) for a, b in zip(rows, rows[1:]))
    elapsed = time.perf_counter() - t0
    ok = len(hard) >= 200 and mse_ok and fid_ok and elapsed < 300
    detail = (f"|H|={len(hard)}, mse={[f'{r[1]:.4f}+-{r[2]:.4f}' for r in rows]}, "
              f"fidelity={[f'{r[3]:.4f}+-{r[4]:.4f}' for r in rows]}, mse_ok={mse_ok}, fidelity_ok={fid_ok}, {elapsed:.1f}s")
    record_criterion(2, "monotone fidelity spectrum", ok, detail)
    assert ok


def test_criterion_03_analytic_gaussian_sampler():
    t0 = time.perf_counter()
    d, n = 4, 5000
    sched = make_linear_schedule(50, 1e-4, 0.02)
    model = analytic_gaussian_model(np.zeros(d), 1.0, sched)
    # sources drawn from the target itself, so the forward marginal at t(0) is exact
    src = np.random.default_rng(2024).standard_normal((n, d))
    out = generate_guided_batch(model, src, np.zeros(n, int), 0.0, 0.0, list(range(n)), sched,
                                sampler="ancestral", clamp=False)
    mean_err = float(np.abs(out.mean(axis=0)).max())
    cov = np.cov(out, rowvar=False)
    cov_err = float(np.linalg.norm(cov - np.eye(d)) / np.linalg.norm(np.eye(d)))
    elapsed = time.perf_counter() - t0
    ok = mean_err <= 0.05 and cov_err <= 0.1 and elapsed < 60
    record_criterion(3, "analytic Gaussian sampler", ok,
                     f"max |mean|={mean_err:.4f}, cov rel err={cov_err:.4f}, {elapsed:.2f}s")
    assert ok


class _Fixed:
    def __init__(self, cond, uncond):
        self.cond, self.uncond = np.asarray(cond, float), np.asarray(uncond, float)

    def predict(self, z, t, c):
        return np.where((np.asarray(c) == UNCONDITIONAL)[:, None], self.uncond, self.cond)


def test_criterion_04_cfg_algebra():
    t0 = time.perf_counter()
    sched = make_linear_schedule(200, 5e-4, 0.06)
    model = NoiseModel.init(10, sched, hidden=(64, 64), seed=3)
    z = np.random.default_rng(0).standard_normal((8, 16, 16)).astype(np.float32)
    c = np.arange(8)
    w0 = cfg_noise(model, z, 50, c, 0.0).tobytes() == model.predict(z, 50, c).tobytes()
    same = analytic_gaussian_model(np.full(256, 0.5), 0.1, sched)
    zz = z.reshape(8, 256)
    base = same.predict(zz, 50, c)
    dev = max(float(np.abs(cfg_noise(same, zz, 50, c, w) - base).max()) for w in (0.5, 1, 3, 10, 100))
    scalar = float(cfg_noise(_Fixed([[2.0]], [[1.0]]), np.zeros((1, 1)), 1, [0], 1.0)[0, 0])
    elapsed = time.perf_counter() - t0
    ok = w0 and dev < 1e-6 and scalar == 3.0 and elapsed < 1
    record_criterion(4, "CFG algebra", ok, f"w=0 exact={w0}, max dev={dev:.2e}, scalar={scalar}, {elapsed:.3f}s")
    assert ok


def test_criterion_05_counting_and_filtering(longtail_ctx):
    t0 = time.perf_counter()
    ctx = longtail_ctx
    train = ctx.bundle().train
    hard = train.subset(np.flatnonzero(train.labels >= 7)[:20])
    m = 4
    S = generate_spectrum(hard, ctx.noise_model(), LONGTAIL_GRID, m, 3.0, schedule_of(ctx.cfg), 11)
    count_ok = len(S) == len(hard) * len(LONGTAIL_GRID) * m
    S = score_spectrum(S, ctx.filter_model())
    sweep = (0.23, 0.25, 0.27, 0.3, 0.32)
    kept = [filter_spectrum(S, h).kept for h in sweep]
    exact = all(np.array_equal(k, S.fidelity >= np.float32(h)) for k, h in zip(kept, sweep))
    subset = all(np.all(b <= a) for a, b in zip(kept, kept[1:]))
    elapsed = time.perf_counter() - t0
    ok = count_ok and exact and subset and elapsed < 60
    record_criterion(5, "counting and filtering", ok,
                     f"entries={len(S)}, kept per h={[int(k.sum()) for k in kept]}, {elapsed:.1f}s")
    assert ok


def test_criterion_06_longtail_direction(longtail_battery):
    result, elapsed = longtail_battery
    metric = "accuracy_few"
    d2s, s2d, real = (result.mean(a, metric) for a in ("diverse_to_specific", "specific_to_diverse", "real_only"))
    n = len(result.values("diverse_to_specific", metric))
    margin_ok = d2s - real >= 0.05
    order_ok = d2s > s2d
    ok = n == 5 and margin_ok and order_ok and elapsed < 20 * 60 and not result.failures
    record_criterion(6, "long-tail direction", ok,
                     f"few acc d2s={d2s:.4f} s2d={s2d:.4f} real={real:.4f} (n={n}), "
                     f"margin_ok={margin_ok}, d2s>s2d={order_ok}, battery {elapsed / 60:.1f} min")
    assert ok


def test_criterion_07_lowquality_direction(lowquality_battery):
    result, elapsed = lowquality_battery
    metric = "macro_f1_ood"
    adaptive, all_levels, real = (result.mean(a, metric) for a in ("adaptive", "all_levels", "real_only"))
    n = len(result.values("adaptive", metric))
    ok = n == 5 and adaptive > all_levels and elapsed < 20 * 60 and not result.failures
    record_criterion(7, "low-quality direction", ok,
                     f"OOD macro-F1 adaptive={adaptive:.4f} all_levels={all_levels:.4f} real={real:.4f} "
                     f"(n={n}), battery {elapsed / 60:.1f} min")
    assert ok


def test_criterion_08_scale_sweep(longtail_battery):
    result, _ = longtail_battery
    metric = "accuracy_few"
    means = {s: result.mean(f"scale_{s}x", metric) for s in (0, 1, 2, 3, 4, 6)}
    gain_ok = means[3] >= means[0] + 0.03
    plateau_ok = means[6] <= means[4]
    ok = gain_ok and plateau_ok and len(result.values("scale_6x", metric)) == 5
    record_criterion(8, "scale sweep shape", ok,
                     "few acc " + ", ".join(f"{s}x={v:.4f}" for s, v in means.items())
                     + f"; 3x>=0x+3pt={gain_ok}, no gain 4x->6x={plateau_ok}")
    assert ok


def test_criterion_09_undersampling_exactness():
    details, ok = [], True
    for head, ratio in ((300, 100), (500, 100), (2000, 400)):
        bundle = make_longtail_dataset(DatasetSpec(head_count=head, imbalance_ratio=ratio, test_per_class=1))
        is_tail = np.isin(np.arange(len(bundle.train)), identify_tail(bundle.train, bundle.group_of_class))
        out = undersample_nontail(bundle.train, is_tail, TAIL_FRACTION, seed=head)
        n_tail = int(np.isin(out.sample_ids, bundle.train.sample_ids[is_tail]).sum())
        off = abs(n_tail - TAIL_FRACTION * len(out))
        ok &= off <= 1 and n_tail == int(is_tail.sum())
        details.append(f"N={len(out)} tail={n_tail} off={off:.3f}")
    record_criterion(9, "undersampling exactness", ok, "; ".join(details))
    assert ok


def test_criterion_10_end_to_end_determinism(tmp_path):
    from diffcurriculum.config import resolve

    cfg = resolve(dict(TINY_CONFIG))
    a = run_pipeline(cfg, tmp_path / "a")
    b = run_pipeline(cfg, tmp_path / "b")
    c = run_pipeline(cfg.replace(workers=2), tmp_path / "c")
    ha, hb, hc = manifest_hashes(a), manifest_hashes(b), manifest_hashes(c)
    files = sum(len(v) for v in ha.values())
    ok = ha == hb == hc and len(ha) == 8
    record_criterion(10, "end-to-end determinism", ok,
                     f"{len(ha)} stages, {files} files, repeat equal={ha == hb}, workers 1 vs 2 equal={ha == hc}")
    assert ok


def _fd_check(params, loss, grads, rng, names, n=10):
    worst = 0.0
    coords = [(k, i) for k in names for i in range(params[k].size)]
    for j in rng.choice(len(coords), size=n, replace=False):
        name, flat = coords[j]
        p = params[name]
        idx = np.unravel_index(flat, p.shape)
        old = p[idx]
        h = 1e-6
        p[idx] = old + h
        up = loss()
        p[idx] = old - h
        down = loss()
        p[idx] = old
        fd, an = (up - down) / (2 * h), grads[name][idx]
        worst = max(worst, abs(an - fd) / max(abs(an), abs(fd), 1e-6))
    return worst


def test_criterion_11_numerical_hygiene():
    rng = np.random.default_rng(11)
    clf = Classifier.init(10, seed=0).astype(np.float64)
    clf.params = {k: v + rng.normal(0, 0.02, v.shape) for k, v in clf.params.items()}
    x, y = rng.random((16, 16, 16)), rng.integers(0, 10, 16)
    _, g = clf.loss_and_grads(x, y)
    clf_err = _fd_check(clf.params, lambda: clf.loss_and_grads(x, y)[0], g, rng, list(clf.params))

    sched = make_linear_schedule(200, 5e-4, 0.06)
    model = NoiseModel.init(10, sched, seed=0).astype(np.float64)
    z, eps = rng.standard_normal((8, 256)), rng.standard_normal((8, 256))
    t, c = rng.integers(1, 201, 8), np.array([0, 1, 2, 3, 4, 5, UNCONDITIONAL, 9])

    def nm_loss():
        return float(np.mean((model.forward(z, t, c)[0] - eps) ** 2))

    pred, cache = model.forward(z, t, c)
    nm_err = _fd_check(model.params, nm_loss, model.backward(cache, 2 * (pred - eps) / pred.size), rng,
                       model.trainable())

    ab_err = 0.0
    for T, lo, hi in ((200, 5e-4, 0.06), (1000, 1e-4, 0.02), (50, 1e-4, 0.02)):
        s = make_linear_schedule(T, lo, hi)
        logs = np.concatenate([[0.0], np.cumsum(np.log1p(-s.beta))])
        ab_err = max(ab_err, float(np.max(np.abs(s.alpha_bar - np.exp(logs)) / np.exp(logs))))
    ok = clf_err <= 1e-4 and nm_err <= 1e-4 and ab_err <= 1e-10
    record_criterion(11, "numerical hygiene", ok,
                     f"classifier rel err={clf_err:.2e}, noise model rel err={nm_err:.2e}, alpha_bar rel err={ab_err:.2e}")
    assert ok

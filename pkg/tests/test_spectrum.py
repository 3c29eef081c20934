import numpy as np
import pytest

from diffcurriculum.classifier import Classifier
from diffcurriculum.data import Dataset, make_prototype_corpus
from diffcurriculum.diffusion import analytic_gaussian_model
from diffcurriculum.schedule import make_linear_schedule
from diffcurriculum.spectrum import (
    FilterModel,
    GuidanceGrid,
    Spectrum,
    calibrate_threshold,
    fidelity_score,
    fidelity_scores,
    filter_spectrum,
    generate_spectrum,
    read_spectrum,
    score_spectrum,
    write_spectrum,
)

SCHED = make_linear_schedule(200, 5e-4, 0.06)


def _hard(n=3, shape=(4, 4), seed=0):
    rng = np.random.default_rng(seed)
    return Dataset.real(rng.random((n, *shape)), np.arange(n) % 2, 1000 + np.arange(n))


def _model(shape=(4, 4)):
    return analytic_gaussian_model(np.full(shape, 0.5), 0.05, SCHED)


def test_entry_count_and_order():
    S = generate_spectrum(_hard(3), _model(), (0.0, 0.1, 0.3, 0.5), 2, 3.0, SCHED, 0)
    assert len(S) == 24
    assert S.source_ids.tolist() == [1000] * 8 + [1001] * 8 + [1002] * 8
    assert np.allclose(S.lam[:8], np.repeat([0.0, 0.1, 0.3, 0.5], 2))
    assert S.seed_index[:4].tolist() == [0, 1, 0, 1]
    assert np.all(np.isnan(S.fidelity)) and np.all(S.kept)
    assert len(np.unique(S.entry_ids())) == 24


def test_same_seed_gives_identical_cache(tmp_path):
    for name in ("a", "b"):
        S = generate_spectrum(_hard(3), _model(), (0.2, 0.6), 3, 2.0, SCHED, 5, sampler="ancestral")
        write_spectrum(tmp_path / f"{name}.dssp", S)
    assert (tmp_path / "a.dssp").read_bytes() == (tmp_path / "b.dssp").read_bytes()
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    other = generate_spectrum(_hard(3), _model(), (0.2, 0.6), 3, 2.0, SCHED, 6, sampler="ancestral")
    assert other.images.tobytes() != read_spectrum(tmp_path / "a.dssp").images.tobytes()


@pytest.mark.parametrize("sampler", ["ancestral", "ddim"])
def test_zero_start_step_reproduces_sources(sampler):
    hard = _hard(4)
    S = generate_spectrum(hard, _model(), (0.3, 0.998), 2, 3.0, SCHED, 1, sampler=sampler)
    top = S.at_level(0.998)
    for i in range(len(top)):
        src = np.flatnonzero(hard.sample_ids == top.source_ids[i])[0]
        assert top.images[i].tobytes() == hard.images[src].tobytes()
    assert not np.array_equal(S.at_level(0.3).images[0], hard.images[0])


def test_workers_do_not_change_output():
    hard = _hard(70)
    a = generate_spectrum(hard, _model(), (0.5,), 2, 3.0, SCHED, 2, workers=1)
    b = generate_spectrum(hard, _model(), (0.5,), 2, 3.0, SCHED, 2, workers=2)
    assert a.images.tobytes() == b.images.tobytes()


def test_generation_argument_checks():
    with pytest.raises(ValueError):
        generate_spectrum(_hard(1), _model(), (0.5,), 0, 3.0, SCHED, 0)
    with pytest.raises(ValueError):
        GuidanceGrid((0.5, 0.3))
    with pytest.raises(ValueError):
        GuidanceGrid((0.5, 1.0))
    assert GuidanceGrid((0.1, 0.5)).index(0.5) == 1


def _fixed_filter(refs):
    clf = Classifier.init(len(refs), (4, 4), seed=0)
    return FilterModel(clf, np.asarray(refs, dtype=float))


def test_fidelity_identity_and_orthogonal():
    clf = Classifier.init(2, (4, 4), seed=0)
    img = np.random.default_rng(0).random((4, 4))
    e = clf.embed(img)[0].astype(np.float64)
    ortho = np.zeros_like(e)
    i, j = np.argsort(np.abs(e))[-2:]
    ortho[i], ortho[j] = e[j], -e[i]
    F = FilterModel(clf, np.stack([e, ortho]))
    assert fidelity_score(F, img, 0) == pytest.approx(1.0, abs=1e-6)
    assert fidelity_score(F, img, 1) == pytest.approx(0.0, abs=1e-6)


def _scored(scores):
    n = len(scores)
    return Spectrum(np.arange(n), np.zeros(n), np.full(n, 0.5), np.zeros(n), np.zeros((n, 2, 2)), scores,
                    np.ones(n, bool))


def test_filter_boundary_is_inclusive():
    assert filter_spectrum(_scored([0.31, 0.29]), 0.30).kept.tolist() == [True, False]
    assert filter_spectrum(_scored([0.30]), 0.30).kept.tolist() == [True]


def test_filter_lower_bound_keeps_all():
    assert filter_spectrum(_scored([-1.0, 0.0, 1.0]), -1.0).kept.all()


def test_filter_subset_property():
    scores = np.random.default_rng(1).uniform(-0.2, 1.0, 500)
    kept = [filter_spectrum(_scored(scores), h).kept for h in (0.23, 0.25, 0.27, 0.30, 0.32)]
    for lo, hi in zip(kept, kept[1:]):
        assert np.all(hi <= lo)


def test_filter_refuses_unscored():
    with pytest.raises(ValueError):
        filter_spectrum(_scored([0.5, np.nan]), 0.1)


def test_score_and_calibrate():
    F = _fixed_filter(np.eye(32)[:3])
    hard = _hard(5)
    S = score_spectrum(generate_spectrum(hard, _model(), (0.5,), 2, 1.0, SCHED, 0), F)
    np.testing.assert_allclose(S.fidelity, fidelity_scores(F, S.images, S.labels), rtol=1e-6)
    clean = _hard(40, seed=3)
    scores = fidelity_scores(F, clean.images, clean.labels)
    assert calibrate_threshold(F, clean) == pytest.approx(np.quantile(scores, 0.1))


def test_spectrum_roundtrip(tmp_path):
    S = generate_spectrum(_hard(3), _model(), (0.1, 0.5), 2, 3.0, SCHED, 0)
    S = filter_spectrum(score_spectrum(S, _fixed_filter(np.eye(32)[:2])), 0.0)
    write_spectrum(tmp_path / "s.dssp", S)
    back = read_spectrum(tmp_path / "s.dssp")
    for f in ("source_ids", "labels", "lam", "seed_index", "images", "fidelity", "kept"):
        assert getattr(back, f).tobytes() == getattr(S, f).tobytes()
    assert back.info["h_filter"] == 0.0 and back.info["m"] == 2


def test_empty_spectrum_roundtrip(tmp_path):
    S = generate_spectrum(Dataset.empty((4, 4)), _model(), (0.5,), 2, 3.0, SCHED, 0)
    S.info["image_shape"] = [4, 4]
    write_spectrum(tmp_path / "e.dssp", S)
    back = read_spectrum(tmp_path / "e.dssp")
    assert len(back) == 0 and back.images.shape == (0, 4, 4)


def test_to_dataset_marks_synthetic():
    S = _scored([0.9, 0.1, 0.8])
    S.lam[:] = [0.1, 0.1, 0.3]
    S = filter_spectrum(S, 0.5)
    d = S.to_dataset()
    assert len(d) == 2 and np.all(d.origin == 1)
    np.testing.assert_allclose(d.lam, [0.1, 0.3])
    assert len(S.to_dataset(lam=0.1)) == 1 and len(S.to_dataset(kept_only=False)) == 3


def test_trained_filter_prefers_own_class():
    from diffcurriculum.config import ExperimentConfig
    from diffcurriculum.data import filter_backgrounds
    from diffcurriculum.pipeline import train_shared_filter

    cfg = ExperimentConfig.preset("longtail", 0)
    F = train_shared_filter(cfg)
    spec = cfg.dataset_spec()
    held = make_prototype_corpus(spec, 50, split="heldout", seed=12345, backgrounds=filter_backgrounds(spec))
    sims = F.embed(held.images) @ F.references.T
    own = sims[np.arange(len(held)), held.labels].copy()
    sims[np.arange(len(held)), held.labels] = -np.inf
    assert np.mean(own > sims.max(axis=1)) >= 0.95

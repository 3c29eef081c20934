"""Glyph world: a synthetic benchmark of class glyphs over textured backgrounds.

Each class owns a binary 16x16 prototype mask with four pose variants. A
sample is a variant rendered with a small random rotation and translation over
a background texture family, optionally corrupted by an occluder, blur and
pixel noise. Long-tail and low-quality bundles are built from it, each with an
in-domain and an out-of-domain test split.
"""

from __future__ import annotations

import json
import logging
import math
import struct
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .rng import derive_seed, make_rng

log = logging.getLogger(__name__)

ORIGIN_REAL = 0
ORIGIN_SYNTHETIC = 1

# Split tags occupy the top byte of a sample id, so ids never collide.
SPLIT_TAGS = {"train": 1, "id_test": 2, "ood_test": 3, "corpus": 4, "heldout": 5, "synthetic": 8}

GROUP_MANY_MIN = 100
GROUP_MEDIUM_MIN = 20

DATASET_MAGIC = b"DSDT"
DATASET_VERSION = 1

N_VARIANTS = 4
MIN_HAMMING = 40

BACKGROUND_FAMILIES = {
    0: "gradient",
    1: "stripes",
    2: "blotches",
    3: "checker",
    4: "speckle",
    5: "rings",
    6: "plain",
}


@dataclass(frozen=True)
class Corruption:
    fill: str
    blur: float
    noise: float


# In-domain corruptions are ids 0-2; 3-4 are reserved for out-of-domain tests.
CORRUPTIONS = {
    0: Corruption("dark", 0.7, 0.05),
    1: Corruption("mid", 1.0, 0.07),
    2: Corruption("dark", 1.0, 0.06),
    3: Corruption("bright", 1.4, 0.10),
    4: Corruption("texture", 1.6, 0.12),
}


def sample_id(split: str, index: int) -> int:
    return (SPLIT_TAGS[split] << 56) | int(index)


@dataclass(frozen=True)
class DatasetSpec:
    num_classes: int = 10
    head_count: int = 500
    imbalance_ratio: float = 100.0
    image_size: int = 16
    test_per_class: int = 50
    corruption_fraction: float = 0.4
    occlusion_range: tuple[float, float] = (0.3, 0.6)
    train_backgrounds: tuple[int, ...] = (0, 1, 2)
    ood_backgrounds: tuple[int, ...] = (3, 4, 5)
    train_corruptions: tuple[int, ...] = (0, 1, 2)
    ood_corruptions: tuple[int, ...] = (3, 4)
    # Style of the broad corpus the generator is fitted on; differs from the task.
    corpus_backgrounds: tuple[int, ...] = (6,)
    seed: int = 0
    world_seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        if self.imbalance_ratio < 1:
            raise ValueError("imbalance ratio must be >= 1")
        if self.head_count < 1:
            raise ValueError("head_count must be positive")
        if not (0.0 <= self.corruption_fraction <= 1.0):
            raise ValueError("corruption_fraction must lie in [0, 1]")
        if set(self.train_backgrounds) & set(self.ood_backgrounds):
            raise ValueError("train and OOD background families must be disjoint")
        if set(self.corpus_backgrounds) & set(self.ood_backgrounds):
            raise ValueError("corpus background families must not overlap the OOD families")
        if set(self.train_corruptions) & set(self.ood_corruptions):
            raise ValueError("train and OOD corruption sets must be disjoint")
        for fam in (*self.train_backgrounds, *self.ood_backgrounds, *self.corpus_backgrounds):
            if fam not in BACKGROUND_FAMILIES:
                raise ValueError(f"unknown background family {fam}")
        for cid in (*self.train_corruptions, *self.ood_corruptions):
            if cid not in CORRUPTIONS:
                raise ValueError(f"unknown corruption id {cid}")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass(frozen=True)
class LabeledImage:
    image: np.ndarray
    label: int
    origin: int
    lam: float
    sample_id: int


@dataclass
class Dataset:
    """Column-oriented collection of labeled images, ordered by ``sample_id``."""

    images: np.ndarray
    labels: np.ndarray
    origin: np.ndarray
    lam: np.ndarray
    sample_ids: np.ndarray
    meta: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.origin = np.asarray(self.origin, dtype=np.uint8)
        self.lam = np.asarray(self.lam, dtype=np.float32)
        self.sample_ids = np.asarray(self.sample_ids, dtype=np.uint64)
        n = self.images.shape[0]
        for name in ("labels", "origin", "lam", "sample_ids"):
            if getattr(self, name).shape != (n,):
                raise ValueError(f"{name} must have shape ({n},)")
        real = self.origin == ORIGIN_REAL
        if np.any(self.lam[real] != 1.0):
            raise ValueError("real samples must carry guidance level 1")

    def __len__(self) -> int:
        return int(self.images.shape[0])

    def __getitem__(self, i: int) -> LabeledImage:
        return LabeledImage(
            self.images[i], int(self.labels[i]), int(self.origin[i]), float(self.lam[i]),
            int(self.sample_ids[i]),
        )

    @classmethod
    def empty(cls, shape: tuple[int, int] = (16, 16)) -> "Dataset":
        return cls(np.zeros((0, *shape), np.float32), [], [], [], [])

    @classmethod
    def real(cls, images, labels, sample_ids, meta=None) -> "Dataset":
        n = len(labels)
        return cls(images, labels, np.zeros(n), np.ones(n), sample_ids, meta or {})

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(
            self.images[idx], self.labels[idx], self.origin[idx], self.lam[idx],
            self.sample_ids[idx], {k: v[idx] for k, v in self.meta.items()},
        )

    def mask(self, m: np.ndarray) -> "Dataset":
        return self.subset(np.flatnonzero(m))

    def class_counts(self, num_classes: int) -> np.ndarray:
        return np.bincount(self.labels, minlength=num_classes)

    @staticmethod
    def concat(parts: list["Dataset"]) -> "Dataset":
        parts = [p for p in parts if len(p)]
        if not parts:
            return Dataset.empty()
        keys = set.intersection(*(set(p.meta) for p in parts))
        return Dataset(
            np.concatenate([p.images for p in parts]),
            np.concatenate([p.labels for p in parts]),
            np.concatenate([p.origin for p in parts]),
            np.concatenate([p.lam for p in parts]),
            np.concatenate([p.sample_ids for p in parts]),
            {k: np.concatenate([p.meta[k] for p in parts]) for k in sorted(keys)},
        )

    def sorted(self) -> "Dataset":
        return self.subset(np.argsort(self.sample_ids, kind="stable"))


@dataclass
class DataBundle:
    spec: DatasetSpec
    task: str
    train: Dataset
    id_test: Dataset
    ood_test: Dataset
    group_of_class: dict[int, str]


# -- glyph world ------------------------------------------------------------


def _cellular_mask(rng: np.random.Generator, size: int) -> np.ndarray:
    box = size - 4
    for _ in range(200):
        cells = rng.random((box, box)) < 0.55
        for _ in range(3):
            votes = np.rint(ndimage.uniform_filter(cells.astype(float), size=3, mode="constant") * 9)
            cells = votes >= 5
        if not (0.3 <= cells.mean() <= 0.6):
            continue
        labeled, _ = ndimage.label(cells)
        if np.bincount(labeled.ravel())[1:].max() >= 0.7 * cells.sum():
            mask = np.zeros((size, size), dtype=bool)
            mask[2 : 2 + box, 2 : 2 + box] = cells
            return mask
    raise RuntimeError("cellular pattern search failed")


def _variants(mask: np.ndarray) -> list[np.ndarray]:
    return [mask, mask[:, ::-1], mask[::-1, :], np.rot90(mask)]


def make_prototypes(num_classes: int, size: int = 16, world_seed: int = 0) -> np.ndarray:
    """Prototype masks of shape (K, N_VARIANTS, size, size).

    Any two variants of different classes differ in at least ``MIN_HAMMING`` pixels.
    """
    out: list[list[np.ndarray]] = []
    attempt = 0
    while len(out) < num_classes:
        rng = make_rng(world_seed, "prototype", len(out), attempt)
        attempt += 1
        cand = _variants(_cellular_mask(rng, size))
        ok = all(
            np.count_nonzero(a != b) >= MIN_HAMMING for other in out for a in cand for b in other
        )
        if ok:
            out.append(cand)
            attempt = 0
        elif attempt > 500:
            raise RuntimeError("could not find sufficiently distinct prototypes")
    return np.array(out, dtype=bool)


def render_background(rng: np.random.Generator, family: int, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    name = BACKGROUND_FAMILIES[family]
    if name == "gradient":
        theta = rng.uniform(0, 2 * np.pi)
        ramp = np.cos(theta) * xx + np.sin(theta) * yy
        ramp = (ramp - ramp.min()) / (np.ptp(ramp) + 1e-12)
        return 0.05 + rng.uniform(0.1, 0.3) * ramp
    if name == "stripes":
        theta = rng.uniform(0, np.pi)
        freq = rng.uniform(1.5, 3.5)
        phase = rng.uniform(0, 2 * np.pi)
        wave = np.sin(2 * np.pi * freq * (np.cos(theta) * xx + np.sin(theta) * yy) + phase)
        return 0.18 + rng.uniform(0.06, 0.14) * wave
    if name == "blotches":
        noise = ndimage.gaussian_filter(rng.standard_normal((size, size)), 2.0, mode="wrap")
        noise = (noise - noise.min()) / (np.ptp(noise) + 1e-12)
        return 0.05 + 0.3 * noise
    if name == "checker":
        cell = int(rng.integers(2, 5))
        board = ((np.arange(size)[:, None] // cell + np.arange(size)[None, :] // cell) % 2).astype(float)
        return 0.1 + 0.22 * board
    if name == "speckle":
        return rng.uniform(0.0, 0.4, size=(size, size))
    if name == "rings":
        cy, cx = rng.uniform(0.2, 0.8, size=2)
        r = np.hypot(yy - cy, xx - cx)
        return 0.2 + 0.15 * np.sin(2 * np.pi * rng.uniform(2.0, 4.0) * r + rng.uniform(0, 2 * np.pi))
    if name == "plain":
        return np.full((size, size), rng.uniform(0.05, 0.3))
    raise ValueError(f"unknown background family {family}")


def _pose(mask: np.ndarray, angle_deg: float, shift: tuple[float, float]) -> np.ndarray:
    size = mask.shape[0]
    centre = (size - 1) / 2.0
    a = np.deg2rad(angle_deg)
    rot = np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]])
    offset = centre - rot @ (np.array([centre, centre]) + np.asarray(shift))
    return ndimage.affine_transform(mask.astype(float), rot, offset=offset, order=1, mode="constant")


def render_sample(
    rng: np.random.Generator, prototypes: np.ndarray, label: int, backgrounds: tuple[int, ...]
) -> tuple[np.ndarray, dict]:
    size = prototypes.shape[-1]
    variant = int(rng.integers(N_VARIANTS))
    angle = float(rng.uniform(-15.0, 15.0))
    shift = (float(rng.uniform(-2.0, 2.0)), float(rng.uniform(-2.0, 2.0)))
    family = int(backgrounds[rng.integers(len(backgrounds))])
    soft = _pose(prototypes[label, variant], angle, shift)
    bg = render_background(rng, family, size)
    fg = rng.uniform(0.7, 1.0)
    img = np.clip(bg * (1.0 - soft) + fg * soft, 0.0, 1.0)
    return img, {"variant": variant, "background": family, "glyph": soft}


def corrupt(
    rng: np.random.Generator, img: np.ndarray, glyph: np.ndarray, corruption_id: int,
    occlusion_range: tuple[float, float] = (0.3, 0.6),
) -> np.ndarray:
    """Occlude 30-60% of the glyph, blur, and add pixel noise."""
    params = CORRUPTIONS[corruption_id]
    size = img.shape[0]
    ink = glyph > 0.5
    total = max(int(ink.sum()), 1)
    out = img.copy()
    lo, hi = occlusion_range
    rect, fallback, fallback_gap = None, None, np.inf
    for _ in range(100):
        h, w = (int(v) for v in rng.integers(4, size - 3, size=2))
        y, x = int(rng.integers(0, size - h + 1)), int(rng.integers(0, size - w + 1))
        cover = ink[y : y + h, x : x + w].sum() / total
        if lo <= cover <= hi:
            rect = (y, x, h, w)
            break
        gap = abs(cover - 0.5 * (lo + hi))
        if gap < fallback_gap:
            fallback, fallback_gap = (y, x, h, w), gap
    y, x, h, w = rect or fallback
    if params.fill == "dark":
        patch = rng.uniform(0.0, 0.1)
    elif params.fill == "mid":
        patch = rng.uniform(0.4, 0.6)
    elif params.fill == "bright":
        patch = rng.uniform(0.85, 1.0)
    else:
        patch = rng.uniform(0.0, 1.0, size=(h, w))
    out[y : y + h, x : x + w] = patch
    out = ndimage.gaussian_filter(out, params.blur, mode="nearest")
    out = out + rng.normal(0.0, params.noise, size=out.shape)
    return np.clip(out, 0.0, 1.0)


def _render_split(
    spec: DatasetSpec, prototypes: np.ndarray, split: str, labels: np.ndarray,
    backgrounds: tuple[int, ...], corruption_ids: tuple[int, ...], corruption_fraction: float,
) -> Dataset:
    n = len(labels)
    size = spec.image_size
    images = np.zeros((n, size, size), dtype=np.float32)
    meta = {k: np.zeros(n, dtype=np.int64) for k in ("variant", "background", "corruption")}
    for i, y in enumerate(labels):
        rng = make_rng(spec.seed, "sample", split, i)
        img, info = render_sample(rng, prototypes, int(y), backgrounds)
        cid = -1
        if corruption_ids and rng.random() < corruption_fraction:
            cid = int(corruption_ids[rng.integers(len(corruption_ids))])
            img = corrupt(rng, img, info["glyph"], cid, spec.occlusion_range)
        images[i] = img
        meta["variant"][i] = info["variant"]
        meta["background"][i] = info["background"]
        meta["corruption"][i] = cid
    ids = [sample_id(split, i) for i in range(n)]
    return Dataset.real(images, labels, ids, meta).sorted()


def longtail_counts(num_classes: int, head_count: int, imbalance_ratio: float) -> list[int]:
    """Exponential profile head_count * ratio^(-i / (K - 1)), rounded half up."""
    k = num_classes
    return [int(math.floor(head_count * imbalance_ratio ** (-i / (k - 1)) + 0.5)) for i in range(k)]


def group_of(count: int) -> str:
    if count >= GROUP_MANY_MIN:
        return "many"
    if count >= GROUP_MEDIUM_MIN:
        return "medium"
    return "few"


def _balanced_labels(k: int, per_class: int) -> np.ndarray:
    return np.repeat(np.arange(k), per_class)


def make_longtail_dataset(spec: DatasetSpec) -> DataBundle:
    counts = longtail_counts(spec.num_classes, spec.head_count, spec.imbalance_ratio)
    if min(counts) < 1:
        raise ValueError(f"spec yields an empty class: counts={counts}")
    protos = make_prototypes(spec.num_classes, spec.image_size, spec.world_seed)
    train_labels = np.concatenate([np.full(c, i) for i, c in enumerate(counts)])
    test_labels = _balanced_labels(spec.num_classes, spec.test_per_class)
    train = _render_split(spec, protos, "train", train_labels, spec.train_backgrounds, (), 0.0)
    id_test = _render_split(spec, protos, "id_test", test_labels, spec.train_backgrounds, (), 0.0)
    ood_test = _render_split(spec, protos, "ood_test", test_labels, spec.ood_backgrounds, (), 0.0)
    groups = {i: group_of(c) for i, c in enumerate(counts)}
    return DataBundle(spec, "longtail", train, id_test, ood_test, groups)


def make_lowquality_dataset(spec: DatasetSpec) -> DataBundle:
    protos = make_prototypes(spec.num_classes, spec.image_size, spec.world_seed)
    train_labels = _balanced_labels(spec.num_classes, spec.head_count)
    test_labels = _balanced_labels(spec.num_classes, spec.test_per_class)
    frac = spec.corruption_fraction
    train = _render_split(spec, protos, "train", train_labels, spec.train_backgrounds, spec.train_corruptions, frac)
    id_test = _render_split(spec, protos, "id_test", test_labels, spec.train_backgrounds, spec.train_corruptions, frac)
    ood_test = _render_split(spec, protos, "ood_test", test_labels, spec.ood_backgrounds, spec.ood_corruptions, frac)
    groups = {i: group_of(spec.head_count) for i in range(spec.num_classes)}
    return DataBundle(spec, "lowquality", train, id_test, ood_test, groups)


def make_prototype_corpus(
    spec: DatasetSpec, per_class: int, split: str = "corpus", seed: int | None = None,
    backgrounds: tuple[int, ...] | None = None,
) -> Dataset:
    """Clean, class-balanced renders, by default in the corpus style.

    Plays the role of the broad data an off-the-shelf generator was trained
    on. Pass ``backgrounds`` to render in other styles.
    """
    s = spec if seed is None else DatasetSpec.from_dict({**spec.to_dict(), "seed": seed})
    protos = make_prototypes(spec.num_classes, spec.image_size, spec.world_seed)
    labels = _balanced_labels(spec.num_classes, per_class)
    fams = spec.corpus_backgrounds if backgrounds is None else tuple(backgrounds)
    return _render_split(s, protos, split, labels, fams, (), 0.0)


def filter_backgrounds(spec: DatasetSpec) -> tuple[int, ...]:
    """Styles the fidelity filter is fitted on: corpus plus in-domain families."""
    return tuple(sorted(set(spec.corpus_backgrounds) | set(spec.train_backgrounds)))


def undersample_nontail(
    data: Dataset, is_tail: np.ndarray, tail_fraction: float, seed: int
) -> Dataset:
    """Keep every tail sample and a uniform subset of the rest.

    The non-tail subset has ``round(n_tail * (1 - f) / f)`` samples so tail
    samples make up fraction ``f`` of the result.
    """
    if not (0.0 < tail_fraction < 1.0):
        raise ValueError("tail_fraction must lie in (0, 1)")
    is_tail = np.asarray(is_tail, dtype=bool)
    tail_idx = np.flatnonzero(is_tail)
    rest_idx = np.flatnonzero(~is_tail)
    n_t = tail_idx.size
    if n_t == 0:
        raise ValueError("no tail samples to anchor the ratio")
    target = int(math.floor(n_t * (1.0 - tail_fraction) / tail_fraction + 0.5))
    if target > rest_idx.size:
        warnings.warn(
            f"requested {target} non-tail samples but only {rest_idx.size} exist; keeping all",
            RuntimeWarning,
            stacklevel=2,
        )
        keep = rest_idx
    else:
        rng = np.random.default_rng(derive_seed(seed, "undersample"))
        keep = np.sort(rng.choice(rest_idx, size=target, replace=False))
    return data.subset(np.sort(np.concatenate([tail_idx, keep])))


# -- persistence ------------------------------------------------------------
#
# <split>.dsdt: magic "DSDT" | version u16 | count u64 | height u16 | width u16
#   | float32 images, row-major | u16 labels | u8 origin | f32 lambda | u64 sample ids
# manifest.json: spec echo, task, per-class counts, groups and split ids.


def write_dataset(path: str | Path, data: Dataset) -> None:
    n, h, w = data.images.shape
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<HQHH", DATASET_VERSION, n, h, w))
        fh.write(data.images.astype("<f4").tobytes())
        fh.write(data.labels.astype("<u2").tobytes())
        fh.write(data.origin.astype("u1").tobytes())
        fh.write(data.lam.astype("<f4").tobytes())
        fh.write(data.sample_ids.astype("<u8").tobytes())


def read_dataset(path: str | Path) -> Dataset:
    raw = Path(path).read_bytes()
    if raw[:4] != DATASET_MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:4]!r}")
    version, n, h, w = struct.unpack_from("<HQHH", raw, 4)
    if version != DATASET_VERSION:
        raise ValueError(f"{path}: unsupported dataset version {version}")
    off = 4 + struct.calcsize("<HQHH")

    def take(dtype: str, count: int) -> np.ndarray:
        nonlocal off
        arr = np.frombuffer(raw, dtype=dtype, count=count, offset=off)
        off += arr.nbytes
        return arr

    images = take("<f4", n * h * w).reshape(n, h, w)
    labels = take("<u2", n)
    origin = take("u1", n)
    lam = take("<f4", n)
    ids = take("<u8", n)
    return Dataset(images.copy(), labels, origin, lam, ids)


def write_bundle(directory: str | Path, bundle: DataBundle) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    manifest = {
        "task": bundle.task,
        "spec": bundle.spec.to_dict(),
        "counts": {s: getattr(bundle, s).class_counts(bundle.spec.num_classes).tolist()
                   for s in ("train", "id_test", "ood_test")},
        "group_of_class": {str(k): v for k, v in bundle.group_of_class.items()},
        "split_ids": {s: [int(x) for x in getattr(bundle, s).sample_ids]
                      for s in ("train", "id_test", "ood_test")},
    }
    for split in ("train", "id_test", "ood_test"):
        write_dataset(d / f"{split}.dsdt", getattr(bundle, split))
        meta = getattr(bundle, split).meta
        if meta:
            manifest.setdefault("meta", {})[split] = {k: v.tolist() for k, v in meta.items()}
    (d / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1))


def read_bundle(directory: str | Path) -> DataBundle:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    splits = {}
    for split in ("train", "id_test", "ood_test"):
        ds = read_dataset(d / f"{split}.dsdt")
        meta = manifest.get("meta", {}).get(split, {})
        ds.meta = {k: np.asarray(v, dtype=np.int64) for k, v in meta.items()}
        splits[split] = ds
    return DataBundle(
        DatasetSpec.from_dict(manifest["spec"]),
        manifest["task"],
        splits["train"], splits["id_test"], splits["ood_test"],
        {int(k): v for k, v in manifest["group_of_class"].items()},
    )

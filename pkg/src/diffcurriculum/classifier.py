"""Small image classifier: 3x3 conv, 2x2 average pool, two dense layers.

The default ``linear`` head applies ReLU and a dense layer to the 32-wide
embedding. The ``cosine`` head instead scores classes by the scaled cosine
between the raw embedding and per-class weight vectors; the fidelity filter
uses it so that embeddings cluster around class directions.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .data import Dataset
from .diffusion import TrainingDiverged
from .rng import make_rng

CLASSIFIER_MAGIC = b"DSCF"
HEADS = ("linear", "cosine")
COSINE_SCALE = 10.0


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    curriculum_epochs: int = 20
    batch_size: int = 32
    learn_rate: float = 1e-2
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    loss: str = "cross_entropy"

    def __post_init__(self):
        if not (0 <= self.curriculum_epochs <= self.epochs):
            raise ValueError("need 0 <= curriculum_epochs <= epochs")
        if self.loss != "cross_entropy":
            raise ValueError(f"unsupported loss {self.loss!r}")

    def lr_at(self, epoch: int) -> float:
        """Cosine decay over ``epochs``."""
        frac = min(max(epoch, 0), self.epochs) / max(self.epochs, 1)
        return self.learn_rate * 0.5 * (1.0 + math.cos(math.pi * frac))


@dataclass
class Classifier:
    params: nn.Params
    num_classes: int
    image_shape: tuple[int, int] = (16, 16)
    channels: int = 8
    embed_dim: int = 32
    head: str = "linear"
    velocity: nn.Params | None = field(default=None, repr=False)

    @classmethod
    def init(
        cls,
        num_classes: int,
        image_shape: tuple[int, int] = (16, 16),
        channels: int = 8,
        embed_dim: int = 32,
        seed: int = 0,
        zero_head: bool = False,
        dtype=np.float32,
        head: str = "linear",
    ) -> "Classifier":
        if head not in HEADS:
            raise ValueError(f"unknown head {head!r}")
        h, w = image_shape
        if h % 2 or w % 2:
            raise ValueError("image sides must be even for 2x2 pooling")
        rng = make_rng(seed, "classifier-init")
        flat = (h // 2) * (w // 2) * channels
        params = {
            "conv_W": nn.he(rng, 9, channels),
            "conv_b": np.zeros(channels),
            "W1": nn.he(rng, flat, embed_dim),
            "b1": np.zeros(embed_dim),
            "W2": np.zeros((embed_dim, num_classes)) if zero_head else nn.glorot(rng, embed_dim, num_classes),
            "b2": np.zeros(num_classes),
        }
        params = {k: v.astype(dtype) for k, v in params.items()}
        return cls(params, num_classes, tuple(image_shape), channels, embed_dim, head)

    @property
    def dtype(self):
        return self.params["W1"].dtype

    def copy(self) -> "Classifier":
        return copy.deepcopy(self)

    def astype(self, dtype) -> "Classifier":
        out = self.copy()
        out.params = {k: v.astype(dtype) for k, v in out.params.items()}
        out.velocity = None
        return out

    def descriptor(self) -> dict:
        return {
            "kind": "conv-classifier",
            "num_classes": self.num_classes,
            "image_shape": list(self.image_shape),
            "channels": self.channels,
            "embed_dim": self.embed_dim,
            "head": self.head,
            "activation": "relu",
        }

    # -- forward / backward -------------------------------------------------

    def _patches(self, x: np.ndarray) -> np.ndarray:
        b, h, w = x.shape
        xp = np.pad(x.astype(self.dtype, copy=False), ((0, 0), (1, 1), (1, 1)))
        win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(1, 2))
        return win.reshape(b, h * w, 9)

    def forward(self, x: np.ndarray):
        p = self.params
        b, h, w = x.shape
        c = self.channels
        patches = self._patches(x)
        a1 = patches @ p["conv_W"] + p["conv_b"]
        r1 = np.maximum(a1, 0)
        pooled = r1.reshape(b, h // 2, 2, w // 2, 2, c).mean(axis=(2, 4))
        flat = pooled.reshape(b, -1)
        emb = flat @ p["W1"] + p["b1"]
        cache = {"patches": patches, "a1": a1, "flat": flat, "emb": emb, "shape": (b, h, w)}
        if self.head == "cosine":
            en = np.sqrt((emb * emb).sum(axis=1, keepdims=True) + 1e-12)
            wn = np.sqrt((p["W2"] * p["W2"]).sum(axis=0, keepdims=True) + 1e-12)
            u, v = emb / en, p["W2"] / wn
            cache.update(u=u, v=v, en=en, wn=wn)
            return COSINE_SCALE * (u @ v), cache
        r2 = np.maximum(emb, 0)
        cache["r2"] = r2
        return r2 @ p["W2"] + p["b2"], cache

    def backward(self, cache: dict, dlogits: np.ndarray) -> nn.Params:
        p = self.params
        b, h, w = cache["shape"]
        c = self.channels
        g: nn.Params = {}
        if self.head == "cosine":
            u, v = cache["u"], cache["v"]
            ds = COSINE_SCALE * dlogits
            du = ds @ v.T
            dv = u.T @ ds
            demb = (du - u * (du * u).sum(axis=1, keepdims=True)) / cache["en"]
            g["W2"] = (dv - v * (dv * v).sum(axis=0, keepdims=True)) / cache["wn"]
            g["b2"] = np.zeros_like(p["b2"])
        else:
            g["W2"] = cache["r2"].T @ dlogits
            g["b2"] = dlogits.sum(axis=0)
            demb = (dlogits @ p["W2"].T) * (cache["emb"] > 0)
        g["W1"] = cache["flat"].T @ demb
        g["b1"] = demb.sum(axis=0)
        dpooled = (demb @ p["W1"].T).reshape(b, h // 2, 1, w // 2, 1, c) * 0.25
        dr1 = np.broadcast_to(dpooled, (b, h // 2, 2, w // 2, 2, c)).reshape(b, h * w, c)
        da1 = dr1 * (cache["a1"] > 0)
        g["conv_W"] = np.einsum("bpk,bpc->kc", cache["patches"], da1)
        g["conv_b"] = da1.sum(axis=(0, 1))
        return {k: g[k] for k in p}

    def logits(self, images: np.ndarray, batch: int = 1024) -> np.ndarray:
        images = np.asarray(images)
        if images.ndim == 2:
            images = images[None]
        out = [self.forward(images[i : i + batch])[0] for i in range(0, len(images), batch)]
        return np.concatenate(out) if out else np.zeros((0, self.num_classes), self.dtype)

    def embed(self, images: np.ndarray, batch: int = 1024) -> np.ndarray:
        images = np.asarray(images)
        if images.ndim == 2:
            images = images[None]
        out = [self.forward(images[i : i + batch])[1]["emb"] for i in range(0, len(images), batch)]
        return np.concatenate(out) if out else np.zeros((0, self.embed_dim), self.dtype)

    def loss_and_grads(self, images: np.ndarray, labels: np.ndarray) -> tuple[float, nn.Params]:
        logits, cache = self.forward(images)
        logp = nn.log_softmax(logits)
        n = len(labels)
        loss = float(-logp[np.arange(n), labels].mean())
        dlogits = np.exp(logp)
        dlogits[np.arange(n), labels] -= 1.0
        return loss, self.backward(cache, dlogits / n)

    def save(self, path: str | Path) -> None:
        nn.write_checkpoint(path, CLASSIFIER_MAGIC, self.descriptor(), self.params)

    @classmethod
    def load(cls, path: str | Path) -> "Classifier":
        desc, vec = nn.read_checkpoint(path, CLASSIFIER_MAGIC)
        tmpl = cls.init(
            desc["num_classes"], tuple(desc["image_shape"]), desc["channels"], desc["embed_dim"],
            head=desc.get("head", "linear"),
        )
        return cls(
            nn.unflatten(vec, tmpl.params), tmpl.num_classes, tmpl.image_shape, tmpl.channels, tmpl.embed_dim,
            tmpl.head,
        )


def predict_proba(clf: Classifier, images: np.ndarray) -> np.ndarray:
    """Softmax class probabilities; a single (H, W) image gives a (K,) vector."""
    images = np.asarray(images)
    probs = nn.softmax(clf.logits(images).astype(np.float64))
    return probs[0] if images.ndim == 2 else probs


def true_class_proba(clf: Classifier, data: Dataset) -> np.ndarray:
    if len(data) == 0:
        return np.zeros(0)
    probs = predict_proba(clf, data.images)
    return probs[np.arange(len(data)), data.labels]


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    accuracy: float
    size: int
    lr: float


def train_epochs(
    clf: Classifier, data: Dataset, cfg: TrainConfig, n: int, start_epoch: int = 0, tag: str = "train",
    lr_scale: float = 1.0,
) -> tuple[Classifier, list[EpochRecord]]:
    """Run ``n`` epochs of mini-batch SGD with momentum; returns a new classifier.

    Shuffling for global epoch ``e`` is seeded by ``(cfg.seed, tag, e)`` and
    the learning rate follows ``cfg.lr_at(e)``.
    """
    if len(data) == 0:
        raise ValueError("cannot train on an empty dataset")
    out = clf.copy()
    records: list[EpochRecord] = []
    if n == 0:
        return out, records
    opt = nn.SGDMomentum(out.params, cfg.momentum, cfg.weight_decay)
    if out.velocity is not None:
        opt.velocity = out.velocity
    for e in range(start_epoch, start_epoch + n):
        lr = cfg.lr_at(e) * lr_scale
        order = make_rng(cfg.seed, "shuffle", tag, e).permutation(len(data))
        losses, correct = [], 0
        for s in range(0, len(order), cfg.batch_size):
            idx = order[s : s + cfg.batch_size]
            x, y = data.images[idx], data.labels[idx]
            loss, grads = out.loss_and_grads(x, y)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"classifier loss became {loss} at epoch {e}")
            if lr != 0.0:
                opt.step(out.params, grads, lr)
            losses.append(loss * len(idx))
        preds = out.logits(data.images).argmax(axis=1)
        correct = int((preds == data.labels).sum())
        records.append(EpochRecord(e, float(np.sum(losses) / len(data)), correct / len(data), len(data), lr))
    out.velocity = opt.velocity
    return out, records


def identify_hard(clf: Classifier, data: Dataset, h_hard: float) -> np.ndarray:
    """Indices (canonical order) of samples whose true-class probability is < ``h_hard``."""
    if not (0.0 <= h_hard <= 1.0):
        raise ValueError(f"h_hard must lie in [0, 1], got {h_hard}")
    return hard_by_probability(true_class_proba(clf, data), h_hard)


def hard_by_probability(p_true: np.ndarray, h_hard: float) -> np.ndarray:
    if not (0.0 <= h_hard <= 1.0):
        raise ValueError(f"h_hard must lie in [0, 1], got {h_hard}")
    return np.flatnonzero(np.asarray(p_true) < h_hard)


def identify_tail(data: Dataset, group_of_class: dict[int, str]) -> np.ndarray:
    """Indices of samples from few-group classes (hardness by tail membership)."""
    few = [k for k, g in group_of_class.items() if g == "few"]
    return np.flatnonzero(np.isin(data.labels, few))

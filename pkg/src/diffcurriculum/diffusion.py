"""Conditional noise estimator, classifier-free guidance and image-guided sampling.

Images are denoised directly in pixel space. A generation starts from the
source image noised to step ``start_step(lam, T)`` and walks back to step 0
with either the ancestral (stochastic) update or deterministic DDIM.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol

import numpy as np

from . import nn
from .rng import make_rng
from .schedule import VarianceSchedule, start_step

log = logging.getLogger(__name__)

UNCONDITIONAL = -1
SAMPLERS = ("ancestral", "ddim")
NOISE_MODEL_MAGIC = b"DSNM"


class TrainingDiverged(RuntimeError):
    """Raised when a training loss becomes non-finite."""


class NoisePredictor(Protocol):
    num_classes: int

    def predict(self, z: np.ndarray, t: int | np.ndarray, c: np.ndarray) -> np.ndarray: ...


@dataclass(frozen=True)
class GenerationConfig:
    w: float = 3.0
    lam: float = 0.0
    sampler: str = "ancestral"
    seed: int = 0
    ddim_steps: int = 20
    clamp: bool = True

    def __post_init__(self):
        if self.sampler not in SAMPLERS:
            raise ValueError(f"unknown sampler {self.sampler!r}; expected one of {SAMPLERS}")
        if not (0.0 <= self.lam <= 1.0):
            raise ValueError(f"guidance level must lie in [0, 1], got {self.lam}")


# -- trainable model --------------------------------------------------------


@dataclass
class NoiseModel:
    """MLP noise estimator on top of a Gaussian baseline.

    The prediction is ``gaussian_eps(z_t, t) + mlp(z_t, emb(t), emb(c))`` where
    the baseline is the exact noise predictor for a Gaussian with the
    training-set mean and covariance (a Wiener filter applied in the
    covariance eigenbasis). The time and class embedding
    enter every hidden layer. Condition ids are class indices in
    ``[0, num_classes)`` or ``UNCONDITIONAL`` (last row of the class table).
    """

    params: nn.Params
    num_classes: int
    image_shape: tuple[int, int]
    schedule_triple: tuple[int, float, float]
    hidden: tuple[int, ...] = (256, 256, 256)
    time_dim: int = 32
    class_dim: int = 16
    # Baseline statistics are stored with the parameters but never trained.
    FROZEN = ("pixel_mean", "cov_vecs", "cov_vals")

    def __post_init__(self):
        from .schedule import make_linear_schedule

        self.schedule_triple = tuple(self.schedule_triple)
        self._alpha_bar = make_linear_schedule(*self.schedule_triple).alpha_bar

    @classmethod
    def init(
        cls,
        num_classes: int,
        schedule: VarianceSchedule,
        image_shape: tuple[int, int] = (16, 16),
        hidden: tuple[int, ...] = (256, 256, 256),
        time_dim: int = 32,
        class_dim: int = 16,
        seed: int = 0,
        pixel_mean: np.ndarray | None = None,
        pixel_cov: np.ndarray | None = None,
        dtype=np.float32,
    ) -> "NoiseModel":
        rng = make_rng(seed, "noise-model-init")
        d = int(np.prod(image_shape))
        e = time_dim + class_dim
        params: nn.Params = {"class_emb": rng.normal(0.0, 1.0, size=(num_classes + 1, class_dim))}
        widths = [d + e, *hidden]
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            params[f"W{i}"] = nn.he(rng, a, b)
            if i > 0:
                params[f"U{i}"] = nn.he(rng, e, b)
            params[f"b{i}"] = np.zeros(b)
        params["W_out"] = nn.glorot(rng, widths[-1], d) * 0.1
        params["b_out"] = np.zeros(d)
        params["pixel_mean"] = np.zeros(d) if pixel_mean is None else np.asarray(pixel_mean).reshape(d)
        if pixel_cov is None:
            vals, vecs = np.ones(d), np.eye(d)
        else:
            vals, vecs = np.linalg.eigh(np.asarray(pixel_cov, dtype=np.float64).reshape(d, d))
        params["cov_vecs"] = vecs
        params["cov_vals"] = np.maximum(vals, 0.0)
        params = {k: v.astype(dtype) for k, v in params.items()}
        return cls(params, num_classes, tuple(image_shape), schedule.triple(), tuple(hidden), time_dim, class_dim)

    @property
    def dtype(self):
        return self.params["W0"].dtype

    def trainable(self) -> list[str]:
        return [k for k in self.params if k not in self.FROZEN]

    def descriptor(self) -> dict:
        return {
            "kind": "mlp-noise-model",
            "num_classes": self.num_classes,
            "image_shape": list(self.image_shape),
            "schedule": list(self.schedule_triple),
            "hidden": list(self.hidden),
            "time_dim": self.time_dim,
            "class_dim": self.class_dim,
            "activation": "silu",
        }

    def astype(self, dtype) -> "NoiseModel":
        return NoiseModel(
            {k: v.astype(dtype) for k, v in self.params.items()}, self.num_classes, self.image_shape,
            self.schedule_triple, self.hidden, self.time_dim, self.class_dim,
        )

    def _class_rows(self, c: np.ndarray) -> np.ndarray:
        c = np.asarray(c, dtype=np.int64)
        if np.any((c >= self.num_classes) | (c < UNCONDITIONAL)):
            raise ValueError(f"condition ids must be in [0, {self.num_classes}) or UNCONDITIONAL")
        return np.where(c == UNCONDITIONAL, self.num_classes, c)

    def _baseline(self, x: np.ndarray, t: np.ndarray) -> np.ndarray:
        p = self.params
        ab = self._alpha_bar[t].astype(self.dtype)[:, None]
        coef = np.sqrt(1.0 - ab) / (ab * p["cov_vals"] + 1.0 - ab)
        return (((x - np.sqrt(ab) * p["pixel_mean"]) @ p["cov_vecs"]) * coef) @ p["cov_vecs"].T

    def forward(self, x: np.ndarray, t: np.ndarray, c: np.ndarray):
        """x: (B, D) flattened images. Returns (prediction, cache)."""
        p = self.params
        x = x.astype(self.dtype, copy=False)
        t = np.asarray(t, dtype=np.int64)
        rows = self._class_rows(c)
        emb = np.concatenate(
            [nn.sinusoidal_embedding(t, self.time_dim, dtype=self.dtype), p["class_emb"][rows]], axis=1
        )
        h = np.concatenate([x, emb], axis=1)
        cache = {"rows": rows, "emb": emb, "inputs": [h], "pre": []}
        for i in range(len(self.hidden)):
            a = h @ p[f"W{i}"] + p[f"b{i}"]
            if i > 0:
                a += emb @ p[f"U{i}"]
            h = nn.silu(a)
            cache["pre"].append(a)
            cache["inputs"].append(h)
        out = h @ p["W_out"] + p["b_out"] + self._baseline(x, t)
        return out, cache

    def backward(self, cache: dict, dout: np.ndarray) -> nn.Params:
        """Gradients of the trainable parameters given d(loss)/d(prediction)."""
        p = self.params
        g: nn.Params = {}
        g["W_out"] = cache["inputs"][-1].T @ dout
        g["b_out"] = dout.sum(axis=0)
        dh = dout @ p["W_out"].T
        emb = cache["emb"]
        demb = np.zeros_like(emb)
        for i in reversed(range(len(self.hidden))):
            da = dh * nn.silu_grad(cache["pre"][i])
            g[f"W{i}"] = cache["inputs"][i].T @ da
            g[f"b{i}"] = da.sum(axis=0)
            if i > 0:
                g[f"U{i}"] = emb.T @ da
                demb += da @ p[f"U{i}"].T
            dh = da @ p[f"W{i}"].T
        d = int(np.prod(self.image_shape))
        demb += dh[:, d:]
        g_cls = np.zeros_like(p["class_emb"])
        np.add.at(g_cls, cache["rows"], demb[:, self.time_dim :])
        g["class_emb"] = g_cls
        return {k: g[k] for k in self.trainable()}

    def predict(self, z: np.ndarray, t, c) -> np.ndarray:
        z = np.asarray(z)
        b = z.shape[0]
        t_arr = np.broadcast_to(np.asarray(t, dtype=np.int64), (b,))
        c_arr = np.broadcast_to(np.asarray(c, dtype=np.int64), (b,))
        out, _ = self.forward(z.reshape(b, -1), t_arr, c_arr)
        return out.reshape(z.shape)

    def save(self, path: str | Path) -> None:
        nn.write_checkpoint(path, NOISE_MODEL_MAGIC, self.descriptor(), self.params)

    @classmethod
    def load(cls, path: str | Path) -> "NoiseModel":
        from .schedule import make_linear_schedule

        desc, vec = nn.read_checkpoint(path, NOISE_MODEL_MAGIC)
        tmpl = cls.init(
            desc["num_classes"], make_linear_schedule(*desc["schedule"]), tuple(desc["image_shape"]),
            tuple(desc["hidden"]), desc["time_dim"], desc["class_dim"],
        )
        return cls(
            nn.unflatten(vec, tmpl.params), tmpl.num_classes, tmpl.image_shape, tmpl.schedule_triple,
            tmpl.hidden, tmpl.time_dim, tmpl.class_dim,
        )


@dataclass
class AnalyticGaussianModel:
    """Exact minimum-MSE noise predictor for data ~ N(mu, sigma2 * I).

    eps_hat(z_t, t) = sqrt(1 - ab) * (z_t - sqrt(ab) * mu) / (ab * sigma2 + 1 - ab),
    identical for every condition.
    """

    mu: np.ndarray
    sigma2: float
    schedule: VarianceSchedule
    num_classes: int = 1

    def predict(self, z: np.ndarray, t, c=None) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        ab = self.schedule.alpha_bar[np.asarray(t, dtype=np.int64)]
        ab = np.broadcast_to(ab, (z.shape[0],)).reshape((-1,) + (1,) * (z.ndim - 1))
        mu = self.mu.reshape((1,) + self.mu.shape)
        return np.sqrt(1.0 - ab) * (z - np.sqrt(ab) * mu) / (ab * self.sigma2 + 1.0 - ab)


def analytic_gaussian_model(mu, sigma2: float, schedule: VarianceSchedule) -> AnalyticGaussianModel:
    if sigma2 <= 0:
        raise ValueError("sigma2 must be positive")
    return AnalyticGaussianModel(np.asarray(mu, dtype=np.float64), float(sigma2), schedule)


# -- forward process and update rules ---------------------------------------


def forward_noise(z_real: np.ndarray, t: int, eps: np.ndarray, schedule: VarianceSchedule) -> np.ndarray:
    """sqrt(ab_t) * z_real + sqrt(1 - ab_t) * eps; step 0 returns ``z_real`` itself."""
    z_real = np.asarray(z_real)
    eps = np.asarray(eps)
    if eps.shape != z_real.shape:
        raise ValueError(f"noise shape {eps.shape} does not match image shape {z_real.shape}")
    ab = schedule.alpha_bar_at(t)
    if t == 0:
        return z_real.copy()
    return np.sqrt(ab) * z_real + np.sqrt(1.0 - ab) * eps


def cfg_noise(model: NoisePredictor, z_t: np.ndarray, t, c, w: float) -> np.ndarray:
    """(1 + w) * eps(z_t, t | c) - w * eps(z_t, t)."""
    c = np.asarray(c)
    if np.any(c == UNCONDITIONAL):
        raise ValueError("classifier-free guidance needs a class condition")
    cond = model.predict(z_t, t, c)
    if w == 0:
        return cond
    uncond = model.predict(z_t, t, np.full_like(c, UNCONDITIONAL))
    return (1.0 + w) * cond - w * uncond


def ancestral_step(
    z_t: np.ndarray, eps_hat: np.ndarray, t: int, schedule: VarianceSchedule, eps_prime: np.ndarray
) -> np.ndarray:
    """One stochastic reverse step; the added noise is dropped on the final step t = 1."""
    if t < 1:
        raise ValueError("ancestral_step needs t >= 1")
    a, b, ab = schedule.alpha_at(t), schedule.beta_at(t), schedule.alpha_bar_at(t)
    z_prev = (z_t - (b / np.sqrt(1.0 - ab)) * eps_hat) / np.sqrt(a)
    if t > 1:
        z_prev = z_prev + np.sqrt(b) * eps_prime
    return z_prev


def ddim_step(z_t: np.ndarray, eps_hat: np.ndarray, t: int, t_prev: int, schedule: VarianceSchedule) -> np.ndarray:
    """Deterministic (eta = 0) DDIM jump from ``t`` to ``t_prev``."""
    if t <= t_prev or t_prev < 0:
        raise ValueError(f"ddim_step needs t > t_prev >= 0, got t={t}, t_prev={t_prev}")
    ab, ab_prev = schedule.alpha_bar_at(t), schedule.alpha_bar_at(t_prev)
    x0_hat = (z_t - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)
    if ab_prev == 1.0:
        return x0_hat
    return np.sqrt(ab_prev) * x0_hat + np.sqrt(1.0 - ab_prev) * eps_hat


def ddim_timesteps(t_start: int, T: int, ddim_steps: int) -> list[int]:
    """Uniformly strided descending steps from ``t_start`` to 0 (both included)."""
    n = max(1, int(round(ddim_steps * t_start / T)))
    seq = np.round(np.linspace(t_start, 0, n + 1)).astype(int)
    out: list[int] = []
    for s in seq:
        if not out or s < out[-1]:
            out.append(int(s))
    return out


# -- image-guided generation ------------------------------------------------


def generate_guided_batch(
    model: NoisePredictor,
    z_real: np.ndarray,
    c,
    lam: float,
    w: float,
    seeds,
    schedule: VarianceSchedule,
    sampler: str = "ancestral",
    ddim_steps: int = 20,
    clamp: bool = True,
) -> np.ndarray:
    """Image-guided generation for a batch sharing one guidance level.

    Row ``i`` draws all of its noise from ``default_rng(seeds[i])``: first the
    start noise, then one row per reverse step.
    """
    if sampler not in SAMPLERS:
        raise ValueError(f"unknown sampler {sampler!r}")
    z_real = np.asarray(z_real)
    b = z_real.shape[0]
    c = np.broadcast_to(np.asarray(c, dtype=np.int64), (b,))
    seeds = list(seeds)
    if len(seeds) != b:
        raise ValueError("need one seed per image")
    t0 = start_step(lam, schedule.T)
    if t0 == 0:
        return z_real.copy()

    if sampler == "ancestral":
        steps = list(range(t0, 0, -1))
        n_draws = 1 + len(steps)
    else:
        steps = ddim_timesteps(t0, schedule.T, ddim_steps)
        n_draws = 1
    shape = z_real.shape[1:]
    noise = np.stack(
        [np.random.default_rng(s).standard_normal((n_draws,) + shape) for s in seeds], axis=0
    )
    z = forward_noise(z_real.astype(np.float64), t0, noise[:, 0], schedule)
    if sampler == "ancestral":
        for k, t in enumerate(steps, start=1):
            eps_hat = cfg_noise(model, z, t, c, w)
            z = ancestral_step(z, eps_hat, t, schedule, noise[:, k])
    else:
        for t, t_prev in zip(steps[:-1], steps[1:]):
            eps_hat = cfg_noise(model, z, t, c, w)
            z = ddim_step(z, eps_hat, t, t_prev, schedule)
    if not np.all(np.isfinite(z)):
        raise FloatingPointError("generation produced non-finite pixels")
    if clamp:
        z = np.clip(z, 0.0, 1.0)
    return z.astype(z_real.dtype if np.issubdtype(z_real.dtype, np.floating) else np.float64)


def generate_guided(
    model: NoisePredictor, z_real: np.ndarray, c: int, cfg: GenerationConfig, schedule: VarianceSchedule
) -> np.ndarray:
    """Generate one image interpolating between ``z_real`` and class ``c``."""
    out = generate_guided_batch(
        model, np.asarray(z_real)[None], [c], cfg.lam, cfg.w, [cfg.seed], schedule,
        sampler=cfg.sampler, ddim_steps=cfg.ddim_steps, clamp=cfg.clamp,
    )
    return out[0]


# -- training ---------------------------------------------------------------


@dataclass
class NoiseTrainLog:
    epoch_loss: list[float] = field(default_factory=list)

    @property
    def final_loss(self) -> float:
        return self.epoch_loss[-1] if self.epoch_loss else float("nan")


def train_noise_model(
    images: np.ndarray,
    labels: np.ndarray,
    schedule: VarianceSchedule,
    num_classes: int,
    cond_dropout_p: float = 0.1,
    epochs: int = 200,
    learn_rate: float = 1e-3,
    seed: int = 0,
    batch_size: int = 128,
    hidden: tuple[int, ...] = (256, 256, 256),
    time_dim: int = 32,
    class_dim: int = 16,
    ema_decay: float = 0.999,
    on_batch: Callable[[np.ndarray, np.ndarray, np.ndarray], None] | None = None,
) -> tuple[NoiseModel, NoiseTrainLog]:
    """Fit the noise estimator by noise-regression MSE with condition dropout.

    Steps are drawn uniformly from ``1..T``. Returns the EMA of the weights
    together with the per-epoch mean loss.
    """
    images = np.asarray(images)
    labels = np.asarray(labels, dtype=np.int64)
    n = images.shape[0]
    if n == 0:
        raise ValueError("empty training set")
    if not (0.0 <= cond_dropout_p < 1.0):
        raise ValueError("cond_dropout_p must lie in [0, 1)")
    flat = images.reshape(n, -1).astype(np.float64)
    model = NoiseModel.init(
        num_classes, schedule, images.shape[1:], hidden, time_dim, class_dim, seed=seed,
        pixel_mean=flat.mean(axis=0), pixel_cov=np.cov(flat, rowvar=False) + 1e-4 * np.eye(flat.shape[1]),
    )
    trainable = {k: model.params[k] for k in model.trainable()}
    ema = nn.copy_params(model.params)
    opt = nn.Adam(trainable)
    rng = make_rng(seed, "noise-model-train")
    x_all = images.reshape(n, -1).astype(np.float32)
    sqrt_ab = np.sqrt(schedule.alpha_bar).astype(np.float32)
    sqrt_1mab = np.sqrt(1.0 - schedule.alpha_bar).astype(np.float32)
    steps_per_epoch = max(1, -(-n // batch_size))
    total = epochs * steps_per_epoch
    log_ = NoiseTrainLog()
    step = 0
    for epoch in range(epochs):
        order = rng.permutation(n)
        losses = []
        for s in range(steps_per_epoch):
            idx = order[s * batch_size : (s + 1) * batch_size]
            x0 = x_all[idx]
            b = x0.shape[0]
            t = rng.integers(1, schedule.T + 1, size=b)
            eps = rng.standard_normal(x0.shape).astype(np.float32)
            c = labels[idx].copy()
            drop = rng.random(b) < cond_dropout_p
            c[drop] = UNCONDITIONAL
            if on_batch is not None:
                on_batch(x0, t, c)
            xt = sqrt_ab[t, None] * x0 + sqrt_1mab[t, None] * eps
            pred, cache = model.forward(xt, t, c)
            diff = pred - eps
            loss = float(np.mean(diff * diff))
            if not np.isfinite(loss):
                raise TrainingDiverged(f"noise-model loss became {loss} at epoch {epoch}, batch {s}")
            grads = model.backward(cache, (2.0 / diff.size) * diff)
            lr = learn_rate * (0.1 + 0.9 * 0.5 * (1.0 + np.cos(np.pi * step / total)))
            opt.step(model.params, grads, lr)
            decay = min(ema_decay, (1.0 + step) / (10.0 + step))
            for k, v in trainable.items():
                ema[k] *= decay
                ema[k] += (1.0 - decay) * v
            losses.append(loss)
            step += 1
        log_.epoch_loss.append(float(np.mean(losses)))
    final = NoiseModel(ema, num_classes, model.image_shape, model.schedule_triple, model.hidden, time_dim, class_dim)
    return final, log_

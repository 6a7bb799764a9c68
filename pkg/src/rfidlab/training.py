"""Training loops for the nominal/robust embedders and the toy generator."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import ImageBatch
from .models import (Discriminator, MiniEmbedder, MiniStyleGen, ModelCheckpoint,
                     compute_w_bar, generate, to_checkpoint)

log = logging.getLogger(__name__)

# L2 radii (inputs in [0, 1]) for the two robust embedders, in a 1:2 ratio. Toy
# classes sit about 15 apart in L2, so radii near half that leave nothing to learn.
KAPPA_PRESETS = {"k64": 1.5, "k128": 3.0}


class TrainingError(Exception):
    pass


class TrainingDivergedError(TrainingError, FloatingPointError):
    def __init__(self, epoch: int, what: str = "loss"):
        self.epoch = epoch
        super().__init__(f"training diverged: non-finite {what} in epoch {epoch}")


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    lr: float = 0.02
    lr_decay: float = 0.1
    lr_decay_every: Optional[int] = None  # None: every ceil(epochs / 3) epochs
    momentum: float = 0.9
    weight_decay: float = 0.0
    kappa: float = 0.0
    inner_steps: int = 2
    kappa_warmup: Optional[int] = None  # epochs of linear kappa ramp; None: ceil(epochs / 3)
    grad_clip: Optional[float] = 2.0  # global L2 norm cap on each update's gradient
    seed: int = 0
    widths: tuple = (8, 16, 32)
    pool: str = "max"

    def __post_init__(self):
        self.widths = tuple(self.widths)
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.kappa < 0:
            raise ValueError("kappa must be >= 0")
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must lie in (0, 1]")
        if self.batch_size < 1 or self.inner_steps < 1:
            raise ValueError("batch_size and inner_steps must be >= 1")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ValueError("grad_clip must be > 0")
        if self.kappa_warmup is not None and self.kappa_warmup < 0:
            raise ValueError("kappa_warmup must be >= 0")

    @property
    def decay_every(self) -> int:
        return self.lr_decay_every or math.ceil(self.epochs / 3)

    def kappa_at(self, progress: float) -> float:
        """Adversary radius after ``progress`` epochs (fractional) of training."""
        warm = self.decay_every if self.kappa_warmup is None else self.kappa_warmup
        if warm == 0:
            return self.kappa
        return self.kappa * min(1.0, progress / warm)

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.lr_decay ** (epoch // self.decay_every)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d


@dataclass
class GanConfig:
    iterations: int = 1500
    batch_size: int = 64
    lr_g: float = 2e-3
    lr_d: float = 2e-3
    beta1: float = 0.5
    beta2: float = 0.99
    seed: int = 0
    gen_widths: tuple = (32, 16, 8)
    disc_widths: tuple = (8, 16, 32)
    w_bar_samples: int = 4096
    fid_samples: int = 4096

    def __post_init__(self):
        self.gen_widths = tuple(self.gen_widths)
        self.disc_widths = tuple(self.disc_widths)
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["gen_widths"] = list(self.gen_widths)
        d["disc_widths"] = list(self.disc_widths)
        return d


PRESETS = {
    "desk": TrainConfig(),
    "tiny": TrainConfig(epochs=1, batch_size=32),
}
GAN_PRESETS = {
    "desk": GanConfig(),
    "tiny": GanConfig(iterations=5, batch_size=16, w_bar_samples=256, fid_samples=64),
}


# -- optimisers ------------------------------------------------------------------

class SGD:
    def __init__(self, params, lr: float, momentum: float = 0.0, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._vel = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for p, v in zip(self.params, self._vel):
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data if self.weight_decay else p.grad
            v *= self.momentum
            v += g
            p.data -= self.lr * v


class Adam:
    def __init__(self, params, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]
        self._t = 0

    def step(self) -> None:
        self._t += 1
        c1 = 1 - self.beta1 ** self._t
        c2 = 1 - self.beta2 ** self._t
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                continue
            m *= self.beta1
            m += (1 - self.beta1) * p.grad
            v *= self.beta2
            v += (1 - self.beta2) * p.grad * p.grad
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


def clip_grad_norm(params, max_norm: float) -> float:
    """Rescale gradients in place so their joint L2 norm is at most ``max_norm``."""
    grads = [p.grad for p in params if p.grad is not None]
    total = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads))
    if total > max_norm:
        for g in grads:
            g *= max_norm / total
    return total


# -- L2 adversary ---------------------------------------------------------------------

def project_l2(v: np.ndarray, kappa: float) -> np.ndarray:
    """Scale each item (first axis) of ``v`` into the L2 ball of radius ``kappa``."""
    flat = v.reshape(len(v), -1)
    norms = np.sqrt((flat.astype(np.float64) ** 2).sum(axis=1))
    scale = np.minimum(1.0, kappa / np.maximum(norms, 1e-30))
    return (flat * scale[:, None]).reshape(v.shape).astype(v.dtype)


def l2_pgd(model: MiniEmbedder, x: np.ndarray, y: np.ndarray, kappa: float, steps: int,
           step_size: Optional[float] = None, rng: Optional[np.random.Generator] = None
           ) -> np.ndarray:
    """Ascend the cross-entropy within ``||delta||_2 <= kappa``.

    With ``rng`` the start is Gaussian noise, otherwise zero. Adversarial
    inputs are clipped to [0, 1] before every evaluation.
    """
    step_size = kappa if step_size is None else step_size
    if rng is not None:
        sd = 0.5 * kappa / math.sqrt(x[0].size)
        delta = project_l2(rng.normal(0.0, sd, size=x.shape).astype(x.dtype), kappa)
    else:
        delta = np.zeros_like(x)
    with model.frozen():
        for _ in range(steps):
            xa = Tensor(np.clip(x + delta, 0.0, 1.0), requires_grad=True)
            _, logits = model.forward(xa)
            ad.backward(ad.cross_entropy(logits, y, reduction="mean"))
            g = xa.grad.reshape(len(x), -1)
            gn = np.sqrt((g.astype(np.float64) ** 2).sum(axis=1))
            unit = g / np.maximum(gn, 1e-30)[:, None]
            delta = project_l2(delta + step_size * unit.reshape(x.shape).astype(x.dtype), kappa)
    return delta


# -- embedder training ----------------------------------------------------------------

def _predict(model: MiniEmbedder, x: np.ndarray) -> np.ndarray:
    with ad.no_grad():
        return model.forward(Tensor(x))[1].data.argmax(axis=1)


def evaluate_accuracy(model: MiniEmbedder, data: ImageBatch, kappa: Optional[float] = None,
                      steps: int = 10, batch_size: int = 256) -> float:
    """Fraction classified correctly; under ``kappa`` an item must also survive L2 PGD.

    The adversary may always keep delta = 0, so an item counts as robustly
    correct only when both its clean and attacked versions are correct.
    """
    if data.labels is None:
        raise ValueError("evaluate_accuracy needs labelled data")
    if len(data) == 0:
        return 0.0
    correct = 0
    for i in range(0, len(data), batch_size):
        x = data.images[i:i + batch_size]
        y = data.labels[i:i + batch_size]
        ok = _predict(model, x) == y
        if kappa:
            delta = l2_pgd(model, x, y, kappa, steps, step_size=2.5 * kappa / steps)
            ok &= _predict(model, np.clip(x + delta, 0.0, 1.0)) == y
        correct += int(ok.sum())
    return correct / len(data)


def _fit(data: ImageBatch, cfg: TrainConfig, eval_data: Optional[ImageBatch]) -> MiniEmbedder:
    if data.labels is None:
        raise ValueError("training data must be labelled")
    rng = np.random.default_rng(cfg.seed)
    model = MiniEmbedder(widths=cfg.widths, pool=cfg.pool, n_classes=int(data.labels.max()) + 1, seed=cfg.seed)
    opt = SGD(model.parameters(), cfg.lr, cfg.momentum, cfg.weight_decay)
    history = []
    n = len(data)
    n_batches = math.ceil(n / cfg.batch_size)
    for epoch in range(cfg.epochs):
        opt.lr = cfg.lr_at(epoch)
        order = rng.permutation(n)
        total, hits = 0.0, 0
        for i in range(0, n, cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            x, y = data.images[idx], data.labels[idx]
            if cfg.kappa > 0:
                kappa = cfg.kappa_at(epoch + (i // cfg.batch_size + 1) / n_batches)
                delta = l2_pgd(model, x, y, kappa, cfg.inner_steps, rng=rng)
                x = np.clip(x + delta, 0.0, 1.0)
            model.zero_grad()
            _, logits = model.forward(Tensor(x))
            loss = ad.cross_entropy(logits, y)
            if not np.isfinite(loss.data):
                ad.reset_tape()
                raise TrainingDivergedError(epoch)
            ad.backward(loss)
            if cfg.grad_clip is not None:
                clip_grad_norm(opt.params, cfg.grad_clip)
            opt.step()
            total += float(loss.data) * len(idx)
            hits += int((logits.data.argmax(axis=1) == y).sum())
        row = {"epoch": epoch, "lr": opt.lr, "loss": total / n, "train_acc": hits / n}
        if eval_data is not None:
            row["eval_acc"] = evaluate_accuracy(model, eval_data)
        history.append(row)
        log.info("epoch %d %s", epoch, row)
    model.provenance = {
        "training": "adversarial" if cfg.kappa > 0 else "nominal",
        "kappa": float(cfg.kappa),
        "epochs": cfg.epochs,
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "history": history,
    }
    if eval_data is not None:
        model.provenance["clean_accuracy"] = history[-1]["eval_acc"]
    return model


def train_nominal(data: ImageBatch, cfg: TrainConfig = TrainConfig(),
                  eval_data: Optional[ImageBatch] = None) -> ModelCheckpoint:
    """Plain cross-entropy training on clean images."""
    if cfg.kappa != 0:
        raise ValueError("train_nominal requires kappa = 0")
    return to_checkpoint(_fit(data, cfg, eval_data))


def train_adversarial(data: ImageBatch, cfg: TrainConfig,
                      eval_data: Optional[ImageBatch] = None) -> ModelCheckpoint:
    """Min-max training against a few-step L2 PGD adversary of radius ``cfg.kappa``."""
    if cfg.kappa <= 0:
        raise ValueError("train_adversarial requires kappa > 0")
    return to_checkpoint(_fit(data, cfg, eval_data))


# -- generator training ------------------------------------------------------------------

def _softplus_mean(t: Tensor) -> Tensor:
    return ad.mean(ad.softplus(t))


def train_generator(data: ImageBatch, cfg: GanConfig = GanConfig(),
                    embedder: Optional[MiniEmbedder] = None) -> ModelCheckpoint:
    """Non-saturating GAN with alternating 1:1 updates.

    After training, ``w_bar`` is estimated from ``cfg.w_bar_samples`` latents.
    If ``embedder`` is given, FID between generated and real samples is
    recorded in the provenance.
    """
    rng = np.random.default_rng(cfg.seed)
    gen = MiniStyleGen(widths=cfg.gen_widths, seed=cfg.seed)
    disc = Discriminator(widths=cfg.disc_widths, seed=cfg.seed + 1)
    opt_g = Adam(gen.parameters(), cfg.lr_g, cfg.beta1, cfg.beta2)
    opt_d = Adam(disc.parameters(), cfg.lr_d, cfg.beta1, cfg.beta2)
    history = []
    n, B = len(data), cfg.batch_size
    for it in range(cfg.iterations):
        real = data.images[rng.integers(0, n, size=B)]
        z = rng.standard_normal((B, gen.z_dim)).astype(np.float32)
        with ad.no_grad():
            fake = gen.forward(Tensor(z)).data
        disc.zero_grad()
        scores = disc.forward(Tensor(np.concatenate([real, fake])))
        sign = np.concatenate([-np.ones(B), np.ones(B)]).astype(np.float32)
        d_loss = _softplus_mean(ad.mul(scores, sign))
        ad.backward(d_loss)
        opt_d.step()

        gen.zero_grad()
        z = rng.standard_normal((B, gen.z_dim)).astype(np.float32)
        with disc.frozen():
            g_loss = _softplus_mean(ad.neg(disc.forward(gen.forward(Tensor(z)))))
            ad.backward(g_loss)
        opt_g.step()
        if not (np.isfinite(d_loss.data) and np.isfinite(g_loss.data)):
            raise TrainingDivergedError(it, "GAN loss")
        if it % 100 == 0 or it == cfg.iterations - 1:
            history.append({"iteration": it, "d_loss": float(d_loss.data),
                            "g_loss": float(g_loss.data)})
            log.info("gan it %d d=%.4f g=%.4f", it, float(d_loss.data), float(g_loss.data))

    compute_w_bar(gen, cfg.w_bar_samples, seed=cfg.seed + 2)
    prov = {"training": "gan", "kappa": 0.0, "epochs": cfg.iterations, "seed": cfg.seed,
            "config": cfg.to_dict(), "history": history, "warnings": []}
    probe = generate(gen, rng.standard_normal((256, gen.z_dim)).astype(np.float32))
    if float(probe.images.std(axis=0).mean()) < 1e-3:
        prov["warnings"].append("mode collapse: generated batch std < 1e-3")
    if embedder is not None:
        from .metrics import fid
        m = min(cfg.fid_samples, n)
        zf = np.random.default_rng(cfg.seed + 3).standard_normal((m, gen.z_dim))
        prov["fid"] = fid(embedder, data.subset(np.arange(m)),
                          generate(gen, zf.astype(np.float32))).value
    gen.provenance = prov
    return to_checkpoint(gen)

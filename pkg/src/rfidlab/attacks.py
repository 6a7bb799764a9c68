"""Pixel- and latent-space attacks on IS and FID.

Bounded attacks (``min-is``, ``max-fid``) run signed-gradient PGD inside an
L-infinity ball around real images. Unbounded attacks synthesize images from
noise (``max-is``, ``min-fid``) or perturb generator latents (``latent-z``,
``latent-w``) with plain gradient steps.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import IMAGE_SHAPE, ImageBatch, random_noise_images, wasserstein_1d, write_tensor
from .metrics import MetricReport, fid, inception_score
from .models import MiniEmbedder, MiniStyleGen

BOUNDED = ("min-is", "max-fid")
SYNTHESIS = ("max-is", "min-fid")
LATENT = ("latent-z", "latent-w")
KINDS = BOUNDED + SYNTHESIS + LATENT
INITS = ("zero", "uniform-random", "gaussian-random")

EPS_PRESETS = {"low": 0.01, "mid": 0.02, "high": 0.03}

# kind -> (init, steps, step size); None means 2.5 * eps / steps
_DEFAULTS = {
    "min-is": ("zero", 100, None),
    "max-fid": ("uniform-random", 100, None),
    "max-is": ("uniform-random", 100, 0.01),
    "min-fid": ("uniform-random", 100, 0.01),
    "latent-z": ("zero", 50, 0.01),
    "latent-w": ("zero", 20, 0.3),
}
CHUNK = 256


class AttackError(ValueError):
    pass


@dataclass(frozen=True)
class AttackSpec:
    kind: str
    eps: Optional[float] = None
    steps: Optional[int] = None
    step_size: Optional[float] = None
    init: Optional[str] = None
    seed: int = 0
    clamp_pixels: bool = True
    # min-is: re-pick the target label every step (False: fix it at the start)
    recompute_target: bool = True

    def __post_init__(self):
        if self.kind not in KINDS:
            raise AttackError(f"unknown attack kind {self.kind!r}; expected one of {KINDS}")
        init, steps, step = _DEFAULTS[self.kind]
        if self.bounded:
            if self.eps is None or not np.isfinite(self.eps) or self.eps < 0:
                raise AttackError(f"{self.kind} needs a finite budget eps >= 0")
            if step is None and self.step_size is None:
                steps_ = self.steps if self.steps is not None else steps
                step = 2.5 * self.eps / max(steps_, 1) if self.eps > 0 else 1.0
        elif self.eps is not None:
            object.__setattr__(self, "eps", None)
        for name, default in (("init", init), ("steps", steps), ("step_size", step)):
            if getattr(self, name) is None:
                object.__setattr__(self, name, default)
        if self.init not in INITS:
            raise AttackError(f"unknown init {self.init!r}")
        if self.steps < 0:
            raise AttackError("steps must be >= 0")
        if not self.step_size > 0:
            raise AttackError("step_size must be > 0")

    @property
    def bounded(self) -> bool:
        return self.kind in BOUNDED

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("kind", "eps", "steps", "step_size", "init",
                                              "seed", "clamp_pixels", "recompute_target")}


@dataclass
class AttackResult:
    spec: AttackSpec
    adversarial: np.ndarray
    final_loss: np.ndarray
    before: MetricReport
    after: MetricReport
    magnitude: dict
    trace: list = field(default_factory=list)
    # +1 if the attack maximises its loss, -1 if it minimises
    direction: int = 1
    images: Optional[np.ndarray] = None
    steps_run: int = 0

    @property
    def increase(self) -> float:
        return self.after.value - self.before.value

    def monotone_fraction(self) -> float:
        """Share of steps whose loss moved in the optimisation direction (ties count)."""
        if len(self.trace) < 2:
            return 1.0
        d = np.diff(np.asarray(self.trace)) * self.direction
        return float((d >= 0).mean())

    def summary(self) -> dict:
        return {
            "spec": self.spec.to_dict(),
            "before": self.before.to_dict(),
            "after": self.after.to_dict(),
            "magnitude": self.magnitude,
            "mean_final_loss": float(np.mean(self.final_loss)) if len(self.final_loss) else 0.0,
            "steps_run": self.steps_run,
            "trace": [float(v) for v in self.trace],
        }

    def save(self, prefix: Union[str, Path]) -> list[Path]:
        """Write ``prefix.json`` plus tensor payloads; returns the paths written."""
        prefix = Path(prefix)
        paths = [prefix.with_name(prefix.name + ".json")]
        paths[0].write_text(json.dumps(self.summary(), sort_keys=True, indent=1) + "\n")
        payloads = {"adversarial": self.adversarial, "final_loss": self.final_loss}
        if self.images is not None:
            payloads["images"] = self.images
        for name, arr in payloads.items():
            p = prefix.with_name(f"{prefix.name}.{name}.tnsr")
            write_tensor(p, np.ascontiguousarray(arr))
            paths.append(p)
        return paths


# -- primitives -----------------------------------------------------------------------

def pgd_linf_step(delta: np.ndarray, grad: np.ndarray, step_size: float, eps: float,
                  x: Optional[np.ndarray] = None) -> np.ndarray:
    """One signed-gradient ascent step projected onto ``||delta||_inf <= eps``.

    If ``x`` is given the step is further projected so ``x + delta`` stays in [0, 1].
    """
    delta = np.asarray(delta)
    grad = np.asarray(grad)
    if delta.shape != grad.shape:
        raise ad.ShapeError("pgd_linf_step", delta.shape, grad.shape)
    out = np.clip(delta + step_size * np.sign(grad), -eps, eps)
    if x is not None:
        out = np.clip(x + out, 0.0, 1.0) - x
    return out.astype(delta.dtype)


def magnitude_summary(clean: np.ndarray, perturbed: np.ndarray) -> dict:
    d = (perturbed.astype(np.float64) - clean).reshape(len(clean), -1)
    return {
        "linf": float(np.abs(d).max(initial=0.0)),
        "l2": float(np.sqrt((d ** 2).sum(axis=1)).mean()) if len(d) else 0.0,
        "w1": wasserstein_1d(clean.reshape(-1), perturbed.reshape(-1)),
    }


def pair_targets(n: int, pool: int, seed: int) -> np.ndarray:
    """Distinct real-target indices for ``n`` items, drawn without replacement."""
    if n > pool:
        raise AttackError(f"cannot pair {n} items with {pool} distinct real images")
    return np.random.default_rng([seed, 1]).choice(pool, size=n, replace=False)


def _init(spec: AttackSpec, shape, rng, eps: float = 1.0) -> np.ndarray:
    if spec.init == "zero":
        return np.zeros(shape, np.float32)
    if spec.init == "uniform-random":
        return rng.uniform(-eps, eps, size=shape).astype(np.float32)
    return np.clip(rng.normal(0.0, eps / 2, size=shape), -eps, eps).astype(np.float32)


def _chunks(n: int):
    for i in range(0, n, CHUNK):
        yield slice(i, min(i + CHUNK, n))


def _embed_np(embedder: MiniEmbedder, x: np.ndarray) -> np.ndarray:
    with ad.no_grad():
        return np.concatenate([embedder.features(Tensor(x[s])).data for s in _chunks(len(x))])


def _value_and_grad(loss_fn, x: np.ndarray):
    """Per-item losses and d(sum of losses)/dx; items never interact.

    ``loss_fn`` returns either the per-item loss Tensor or a pair
    ``(values, surrogate)`` whose surrogate gradient points the same way.
    """
    xt = Tensor(x, requires_grad=True)
    out = loss_fn(xt)
    values, surrogate = out if isinstance(out, tuple) else (out.data, out)
    ad.backward(ad.sum(surrogate))
    return np.asarray(values, dtype=np.float64), xt.grad


def _values(out) -> np.ndarray:
    return np.asarray(out[0] if isinstance(out, tuple) else out.data, dtype=np.float64)


def _ce_direction(logits: Tensor, target: np.ndarray):
    """Cross-entropy per item plus a linear surrogate with a rescaled gradient.

    ``dCE/dlogits = softmax - onehot`` divided by ``1 - p_target`` is -1 on the
    target and the softmax over the other classes elsewhere. Computed that way
    it never underflows, so confident items whose float32 softmax saturates
    still get an ascent direction. The per-item scale leaves signs unchanged.
    """
    z = logits.data.astype(np.float64)
    logp = ad._log_softmax_np(z, axis=1)
    rows = np.arange(len(z))
    ce = -logp[rows, target]
    rest = z.copy()
    rest[rows, target] = -np.inf
    g = np.exp(ad._log_softmax_np(rest, axis=1))
    g[rows, target] = -1.0
    return ce, ad.sum(ad.mul(logits, g.astype(logits.dtype)), axis=1)


def _run(steps: int, n: int, fn):
    """Call ``fn(slice)`` -> per-item losses for every chunk, ``steps`` times; trace means."""
    trace = []
    losses = np.zeros(n)
    for _ in range(steps):
        for s in _chunks(n):
            losses[s] = fn(s)
        trace.append(float(losses.mean()))
    return losses, trace


def _no_op(spec, x, before, direction, images=None) -> AttackResult:
    return AttackResult(spec, x.copy(), np.zeros(len(x)), before, replace(before),
                        magnitude_summary(x, x), [], direction, images, 0)


# -- bounded pixel attacks ----------------------------------------------------------------

def _pgd(spec: AttackSpec, x: np.ndarray, loss_fn) -> tuple[np.ndarray, np.ndarray, list]:
    """Signed-gradient ascent; returns the best iterate seen for each item."""
    rng = np.random.default_rng(spec.seed)
    delta = _init(spec, x.shape, rng, spec.eps)
    if spec.clamp_pixels:
        delta = np.clip(x + delta, 0.0, 1.0) - x
    best = delta.copy()
    best_loss = np.full(len(x), -np.inf)

    def keep(s, val):
        better = val > best_loss[s]
        best_loss[s] = np.where(better, val, best_loss[s])
        best[s][better] = delta[s][better]

    def step(s):
        val, g = _value_and_grad(lambda t: loss_fn(t, s), x[s] + delta[s])
        keep(s, val)
        delta[s] = pgd_linf_step(delta[s], g, spec.step_size, spec.eps,
                                 x[s] if spec.clamp_pixels else None)
        return val

    _, trace = _run(spec.steps, len(x), step)
    with ad.no_grad():
        for s in _chunks(len(x)):
            keep(s, _values(loss_fn(Tensor(x[s] + delta[s]), s)))
    return x + best, best_loss, trace


def attack_min_is(embedder: MiniEmbedder, real: ImageBatch, spec: AttackSpec,
                  config_digest: str = "", n_splits: int = 10) -> AttackResult:
    """Push every image's posterior toward uniform by ascending the cross-entropy
    of its own predicted label inside the eps ball."""
    if spec.kind != "min-is":
        raise AttackError(f"attack_min_is got a {spec.kind} spec")
    x = real.images
    before = inception_score(embedder, real, n_splits, config_digest, spec.seed)
    if spec.eps == 0 or spec.steps == 0:
        return _no_op(spec, x, before, 1)
    targets = {}

    def loss(t, s):
        key = (s.start, s.stop)
        if spec.recompute_target or key not in targets:
            with ad.no_grad():
                targets[key] = embedder.forward(Tensor(t.data))[1].data.argmax(axis=1)
        return _ce_direction(embedder.forward(t)[1], targets[key])

    with embedder.frozen():
        adv, losses, trace = _pgd(spec, x, loss)
    after = inception_score(embedder, ImageBatch(adv, real.labels), n_splits, config_digest,
                            spec.seed)
    return AttackResult(spec, adv, losses, before, after, magnitude_summary(x, adv), trace, 1)


def attack_max_fid(embedder: MiniEmbedder, real: ImageBatch, spec: AttackSpec,
                   reference: Optional[ImageBatch] = None, config_digest: str = ""
                   ) -> AttackResult:
    """Maximise ``||f(x) - f(x + delta)||_2`` per image inside the eps ball.

    FID is measured against ``reference`` (default: ``real`` itself, so the
    clean FID is 0).
    """
    if spec.kind != "max-fid":
        raise AttackError(f"attack_max_fid got a {spec.kind} spec")
    x = real.images
    reference = real if reference is None else reference
    before = fid(embedder, reference, real, config_digest, spec.seed)
    if spec.eps == 0 or spec.steps == 0:
        return _no_op(spec, x, before, 1)
    clean = _embed_np(embedder, x)

    def loss(t, s):
        return ad.l2_norm(ad.sub(embedder.features(t), clean[s]), axis=1)

    with embedder.frozen():
        adv, losses, trace = _pgd(spec, x, loss)
    after = fid(embedder, reference, ImageBatch(adv, real.labels), config_digest, spec.seed)
    return AttackResult(spec, adv, losses, before, after, magnitude_summary(x, adv), trace, 1)


# -- unbounded synthesis --------------------------------------------------------------------

def _descend_pixels(spec: AttackSpec, x0: np.ndarray, loss_fn):
    x = x0.copy()

    def step(s):
        val, g = _value_and_grad(lambda t: loss_fn(t, s), x[s])
        x[s] = np.clip(x[s] - spec.step_size * g, 0.0, 1.0)
        return val

    losses, trace = _run(spec.steps, len(x), step)
    return x, losses, trace


def attack_max_is(embedder: MiniEmbedder, n: int, spec: AttackSpec, config_digest: str = "",
                  n_splits: int = 10) -> AttackResult:
    """Synthesize ``n`` images from uniform noise, each driven toward a uniformly drawn label."""
    if spec.kind != "max-is":
        raise AttackError(f"attack_max_is got a {spec.kind} spec")
    if n < n_splits:
        raise AttackError(f"need at least {n_splits} images, got {n}")
    noise = random_noise_images(n, seed=spec.seed)
    targets = np.random.default_rng([spec.seed, 2]).integers(0, embedder.n_classes, size=n)
    before = inception_score(embedder, noise, n_splits, config_digest, spec.seed)

    def loss(t, s):
        return ad.cross_entropy(embedder.forward(t)[1], targets[s], reduction="none")

    with embedder.frozen():
        x, losses, trace = _descend_pixels(spec, noise.images, loss)
    after = inception_score(embedder, ImageBatch(x, targets), n_splits, config_digest, spec.seed)
    return AttackResult(spec, x, losses, before, after, magnitude_summary(noise.images, x),
                        trace, -1, steps_run=spec.steps)


def attack_min_fid(embedder: MiniEmbedder, real: ImageBatch, spec: AttackSpec,
                   n: Optional[int] = None, config_digest: str = "") -> AttackResult:
    """Synthesize images from noise whose embeddings match distinct real targets."""
    if spec.kind != "min-fid":
        raise AttackError(f"attack_min_fid got a {spec.kind} spec")
    n = len(real) if n is None else n
    idx = pair_targets(n, len(real), spec.seed)
    target = _embed_np(embedder, real.images[idx])
    noise = random_noise_images(n, seed=spec.seed)
    before = fid(embedder, real, noise, config_digest, spec.seed)

    def loss(t, s):
        return ad.l2_norm(ad.sub(embedder.features(t), target[s]), axis=1)

    with embedder.frozen():
        x, losses, trace = _descend_pixels(spec, noise.images, loss)
    after = fid(embedder, real, ImageBatch(x), config_digest, spec.seed)
    return AttackResult(spec, x, losses, before, after, magnitude_summary(noise.images, x),
                        trace, -1, steps_run=spec.steps)


# -- latent attacks -------------------------------------------------------------------------

def _latent_attack(embedder, gen, real, alpha, spec, latents, synth, config_digest, n):
    idx = pair_targets(n, len(real), spec.seed)
    target = _embed_np(embedder, real.images[idx])

    def render(v):
        with ad.no_grad():
            return np.concatenate([synth(Tensor(v[s])).data for s in _chunks(len(v))])

    clean_images = render(latents)
    before = fid(embedder, real, clean_images, config_digest, spec.seed)
    delta = _init(spec, latents.shape, np.random.default_rng([spec.seed, 3]), 1.0) \
        if spec.init != "zero" else np.zeros_like(latents)

    def step(s):
        def loss(v):
            return ad.l2_norm(ad.sub(embedder.features(synth(v)), target[s]), axis=1)
        val, g = _value_and_grad(loss, latents[s] + delta[s])
        delta[s] += spec.step_size * g
        ad.check_finite(delta[s], "latent perturbation")
        return val

    with embedder.frozen(), gen.frozen():
        losses, trace = _run(spec.steps, n, step)
    adv = latents + delta
    images = render(adv) if spec.steps else clean_images
    after = fid(embedder, real, images, config_digest, spec.seed)
    return AttackResult(spec, adv, losses, before, after, magnitude_summary(latents, adv),
                        trace, 1, images, spec.steps)


def _latents(gen: MiniStyleGen, n: int, seed: int, z=None) -> np.ndarray:
    if z is not None:
        z = np.asarray(z, np.float32)
        if z.shape != (n, gen.z_dim):
            raise AttackError(f"z must have shape ({n}, {gen.z_dim}), got {z.shape}")
        return z
    return np.random.default_rng([seed, 4]).standard_normal((n, gen.z_dim)).astype(np.float32)


def attack_latent_z(embedder: MiniEmbedder, gen: MiniStyleGen, real: ImageBatch, alpha: float,
                    spec: AttackSpec, n: Optional[int] = None, z=None, config_digest: str = ""
                    ) -> AttackResult:
    """Gradient ascent on ``||f(G(z + delta)) - f(x_r)||_2`` through the frozen generator."""
    if spec.kind != "latent-z":
        raise AttackError(f"attack_latent_z got a {spec.kind} spec")
    n = len(real) if n is None else n
    zs = _latents(gen, n, spec.seed, z)
    return _latent_attack(embedder, gen, real, alpha, spec, zs,
                          lambda t: gen.forward(t, alpha), config_digest, n)


def attack_latent_w(embedder: MiniEmbedder, gen: MiniStyleGen, real: ImageBatch, alpha: float,
                    spec: AttackSpec, n: Optional[int] = None, z=None, config_digest: str = ""
                    ) -> AttackResult:
    """As :func:`attack_latent_z` but perturbing the truncated intermediate latent w."""
    if spec.kind != "latent-w":
        raise AttackError(f"attack_latent_w got a {spec.kind} spec")
    n = len(real) if n is None else n
    zs = _latents(gen, n, spec.seed, z)
    ws = []
    with ad.no_grad():
        for s in _chunks(n):
            ws.append(gen.truncate(gen.mapping(Tensor(zs[s])), alpha).data)
    return _latent_attack(embedder, gen, real, alpha, spec, np.concatenate(ws), gen.synthesis,
                          config_digest, n)


def run_attack(spec: AttackSpec, embedder: MiniEmbedder, real: Optional[ImageBatch] = None,
               gen: Optional[MiniStyleGen] = None, alpha: float = 1.0, n: Optional[int] = None,
               reference: Optional[ImageBatch] = None, config_digest: str = "") -> AttackResult:
    """Dispatch on ``spec.kind``."""
    if spec.kind in LATENT and gen is None:
        raise AttackError(f"{spec.kind} needs a generator")
    if spec.kind != "max-is" and real is None:
        raise AttackError(f"{spec.kind} needs real images")
    if spec.kind == "min-is":
        return attack_min_is(embedder, real, spec, config_digest)
    if spec.kind == "max-fid":
        return attack_max_fid(embedder, real, spec, reference, config_digest)
    if spec.kind == "max-is":
        return attack_max_is(embedder, n or (len(real) if real is not None else 512), spec,
                             config_digest)
    if spec.kind == "min-fid":
        return attack_min_fid(embedder, real, spec, n, config_digest)
    if spec.kind == "latent-z":
        return attack_latent_z(embedder, gen, real, alpha, spec, n, config_digest=config_digest)
    return attack_latent_w(embedder, gen, real, alpha, spec, n, config_digest=config_digest)

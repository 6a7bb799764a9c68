"""Desk-scale networks: the embedder behind IS/FID and a style-based generator.

Checkpoint layout (little-endian)::

    b"RFIDLAB1" | u32 header length | UTF-8 JSON header | float32 payload

The JSON header holds the architecture descriptor (kind, config, ordered
layer list with shapes) and the provenance record. Parameters follow in
descriptor order.
"""

from __future__ import annotations

import contextlib
import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import IMAGE_SHAPE, ImageBatch

FORMAT_VERSION = 1
MAGIC = b"RFIDLAB1"


class Module:
    """Container of named parameter tensors plus a JSON-able config."""

    kind = "Module"

    def __init__(self, config: dict, seed: int = 0):
        self.config = dict(config)
        self.params: dict[str, Tensor] = {}
        self.provenance: dict = {"training": "init", "kappa": 0.0, "epochs": 0, "seed": seed}

    def _param(self, name: str, shape, std: float, rng: np.random.Generator,
               trainable: bool = True) -> None:
        data = rng.standard_normal(shape) * std if std else np.zeros(shape)
        self.params[name] = Tensor(data.astype(np.float32), requires_grad=trainable, name=name)

    def parameters(self) -> list[Tensor]:
        return [p for p in self.params.values() if p.requires_grad]

    def zero_grad(self) -> None:
        ad.zero_grads(self.params.values())

    @contextlib.contextmanager
    def frozen(self):
        """Stop recording parameter gradients (attacks differentiate inputs only)."""
        saved = {k: p.requires_grad for k, p in self.params.items()}
        for p in self.params.values():
            p.requires_grad = False
        try:
            yield self
        finally:
            for k, p in self.params.items():
                p.requires_grad = saved[k]

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]


def _he(fan_in: int) -> float:
    return float(np.sqrt(2.0 / fan_in))


class MiniEmbedder(Module):
    """Three conv+pool blocks, a dense embedding layer and a linear classifier.

    ``features`` is the penultimate activation used for FID; ``logits`` is a
    linear read-out of those same features used for IS.
    """

    kind = "MiniEmbedder"

    def __init__(self, widths=(8, 16, 32), embed_dim: int = 64, n_classes: int = 10,
                 pool: str = "max", seed: int = 0):
        if pool not in ("avg", "max"):
            raise ValueError(f"pool must be 'avg' or 'max', got {pool!r}")
        super().__init__({"widths": list(widths), "embed_dim": embed_dim,
                          "n_classes": n_classes, "pool": pool}, seed)
        rng = np.random.default_rng(seed)
        c_in = IMAGE_SHAPE[0]
        for i, c in enumerate(widths):
            self._param(f"conv{i}.w", (c, c_in, 3, 3), _he(c_in * 9), rng)
            self._param(f"conv{i}.b", (c,), 0.0, rng)
            c_in = c
        spatial = IMAGE_SHAPE[1] // 2 ** len(widths)
        flat = c_in * spatial * spatial
        self._param("embed.w", (embed_dim, flat), _he(flat), rng)
        self._param("embed.b", (embed_dim,), 0.0, rng)
        self._param("head.w", (n_classes, embed_dim), 0.01, rng)
        self._param("head.b", (n_classes,), 0.0, rng)

    @property
    def embed_dim(self) -> int:
        return self.config["embed_dim"]

    @property
    def n_classes(self) -> int:
        return self.config["n_classes"]

    def features(self, x: Tensor) -> Tensor:
        pool = ad.max_pool2d if self.config.get("pool") == "max" else ad.avg_pool2d
        h = x
        for i in range(len(self.config["widths"])):
            h = ad.conv2d(h, self[f"conv{i}.w"], self[f"conv{i}.b"], stride=1, padding=1)
            h = pool(ad.relu(h), 2)
        return ad.relu(ad.linear(ad.flatten(h), self["embed.w"], self["embed.b"]))

    def classify(self, feats: Tensor) -> Tensor:
        return ad.linear(feats, self["head.w"], self["head.b"])

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        feats = self.features(x)
        return feats, self.classify(feats)


class MiniStyleGen(Module):
    """Mapping MLP z -> w, truncation toward ``w_bar``, then a small synthesis net."""

    kind = "MiniStyleGen"

    def __init__(self, z_dim: int = 64, w_dim: int = 64, widths=(32, 16, 8), seed: int = 0):
        super().__init__({"z_dim": z_dim, "w_dim": w_dim, "widths": list(widths)}, seed)
        rng = np.random.default_rng(seed)
        self._param("map0.w", (w_dim, z_dim), _he(z_dim), rng)
        self._param("map0.b", (w_dim,), 0.0, rng)
        self._param("map1.w", (w_dim, w_dim), _he(w_dim), rng)
        self._param("map1.b", (w_dim,), 0.0, rng)
        c0 = widths[0]
        self._param("const.w", (c0 * 16, w_dim), _he(w_dim), rng)
        self._param("const.b", (c0 * 16,), 0.0, rng)
        chans = list(widths) + [IMAGE_SHAPE[0]]
        for i in range(len(widths)):
            self._param(f"up{i}.w", (chans[i], chans[i + 1], 4, 4), _he(chans[i] * 4), rng)
            self._param(f"up{i}.b", (chans[i + 1],), 0.0, rng)
        self._param("w_bar", (w_dim,), 0.0, rng, trainable=False)
        # called with the w actually fed to synthesis; used for instrumentation
        self.w_hook: Optional[Callable[[np.ndarray], None]] = None

    @property
    def z_dim(self) -> int:
        return self.config["z_dim"]

    @property
    def w_dim(self) -> int:
        return self.config["w_dim"]

    @property
    def w_bar(self) -> Tensor:
        return self.params["w_bar"]

    def mapping(self, z: Tensor) -> Tensor:
        h = ad.leaky_relu(ad.linear(z, self["map0.w"], self["map0.b"]))
        return ad.leaky_relu(ad.linear(h, self["map1.w"], self["map1.b"]))

    def truncate(self, w: Tensor, alpha: float) -> Tensor:
        if alpha == 1.0:
            return w
        return ad.add(ad.mul(w, alpha), self.w_bar.data * (1.0 - alpha))

    def synthesis(self, w: Tensor) -> Tensor:
        if self.w_hook is not None:
            self.w_hook(w.data)
        c0 = self.config["widths"][0]
        h = ad.leaky_relu(ad.linear(w, self["const.w"], self["const.b"]))
        h = ad.reshape(h, (w.shape[0], c0, 4, 4))
        n = len(self.config["widths"])
        for i in range(n):
            h = ad.conv_transpose2d(h, self[f"up{i}.w"], self[f"up{i}.b"], stride=2, padding=1)
            h = ad.leaky_relu(h) if i < n - 1 else ad.sigmoid(h)
        return h

    def forward(self, z: Tensor, alpha: float = 1.0) -> Tensor:
        return self.synthesis(self.truncate(self.mapping(z), alpha))


class Discriminator(Module):
    """Strided conv critic used only while training the generator."""

    kind = "Discriminator"

    def __init__(self, widths=(8, 16, 32), seed: int = 0):
        super().__init__({"widths": list(widths)}, seed)
        rng = np.random.default_rng(seed)
        c_in = IMAGE_SHAPE[0]
        for i, c in enumerate(widths):
            self._param(f"conv{i}.w", (c, c_in, 4, 4), _he(c_in * 16), rng)
            self._param(f"conv{i}.b", (c,), 0.0, rng)
            c_in = c
        spatial = IMAGE_SHAPE[1] // 2 ** len(widths)
        flat = c_in * spatial * spatial
        self._param("out.w", (1, flat), _he(flat) * 0.5, rng)
        self._param("out.b", (1,), 0.0, rng)

    def forward(self, x: Tensor) -> Tensor:
        h = x
        for i in range(len(self.config["widths"])):
            h = ad.leaky_relu(ad.conv2d(h, self[f"conv{i}.w"], self[f"conv{i}.b"],
                                        stride=2, padding=1))
        return ad.reshape(ad.linear(ad.flatten(h), self["out.w"], self["out.b"]), (x.shape[0],))


ARCHITECTURES = {cls.kind: cls for cls in (MiniEmbedder, MiniStyleGen, Discriminator)}


# -- embedder operations ---------------------------------------------------------

def _validate_images(x: np.ndarray) -> None:
    if x.ndim != 4 or x.shape[1:] != IMAGE_SHAPE:
        raise ValueError(f"expected images of shape (N, {IMAGE_SHAPE}), got {x.shape}")
    if x.size and (x.min() < 0.0 or x.max() > 1.0):
        raise ValueError("image values must lie in [0, 1]")


def _batched(batch, fn, width: int, chunk: int = 512) -> Tensor:
    if isinstance(batch, Tensor):
        _validate_images(batch.data)
        return fn(batch)
    images = batch.images if isinstance(batch, ImageBatch) else np.asarray(batch, np.float32)
    _validate_images(images)
    outs = []
    with ad.no_grad():
        for i in range(0, len(images), chunk):
            outs.append(fn(Tensor(images[i:i + chunk])).data)
    return Tensor(np.concatenate(outs) if outs else np.zeros((0, width), np.float32))


def embed(model: MiniEmbedder, batch) -> Tensor:
    """Penultimate features, (N, d_e). Differentiable when ``batch`` is a Tensor."""
    return _batched(batch, model.features, model.embed_dim)


def logits(model: MiniEmbedder, batch) -> Tensor:
    return _batched(batch, lambda x: model.classify(model.features(x)), model.n_classes)


def posterior(model: MiniEmbedder, batch) -> Tensor:
    """Class probabilities p(y|x), (N, C)."""
    if isinstance(batch, Tensor):
        return ad.softmax(logits(model, batch), axis=1)
    return Tensor(np.exp(ad._log_softmax_np(logits(model, batch).data, axis=1)))


def log_posterior(model: MiniEmbedder, batch) -> np.ndarray:
    """log p(y|x) as a float64 array, evaluated without recording."""
    z = logits(model, batch).data.astype(np.float64)
    return ad._log_softmax_np(z, axis=1)


# -- generator operations -------------------------------------------------------

def generate(gen: MiniStyleGen, z, alpha: float = 1.0) -> Union[ImageBatch, Tensor]:
    """Images G(z) at truncation ``alpha``.

    Returns a differentiable Tensor when ``z`` is a Tensor, otherwise an
    :class:`ImageBatch` computed in chunks without recording.
    """
    zd = z.data if isinstance(z, Tensor) else np.asarray(z, dtype=np.float32)
    if zd.ndim != 2 or zd.shape[1] != gen.z_dim:
        raise ValueError(f"z must have shape (N, {gen.z_dim}), got {zd.shape}")
    ad.check_finite(zd, "latent z")
    if not 0.0 <= alpha <= 2.0:
        raise ValueError(f"truncation alpha must lie in [0, 2], got {alpha}")
    if isinstance(z, Tensor):
        return gen.forward(z, alpha)
    outs = []
    with ad.no_grad():
        for i in range(0, len(zd), 512):
            outs.append(gen.forward(Tensor(zd[i:i + 512]), alpha).data)
    return ImageBatch(np.concatenate(outs) if outs else np.zeros((0, *IMAGE_SHAPE), np.float32))


def compute_w_bar(gen: MiniStyleGen, n_samples: int = 4096, seed: int = 0) -> Tensor:
    """Mean of mapping(z) over ``n_samples`` standard-normal draws; stored on ``gen``."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((n_samples, gen.z_dim)).astype(np.float32)
    total = np.zeros(gen.w_dim, dtype=np.float64)
    with ad.no_grad():
        for i in range(0, n_samples, 1024):
            total += gen.mapping(Tensor(z[i:i + 1024])).data.astype(np.float64).sum(axis=0)
    gen.params["w_bar"] = Tensor((total / n_samples).astype(np.float32), name="w_bar")
    return gen.w_bar


# -- checkpoints ------------------------------------------------------------------

class CheckpointError(Exception):
    """Unreadable or inconsistent checkpoint."""


class BadMagicError(CheckpointError):
    def __init__(self, got: bytes):
        super().__init__(f"bad magic {got!r}; expected {MAGIC!r}")


class VersionMismatchError(CheckpointError):
    pass


class PayloadMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(PayloadMismatchError):
    """The file ends before everything its header declares."""


@dataclass
class ModelCheckpoint:
    """Architecture descriptor, provenance record and parameter payload."""

    kind: str
    config: dict
    params: dict[str, np.ndarray]
    provenance: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    def header(self) -> dict:
        return {
            "format_version": self.format_version,
            "architecture": {
                "kind": self.kind,
                "config": self.config,
                "layers": [{"name": k, "shape": list(v.shape)} for k, v in self.params.items()],
            },
            "provenance": self.provenance,
        }

    def to_bytes(self) -> bytes:
        head = json.dumps(self.header(), sort_keys=True, separators=(",", ":")).encode("utf-8")
        payload = b"".join(np.ascontiguousarray(v, dtype="<f4").tobytes()
                           for v in self.params.values())
        return MAGIC + struct.pack("<I", len(head)) + head + payload

    @classmethod
    def from_bytes(cls, buf: bytes) -> "ModelCheckpoint":
        if len(buf) < len(MAGIC):
            raise TruncatedCheckpointError("file shorter than the magic")
        if buf[:8] != MAGIC:
            raise BadMagicError(buf[:8])
        if len(buf) < 12:
            raise TruncatedCheckpointError("file ends before the header length")
        (hlen,) = struct.unpack_from("<I", buf, 8)
        if len(buf) < 12 + hlen:
            raise TruncatedCheckpointError("file ends inside the JSON header")
        try:
            head = json.loads(buf[12:12 + hlen].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"unreadable header: {exc}") from None
        version = head.get("format_version")
        if version != FORMAT_VERSION:
            raise VersionMismatchError(f"format version {version}, expected {FORMAT_VERSION}")
        arch = head["architecture"]
        layers = arch["layers"]
        sizes = [int(np.prod(layer["shape"], dtype=np.int64)) for layer in layers]
        payload = buf[12 + hlen:]
        if len(payload) < 4 * sum(sizes):
            raise TruncatedCheckpointError(
                f"payload mismatch: truncated, {len(payload)} bytes for {sum(sizes)} floats")
        if len(payload) != 4 * sum(sizes):
            raise PayloadMismatchError(
                f"payload mismatch: {len(payload)} bytes for {sum(sizes)} declared floats")
        params, off = {}, 0
        for layer, n in zip(layers, sizes):
            arr = np.frombuffer(payload, dtype="<f4", count=n, offset=off)
            params[layer["name"]] = arr.reshape(layer["shape"]).astype(np.float32)
            off += 4 * n
        return cls(arch["kind"], arch["config"], params, head.get("provenance", {}), version)

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    def build(self) -> Module:
        """Instantiate the described model with these parameters."""
        if self.kind not in ARCHITECTURES:
            raise CheckpointError(f"unknown architecture {self.kind!r}")
        model = ARCHITECTURES[self.kind](**self.config)
        expected = {k: p.shape for k, p in model.params.items()}
        got = {k: v.shape for k, v in self.params.items()}
        if expected != got:
            raise PayloadMismatchError(f"payload mismatch: layers {got} do not fit {self.kind}")
        for name, arr in self.params.items():
            model.params[name].data = arr.copy()
        model.provenance = dict(self.provenance)
        return model


def to_checkpoint(model: Module) -> ModelCheckpoint:
    return ModelCheckpoint(model.kind, dict(model.config),
                           {k: p.data.astype(np.float32) for k, p in model.params.items()},
                           dict(model.provenance))


def save_checkpoint(path: Union[str, Path], model: Union[Module, ModelCheckpoint]) -> str:
    """Write ``model`` to ``path``; returns the sha256 digest of the file."""
    ckpt = model if isinstance(model, ModelCheckpoint) else to_checkpoint(model)
    buf = ckpt.to_bytes()
    Path(path).write_bytes(buf)
    return hashlib.sha256(buf).hexdigest()


def load_checkpoint(path: Union[str, Path]) -> ModelCheckpoint:
    return ModelCheckpoint.from_bytes(Path(path).read_bytes())


def load_model(path: Union[str, Path]) -> Module:
    return load_checkpoint(path).build()


def model_digest(model: Module) -> str:
    return to_checkpoint(model).digest()

"""Procedural toy dataset, image degradations, latent samplers and tensor files."""

from __future__ import annotations

import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np

N_CLASSES = 10
IMAGE_SHAPE = (3, 32, 32)
LATENT_DIM = 64

CLASS_NAMES = (
    "h-stripes", "v-stripes", "d-stripes", "checker", "disk",
    "ring", "square", "cross", "blob", "rings",
)


@dataclass
class ImageBatch:
    """Images in [0, 1] with shape (N, C, H, W) and optional integer labels."""

    images: np.ndarray
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        if self.images.ndim != 4:
            raise ValueError(f"ImageBatch expects (N, C, H, W), got {self.images.shape}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (len(self.images),):
                raise ValueError("labels must have one entry per image")

    def __len__(self) -> int:
        return len(self.images)

    def subset(self, idx) -> "ImageBatch":
        labels = None if self.labels is None else self.labels[idx]
        return ImageBatch(self.images[idx], labels)

    def check_range(self) -> None:
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ValueError("image values must lie in [0, 1]")


@dataclass(frozen=True)
class ToyDatasetSpec:
    n_per_class: int = 600
    eval_per_class: int = 820
    n_classes: int = N_CLASSES
    image_size: int = 32
    seed: int = 0
    pixel_noise: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


# -- rendering ---------------------------------------------------------------

def _soft(d: np.ndarray, sharp: float) -> np.ndarray:
    # smooth step: 1 where d < 0
    return 0.5 * (1.0 - np.tanh(d * sharp))


def _pattern(label: int, u: np.ndarray, v: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    r = np.sqrt(u * u + v * v)
    sharp = rng.uniform(8.0, 14.0)
    if label == 0:
        return 0.5 + 0.5 * np.sin(2 * np.pi * rng.uniform(2.0, 3.0) * v + rng.uniform(0, 2 * np.pi))
    if label == 1:
        return 0.5 + 0.5 * np.sin(2 * np.pi * rng.uniform(2.0, 3.0) * u + rng.uniform(0, 2 * np.pi))
    if label == 2:
        return 0.5 + 0.5 * np.sin(2 * np.pi * rng.uniform(1.5, 2.2) * (u + v) + rng.uniform(0, 2 * np.pi))
    if label == 3:
        f = rng.uniform(1.5, 2.5)
        return 0.5 + 0.5 * np.tanh(4.0 * np.sin(np.pi * f * u) * np.sin(np.pi * f * v))
    if label == 4:
        return _soft(r - rng.uniform(0.4, 0.65), sharp)
    if label == 5:
        return _soft(np.abs(r - rng.uniform(0.45, 0.65)) - rng.uniform(0.08, 0.15), sharp)
    if label == 6:
        return _soft(np.maximum(np.abs(u), np.abs(v)) - rng.uniform(0.35, 0.55), sharp)
    if label == 7:
        w = rng.uniform(0.12, 0.22)
        return _soft(np.minimum(np.abs(u), np.abs(v)) - w, sharp) * _soft(r - 0.9, sharp)
    if label == 8:
        s = rng.uniform(0.3, 0.5)
        return np.exp(-(r * r) / (2 * s * s))
    if label == 9:
        return 0.5 + 0.5 * np.sin(2 * np.pi * rng.uniform(1.5, 2.5) * r + rng.uniform(0, 2 * np.pi))
    raise ValueError(f"no pattern for class {label}")


def render_item(label: int, rng: np.random.Generator, size: int = 32,
                pixel_noise: float = 0.0) -> np.ndarray:
    """Render one (3, size, size) image of class ``label``."""
    grid = (np.arange(size, dtype=np.float64) + 0.5) / size * 2 - 1
    v, u = np.meshgrid(grid, grid, indexing="ij")
    cx, cy = rng.uniform(-0.2, 0.2, size=2)
    theta = rng.uniform(-0.25, 0.25)
    c, s = math.cos(theta), math.sin(theta)
    uu = c * (u - cx) - s * (v - cy)
    vv = s * (u - cx) + c * (v - cy)
    mask = _pattern(label, uu, vv, rng)
    fg = rng.uniform(0.0, 1.0, size=3)
    bg = rng.uniform(0.0, 1.0, size=3)
    # keep the pattern visible
    while np.abs(fg - bg).mean() < 0.3:
        bg = rng.uniform(0.0, 1.0, size=3)
    img = bg[:, None, None] * (1 - mask) + fg[:, None, None] * mask
    img = img + rng.normal(0.0, pixel_noise, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _render_range(spec: ToyDatasetSpec, start: int, count: int) -> ImageBatch:
    images = np.empty((count, 3, spec.image_size, spec.image_size), dtype=np.float32)
    labels = np.arange(count, dtype=np.int64) % spec.n_classes
    for k in range(count):
        rng = np.random.default_rng([spec.seed, start + k])
        images[k] = render_item(int(labels[k]), rng, spec.image_size, spec.pixel_noise)
    return ImageBatch(images, labels)


def split_bounds(spec: ToyDatasetSpec, split: str) -> tuple[int, int]:
    """Global item index range [start, stop) backing a named split."""
    n_train = spec.n_per_class * spec.n_classes
    n_eval = spec.eval_per_class * spec.n_classes
    if split == "train":
        return 0, n_train
    if split == "eval":
        return n_train, n_train + n_eval
    raise ValueError(f"unknown split {split!r} (expected 'train' or 'eval')")


def generate_dataset(spec: ToyDatasetSpec = ToyDatasetSpec(), split: str = "train") -> ImageBatch:
    """Render a balanced labelled split.

    Every item is drawn from its own stream keyed by ``(seed, global index)``;
    train and eval occupy disjoint index ranges.
    """
    start, stop = split_bounds(spec, split)
    return _render_range(spec, start, stop - start)


def eval_halves(batch: ImageBatch, n: int = 4096, n_classes: int = N_CLASSES
                ) -> tuple[ImageBatch, ImageBatch]:
    """Two disjoint halves of ``batch``, each truncated to ``n``.

    Items alternate between halves in blocks of ``n_classes`` so that, with
    labels cycling through the classes, both halves stay class-balanced.
    """
    side = (np.arange(len(batch)) // n_classes) % 2
    a = batch.subset(np.flatnonzero(side == 0)[:n])
    b = batch.subset(np.flatnonzero(side == 1)[:n])
    return a, b


# -- degradations and noise --------------------------------------------------

def gaussian_noise(batch: ImageBatch, sigma: float, seed: int = 0) -> ImageBatch:
    """Additive N(0, sigma^2) pixel noise, clamped back to [0, 1]."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return ImageBatch(batch.images.copy(), batch.labels)
    rng = np.random.default_rng(seed)
    noisy = batch.images + rng.normal(0.0, sigma, size=batch.images.shape).astype(np.float32)
    return ImageBatch(np.clip(noisy, 0.0, 1.0), batch.labels)


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Normalised 2-D Gaussian kernel of radius ceil(3 sigma)."""
    if sigma <= 0:
        raise ValueError("sigma must be > 0")
    radius = int(math.ceil(3 * sigma))
    ax = np.arange(-radius, radius + 1, dtype=np.float64)
    g = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2 * sigma * sigma))
    return g / g.sum()


def gaussian_blur(batch: ImageBatch, sigma: float) -> ImageBatch:
    """Per-channel Gaussian blur with reflect padding.

    The normalised 2-D kernel factors exactly into two normalised 1-D
    kernels, so the blur is applied as two separable passes.
    """
    k2 = gaussian_kernel(sigma)
    radius = k2.shape[0] // 2
    k1 = k2.sum(axis=1)
    x = batch.images.astype(np.float64)
    H, W = x.shape[2:]
    xp = np.pad(x, ((0, 0), (0, 0), (radius, radius), (0, 0)), mode="reflect")
    rows = sum(k1[i] * xp[:, :, i:i + H, :] for i in range(k1.size))
    rp = np.pad(rows, ((0, 0), (0, 0), (0, 0), (radius, radius)), mode="reflect")
    out = sum(k1[j] * rp[:, :, :, j:j + W] for j in range(k1.size))
    return ImageBatch(np.clip(out, 0.0, 1.0).astype(np.float32), batch.labels)


def random_noise_images(n: int, seed: int = 0, shape=IMAGE_SHAPE) -> ImageBatch:
    """i.i.d. uniform [0, 1] pixels."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    return ImageBatch(rng.uniform(0.0, 1.0, size=(n, *shape)).astype(np.float32))


LATENT_FAMILIES = ("standard-normal", "shifted-normal", "normal-plus-uniform", "uniform")


def sample_latents(n: int, dist: str = "standard-normal", seed: int = 0, mu: float = 0.0,
                   dim: int = LATENT_DIM) -> np.ndarray:
    """Draw ``n`` latent codes of length ``dim`` from one of :data:`LATENT_FAMILIES`."""
    rng = np.random.default_rng(seed)
    if dist == "standard-normal":
        z = rng.standard_normal((n, dim))
    elif dist == "shifted-normal":
        z = rng.standard_normal((n, dim)) + mu
    elif dist == "normal-plus-uniform":
        z = rng.standard_normal((n, dim)) + mu + rng.uniform(0.0, 1.0, size=(n, dim))
    elif dist == "uniform":
        z = rng.uniform(0.0, 1.0, size=(n, dim))
    else:
        raise ValueError(f"unknown latent family {dist!r}; choose from {LATENT_FAMILIES}")
    return z.astype(np.float32)


def wasserstein_1d(a, b) -> float:
    """Exact 1-D W1 between two equal-size empirical samples."""
    a = np.sort(np.asarray(a, dtype=np.float64).ravel())
    b = np.sort(np.asarray(b, dtype=np.float64).ravel())
    if a.size != b.size:
        raise ValueError(f"sample counts differ: {a.size} vs {b.size}")
    if a.size == 0:
        raise ValueError("empty samples")
    return float(np.abs(a - b).mean())


# -- tensor files --------------------------------------------------------------

TENSOR_MAGIC = b"TNSR"
TENSOR_VERSION = 1
_DTYPE_CODES = {
    1: np.dtype("<f4"),
    2: np.dtype("<f8"),
    3: np.dtype("<i8"),
    4: np.dtype("<i4"),
    5: np.dtype("u1"),
}
_CODE_OF = {(dt.kind, dt.itemsize): code for code, dt in _DTYPE_CODES.items()}
_MAX_ELEMENTS = 1 << 40


class TensorFileError(Exception):
    """Malformed tensor file."""


class BadMagicError(TensorFileError):
    pass


class TruncatedError(TensorFileError):
    pass


class DimOverflowError(TensorFileError):
    pass


class UnsupportedFormatError(TensorFileError):
    pass


def encode_tensor(array) -> bytes:
    arr = np.asarray(getattr(array, "data", array))
    code = _CODE_OF.get((arr.dtype.kind, arr.dtype.itemsize))
    if code is None:
        raise UnsupportedFormatError(f"dtype {arr.dtype} has no tensor-file code")
    dt = _DTYPE_CODES[code]
    if arr.ndim > 255 or any(d > 0xFFFFFFFF for d in arr.shape):
        raise DimOverflowError(f"shape {arr.shape} does not fit the header")
    header = TENSOR_MAGIC + struct.pack("<HBB", TENSOR_VERSION, code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=dt).tobytes()


def decode_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < 8:
        raise TruncatedError("file shorter than the fixed header")
    if buf[:4] != TENSOR_MAGIC:
        raise BadMagicError(f"bad magic {buf[:4]!r}")
    version, code, rank = struct.unpack_from("<HBB", buf, 4)
    if version != TENSOR_VERSION:
        raise UnsupportedFormatError(f"unsupported version {version}")
    if code not in _DTYPE_CODES:
        raise UnsupportedFormatError(f"unknown dtype code {code}")
    if len(buf) < 8 + 4 * rank:
        raise TruncatedError("file ends inside the dimension list")
    dims = struct.unpack_from(f"<{rank}I", buf, 8)
    count = math.prod(dims)
    dt = _DTYPE_CODES[code]
    if count > _MAX_ELEMENTS:
        raise DimOverflowError(f"declared shape {dims} is implausibly large")
    start = 8 + 4 * rank
    need = count * dt.itemsize
    if len(buf) - start < need:
        raise TruncatedError(f"payload has {len(buf) - start} bytes, expected {need}")
    if len(buf) - start > need:
        raise TensorFileError(f"{len(buf) - start - need} trailing bytes after payload")
    return np.frombuffer(buf, dtype=dt, count=count, offset=start).reshape(dims).copy()


def write_tensor(path: Union[str, Path], array) -> None:
    Path(path).write_bytes(encode_tensor(array))


def read_tensor(path: Union[str, Path]) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


def save_batch(prefix: Union[str, Path], batch: ImageBatch) -> list[Path]:
    """Write ``<prefix>.images.tnsr`` and, if labelled, ``<prefix>.labels.tnsr``."""
    prefix = str(prefix)
    paths = [Path(prefix + ".images.tnsr")]
    write_tensor(paths[0], batch.images)
    if batch.labels is not None:
        paths.append(Path(prefix + ".labels.tnsr"))
        write_tensor(paths[1], batch.labels)
    return paths


def load_batch(path: Union[str, Path]) -> ImageBatch:
    """Load an image tensor file plus its sibling labels file when present."""
    path = Path(path)
    images = read_tensor(path)
    labels = None
    if path.name.endswith(".images.tnsr"):
        lab = path.with_name(path.name[: -len(".images.tnsr")] + ".labels.tnsr")
        if lab.exists():
            labels = read_tensor(lab)
    return ImageBatch(images, labels)

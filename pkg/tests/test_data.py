import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rfidlab import data as dt

SMALL = dt.ToyDatasetSpec(n_per_class=6, eval_per_class=4)


def test_generation_is_deterministic():
    a = dt.generate_dataset(SMALL, "train")
    b = dt.generate_dataset(SMALL, "train")
    assert a.images.tobytes() == b.images.tobytes()
    assert np.array_equal(a.labels, b.labels)


def test_labels_are_balanced_and_images_in_range():
    batch = dt.generate_dataset(SMALL, "train")
    assert np.all(np.bincount(batch.labels, minlength=10) == 6)
    assert batch.images.shape == (60, 3, 32, 32)
    assert batch.images.min() >= 0.0 and batch.images.max() <= 1.0


def test_splits_are_disjoint():
    tr0, tr1 = dt.split_bounds(SMALL, "train")
    ev0, ev1 = dt.split_bounds(SMALL, "eval")
    assert set(range(tr0, tr1)).isdisjoint(range(ev0, ev1))
    with pytest.raises(ValueError):
        dt.split_bounds(SMALL, "test")


def test_split_item_matches_its_own_stream():
    # an eval item depends only on (seed, global index)
    ev = dt.generate_dataset(SMALL, "eval")
    start, _ = dt.split_bounds(SMALL, "eval")
    k = 3
    img = dt.render_item(int(ev.labels[k]), np.random.default_rng([SMALL.seed, start + k]))
    assert np.array_equal(img, ev.images[k])


def test_eval_halves_are_disjoint_and_balanced():
    ev = dt.generate_dataset(dt.ToyDatasetSpec(n_per_class=1, eval_per_class=20), "eval")
    a, b = dt.eval_halves(ev, n=100)
    assert len(a) == len(b) == 100
    assert np.all(np.bincount(a.labels) == 10) and np.all(np.bincount(b.labels) == 10)
    rows = {x.tobytes() for x in a.images}
    assert not rows & {x.tobytes() for x in b.images}


def test_gaussian_noise():
    batch = dt.random_noise_images(4, seed=1)
    assert np.array_equal(dt.gaussian_noise(batch, 0.0).images, batch.images)
    noisy = dt.gaussian_noise(batch, 0.7, seed=2)
    assert noisy.images.min() >= 0 and noisy.images.max() <= 1
    with pytest.raises(ValueError):
        dt.gaussian_noise(batch, -0.1)


def test_gaussian_noise_std_before_clamping():
    # mid-grey images keep almost all noise inside [0, 1] at sigma 0.1
    grey = dt.ImageBatch(np.full((64, 3, 32, 32), 0.5, np.float32))
    diff = dt.gaussian_noise(grey, 0.1, seed=0).images - grey.images
    assert diff.std() == pytest.approx(0.1, rel=0.05)


def test_gaussian_kernel():
    k = dt.gaussian_kernel(1.0)
    assert k.shape == (7, 7)
    assert abs(k.sum() - 1.0) < 1e-9
    ax = np.arange(-3, 4)
    g = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / 2.0)
    assert k[3, 3] == pytest.approx(1.0 / g.sum(), rel=1e-12)
    assert dt.gaussian_kernel(2.5).shape == (2 * math.ceil(7.5) + 1,) * 2
    with pytest.raises(ValueError):
        dt.gaussian_kernel(0.0)


def test_blur_matches_direct_2d_convolution():
    rng = np.random.default_rng(0)
    batch = dt.ImageBatch(rng.random((2, 3, 9, 9)).astype(np.float32))
    k = dt.gaussian_kernel(1.0)
    r = 3
    xp = np.pad(batch.images.astype(np.float64), ((0, 0), (0, 0), (r, r), (r, r)),
                mode="reflect")
    ref = np.zeros(batch.images.shape)
    for i in range(9):
        for j in range(9):
            ref[:, :, i, j] = (xp[:, :, i:i + 7, j:j + 7] * k).sum(axis=(2, 3))
    assert np.allclose(dt.gaussian_blur(batch, 1.0).images, ref, atol=1e-6)


def test_blur_keeps_constant_images():
    const = dt.ImageBatch(np.full((1, 3, 16, 16), 0.3, np.float32))
    assert np.allclose(dt.gaussian_blur(const, 2.0).images, 0.3, atol=1e-6)


def test_random_noise_images():
    a = dt.random_noise_images(40, seed=5)
    assert a.images.min() >= 0 and a.images.max() <= 1
    assert abs(a.images.mean() - 0.5) < 0.01
    assert np.array_equal(a.images, dt.random_noise_images(40, seed=5).images)
    with pytest.raises(ValueError):
        dt.random_noise_images(0)


def test_latent_families():
    n = 4096
    z = dt.sample_latents(n, "standard-normal", seed=0)
    assert z.shape == (n, dt.LATENT_DIM)
    assert np.all(np.abs(z.mean(axis=0)) < 4 / math.sqrt(n))
    assert dt.sample_latents(n, "shifted-normal", mu=7.0).mean() == pytest.approx(7.0, abs=0.01)
    assert dt.sample_latents(n, "normal-plus-uniform", mu=1.0).mean() == pytest.approx(
        1.5, abs=0.01)
    u = dt.sample_latents(100, "uniform")
    assert u.min() >= 0 and u.max() <= 1
    with pytest.raises(ValueError):
        dt.sample_latents(4, "cauchy")


def test_wasserstein_examples():
    assert dt.wasserstein_1d([0.5, 0.2], [0.5, 0.2]) == 0
    assert dt.wasserstein_1d([0, 1], [1, 2]) == 1
    assert dt.wasserstein_1d([0, 2], [1, 1]) == 1
    with pytest.raises(ValueError):
        dt.wasserstein_1d([0, 1], [1])


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 20), st.integers(0, 2**31))
def test_wasserstein_is_a_metric(n, seed):
    rng = np.random.default_rng(seed)
    a, b, c = rng.normal(size=(3, n))
    ab, bc, ac = dt.wasserstein_1d(a, b), dt.wasserstein_1d(b, c), dt.wasserstein_1d(a, c)
    assert ab == pytest.approx(dt.wasserstein_1d(b, a))
    assert ac <= ab + bc + 1e-12


# -- tensor files -------------------------------------------------------------

@pytest.mark.parametrize("arr", [
    np.arange(24, dtype=np.float32).reshape(2, 3, 4),
    np.array(3.5),
    np.arange(5, dtype=np.int64),
    np.zeros((0, 3), dtype=np.float32),
    np.array([[1, 2], [3, 4]], dtype=np.uint8),
])
def test_tensor_round_trip(tmp_path, arr):
    p = tmp_path / "t.tnsr"
    dt.write_tensor(p, arr)
    back = dt.read_tensor(p)
    assert back.shape == arr.shape and back.dtype == arr.dtype
    assert np.array_equal(back, arr)
    assert dt.encode_tensor(back) == p.read_bytes()


def test_tensor_header_layout():
    buf = dt.encode_tensor(np.zeros((2, 3), np.float32))
    assert buf[:4] == b"TNSR"
    assert buf[4:6] == (1).to_bytes(2, "little")
    assert buf[7] == 2
    assert buf[8:16] == (2).to_bytes(4, "little") + (3).to_bytes(4, "little")
    assert len(buf) == 16 + 6 * 4


def test_tensor_errors():
    buf = dt.encode_tensor(np.ones((4, 4), np.float32))
    with pytest.raises(dt.TruncatedError, match="payload"):
        dt.decode_tensor(buf[:-3])
    with pytest.raises(dt.BadMagicError):
        dt.decode_tensor(b"XXXX" + buf[4:])
    huge = buf[:8] + (0xFFFFFFFF).to_bytes(4, "little") * 2
    with pytest.raises(dt.DimOverflowError):
        dt.decode_tensor(huge)
    with pytest.raises(dt.TensorFileError):
        dt.decode_tensor(buf + b"\0")
    with pytest.raises(dt.UnsupportedFormatError):
        dt.encode_tensor(np.ones(2, np.complex64))


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(0, 4), min_size=0, max_size=4), st.integers(0, 2**31))
def test_tensor_round_trip_property(shape, seed):
    arr = np.random.default_rng(seed).normal(size=shape).astype(np.float32)
    assert np.array_equal(dt.decode_tensor(dt.encode_tensor(arr)), arr)


def test_batch_round_trip(tmp_path):
    batch = dt.generate_dataset(SMALL, "eval")
    paths = dt.save_batch(tmp_path / "ev", batch)
    back = dt.load_batch(paths[0])
    assert np.array_equal(back.images, batch.images)
    assert np.array_equal(back.labels, batch.labels)

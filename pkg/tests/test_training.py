import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from rfidlab import autodiff as ad
from rfidlab import training as tr
from rfidlab.data import ImageBatch, ToyDatasetSpec, generate_dataset
from rfidlab.models import MiniEmbedder, load_checkpoint, save_checkpoint


@pytest.fixture(scope="module")
def small():
    spec = ToyDatasetSpec(n_per_class=12, eval_per_class=4)
    return generate_dataset(spec, "train"), generate_dataset(spec, "eval")


def test_project_l2_examples():
    assert np.allclose(tr.project_l2(np.array([[3.0, 4.0]]), 1.0), [[0.6, 0.8]])
    assert np.allclose(tr.project_l2(np.array([[0.1, 0.0]]), 1.0), [[0.1, 0.0]])


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (4, 6), elements=st.floats(-100, 100)), st.floats(1e-3, 50))
def test_project_l2_lands_in_ball(v, kappa):
    out = tr.project_l2(v, kappa)
    norms = np.linalg.norm(out, axis=1)
    assert np.all(norms <= kappa * (1 + 1e-9) + 1e-9)
    inside = np.linalg.norm(v, axis=1) <= kappa
    assert np.allclose(out[inside], v[inside])


def test_kappa_presets():
    assert tr.KAPPA_PRESETS["k128"] == pytest.approx(2 * tr.KAPPA_PRESETS["k64"])
    assert tr.KAPPA_PRESETS["k64"] < tr.KAPPA_PRESETS["k128"]


def test_config_validation():
    with pytest.raises(ValueError):
        tr.TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        tr.TrainConfig(kappa=-1)
    with pytest.raises(ValueError):
        tr.TrainConfig(lr_decay=0)
    with pytest.raises(ValueError):
        tr.TrainConfig(lr_decay=1.5)
    with pytest.raises(ValueError):
        tr.GanConfig(iterations=0)


def test_lr_schedule_drops_every_third():
    cfg = tr.TrainConfig(epochs=9, lr=0.1)
    lrs = [cfg.lr_at(e) for e in range(9)]
    assert lrs[:3] == [0.1] * 3
    assert lrs[3] == pytest.approx(0.01) and lrs[6] == pytest.approx(0.001)
    assert tr.TrainConfig(epochs=10).decay_every == math.ceil(10 / 3)


def test_kappa_warmup_ramp():
    cfg = tr.TrainConfig(epochs=9, kappa=2.0, kappa_warmup=4)
    assert cfg.kappa_at(0.0) == 0.0
    assert cfg.kappa_at(2.0) == pytest.approx(1.0)
    assert cfg.kappa_at(7.0) == 2.0
    assert tr.TrainConfig(kappa=2.0, kappa_warmup=0).kappa_at(0.0) == 2.0


def test_sgd_momentum_step():
    p = ad.Tensor(np.array([1.0], np.float32), requires_grad=True)
    opt = tr.SGD([p], lr=0.1, momentum=0.5)
    p.grad = np.array([1.0], np.float32)
    opt.step()
    opt.step()
    # velocities 1 then 1.5
    assert p.data[0] == pytest.approx(1.0 - 0.1 - 0.15)


def test_adam_first_step_is_lr_sized():
    p = ad.Tensor(np.array([0.0, 0.0], np.float32), requires_grad=True)
    opt = tr.Adam([p], lr=0.01)
    p.grad = np.array([5.0, -0.001], np.float32)
    opt.step()
    assert np.allclose(p.data, [-0.01, 0.01], atol=1e-5)


def test_inner_pgd_stays_in_ball(small):
    data, _ = small
    model = MiniEmbedder(seed=0)
    x, y = data.images[:16], data.labels[:16]
    for kappa in (0.1, 2.0):
        delta = tr.l2_pgd(model, x, y, kappa, 2, rng=np.random.default_rng(0))
        norms = np.sqrt((delta.reshape(16, -1).astype(np.float64) ** 2).sum(axis=1))
        assert norms.max() <= kappa + 1e-6


def test_inner_pgd_raises_loss(small):
    data, _ = small
    model = MiniEmbedder(seed=0)
    model["head.w"].data *= 30
    x, y = data.images[:32], data.labels[:32]
    delta = tr.l2_pgd(model, x, y, 1.0, 2)

    def ce(inp):
        with ad.no_grad():
            return float(ad.cross_entropy(model.forward(ad.Tensor(inp))[1], y).data)

    assert ce(np.clip(x + delta, 0, 1)) > ce(x)


def test_accuracy_bounds_and_order(small):
    _, ev = small
    model = MiniEmbedder(seed=0)
    clean = tr.evaluate_accuracy(model, ev)
    robust = tr.evaluate_accuracy(model, ev, kappa=1.0, steps=3)
    assert 0.0 <= robust <= clean <= 1.0
    assert tr.evaluate_accuracy(model, ImageBatch(ev.images[:0], ev.labels[:0])) == 0.0
    with pytest.raises(ValueError):
        tr.evaluate_accuracy(model, ImageBatch(ev.images))


def test_train_nominal_records_provenance(small):
    data, ev = small
    cfg = tr.TrainConfig(epochs=2, batch_size=32, seed=3)
    ck = tr.train_nominal(data, cfg, eval_data=ev)
    prov = ck.provenance
    assert prov["training"] == "nominal" and prov["kappa"] == 0.0
    assert prov["epochs"] == 2 and prov["seed"] == 3
    assert len(prov["history"]) == 2 and "clean_accuracy" in prov
    with pytest.raises(ValueError):
        tr.train_nominal(data, tr.TrainConfig(kappa=1.0))


def test_train_adversarial_provenance_and_roundtrip(small, tmp_path):
    data, _ = small
    cfg = tr.TrainConfig(epochs=1, batch_size=32, kappa=0.5)
    ck = tr.train_adversarial(data, cfg)
    assert ck.provenance["training"] == "adversarial"
    assert ck.provenance["kappa"] == 0.5
    save_checkpoint(tmp_path / "r.ckpt", ck)
    back = load_checkpoint(tmp_path / "r.ckpt")
    assert back.provenance["kappa"] == 0.5
    with pytest.raises(ValueError):
        tr.train_adversarial(data, tr.TrainConfig(kappa=0.0))


def test_training_is_reproducible(small):
    data, _ = small
    cfg = tr.TrainConfig(epochs=1, batch_size=32, kappa=0.3, seed=5)
    a = tr.train_adversarial(data, cfg)
    b = tr.train_adversarial(data, cfg)
    assert a.digest() == b.digest()


def test_divergence_is_reported(small):
    data, _ = small
    bad = ImageBatch(data.images.copy(), data.labels)
    cfg = tr.TrainConfig(epochs=1, batch_size=32, lr=1e30)
    with pytest.raises(tr.TrainingDivergedError) as info:
        with np.errstate(all="ignore"):
            tr.train_nominal(bad, cfg)
    assert info.value.epoch == 0
    assert isinstance(info.value, FloatingPointError)


def test_unlabelled_data_is_rejected(small):
    data, _ = small
    with pytest.raises(ValueError):
        tr.train_nominal(ImageBatch(data.images), tr.TrainConfig(epochs=1))


def test_generator_tiny_run(small):
    data, _ = small
    ck = tr.train_generator(data, tr.GAN_PRESETS["tiny"])
    assert ck.provenance["training"] == "gan"
    assert len(ck.provenance["history"]) >= 1
    assert "w_bar" in ck.params

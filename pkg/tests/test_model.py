import json

import numpy as np
import pytest

from grad_oracle import fd_gradients, random_tiny_model, relative_errors
from xaiport.errors import ModelSpecError, ShapeError
from xaiport.model import (
    LabeledDataset,
    ModelSpec,
    TrainConfig,
    accuracy,
    forward_capture,
    init_model,
    load_checkpoint,
    make_synthetic_bars,
    save_checkpoint,
    train,
)


def test_init_is_deterministic_and_bounded():
    spec = ModelSpec(seed=3)
    a, b = init_model(spec), init_model(spec)
    assert a.weights_equal(b)
    w1, b1 = a.params["conv1"]
    bound = np.sqrt(1 / 9)
    assert np.all(np.abs(w1) < bound) and not np.any(b1)
    w2, _ = a.params["conv2"]
    assert np.all(np.abs(w2) < np.sqrt(1 / 72))
    assert not init_model(ModelSpec(seed=4)).weights_equal(a)


@pytest.mark.parametrize(
    "layers,target",
    [
        (("conv:4", "relu", "gap", "dense:2"), "conv1"),
        (("conv:4", "relu", "gap", "dense:2", "softmax", "softmax"), "conv1"),
        (("conv:4", "gap", "dense:2", "softmax"), "conv1"),
        (("conv:4", "relu", "gap", "dense:2", "softmax"), "dense1"),
        (("gap", "conv:4", "relu", "dense:2", "softmax"), "conv1"),
        (("conv:x", "relu", "gap", "dense:2", "softmax"), "conv1"),
    ],
)
def test_invalid_specs_rejected(layers, target):
    with pytest.raises(ModelSpecError):
        ModelSpec(layers=layers, target_layer=target)


def test_softmax_sums_to_one_and_zero_weights_are_uniform(rng):
    model = init_model(ModelSpec())
    x = rng.random((1, 16, 16)).astype(np.float32)
    probs, cap = forward_capture(model, x, 1)
    assert abs(float(probs.sum()) - 1) < 1e-6
    assert cap.activations.shape == cap.gradients.shape == (8, 16, 16)
    assert np.all(cap.activations >= 0)
    for name, (w, b) in model.params.items():
        model.params[name] = (np.zeros_like(w), b)
    assert model.predict_proba(x).tolist() == [0.5, 0.5]


def test_forward_capture_errors(rng):
    model = init_model(ModelSpec())
    with pytest.raises(ShapeError):
        forward_capture(model, np.zeros((1, 8, 8), np.float32), 0)
    with pytest.raises(IndexError):
        forward_capture(model, np.zeros((1, 16, 16), np.float32), 2)


@pytest.mark.parametrize("seed", range(4))
def test_gradients_match_finite_differences(seed):
    model = random_tiny_model(seed)
    rs = np.random.default_rng(100 + seed)
    for _ in range(20):
        x = rs.uniform(-1, 1, size=(1, 8, 8)).astype(np.float32)
        c = int(rs.integers(2))
        _, cap = forward_capture(model, x, c)
        ref = fd_gradients(model, cap.activations, c)
        if ref is not None:
            break
    assert ref is not None, "no kink-free input found"
    assert relative_errors(cap.gradients, ref).max() < 1e-3


def test_gradient_is_of_presoftmax_score(rng):
    # the two logits' gradients differ only through the dense weights, so they sum
    # to the gradient of (S_0 + S_1); a post-softmax target would not satisfy this
    model = random_tiny_model(7)
    x = rng.uniform(-1, 1, (1, 8, 8)).astype(np.float32)
    _, c0 = forward_capture(model, x, 0)
    _, c1 = forward_capture(model, x, 1)
    w, _ = model.params["dense1"]
    model.params["dense1"] = (w.sum(axis=0, keepdims=True).repeat(2, axis=0), model.params["dense1"][1])
    _, both = forward_capture(model, x, 0)
    np.testing.assert_allclose(c0.gradients + c1.gradients, both.gradients, atol=1e-6)


def test_synthetic_bars_contract():
    ds = make_synthetic_bars(101, seed=2)
    assert ds.images.shape == (101, 1, 16, 16)
    counts = np.bincount(ds.labels, minlength=2)
    assert abs(counts[0] - counts[1]) <= 1
    assert ds.images.min() >= 0 and ds.images.max() <= 1
    for img, lab, mask in zip(ds.images, ds.labels, ds.masks):
        assert mask.sum() == 64
        assert np.all(img[0][mask] >= 0.8) and np.all(img[0][~mask] <= 0.2)
        if lab == 0:
            assert mask[:4].all()
        else:
            assert mask[:, :4].all()


def test_zero_learning_rate_freezes_weights():
    ds = make_synthetic_bars(20, seed=1)
    model = init_model(ModelSpec())
    out, _ = train(model, ds, TrainConfig(epochs=2, learning_rate=0.0))
    assert out.weights_equal(model)


def test_training_is_deterministic():
    ds = make_synthetic_bars(40, seed=1)
    cfg = TrainConfig(epochs=2, seed=5, augmentation="cutmix")
    a, la = train(init_model(ModelSpec()), ds, cfg)
    b, lb = train(init_model(ModelSpec()), ds, cfg)
    assert a.weights_equal(b) and la == lb


def test_training_reaches_high_accuracy(trained_bars, bars500):
    model, _ = trained_bars
    assert accuracy(model, bars500) >= 0.95


def test_loss_mostly_decreases_at_lr_005(bars500):
    _, losses = train(init_model(ModelSpec()), bars500, TrainConfig(epochs=11, learning_rate=0.05))
    drops = sum(b <= a for a, b in zip(losses[:10], losses[1:11]))
    assert drops >= 8, losses


def test_train_rejects_empty_and_bad_configs():
    empty = LabeledDataset(images=np.zeros((0, 1, 16, 16), np.float32), labels=np.zeros(0, np.int64))
    with pytest.raises(ValueError):
        train(init_model(ModelSpec()), empty, TrainConfig())
    for kw in ({"epochs": 0}, {"learning_rate": -1}, {"mix_probability": 1.5}, {"augmentation": "mixup"}):
        with pytest.raises(ValueError):
            TrainConfig(**kw)


def test_checkpoint_round_trip(tmp_path, rng):
    model = random_tiny_model(1)
    save_checkpoint(model, tmp_path / "ckpt")
    manifest = json.loads((tmp_path / "ckpt" / "manifest.json").read_text())
    assert manifest["target_layer"] == "conv1" and manifest["layers"][0] == "conv:2"
    back = load_checkpoint(tmp_path / "ckpt")
    assert back.weights_equal(model)
    x = rng.random((1, 8, 8)).astype(np.float32)
    assert np.array_equal(back.predict_proba(x), model.predict_proba(x))

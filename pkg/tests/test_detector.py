"""Detector forward/backward, training, and model container I/O."""

import numpy as np
import pytest

from semnop import detector, images
from semnop.errors import ConfigError, FormatError, UnsupportedShapeError


def _random_image(rng, h, w, dtype=np.float64):
    values = rng.uniform(-1, 1, size=(h, w)).astype(dtype)
    return images.NormalizedImage(values, h * w)


def test_forward_accepts_multiple_sizes():
    model = detector.init_model(seed=0)
    rng = np.random.default_rng(0)
    for h in (216, 432, 64, 100):
        logits = detector.forward(model, _random_image(rng, h, 64, np.float32))
        assert logits.shape == (2,)
        assert np.all(np.isfinite(logits))


def test_softmax_normalization():
    model = detector.init_model(seed=1)
    rng = np.random.default_rng(1)
    for _ in range(10):
        logits = detector.forward(model, _random_image(rng, 40, 64, np.float32))
        assert abs(detector.softmax(logits).sum() - 1.0) < 1e-6


def test_too_small_rejected():
    model = detector.init_model(seed=0)
    rng = np.random.default_rng(0)
    with pytest.raises(UnsupportedShapeError):
        detector.forward(model, _random_image(rng, 7, 64))
    with pytest.raises(UnsupportedShapeError):
        detector.forward(model, _random_image(rng, 64, 7))


def test_size_polymorphism_same_params():
    # one parameter set serves all input heights
    model = detector.init_model(seed=2)
    total = sum(v.size for v in model.params.values())
    assert total == sum(int(np.prod(s)) for _, s in detector._PARAM_SPECS)


def test_gradient_constant_loss_zero():
    model = detector.init_model(seed=0, dtype=np.float64)
    rng = np.random.default_rng(3)
    img = _random_image(rng, 32, 64)
    g = detector.grad_input(model, img, lambda logits: np.zeros(2))
    assert np.all(g == 0)


def test_gradient_matches_finite_differences():
    # central differences, 64-bit mode, 100 random coordinates
    loss_grad = lambda logits: np.array([-1.0, 1.0])

    def loss_value(model, img):
        logits = detector.forward(model, img)
        return logits[1] - logits[0]

    rng = np.random.default_rng(7)
    model = detector.init_model(seed=5, dtype=np.float64)
    img = _random_image(rng, 48, 64)
    analytic = detector.grad_input(model, img, loss_grad)
    h = 1e-4
    for _ in range(100):
        i = int(rng.integers(img.height))
        j = int(rng.integers(img.width))
        vp = img.values.copy(); vp[i, j] += h
        vm = img.values.copy(); vm[i, j] -= h
        fd = (loss_value(model, images.NormalizedImage(vp, img.payload_len))
              - loss_value(model, images.NormalizedImage(vm, img.payload_len))) / (2 * h)
        rel = abs(analytic[i, j] - fd) / (abs(analytic[i, j]) + 1e-8)
        assert rel < 1e-4, f"pixel ({i},{j}): analytic {analytic[i,j]} vs fd {fd}"


def test_gradient_masked_update_is_zero():
    model = detector.init_model(seed=0, dtype=np.float64)
    rng = np.random.default_rng(9)
    img = _random_image(rng, 32, 64)
    g = detector.grad_input(model, img, lambda logits: np.array([-1.0, 1.0]))
    mask = np.zeros_like(g)
    assert np.all(mask * g == 0)


def _tiny_dataset(rng, n=8):
    data = []
    for i in range(n):
        bias = -0.5 if i % 2 == 0 else 0.5
        values = np.clip(rng.normal(bias, 0.2, size=(16, 16)), -1, 1)
        data.append((images.NormalizedImage(values.astype(np.float32), 256), i % 2))
    return data


def test_train_lr_zero_keeps_params():
    model = detector.init_model(seed=0)
    before = {k: v.copy() for k, v in model.params.items()}
    data = _tiny_dataset(np.random.default_rng(0))
    detector.train(model, data, detector.TrainConfig(epochs=1, learning_rate=0.0))
    for k in before:
        assert np.array_equal(model.params[k], before[k])


def test_train_deterministic():
    data = _tiny_dataset(np.random.default_rng(1))
    cfg = detector.TrainConfig(epochs=3, seed=4)
    m1 = detector.init_model(seed=3)
    m2 = detector.init_model(seed=3)
    hist1 = detector.train(m1, data, cfg)
    hist2 = detector.train(m2, data, cfg)
    assert hist1 == hist2
    for k in m1.params:
        assert np.array_equal(m1.params[k], m2.params[k])


def test_train_requires_both_classes():
    data = [(img, 1) for img, _ in _tiny_dataset(np.random.default_rng(2))]
    with pytest.raises(ConfigError):
        detector.train(detector.init_model(), data, detector.TrainConfig(epochs=1))


def test_parameters_finite_after_training():
    data = _tiny_dataset(np.random.default_rng(3))
    model = detector.init_model(seed=1)
    detector.train(model, data, detector.TrainConfig(epochs=2))
    for v in model.params.values():
        assert np.all(np.isfinite(v))


def test_save_load_roundtrip(tmp_path):
    model = detector.init_model(seed=6)
    path = tmp_path / "m.mvae"
    detector.save_model(model, path)
    loaded = detector.load_model(path)
    for k in model.params:
        assert np.array_equal(model.params[k], loaded.params[k])
    rng = np.random.default_rng(4)
    img = _random_image(rng, 24, 64, np.float32)
    assert np.array_equal(detector.forward(model, img),
                          detector.forward(loaded, img))


def test_load_truncated(tmp_path):
    model = detector.init_model(seed=6)
    path = tmp_path / "m.mvae"
    detector.save_model(model, path)
    blob = path.read_bytes()
    path.write_bytes(blob[: len(blob) // 2])
    with pytest.raises(FormatError, match="truncated"):
        detector.load_model(path)


def test_load_version_mismatch(tmp_path):
    model = detector.init_model(seed=6)
    path = tmp_path / "m.mvae"
    detector.save_model(model, path)
    blob = bytearray(path.read_bytes())
    blob[4] = 9  # version byte
    path.write_bytes(bytes(blob))
    with pytest.raises(FormatError, match="version 9.*expected 1"):
        detector.load_model(path)


def test_load_bad_magic(tmp_path):
    path = tmp_path / "junk.mvae"
    path.write_bytes(b"NOPE" + bytes(100))
    with pytest.raises(FormatError, match="magic"):
        detector.load_model(path)

import math

import numpy as np
import pytest
from sklearn.base import clone

import gazelab.tensorcore as tc
from gazelab.gazeexpert import FrozenExpertError, GazeExpert, angular_errors_deg
from gazelab.synthgen import make_dataset


@pytest.fixture(scope="module")
def data():
    return make_dataset(10, 20, 32, seed=5)


@pytest.fixture(scope="module")
def fitted(data):
    return GazeExpert(input_size=32, channels=(4, 8, 8), hidden=16, epochs=15, warmup_epochs=2,
                      batch_size=16, lr=3e-3).fit(data.images, data.gaze)


def loop_bilinear(img, size):
    c, h, w = img.shape
    out = np.zeros((c, size, size))
    for i in range(size):
        for j in range(size):
            y = min(max((i + 0.5) * h / size - 0.5, 0), h - 1)
            x = min(max((j + 0.5) * w / size - 0.5, 0), w - 1)
            y0, x0 = int(y), int(x)
            y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
            fy, fx = y - y0, x - x0
            out[:, i, j] = ((1 - fy) * (1 - fx) * img[:, y0, x0] + (1 - fy) * fx * img[:, y0, x1]
                            + fy * (1 - fx) * img[:, y1, x0] + fy * fx * img[:, y1, x1])
    return out


def test_resize_matches_loop_oracle():
    img = np.random.default_rng(0).random((3, 64, 64))
    down = tc.resize_bilinear(img[None], 32).data[0]
    assert np.allclose(down, img.reshape(3, 32, 2, 32, 2).mean(axis=(2, 4)), atol=1e-12)
    up = tc.resize_bilinear(img[None, :, :20, :20], 48).data[0]
    assert np.allclose(up, loop_bilinear(img[:, :20, :20], 48), atol=1e-12)


def test_preprocess_resizes_any_input_size(fitted, data):
    big = np.repeat(np.repeat(data.images[:2], 2, axis=2), 2, axis=3)   # nearest 2x upsample
    assert fitted.preprocess(big).shape == (2, 3, 32, 32)
    assert np.allclose(fitted.preprocess(big).data, fitted.preprocess(data.images[:2]).data, atol=1e-12)
    with pytest.raises(tc.ShapeError):
        fitted.preprocess(np.zeros((1, 1, 32, 32)))


def test_learns_better_than_constant(fitted, data):
    err = angular_errors_deg(fitted.predict(data.images), data.gaze).mean()
    const = np.tile(data.gaze.mean(axis=0), (len(data), 1))
    assert err < angular_errors_deg(const, data.gaze).mean()
    assert fitted.score(data.images, data.gaze) == pytest.approx(-err)


def test_predictions_are_in_range(fitted, data):
    pred = fitted.predict(data.images)
    assert pred.shape == (len(data), 2)
    assert np.all((pred[:, 1] >= 0) & (pred[:, 1] <= math.pi / 2))


def test_freeze_is_idempotent_and_blocks_training(data):
    e = GazeExpert(input_size=32, channels=(4, 4, 4), hidden=8, epochs=1).fit(data.images, data.gaze)
    digest = e.digest()
    e.freeze().freeze()
    assert e.frozen_ and e.digest() == digest
    with pytest.raises(FrozenExpertError):
        e.fit(data.images, data.gaze)
    x = tc.Tensor(data.images[:2], requires_grad=True)
    mu, phi = e.forward_tensor(x)
    tc.sum_(mu + phi).backward()
    assert x.grad is not None and np.any(x.grad != 0)
    assert all(p.grad is None for _, p in e.params_.items())


def test_save_load_roundtrip(tmp_path, fitted, data):
    fitted.save(tmp_path / "e.gzlb")
    back = GazeExpert.load(tmp_path / "e.gzlb")
    assert back.digest() == fitted.digest()
    assert back.get_params() == fitted.get_params()
    assert np.array_equal(back.predict(data.images), fitted.predict(data.images))
    with pytest.raises(FileNotFoundError, match="missing.gzlb"):
        GazeExpert.load(tmp_path / "missing.gzlb")


def test_training_is_deterministic(data):
    kw = dict(input_size=32, channels=(4, 4, 4), hidden=8, epochs=2, seed=3)
    a = GazeExpert(**kw).fit(data.images, data.gaze)
    b = GazeExpert(**kw).fit(data.images, data.gaze)
    assert a.digest() == b.digest()
    assert GazeExpert(**{**kw, "seed": 4}).fit(data.images, data.gaze).digest() != a.digest()


def test_estimator_protocol(fitted):
    est = clone(fitted)
    assert est.get_params()["hidden"] == 16
    assert not hasattr(est, "params_")
    with pytest.raises(Exception):
        est.predict(np.zeros((1, 3, 32, 32)))


def test_degraded_expert_bias_is_bounded(data):
    noisy = GazeExpert(input_size=32, channels=(4, 4, 4), hidden=8, epochs=1, degrade_deg=5.0).fit(
        data.images, data.gaze).freeze()
    clean = clone(noisy).set_params(degrade_deg=0.0)
    clean.params_, clean.norm_mean_, clean.norm_std_, clean.frozen_ = (
        noisy.params_, noisy.norm_mean_, noisy.norm_std_, True)
    a, b = noisy.predict(data.images), clean.predict(data.images)
    assert np.array_equal(a[:, 0], b[:, 0])
    shift = np.abs(a[:, 1] - b[:, 1])
    assert shift.max() > 0 and shift.max() <= math.radians(5.0) + 1e-12


def test_input_validation(fitted):
    with pytest.raises(ValueError):
        fitted.predict(np.full((1, 3, 32, 32), np.nan))
    with pytest.raises(ValueError):
        GazeExpert(input_size=32, channels=(4, 4, 4), hidden=8, epochs=1).fit(np.zeros((2, 3, 32, 32)),
                                                                              np.zeros((3, 2)))

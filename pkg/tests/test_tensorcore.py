import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import gazelab.tensorcore as tc
from gazelab.rng import Rng
from gazelab.tensorcore import Adam, ParamSet, ShapeError, Tensor

from helpers import gradcheck


def loop_conv2d(x, w, b, stride, padding):
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for ni in range(n):
        for oi in range(o):
            for i in range(ho):
                for j in range(wo):
                    acc = b[oi]
                    for ci in range(c):
                        for a in range(k):
                            for bb in range(k):
                                acc += xp[ni, ci, i * stride + a, j * stride + bb] * w[oi, ci, a, bb]
                    out[ni, oi, i, j] = acc
    return out


def test_add_trivial():
    assert np.array_equal(tc.add(Tensor([1, 2]), Tensor([3, 4])).data, [4, 6])


def test_matmul_identity():
    a = np.random.default_rng(0).normal(size=(3, 3))
    assert np.array_equal(tc.matmul(Tensor(np.eye(3)), Tensor(a)).data, a)


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 2), (2, 1)])
def test_conv2d_matches_loop(stride, padding):
    rng = np.random.default_rng(1)
    x = rng.normal(size=(1, 1, 8, 8))
    w = rng.normal(size=(2, 1, 3, 3))
    b = rng.normal(size=2)
    got = tc.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=padding).data
    np.testing.assert_allclose(got, loop_conv2d(x, w, b, stride, padding), rtol=0, atol=1e-12)


def test_conv2d_multichannel_matches_loop():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2, 3, 7, 7))
    w = rng.normal(size=(4, 3, 5, 5))
    b = rng.normal(size=4)
    got = tc.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=2, padding=2).data
    np.testing.assert_allclose(got, loop_conv2d(x, w, b, 2, 2), rtol=0, atol=1e-12)


def test_shape_errors_name_shapes():
    with pytest.raises(ShapeError, match=r"add.*\(2,\).*\(3,\)"):
        tc.add(Tensor([1.0, 2.0]), Tensor([1.0, 2.0, 3.0]))
    with pytest.raises(ShapeError, match="matmul"):
        tc.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeError, match="conv2d"):
        tc.conv2d(Tensor(np.ones((1, 2, 5, 5))), Tensor(np.ones((1, 3, 3, 3))))


def test_backward_sum_of_squares():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    tc.sum_(tc.square(x)).backward()
    assert np.array_equal(x.grad, [2.0, 4.0, 6.0])


def test_backward_mean():
    x = Tensor(np.arange(5.0), requires_grad=True)
    tc.mean(x).backward()
    np.testing.assert_allclose(x.grad, np.full(5, 0.2), rtol=0, atol=1e-15)


def test_backward_requires_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ShapeError):
        (x * 2).backward()


def test_gradients_accumulate_across_uses_and_unreached_get_zero():
    params = ParamSet({"a": np.array([2.0]), "b": np.array([5.0])})
    a = params["a"]
    loss = tc.sum_(a * a + a * 3.0)
    loss.backward()
    grads = params.grads()
    assert grads["a"][0] == pytest.approx(7.0)
    assert grads["b"][0] == 0.0


def test_linearity_of_backward_over_paths():
    rng = np.random.default_rng(3)
    x0 = rng.normal(size=(4,))

    def grad_of(fn):
        x = Tensor(x0, requires_grad=True)
        fn(x).backward()
        return x.grad

    p1 = lambda x: tc.sum_(tc.sin(x))
    p2 = lambda x: tc.sum_(tc.square(x) * 0.5)
    both = grad_of(lambda x: p1(x) + p2(x))
    np.testing.assert_allclose(both, grad_of(p1) + grad_of(p2), rtol=0, atol=1e-14)


KERNEL5 = np.full(5, 0.2)

PRIMITIVES = {
    "add": lambda x: tc.sum_(tc.sin(x + x * 0.3)),
    "sub_div": lambda x: tc.sum_((x - 0.2) / (tc.square(x) + 1.0)),
    "mul": lambda x: tc.sum_(x * x * x),
    "abs": lambda x: tc.sum_(tc.abs_(x)),
    "sqrt": lambda x: tc.sum_(tc.sqrt(tc.square(x) + 0.5)),
    "sin_cos": lambda x: tc.sum_(tc.sin(x) * tc.cos(x * 2.0)),
    "arccos": lambda x: tc.sum_(tc.arccos(x * 0.3)),
    "clamp": lambda x: tc.sum_(tc.square(tc.clamp(x, -0.7, 0.7))),
    "sigmoid": lambda x: tc.sum_(tc.sigmoid(x * 2.0)),
    "leaky_relu": lambda x: tc.sum_(tc.square(tc.leaky_relu(x))),
    "mean_axis": lambda x: tc.sum_(tc.square(tc.mean(x, axis=(2, 3)))),
    "concat": lambda x: tc.sum_(tc.sin(tc.concat([x, x * 2.0], axis=1))),
    "reshape_getitem": lambda x: tc.sum_(tc.square(x.reshape(2, -1)[1, :5])),
    "window_mean": lambda x: tc.sum_(tc.square(tc.window_mean(x, KERNEL5))),
    "window_var_cov": lambda x: tc.sum_(tc.window_var(x, KERNEL5) + tc.window_cov(x, tc.sin(x), KERNEL5)),
    "resize_up": lambda x: tc.sum_(tc.sin(tc.resize_bilinear(x, 13))),
    "resize_down": lambda x: tc.sum_(tc.square(tc.resize_bilinear(x, 5))),
    "depth_to_space": lambda x: tc.sum_(tc.depth_to_space(x, 2) * np.arange(16 * 16).reshape(1, 1, 16, 16) / 256.0),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients_match_finite_differences(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    x0 = rng.uniform(-0.9, 0.9, size=(1, 4, 8, 8))
    # keep samples away from the kinks of abs / clamp / leaky_relu
    x0 = np.where(np.abs(x0) < 0.05, 0.1, x0)
    x0 = np.where(np.abs(np.abs(x0) - 0.7) < 0.05, 0.5, x0)
    assert gradcheck(PRIMITIVES[name], x0) < 1e-4


def test_matmul_and_conv_gradients():
    rng = np.random.default_rng(4)
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    x0 = rng.normal(size=(2, 2, 6, 6))
    assert gradcheck(lambda x: tc.sum_(tc.square(tc.conv2d(x, w, b, stride=2, padding=1))), x0) < 1e-4
    xin = rng.normal(size=(2, 2, 6, 6))
    w0 = rng.normal(size=(3, 2, 3, 3))
    assert gradcheck(lambda ww: tc.sum_(tc.square(tc.conv2d(xin, ww, padding=1))), w0) < 1e-4
    m = rng.normal(size=(4, 3))
    assert gradcheck(lambda a: tc.sum_(tc.sin(tc.matmul(a, m))), rng.normal(size=(2, 4))) < 1e-4


def test_arccos_gradient_finite_at_boundary():
    x = Tensor([1.0, -1.0, 0.99999999999], requires_grad=True)
    tc.sum_(tc.arccos(x)).backward()
    assert np.all(np.isfinite(x.grad))


def test_adam_zero_gradient_leaves_params():
    ps = ParamSet({"w": np.array([1.0, -2.0])})
    Adam(lr=0.1).step(ps, {"w": np.zeros(2)})
    assert np.array_equal(ps["w"].data, [1.0, -2.0])


def test_adam_first_step_is_lr():
    # bias-corrected first step: m_hat = g, v_hat = g^2 -> step = lr * g / (|g| + eps)
    ps = ParamSet({"w": np.array([0.5])})
    Adam(lr=0.1, eps=1e-8).step(ps, {"w": np.array([1.0])})
    assert ps["w"].data[0] == pytest.approx(0.5 - 0.1 / (1.0 + 1e-8), abs=1e-15)


def test_adam_rejects_non_finite():
    ps = ParamSet({"enc.w": np.array([0.5])})
    with pytest.raises(FloatingPointError, match="enc.w"):
        Adam().step(ps, {"enc.w": np.array([np.nan])})


def _train_twice(seed):
    rng = Rng(seed)
    ps = ParamSet({"w": rng.normal_array((3, 3))}, rng_seed=seed)
    opt = Adam(lr=0.05)
    x = Tensor(np.linspace(-1, 1, 9).reshape(3, 3))
    for _ in range(5):
        ps.zero_grad()
        tc.sum_(tc.square(tc.matmul(x, ps["w"]) - 1.0)).backward()
        opt.step(ps)
    return ps.to_bytes()


def test_adam_determinism():
    assert _train_twice(11) == _train_twice(11)


def test_paramset_sorted_and_unique():
    ps = ParamSet({"b": [1.0], "a": [2.0]})
    assert list(ps) == ["a", "b"]
    with pytest.raises(KeyError):
        ps.add("a", [3.0])


def test_checkpoint_roundtrip_and_layout(tmp_path):
    ps = ParamSet({"dec.w": np.arange(6.0).reshape(2, 3), "b": np.array([1.5])})
    path = tmp_path / "ck.gzlb"
    ps.save(path)
    blob = path.read_bytes()
    assert blob[:7] == b"GZLB-P1"
    # first record is "b": u32 len=1, "b", rank 1, dim 1, one f64
    assert blob[7:11] == (1).to_bytes(4, "little")
    assert blob[11:12] == b"b"
    back = ParamSet.load(path)
    assert back.names() == ["b", "dec.w"]
    assert np.array_equal(back["dec.w"].data, ps["dec.w"].data)
    assert back.to_bytes() == blob


def test_checkpoint_bad_magic(tmp_path):
    p = tmp_path / "x"
    p.write_bytes(b"NOPE")
    with pytest.raises(tc.CheckpointError):
        ParamSet.load(p)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=2, max_size=6))
def test_ops_are_pure(values):
    x = np.array(values)
    a = tc.sum_(tc.sigmoid(Tensor(x)) * tc.cos(Tensor(x))).data.tobytes()
    b = tc.sum_(tc.sigmoid(Tensor(x)) * tc.cos(Tensor(x))).data.tobytes()
    assert a == b

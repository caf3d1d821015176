import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from nomarl.nn import (MLP, Adam, Embedding, LayerSpec, apply_param_noise, finite_diff_check,
                       load_checkpoint, polyak_update, save_checkpoint, softmax, stack_specs)


def test_identity_linear_layer():
    net = MLP([LayerSpec(3, 3, "linear")])
    net.weights[0][...] = np.eye(3)
    net.biases[0][...] = 0.0
    x = np.array([[1.0, -2.0, 0.5]])
    assert np.array_equal(net(x), x)


def test_softmax_symmetry():
    assert softmax(np.zeros((1, 2))).tolist() == [[0.5, 0.5]]


def test_hand_affine_relu():
    net = MLP([LayerSpec(2, 2, "relu")])
    net.weights[0][...] = [[1.0, 2.0], [3.0, 4.0]]
    net.biases[0][...] = 0.0
    out, cache = net.forward(np.array([[1.0, -1.0]]))
    assert cache[0][1].tolist() == [[-1.0, -1.0]]
    assert out.tolist() == [[0.0, 0.0]]


def test_width_mismatch_errors():
    with pytest.raises(ValueError):
        MLP([LayerSpec(2, 3), LayerSpec(4, 1)])
    with pytest.raises(ValueError):
        MLP([LayerSpec(2, 3)])(np.zeros((1, 5)))
    with pytest.raises(ValueError):
        MLP([LayerSpec(2, 3, "softmax"), LayerSpec(3, 1)])
    with pytest.raises(ValueError):
        MLP([LayerSpec(2, 3)]).backward([], np.zeros((1, 3)))


def test_zero_output_gradient():
    net = MLP(stack_specs([4, 5, 3], "relu", "softmax"), np.random.default_rng(0))
    _, cache = net.forward(np.random.default_rng(1).normal(size=(6, 4)))
    grads, gin = net.backward(cache, np.zeros((6, 3)))
    assert all(not g.any() for g in grads) and not gin.any()


# beyond a logit gap of ~36 the largest component rounds to exactly 1.0 in float64
@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 7), elements=st.floats(-15, 15)))
def test_softmax_outputs_on_simplex(z):
    p = softmax(z)
    assert np.all((p > 0) & (p < 1))
    assert np.allclose(p.sum(axis=1), 1.0, atol=1e-12, rtol=0)


def test_inference_deterministic_and_dropout_free():
    net = MLP(stack_specs([4, 16, 16, 2], dropout=0.5), np.random.default_rng(0))
    x = np.random.default_rng(1).normal(size=(5, 4))
    a, b = net(x), net(x)
    assert np.array_equal(a, b)
    train_out, _ = net.forward(x, train=True, rng=np.random.default_rng(2))
    assert not np.allclose(train_out, a)


def _loss_check(net, x, w, train_seed=None):
    def loss():
        rng = None if train_seed is None else np.random.default_rng(train_seed)
        return float(np.sum(net.forward(x, train=train_seed is not None, rng=rng)[0] * w))
    rng = None if train_seed is None else np.random.default_rng(train_seed)
    _, cache = net.forward(x, train=train_seed is not None, rng=rng)
    grads, gin = net.backward(cache, w)
    return loss, grads, gin


@pytest.mark.parametrize("out_act", ["linear", "softmax", "relu"])
def test_gradcheck_layer_types(out_act):
    rng = np.random.default_rng(3)
    net = MLP(stack_specs([5, 8, 6, 4], "relu", out_act), rng)
    x = rng.normal(size=(7, 5))
    w = rng.normal(size=(7, 4))
    loss, grads, gin = _loss_check(net, x, w)
    assert finite_diff_check(net.params(), loss, grads, rng=rng).passed
    assert finite_diff_check([x], loss, [gin], rng=rng).passed


def test_gradcheck_with_dropout_mask_fixed():
    rng = np.random.default_rng(4)
    net = MLP(stack_specs([5, 8, 3], "relu", "linear", dropout=0.3), rng)
    x = rng.normal(size=(6, 5))
    w = rng.normal(size=(6, 3))
    loss, grads, _ = _loss_check(net, x, w, train_seed=9)
    assert finite_diff_check(net.params(), loss, grads, rng=rng).passed


def test_gradcheck_linear_loss_exact():
    net = MLP([LayerSpec(3, 2, "linear")], np.random.default_rng(0))
    x = np.array([[0.5, -1.0, 2.0]])
    w = np.array([[1.5, -0.5]])
    loss, grads, _ = _loss_check(net, x, w)
    report = finite_diff_check(net.params(), loss, grads, eps=1e-3)
    assert report.max_rel_error < 1e-9


def test_gradcheck_detects_corruption():
    rng = np.random.default_rng(5)
    net = MLP(stack_specs([4, 6, 2]), rng)
    x, w = rng.normal(size=(3, 4)), rng.normal(size=(3, 2))
    loss, grads, _ = _loss_check(net, x, w)
    bad = [g * 1.1 for g in grads]
    assert not finite_diff_check(net.params(), loss, bad, rng=rng).passed


def test_embedding_gradient():
    rng = np.random.default_rng(6)
    emb = Embedding(5, 3, rng)
    idx = np.array([0, 3, 3, 1])
    w = rng.normal(size=(4, 3))
    loss = lambda: float(np.sum(emb.forward(idx) * w))  # noqa: E731
    report = finite_diff_check(emb.params(), loss, emb.backward(idx, w), rng=rng)
    assert report.passed
    assert np.allclose(emb.backward(idx, w)[0][3], w[1] + w[2])


def test_adam_zero_gradient():
    p = np.array([1.0, -2.0])
    opt = Adam([p], lr=0.1)
    opt.step([np.zeros(2)])
    assert p.tolist() == [1.0, -2.0] and opt.t == 1


def test_adam_first_step_is_lr_sign():
    # after bias correction m_hat = g and v_hat = g^2, so the step is lr * g / (|g| + eps)
    g = np.array([0.3, -2.0, 1e-2])
    p = np.zeros(3)
    Adam([p], lr=1e-3).step([g])
    expected = -1e-3 * g / (np.abs(g) + 1e-8)
    assert np.allclose(p, expected, rtol=1e-9, atol=0)
    assert np.allclose(p, -1e-3 * np.sign(g), rtol=1e-5)


def test_adam_deterministic():
    g = np.array([0.5, -0.1])
    a, b = np.ones(2), np.ones(2)
    oa, ob = Adam([a]), Adam([b])
    for _ in range(3):
        oa.step([g])
        ob.step([g])
    assert np.array_equal(a, b)


def test_polyak_examples():
    t = np.zeros(3)
    polyak_update([t], [np.full(3, 2.0)], 0.5)
    assert t.tolist() == [1.0, 1.0, 1.0]
    polyak_update([t], [np.full(3, 7.0)], 0.0)
    assert t.tolist() == [1.0, 1.0, 1.0]
    polyak_update([t], [np.full(3, 7.0)], 1.0)
    assert t.tolist() == [7.0, 7.0, 7.0]


def test_param_noise():
    net = MLP(stack_specs([3, 4, 5]), np.random.default_rng(0))
    same = apply_param_noise(net, 0.0, np.random.default_rng(1))
    assert all(np.array_equal(a, b) for a, b in zip(same.params(), net.params()))
    noisy = apply_param_noise(net, 0.1, np.random.default_rng(1))
    assert np.array_equal(noisy.weights[0], net.weights[0])
    delta = np.concatenate([(noisy.weights[-1] - net.weights[-1]).ravel(),
                            noisy.biases[-1] - net.biases[-1]])
    samples = [delta]
    rng = np.random.default_rng(2)
    for _ in range(200):
        n = apply_param_noise(net, 0.1, rng)
        samples.append((n.weights[-1] - net.weights[-1]).ravel())
    allv = np.concatenate(samples)
    assert abs(allv.mean()) < 0.01
    assert allv.std() == pytest.approx(0.1, rel=0.05)


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    arrays = {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=7), "c": np.array(3.25)}
    path = tmp_path / "x.ckpt"
    save_checkpoint(path, {"note": "hi"}, arrays)
    header, loaded = load_checkpoint(path)
    assert header["note"] == "hi"
    for k, v in arrays.items():
        assert loaded[k].shape == v.shape
        assert loaded[k].tobytes() == v.astype("<f8").tobytes()


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"not a checkpoint")
    with pytest.raises(ValueError):
        load_checkpoint(path)


def test_gradcheck_near_relu_kink():
    # hidden pre-activation 3e-6 from zero: a 1e-5 step straddles the kink
    net = MLP([LayerSpec(1, 1, "relu"), LayerSpec(1, 1, "linear")])
    net.weights[0][...] = 1.0
    net.biases[0][...] = 0.0
    net.weights[1][...] = 2.0
    net.biases[1][...] = 0.0
    x = np.array([[3e-6]])
    loss, grads, _ = _loss_check(net, x, np.ones((1, 1)))
    assert finite_diff_check(net.params(), loss, grads, kink_retries=0).max_rel_error > 1e-2
    assert finite_diff_check(net.params(), loss, grads).passed

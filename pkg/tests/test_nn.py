import numpy as np
import pytest

from gaildrive import nn
from gaildrive.errors import ConfigurationError, FormatError, StateError


def naive_conv(x, w, b):
    """Direct k4/s2/p1 convolution with explicit loops."""
    n, c, h, wd = x.shape
    co = w.shape[0]
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ho, wo = (h + 2 - 4) // 2 + 1, (wd + 2 - 4) // 2 + 1
    out = np.zeros((n, co, ho, wo))
    for i in range(ho):
        for j in range(wo):
            patch = xp[:, :, 2 * i : 2 * i + 4, 2 * j : 2 * j + 4]
            out[:, :, i, j] = np.tensordot(patch, w, axes=([1, 2, 3], [1, 2, 3])) + b
    return out


def small_nets():
    """One network per layer kind, small enough for full finite differences."""
    return {
        "dense": nn.Network([nn.dense(5, 4)], side_dim=5),
        "leaky_relu": nn.Network([nn.dense(5, 6), nn.leaky_relu(), nn.dense(6, 3)], side_dim=5),
        "tanh": nn.Network([nn.dense(5, 3), nn.tanh(0, 2)], side_dim=5),
        "sigmoid": nn.Network([nn.dense(5, 3), nn.sigmoid(1, 3)], side_dim=5),
        "conv2d": nn.Network(
            [nn.conv2d(2, 3), nn.flatten(), nn.dense(3 * 4 * 4, 2)], image_shape=(2, 8, 8)
        ),
        "concat": nn.Network(
            [nn.conv2d(1, 2), nn.leaky_relu(), nn.flatten(), nn.concat(3), nn.dense(2 * 4 * 4 + 3, 2)],
            image_shape=(1, 8, 8),
            side_dim=3,
        ),
    }


def kink_free_input(net, rng, margin, batch=3):
    """Draw inputs whose leaky-relu pre-activations all sit at least ``margin`` from zero."""
    while True:
        x = rng.standard_normal((batch, net.input_dim)).astype(net.dtype)
        if net.kink_distance(x) > margin:
            return x


def test_dense_identity():
    net = nn.Network([nn.dense(2, 2)], side_dim=2)
    net.params[0][0][...] = np.eye(2)
    np.testing.assert_array_equal(net.forward([[1.0, 2.0]]), [[1.0, 2.0]])


def test_leaky_relu_values():
    net = nn.Network([nn.dense(2, 2), nn.leaky_relu(0.01)], side_dim=2)
    net.params[0][0][...] = np.eye(2)
    np.testing.assert_allclose(net.forward([[-1.0, 2.0]]), [[-0.01, 2.0]], rtol=1e-6)


def test_conv_halves_and_matches_direct_convolution():
    rng = np.random.default_rng(3)
    net = nn.Network([nn.conv2d(3, 4), nn.flatten()], image_shape=(3, 32, 32), dtype=np.float64).init(rng)
    x = rng.standard_normal((2, 3, 32, 32))
    out = net.forward(x.reshape(2, -1)).reshape(2, 4, 16, 16)
    w, b = net.params[0]
    np.testing.assert_allclose(out, naive_conv(x, w, b), atol=1e-12)
    assert nn.conv_output_size(32) == 16


def test_conv_spec_is_fixed():
    with pytest.raises(ConfigurationError):
        nn.LayerSpec("conv2d", (3, 4, 3, 1, 1))


def test_dense_backward_linear_case():
    rng = np.random.default_rng(0)
    net = nn.Network([nn.dense(3, 2)], side_dim=3, dtype=np.float64).init(rng)
    x = np.array([[0.5, -1.0, 2.0]])
    net.forward(x)
    net.backward([[1.0, 0.0]])
    np.testing.assert_array_equal(net.grads[0][0][0], x[0])
    np.testing.assert_array_equal(net.grads[0][0][1], 0.0)


@pytest.mark.parametrize("kind", list(small_nets()))
def test_zero_output_grad_gives_zero_grads(kind):
    net = small_nets()[kind].init(np.random.default_rng(1))
    x = np.random.default_rng(2).standard_normal((3, net.input_dim))
    out = net.forward(x)
    dx = net.backward(np.zeros_like(out))
    assert not dx.any()
    assert all(not g.any() for _, g in net.parameters())


def test_backward_before_forward():
    net = nn.Network([nn.dense(2, 2)], side_dim=2)
    with pytest.raises(StateError):
        net.backward([[1.0, 1.0]])


def test_shape_mismatch():
    net = nn.Network([nn.dense(2, 2)], side_dim=2)
    with pytest.raises(ConfigurationError):
        net.forward(np.zeros((1, 3)))
    with pytest.raises(ConfigurationError):
        nn.Network([nn.dense(3, 2)], side_dim=2)


@pytest.mark.parametrize("kind", list(small_nets()))
def test_gradients_match_finite_differences_64bit(kind):
    for seed in range(20):
        rng = np.random.default_rng(seed)
        net = small_nets()[kind].astype(np.float64).init(rng)
        x = kink_free_input(net, rng, 1e-3)
        errs = nn.gradient_check(net, x, rng, h=1e-6)
        assert max(errs.values()) < 1e-4, (seed, errs)


@pytest.mark.parametrize("kind", ["leaky_relu", "concat"])
def test_gradients_match_finite_differences_32bit(kind):
    for seed in range(20):
        rng = np.random.default_rng(seed)
        net = small_nets()[kind].init(rng)
        x = kink_free_input(net, rng, 5e-2)
        errs = nn.gradient_check(net, x, rng, h=1e-3)
        assert max(errs.values()) < 1e-2, (seed, errs)


def test_forward_is_deterministic():
    net = small_nets()["concat"].init(np.random.default_rng(0))
    x = np.random.default_rng(1).standard_normal((4, net.input_dim))
    assert net.forward(x).tobytes() == net.forward(x).tobytes()


def test_adam_zero_grad_is_identity():
    net = small_nets()["leaky_relu"].init(np.random.default_rng(0))
    before = [p.copy() for p, _ in net.parameters()]
    opt = nn.Adam(net, lr=1e-3)
    for _ in range(3):
        opt.step()
    for b, (p, _) in zip(before, net.parameters()):
        np.testing.assert_array_equal(b, p)


def test_adam_first_step_moves_by_lr():
    net = nn.Network([nn.dense(1, 1)], side_dim=1, dtype=np.float64)
    net.params[0][0][...] = 0.5
    net.grads[0][0][...] = 1.0
    nn.Adam(net, lr=1e-4).step()
    # bias-corrected m_hat / sqrt(v_hat) = 1, so the step is lr up to eps
    assert net.params[0][0][0, 0] == pytest.approx(0.5 - 1e-4, abs=1e-11)
    assert not net.grads[0][0].any()


def test_adam_symmetric_params_update_identically():
    net = nn.Network([nn.dense(2, 1)], side_dim=2, dtype=np.float64)
    net.params[0][0][...] = [[0.3, 0.3]]
    opt = nn.Adam(net, lr=1e-2)
    for g in (0.7, -0.2, 1.5):
        net.grads[0][0][...] = g
        opt.step()
    w = net.params[0][0]
    assert w[0, 0] == w[0, 1]


def test_checkpoint_round_trip_bit_exact():
    net = small_nets()["concat"].init(np.random.default_rng(5))
    x = np.random.default_rng(6).standard_normal((2, net.input_dim))
    blob = nn.save_params(net)
    other = small_nets()["concat"]
    nn.load_params(other, blob)
    assert nn.save_params(other) == blob
    assert other.forward(x).tobytes() == net.forward(x).tobytes()
    image, side, specs = nn.read_layout(blob)
    assert image == (1, 8, 8) and side == 3
    assert [(s.kind, s.dims) for s in specs] == [(s.kind, s.dims) for s in net.specs]
    assert [np.float32(s.slope) for s in specs] == [np.float32(s.slope) for s in net.specs]


def test_kink_distance():
    net = nn.Network([nn.dense(1, 1), nn.leaky_relu()], side_dim=1, dtype=np.float64)
    net.params[0][0][...] = 1.0
    assert net.kink_distance([[0.25], [-0.5]]) == 0.25
    assert nn.Network([nn.dense(1, 1)], side_dim=1).kink_distance([[0.0]]) == np.inf


def test_checkpoint_rejects_bad_streams():
    net = small_nets()["leaky_relu"].init(np.random.default_rng(0))
    blob = nn.save_params(net)
    with pytest.raises(FormatError):
        nn.load_params(net, blob[:-3])
    with pytest.raises(FormatError):
        nn.load_params(net, b"XXXX" + blob[4:])
    with pytest.raises(FormatError):
        nn.load_params(net, blob + b"\0")
    with pytest.raises(FormatError):
        nn.load_params(small_nets()["dense"], blob)
    with pytest.raises(FormatError):
        nn.load_params(nn.Network([nn.dense(5, 6), nn.leaky_relu(0.2), nn.dense(6, 3)], side_dim=5), blob)

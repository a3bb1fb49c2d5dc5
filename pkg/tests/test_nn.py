import numpy as np
import pytest

from phaseforge import nn
from phaseforge.errors import OddDimensions, ShapeMismatch, TargetOutOfRange

SEEDS = range(20)
STEP = 1e-3
RTOL = 1e-4


def conv_reference(x, w, b):
    """Direct nested-loop cross-correlation with zero padding k//2."""
    O, C, k, _ = w.shape
    _, H, W = x.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p)))
    y = np.zeros((O, H, W))
    for o in range(O):
        for i in range(H):
            for j in range(W):
                y[o, i, j] = b[o] + np.sum(w[o] * xp[:, i:i + k, j:j + k])
    return y


def away_from_zero(a, gap=0.05):
    return np.where(np.abs(a) < gap, gap * np.sign(a + 1e-300) + a, a)


def assert_grad(analytic, fn, x):
    numeric = nn.numerical_gradient(fn, x, STEP)
    assert nn.relative_error(analytic, numeric).max() < RTOL


# ------------------------------------------------------------------ conv

def test_conv_identity_1x1():
    x = np.random.default_rng(0).standard_normal((3, 4, 5))
    w = np.zeros((3, 3, 1, 1))
    w[np.arange(3), np.arange(3)] = 1.0
    y, _ = nn.conv2d_forward(x, w, np.zeros(3))
    np.testing.assert_array_equal(y, x)


def test_conv_all_ones_constant_interior():
    x = np.full((1, 5, 5), 2.5)
    y, _ = nn.conv2d_forward(x, np.ones((1, 1, 3, 3)), np.zeros(1))
    assert y[0, 2, 2] == pytest.approx(9 * 2.5)
    assert y[0, 0, 0] == pytest.approx(4 * 2.5)


@pytest.mark.parametrize("k", [1, 3])
@pytest.mark.parametrize("seed", range(5))
def test_conv_matches_loop_reference(k, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((3, 4, 4)).astype(np.float32)
    w = rng.standard_normal((2, 3, k, k)).astype(np.float32)
    b = rng.standard_normal(2).astype(np.float32)
    y, _ = nn.conv2d_forward(x, w, b)
    np.testing.assert_allclose(y, conv_reference(x.astype(np.float64), w, b), atol=1e-5, rtol=1e-6)


def test_conv_linearity():
    rng = np.random.default_rng(1)
    x, z = rng.standard_normal((2, 3, 6, 6))
    w = rng.standard_normal((4, 3, 3, 3))
    zero = np.zeros(4)
    a, c = 0.7, -1.3
    lhs, _ = nn.conv2d_forward(a * x + c * z, w, zero)
    rhs = a * nn.conv2d_forward(x, w, zero)[0] + c * nn.conv2d_forward(z, w, zero)[0]
    np.testing.assert_allclose(lhs, rhs, atol=1e-6)


def test_conv_shape_errors():
    with pytest.raises(ShapeMismatch):
        nn.conv2d_forward(np.zeros((2, 4, 4)), np.zeros((1, 3, 3, 3)), np.zeros(1))
    with pytest.raises(ShapeMismatch):
        nn.conv2d_forward(np.zeros((3, 4, 4)), np.zeros((1, 3, 3, 3)), np.zeros(2))
    with pytest.raises(ShapeMismatch):
        nn.conv2d_backward(np.zeros((2, 4, 4)), (3, 4, 4), np.zeros((1, 3, 3, 3)), np.zeros((27, 16)))


def test_conv_bias_grad_constant_upstream():
    x = np.random.default_rng(2).standard_normal((2, 3, 5))
    w = np.random.default_rng(3).standard_normal((4, 2, 3, 3))
    _, cols = nn.conv2d_forward(x, w, np.zeros(4))
    _, _, db = nn.conv2d_backward(np.full((4, 3, 5), 0.25), x.shape, w, cols)
    np.testing.assert_allclose(db, 3 * 5 * 0.25)


def test_conv_zero_upstream():
    x = np.random.default_rng(2).standard_normal((2, 3, 3))
    w = np.random.default_rng(3).standard_normal((4, 2, 3, 3))
    _, cols = nn.conv2d_forward(x, w, np.zeros(4))
    for g in nn.conv2d_backward(np.zeros((4, 3, 3)), x.shape, w, cols):
        assert not np.any(g)


@pytest.mark.parametrize("k", [1, 3])
@pytest.mark.parametrize("seed", SEEDS)
def test_conv_gradients(k, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 5, 5))
    w = rng.standard_normal((3, 2, k, k))
    b = rng.standard_normal(3)
    R = rng.standard_normal((3, 5, 5))
    loss = lambda: float(np.sum(R * nn.conv2d_forward(x, w, b)[0]))
    _, cols = nn.conv2d_forward(x, w, b)
    dx, dw, db = nn.conv2d_backward(R, x.shape, w, cols)
    assert_grad(dx, loss, x)
    assert_grad(dw, loss, w)
    assert_grad(db, loss, b)


# ------------------------------------------------------- pooling / shape ops

def test_upsample_of_maxpool_on_block_constant():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 3, 4)).repeat(2, axis=1).repeat(2, axis=2)
    y, _ = nn.maxpool2_forward(x)
    np.testing.assert_array_equal(nn.upsample2_forward(y), x)


def test_maxpool_odd_dimensions():
    with pytest.raises(OddDimensions):
        nn.maxpool2_forward(np.zeros((1, 3, 4)))


def test_maxpool_tie_routes_to_first_index():
    x = np.ones((1, 2, 2))
    y, idx = nn.maxpool2_forward(x)
    dx = nn.maxpool2_backward(np.array([[[3.0]]]), idx)
    np.testing.assert_array_equal(dx, [[[3.0, 0.0], [0.0, 0.0]]])
    assert dx.sum() == 3.0
    # one-sided finite difference agrees: only raising the first entry moves the output
    bumped = x.copy()
    bumped[0, 0, 0] += STEP
    assert (nn.maxpool2_forward(bumped)[0] - y)[0, 0, 0] == pytest.approx(STEP)
    bumped = x.copy()
    bumped[0, 1, 1] -= STEP
    assert (nn.maxpool2_forward(bumped)[0] - y)[0, 0, 0] == 0.0


@pytest.mark.parametrize("seed", SEEDS)
def test_maxpool_gradients(seed):
    rng = np.random.default_rng(seed)
    # distinct values with gaps far larger than the finite-difference step
    x = rng.permutation(np.arange(2 * 4 * 4, dtype=np.float64)).reshape(2, 4, 4) * 0.1
    R = rng.standard_normal((2, 2, 2))
    loss = lambda: float(np.sum(R * nn.maxpool2_forward(x)[0]))
    _, idx = nn.maxpool2_forward(x)
    assert_grad(nn.maxpool2_backward(R, idx), loss, x)


@pytest.mark.parametrize("seed", SEEDS)
def test_upsample_gradients(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 2, 3))
    R = rng.standard_normal((2, 4, 6))
    loss = lambda: float(np.sum(R * nn.upsample2_forward(x)))
    assert_grad(nn.upsample2_backward(R), loss, x)


@pytest.mark.parametrize("seed", SEEDS)
def test_relu_gradients(seed):
    rng = np.random.default_rng(seed)
    x = away_from_zero(rng.standard_normal((2, 5, 5)))
    R = rng.standard_normal((2, 5, 5))
    loss = lambda: float(np.sum(R * nn.relu_forward(x)))
    assert_grad(nn.relu_backward(R, x), loss, x)


def test_concat_shapes_and_split():
    a, b = np.zeros((3, 4, 4)), np.ones((5, 4, 4))
    y = nn.concat_forward(a, b)
    assert y.shape == (8, 4, 4)
    da, db = nn.concat_backward(y, (3, 5))
    assert da.shape == a.shape and db.shape == b.shape
    with pytest.raises(ShapeMismatch):
        nn.concat_forward(a, np.zeros((1, 4, 5)))


@pytest.mark.parametrize("seed", SEEDS)
def test_concat_gradients(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((2, 3, 3)), rng.standard_normal((1, 3, 3))
    R = rng.standard_normal((3, 3, 3))
    loss = lambda: float(np.sum(R * nn.concat_forward(a, b)))
    da, db = nn.concat_backward(R, (2, 1))
    assert_grad(da, loss, a)
    assert_grad(db, loss, b)


@pytest.mark.parametrize("seed", SEEDS)
def test_residual_block_gradients(seed):
    rng = np.random.default_rng(seed)
    blk = nn.ResidualBlock(2, rng, "r", dtype=np.float64)
    x = rng.standard_normal((2, 4, 4))
    R = rng.standard_normal((2, 4, 4))

    def loss():
        return float(np.sum(R * blk.forward(x)))

    loss()
    dx = blk.backward(R)
    assert_grad(dx, loss, x)
    for p in blk.params().values():
        assert_grad(p.grad, loss, p.data)


def test_residual_add_shape_check():
    with pytest.raises(ShapeMismatch):
        nn.residual_add(np.zeros((1, 2, 2)), np.zeros((1, 2, 3)))


# ----------------------------------------------------------- cross-entropy

def test_cross_entropy_uniform_logits():
    loss, _ = nn.softmax_cross_entropy(np.zeros((8, 3, 3)), np.zeros((3, 3), int))
    assert loss == pytest.approx(np.log(8))
    assert loss == pytest.approx(2.0794, abs=1e-4)


def test_cross_entropy_confident_limit():
    logits = np.zeros((4, 2, 2))
    logits[2] = 60.0
    loss, grad = nn.softmax_cross_entropy(logits, np.full((2, 2), 2))
    assert loss < 1e-20
    assert np.abs(grad).max() < 1e-20


def test_cross_entropy_target_range():
    with pytest.raises(TargetOutOfRange):
        nn.softmax_cross_entropy(np.zeros((3, 2, 2)), np.full((2, 2), 3))
    mask = np.zeros((2, 2), bool)
    loss, grad = nn.softmax_cross_entropy(np.zeros((3, 2, 2)), np.full((2, 2), 3), mask)
    assert loss == 0.0 and not grad.any()


def test_cross_entropy_masked_pixels_have_no_gradient():
    rng = np.random.default_rng(0)
    mask = np.array([[True, False], [False, True]])
    _, grad = nn.softmax_cross_entropy(rng.standard_normal((3, 2, 2)), rng.integers(0, 3, (2, 2)), mask)
    assert not grad[:, ~mask].any()


@pytest.mark.parametrize("seed", SEEDS)
def test_cross_entropy_gradients(seed):
    rng = np.random.default_rng(seed)
    logits = rng.standard_normal((3, 2, 2)) * 2
    target = rng.integers(0, 3, (2, 2))
    mask = rng.random((2, 2)) > 0.2
    mask[0, 0] = True
    loss = lambda: nn.softmax_cross_entropy(logits, target, mask)[0]
    _, grad = nn.softmax_cross_entropy(logits, target, mask)
    assert_grad(grad, loss, logits)


# ------------------------------------------------------------------- adam

def test_adam_zero_grad_keeps_params_and_decays_moments():
    p = np.array([1.0, -2.0])
    state = {}
    nn.adam_step(p, np.array([1.0, 1.0]), state, lr=0.1)
    m_before, v_before = state["m"].copy(), state["v"].copy()
    before = p.copy()
    nn.adam_step(p, np.zeros(2), state, lr=0.0)
    np.testing.assert_array_equal(p, before)
    np.testing.assert_allclose(state["m"], 0.9 * m_before)
    np.testing.assert_allclose(state["v"], 0.999 * v_before)
    p2 = np.array([3.0])
    nn.adam_step(p2, np.zeros(1), {}, lr=0.1)
    assert p2[0] == 3.0


def test_adam_first_step_hand_computed():
    p = np.array([0.0])
    nn.adam_step(p, np.array([1.0]), {}, lr=0.1)
    # m_hat = v_hat = 1 after bias correction
    assert p[0] == pytest.approx(-0.1 / (1 + 1e-8), rel=1e-12)


def test_adam_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        nn.adam_step(np.zeros(2), np.zeros(3), {}, lr=0.1)


def test_adam_deterministic_trajectory():
    def run():
        rng = np.random.default_rng(3)
        params = {"w": nn.Tensor(rng.standard_normal(5).astype(np.float32))}
        opt = nn.Adam(params, lr=0.01)
        for _ in range(20):
            params["w"].grad[...] = np.sin(params["w"].data)
            opt.step()
        return params["w"].data.tobytes()

    assert run() == run()

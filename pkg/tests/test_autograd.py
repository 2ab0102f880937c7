import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bandbridge import autograd as ag
from bandbridge.autograd import Tensor
from bandbridge.oracles import conv2d_loop, grad_error, gradcheck, numeric_grad


def T(gen, *shape, scale=1.0, away_from_zero=False):
    a = gen.standard_normal(shape) * scale
    if away_from_zero:
        a = np.sign(a) * (np.abs(a) + 0.05)
    return Tensor(a, requires_grad=True)


# Each case builds (scalar-valued function, tensors to check) from a generator.
def _weighted(out: Tensor, gen) -> Tensor:
    # weights depend only on the output shape so repeated evaluations agree
    w = Tensor(np.random.default_rng(list(out.shape)).standard_normal(out.shape))
    return (out * w).sum()


def _l1_case(g):
    a = T(g, 2, 3, 4)
    target = Tensor(a.data + np.sign(g.standard_normal(a.shape)) * 0.5)
    return (lambda x: ag.l1_loss(x, target)), [a]


OP_CASES = {
    "add": lambda g: ((lambda a, b: _weighted(a + b, g)), [T(g, 2, 3), T(g, 2, 3)]),
    "sub": lambda g: ((lambda a, b: _weighted(a - b, g)), [T(g, 3, 2), T(g, 3, 2)]),
    "mul": lambda g: ((lambda a, b: _weighted(a * b, g)), [T(g, 2, 2, 3), T(g, 2, 2, 3)]),
    "scalar_mul": lambda g: ((lambda a: _weighted(a * 2.5 + 1.0, g)), [T(g, 4)]),
    "relu": lambda g: ((lambda a: _weighted(ag.relu(a), g)), [T(g, 2, 5, away_from_zero=True)]),
    "gelu": lambda g: ((lambda a: _weighted(ag.gelu(a), g)), [T(g, 2, 5, scale=2.0)]),
    "sigmoid": lambda g: ((lambda a: _weighted(ag.sigmoid(a), g)), [T(g, 3, 3, scale=2.0)]),
    "concat": lambda g: ((lambda a, b: _weighted(ag.concat([a, b], axis=1), g)), [T(g, 1, 2, 3, 3), T(g, 1, 3, 3, 3)]),
    "slice": lambda g: ((lambda a: _weighted(a[:, 1:3, ::2], g)), [T(g, 2, 4, 5)]),
    "reshape": lambda g: ((lambda a: _weighted(a.reshape(3, 8), g)), [T(g, 2, 3, 4)]),
    "transpose": lambda g: ((lambda a: _weighted(a.transpose(2, 0, 3, 1), g)), [T(g, 2, 3, 4, 2)]),
    "max_pool2d": lambda g: ((lambda a: _weighted(ag.max_pool2d(a), g)), [T(g, 1, 2, 4, 6)]),
    "nearest_upsample2x": lambda g: ((lambda a: _weighted(ag.nearest_upsample2x(a), g)), [T(g, 1, 2, 3, 2)]),
    "matmul": lambda g: ((lambda a, b: _weighted(a @ b, g)), [T(g, 2, 3, 4), T(g, 2, 4, 5)]),
    "softmax": lambda g: ((lambda a: _weighted(ag.softmax(a, axis=-1), g)), [T(g, 3, 6, scale=2.0)]),
    "layer_norm": lambda g: (
        (lambda a, gm, bt: _weighted(ag.layer_norm(a, gm, bt, axis=1), g)),
        [T(g, 2, 5, 3, 2), T(g, 5), T(g, 5)],
    ),
    "conv2d": lambda g: (
        (lambda x, w, b: _weighted(ag.conv2d(x, w, b, padding=1), g)),
        [T(g, 1, 2, 5, 5), T(g, 3, 2, 3, 3), T(g, 3)],
    ),
    "conv2d_stride2": lambda g: (
        (lambda x, w: _weighted(ag.conv2d(x, w, stride=2, padding=1), g)),
        [T(g, 2, 2, 5, 5), T(g, 2, 2, 3, 3)],
    ),
    "conv2d_circular": lambda g: (
        (lambda x, w, b: _weighted(ag.conv2d(x, w, b, padding=1, padding_mode="circular"), g)),
        [T(g, 1, 2, 4, 5), T(g, 2, 2, 3, 3), T(g, 2)],
    ),
    "conv2d_1x1": lambda g: ((lambda x, w, b: _weighted(ag.conv2d(x, w, b), g)), [T(g, 2, 3, 3, 3), T(g, 4, 3, 1, 1), T(g, 4)]),
    "window_partition": lambda g: ((lambda a: _weighted(ag.window_partition(a, 2), g)), [T(g, 1, 3, 4, 4)]),
    "window_merge": lambda g: ((lambda a: _weighted(ag.window_merge(a, 1, 4, 6, 2), g)), [T(g, 6, 4, 3)]),
    "mean": lambda g: ((lambda a: ag.mean(a) * 3.0), [T(g, 3, 4)]),
    "l1_loss": _l1_case,
}


@pytest.mark.parametrize("op", sorted(OP_CASES))
@pytest.mark.parametrize("seed", range(20))
def test_op_gradients_match_finite_differences(op, seed):
    gen = np.random.default_rng(seed)
    fn, args = OP_CASES[op](gen)
    ok, worst = gradcheck(lambda: fn(*args), args, h=1e-4, rel_tol=1e-4, abs_tol=1e-6)
    assert ok, f"{op}: worst relative error {worst:.3e}"


def test_conv_identity_kernel(gen):
    x = Tensor(gen.random((1, 1, 6, 7)))
    out = ag.conv2d(x, Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)))
    np.testing.assert_array_equal(out.data, x.data)


def test_conv_constant_input_all_ones_kernel():
    out = ag.conv2d(Tensor(np.full((1, 1, 5, 5), 0.7)), Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1)))
    np.testing.assert_allclose(out.data, 9 * 0.7, rtol=0, atol=1e-15)
    assert out.shape == (1, 1, 3, 3)


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 0), (2, 1)])
def test_conv_matches_loop_reference(gen, stride, padding):
    x = gen.standard_normal((1, 2, 5, 5))
    w = gen.standard_normal((3, 2, 3, 3))
    b = gen.standard_normal(3)
    fast = ag.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=padding).data
    np.testing.assert_allclose(fast, conv2d_loop(x, w, b, stride, padding), rtol=0, atol=1e-12)


def test_conv_shape_errors_name_axes():
    with pytest.raises(ag.ShapeError, match="axis 1"):
        ag.conv2d(Tensor(np.zeros((1, 3, 5, 5))), Tensor(np.zeros((2, 2, 3, 3))))
    with pytest.raises(ag.ShapeError, match="even"):
        ag.conv2d(Tensor(np.zeros((1, 2, 5, 5))), Tensor(np.zeros((2, 2, 2, 2))))
    with pytest.raises(ag.ShapeError):
        ag.conv2d(Tensor(np.zeros((1, 2, 6, 6))), Tensor(np.zeros((2, 2, 3, 3))), stride=2)


def test_relu_and_softmax_examples():
    np.testing.assert_array_equal(ag.relu(Tensor([-3.0, 2.5])).data, [0.0, 2.5])
    np.testing.assert_allclose(ag.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, rtol=0, atol=1e-15)


def test_concat_channel_shape():
    a, b = Tensor(np.zeros((2, 3, 4, 4))), Tensor(np.zeros((2, 4, 4, 4)))
    assert ag.concat([a, b], axis=1).shape == (2, 7, 4, 4)
    with pytest.raises(ag.ShapeError):
        ag.concat([a, Tensor(np.zeros((2, 4, 5, 4)))], axis=1)


def test_no_broadcasting_between_tensors():
    with pytest.raises(ag.ShapeError):
        Tensor(np.zeros((2, 3))) + Tensor(np.zeros(3))
    with pytest.raises(ag.ShapeError):
        ag.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))


def test_rank_is_capped_at_four():
    with pytest.raises(ag.ShapeError):
        Tensor(np.zeros((1, 1, 1, 1, 1)))


@given(st.integers(1, 4), st.integers(2, 9), st.integers(0, 2**32 - 1))
@settings(max_examples=50, deadline=None)
def test_softmax_rows_sum_to_one(rows, cols, seed):
    x = np.random.default_rng(seed).standard_normal((rows, cols)) * 20
    out = ag.softmax(Tensor(x), axis=-1).data
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, rtol=0, atol=1e-6)


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=30, deadline=None)
def test_layer_norm_normalizes_channels(seed):
    gen = np.random.default_rng(seed)
    # channel values spread over [-4, 4] so per-position variance dwarfs eps
    spread = np.linspace(-4, 4, 6)
    x = np.stack([gen.permutation(spread) for _ in range(18)], axis=1).reshape(6, 2, 3, 3).transpose(1, 0, 2, 3)
    x = x + gen.standard_normal(x.shape) * 0.5 + 3.0
    out = ag.layer_norm(Tensor(x), axis=1).data
    assert np.abs(out.mean(axis=1)).max() < 1e-6
    assert np.abs(out.var(axis=1) - 1.0).max() < 1e-5


# l1 loss ------------------------------------------------------------------


def test_l1_examples():
    assert float(ag.l1_loss(Tensor([0.3, 0.9]), Tensor([0.3, 0.9])).data) == 0.0
    assert float(ag.l1_loss(Tensor([0.2, 0.4]), Tensor([0.1, 0.7])).data) == pytest.approx(0.2, abs=1e-15)


def test_l1_gradient_is_plus_one_over_count(gen):
    target = gen.random((2, 3, 4))
    pred = Tensor(target + 0.01 + gen.random(target.shape), requires_grad=True)
    ag.l1_loss(pred, Tensor(target)).backward()
    np.testing.assert_allclose(pred.grad, 1.0 / target.size, rtol=1e-15)
    num = numeric_grad(lambda: float(ag.l1_loss(pred, Tensor(target)).data), pred.data)
    assert grad_error(pred.grad, num)[0] < 1e-6


def test_l1_subgradient_at_zero_is_zero():
    pred = Tensor([0.5, 0.2], requires_grad=True)
    ag.l1_loss(pred, Tensor([0.5, 0.1])).backward()
    assert pred.grad[0] == 0.0


def test_l1_rejects_bad_inputs():
    with pytest.raises(ag.ShapeError):
        ag.l1_loss(Tensor(np.zeros(3)), Tensor(np.zeros(4)))
    with pytest.raises(ValueError):
        ag.l1_loss(Tensor(np.zeros(3)), Tensor(np.zeros(3), requires_grad=True))


# backward -----------------------------------------------------------------


def test_sum_gives_ones(gen):
    x = Tensor(gen.random((2, 3, 4)), requires_grad=True)
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4)))


def test_gradients_accumulate_across_backward_calls(gen):
    x = Tensor(gen.standard_normal((1, 2, 6, 6)))
    w = Tensor(gen.standard_normal((3, 2, 3, 3)), requires_grad=True)
    b = Tensor(gen.standard_normal(3), requires_grad=True)
    t = Tensor(gen.standard_normal((1, 3, 6, 6)))

    def loss():
        return ag.l1_loss(ag.conv2d(x, w, b, padding=1), t)

    loss().backward()
    once = w.grad.copy(), b.grad.copy()
    loss().backward()
    np.testing.assert_array_equal(w.grad, 2 * once[0])
    np.testing.assert_array_equal(b.grad, 2 * once[1])
    ag.zero_grad([w, b])
    assert w.grad is None


def test_conv_l1_chain_finite_differences(gen):
    x = Tensor(gen.standard_normal((1, 2, 8, 8)), requires_grad=True)
    w = Tensor(gen.standard_normal((3, 2, 3, 3)), requires_grad=True)
    b = Tensor(gen.standard_normal(3), requires_grad=True)
    t = Tensor(gen.standard_normal((1, 3, 8, 8)) * 10)
    ok, worst = gradcheck(lambda: ag.l1_loss(ag.conv2d(x, w, b, padding=1), t), [x, w, b])
    assert ok, worst


def test_backward_errors():
    with pytest.raises(ag.TapeError, match="scalar"):
        Tensor(np.zeros(3), requires_grad=True).reshape(3).backward()
    with pytest.raises(ag.TapeError, match="empty"):
        Tensor(np.float64(1.0)).backward()


def test_tape_order_and_single_visit(gen):
    a = Tensor(gen.random((2, 2)), requires_grad=True)
    b = a * a
    c = b + a
    loss = (c * b).sum()
    order = ag.tape(loss)
    pos = {id(n): i for i, n in enumerate(order)}
    assert len(pos) == len(order)
    for node in order:
        for p in node._parents:
            if p.requires_grad:
                assert pos[id(p)] < pos[id(node)]


def test_forward_and_gradients_are_bitwise_deterministic(gen):
    x = gen.standard_normal((2, 3, 8, 8)).astype(np.float32)
    w0 = gen.standard_normal((4, 3, 3, 3)).astype(np.float32)

    def run():
        w = Tensor(w0.copy(), requires_grad=True)
        y = ag.gelu(ag.conv2d(Tensor(x), w, padding=1))
        loss = ag.mean(ag.layer_norm(y, axis=1) * y)
        loss.backward()
        return y.data, w.grad

    (y1, g1), (y2, g2) = run(), run()
    assert y1.tobytes() == y2.tobytes() and g1.tobytes() == g2.tobytes()


def test_debug_mode_flags_non_finite():
    ag.set_debug(True)
    try:
        with pytest.raises(FloatingPointError):
            with np.errstate(over="ignore"):
                Tensor([1e308]) * 1e10
    finally:
        ag.set_debug(False)


def test_gradient_accumulation_matches_full_batch(gen):
    x = gen.standard_normal((20, 2, 6, 6))
    t = gen.standard_normal((20, 3, 6, 6))
    w = Tensor(gen.standard_normal((3, 2, 3, 3)), requires_grad=True)

    ag.l1_loss(ag.conv2d(Tensor(x), w, padding=1), Tensor(t)).backward()
    full = w.grad.copy()
    w.grad = None
    for i in range(4):
        sl = slice(5 * i, 5 * i + 5)
        (ag.l1_loss(ag.conv2d(Tensor(x[sl]), w, padding=1), Tensor(t[sl])) * 0.25).backward()
    np.testing.assert_allclose(w.grad, full, rtol=1e-6, atol=1e-12)


# adam ---------------------------------------------------------------------


def test_adam_first_step_closed_form():
    p = Tensor([1.0], requires_grad=True)
    p.grad = np.array([1.0])
    state = ag.AdamState.for_param(p, lr=1e-5)
    ag.adam_step([p], [state])
    # m_hat = g, v_hat = g^2, so the update is lr * g / (|g| + eps)
    expected = 1.0 - 1e-5 * 1.0 / (1.0 + 1e-8)
    assert abs(p.data[0] - expected) < 1e-15
    assert abs((1.0 - p.data[0]) - 1e-5) < 1e-9
    assert state.t == 1


def test_adam_zero_gradient_leaves_params():
    p = Tensor([0.3, -0.2], requires_grad=True)
    p.grad = np.zeros(2)
    ag.adam_step([p], [ag.AdamState.for_param(p, lr=1e-3)])
    np.testing.assert_array_equal(p.data, [0.3, -0.2])


def test_adam_symmetric_parameters_move_identically(gen):
    g = gen.standard_normal(5)
    a, b = Tensor(np.ones(5), requires_grad=True), Tensor(np.ones(5), requires_grad=True)
    opt = ag.Adam([a, b], lr=1e-3)
    for _ in range(3):
        a.grad, b.grad = g.copy(), g.copy()
        opt.step()
    np.testing.assert_array_equal(a.data, b.data)
    assert all(np.all(s.v >= 0) and s.m.shape == (5,) for s in opt.states)


def test_adam_missing_gradient():
    p = Tensor([1.0], requires_grad=True)
    with pytest.raises(ValueError, match="no gradient"):
        ag.adam_step([p], [ag.AdamState.for_param(p)])

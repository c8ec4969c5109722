import numpy as np
import pytest

import tempora.autodiff as ad
from tempora.autodiff import (
    NumericsError,
    Tape,
    conv1d_causal,
    elementwise,
    finite_difference_check,
    matmul,
    mean_all,
    reduce_sum,
    softmax_lastdim,
)


def test_matmul_identity():
    tape = Tape()
    a = tape.leaf([[1.0, 2.0], [3.0, 4.0]])
    eye = tape.leaf(np.eye(2))
    assert np.array_equal(matmul(a, eye).data, [[1.0, 2.0], [3.0, 4.0]])
    v = tape.leaf([[5.0], [7.0]])
    assert np.array_equal(matmul(eye, v).data, [[5.0], [7.0]])


def test_matmul_direct_value():
    tape = Tape()
    a = tape.leaf([[1.0, 2.0], [3.0, 4.0]])
    b = tape.leaf([[1.0], [1.0]])
    assert np.array_equal(matmul(a, b).data, [[3.0], [7.0]])


def test_matmul_shape_mismatch_reports_both_shapes():
    tape = Tape()
    a = tape.leaf(np.ones((2, 3)))
    b = tape.leaf(np.ones((2, 2)))
    with pytest.raises(NumericsError, match=r"\(2, 3\).*\(2, 2\)"):
        matmul(a, b)


def test_conv1d_causal_width2():
    tape = Tape()
    x = tape.leaf([[1.0], [2.0], [3.0]])
    k = tape.leaf(np.ones((2, 1, 1)))
    b = tape.leaf([0.0])
    out = conv1d_causal(x, k, b)
    assert np.array_equal(out.data.ravel(), [1.0, 3.0, 5.0])


def test_conv1d_causal_identity_kernel():
    tape = Tape()
    rng = np.random.default_rng(0)
    x = tape.leaf(rng.normal(size=(5, 3)))
    k = tape.leaf(np.eye(3)[None])
    b = tape.leaf(np.zeros(3))
    assert np.allclose(conv1d_causal(x, k, b).data, x.data)


def test_conv1d_causal_width3_cumulative():
    tape = Tape()
    x = tape.leaf([[1.0], [1.0], [1.0]])
    k = tape.leaf(np.ones((3, 1, 1)))
    b = tape.leaf([0.0])
    assert np.array_equal(conv1d_causal(x, k, b).data.ravel(), [1.0, 2.0, 3.0])


def test_conv1d_causal_width_beyond_length_is_padding():
    tape = Tape()
    x = tape.leaf([[2.0]])
    k = tape.leaf(np.ones((4, 1, 1)))
    b = tape.leaf([1.0])
    assert np.array_equal(conv1d_causal(x, k, b).data.ravel(), [3.0])


def test_conv1d_causal_rejects_empty_input():
    tape = Tape()
    x = tape.leaf(np.zeros((0, 1)))
    k = tape.leaf(np.ones((1, 1, 1)))
    b = tape.leaf([0.0])
    with pytest.raises(NumericsError, match="zero-length"):
        conv1d_causal(x, k, b)


def test_conv1d_causality_future_inputs_do_not_matter():
    # zeroing x[t'] for t' > t never changes out[0..t]
    rng = np.random.default_rng(3)
    x = rng.normal(size=(8, 2))
    k = rng.normal(size=(3, 2, 4))
    b = rng.normal(size=4)
    tape = Tape()
    full = conv1d_causal(tape.leaf(x), tape.leaf(k), tape.leaf(b)).data
    for t in range(8):
        cut = x.copy()
        cut[t + 1 :] = 0.0
        tape2 = Tape()
        part = conv1d_causal(tape2.leaf(cut), tape2.leaf(k), tape2.leaf(b)).data
        assert np.array_equal(part[: t + 1], full[: t + 1])


def test_elementwise_values():
    tape = Tape()
    assert elementwise(tape.leaf([0.0]), "sigmoid").data[0] == 0.5
    assert elementwise(tape.leaf([0.0]), "tanh").data[0] == 0.0
    assert np.array_equal(elementwise(tape.leaf([-2.0, 3.0]), "square").data, [4.0, 9.0])


def test_log_rejects_nonpositive():
    tape = Tape()
    with pytest.raises(NumericsError, match="nonpositive"):
        elementwise(tape.leaf([1.0, 0.0]), "log")


def test_softmax_values():
    tape = Tape()
    assert np.allclose(softmax_lastdim(tape.leaf([0.0, 0.0])).data, [0.5, 0.5])
    assert softmax_lastdim(tape.leaf([3.7])).data[0] == 1.0
    got = softmax_lastdim(tape.leaf([np.log(1.0), np.log(3.0)])).data
    assert np.allclose(got, [0.25, 0.75], atol=1e-15)


def test_softmax_slices_sum_to_one_and_positive():
    rng = np.random.default_rng(7)
    for _ in range(50):
        tape = Tape()
        x = tape.leaf(rng.normal(scale=5.0, size=(4, 9)))
        s = softmax_lastdim(x).data
        assert np.all(s > 0)
        assert np.max(np.abs(s.sum(axis=-1) - 1.0)) < 1e-12


def test_backward_sigmoid_at_zero():
    tape = Tape()
    x = tape.leaf([0.0])
    loss = reduce_sum(elementwise(x, "sigmoid"))
    g = tape.backward(loss).wrt(x)
    assert abs(g[0] - 0.25) < 1e-15


def test_backward_square():
    tape = Tape()
    x = tape.leaf([3.0])
    loss = reduce_sum(elementwise(x, "square"))
    assert tape.backward(loss).wrt(x)[0] == 6.0


def test_backward_constant_loss_gives_zero_leaf_gradients():
    tape = Tape()
    x = tape.leaf([1.0, 2.0])
    const = tape.leaf(5.0)
    grads = tape.backward(const)
    assert np.array_equal(grads.wrt(x), [0.0, 0.0])


def test_backward_rejects_nonscalar_loss():
    tape = Tape()
    x = tape.leaf([1.0, 2.0])
    with pytest.raises(NumericsError, match="scalar"):
        tape.backward(x)


def test_backward_twice_is_identical():
    tape = Tape()
    x = tape.leaf([0.3, -1.2, 2.0])
    loss = mean_all(ad.square(ad.tanh(x)))
    g1 = tape.backward(loss).wrt(x)
    g2 = tape.backward(loss).wrt(x)
    assert np.array_equal(g1, g2)


def test_finite_difference_on_sum_of_squares():
    rng = np.random.default_rng(11)
    err = finite_difference_check(
        lambda t: reduce_sum(ad.square(t)), rng.normal(size=(4, 3)), 1e-5
    )
    assert err < 1e-6


def test_finite_difference_constant_function():
    def f(t):
        tape = t.tape
        return reduce_sum(tape.leaf([2.0]))

    assert finite_difference_check(f, np.ones(3), 1e-5) == 0.0


def _fd_cases():
    rng = np.random.default_rng(23)

    def away_from_zero(shape):
        x = rng.normal(size=shape)
        return x + np.sign(x) * 0.2

    mul_const = rng.normal(size=(3, 2))
    mm_const = rng.normal(size=(3, 2))
    conv_k = rng.normal(size=(3, 2, 2))
    conv_b = rng.normal(size=2)

    yield "add", lambda t: mean_all(ad.square(ad.add(t, 0.5 * np.ones((3, 2))))), rng.normal(size=(3, 2))
    yield "sub", lambda t: mean_all(ad.square(ad.sub(t, np.ones((3, 2))))), rng.normal(size=(3, 2))
    yield "mul", lambda t: mean_all(ad.square(ad.mul(t, mul_const))), rng.normal(size=(3, 2))
    yield "div", lambda t: mean_all(ad.square(ad.div(t, 1.5))), rng.normal(size=(3, 2))
    yield "div_denom", lambda t: mean_all(ad.square(ad.div(np.ones((2, 2)), t))), away_from_zero((2, 2))
    yield "neg", lambda t: mean_all(ad.square(ad.neg(t))), rng.normal(size=(4,))
    yield "matmul", lambda t: mean_all(ad.square(matmul(t, mm_const))), rng.normal(size=(2, 3))
    yield "conv1d_causal", (
        lambda t: mean_all(ad.square(conv1d_causal(t, conv_k, conv_b)))
    ), rng.normal(size=(6, 2))
    yield "sigmoid", lambda t: mean_all(ad.square(ad.sigmoid(t))), rng.normal(size=(5,))
    yield "tanh", lambda t: mean_all(ad.square(ad.tanh(t))), rng.normal(size=(5,))
    yield "relu", lambda t: mean_all(ad.square(ad.relu(t))), away_from_zero((5,))
    yield "exp", lambda t: mean_all(ad.square(ad.exp(t))), rng.normal(size=(5,))
    yield "log", lambda t: mean_all(ad.square(ad.log(t))), rng.uniform(0.5, 2.0, size=(5,))
    yield "square", lambda t: mean_all(ad.square(ad.square(t))), rng.normal(size=(5,))
    yield "softmax_lastdim", lambda t: mean_all(ad.square(softmax_lastdim(t))), rng.normal(size=(2, 4))
    yield "reduce_sum_axis", lambda t: mean_all(ad.square(reduce_sum(t, axis=1))), rng.normal(size=(3, 4))
    yield "concat", (
        lambda t: mean_all(ad.square(ad.concat([t, ad.mul(t, 2.0)], axis=1)))
    ), rng.normal(size=(2, 3))
    yield "stack", (
        lambda t: mean_all(ad.square(ad.stack([t, ad.mul(t, -1.0)], axis=0)))
    ), rng.normal(size=(2, 3))
    yield "index_axis", lambda t: mean_all(ad.square(ad.index_axis(t, 1, axis=0))), rng.normal(size=(3, 2))
    yield "slice_axis", lambda t: mean_all(ad.square(ad.slice_axis(t, 1, 3, axis=1))), rng.normal(size=(2, 4))
    yield "reshape", lambda t: mean_all(ad.square(ad.reshape(t, (6,)))), rng.normal(size=(2, 3))
    yield "log_softmax", lambda t: mean_all(ad.square(ad.log_softmax_lastdim(t))), rng.normal(size=(2, 4))


@pytest.mark.parametrize("name,f,x0", list(_fd_cases()), ids=lambda c: c if isinstance(c, str) else "")
def test_finite_difference_every_primitive(name, f, x0):
    # ten random points per primitive: the base point plus nine seeded offsets
    rng = np.random.default_rng(abs(hash(name)) % (2**32))
    worst = finite_difference_check(f, x0, 1e-5)
    for _ in range(9):
        jitter = rng.normal(scale=0.05, size=np.shape(x0))
        worst = max(worst, finite_difference_check(f, x0 + jitter, 1e-5))
    assert worst < 1e-6, f"{name}: max relative error {worst}"


def test_gradient_through_mixed_graph_matches_fd():
    rng = np.random.default_rng(5)
    w = rng.normal(size=(3, 3))

    def f(t):
        h = ad.tanh(matmul(t, t.tape.leaf(w)))
        s = softmax_lastdim(h)
        return mean_all(ad.square(ad.sub(s, 0.3)))

    assert finite_difference_check(f, rng.normal(size=(2, 3)), 1e-5) < 1e-6


def test_operands_from_different_tapes_rejected():
    t1, t2 = Tape(), Tape()
    a = t1.leaf([1.0])
    b = t2.leaf([2.0])
    with pytest.raises(NumericsError, match="different tapes"):
        ad.add(a, b)


def test_nonfinite_output_rejected():
    tape = Tape()
    big = tape.leaf([800.0])
    with pytest.raises(NumericsError, match="non-finite"):
        ad.exp(big)

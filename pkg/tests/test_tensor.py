import numpy as np
import pytest

from conftest import check_gradients
from longlab import tensor as T
from longlab.errors import PatternError, ShapeError


def test_matmul_identity():
    a = T.Tensor([[1.0, 2.0], [3.0, 4.0]])
    out = T.matmul(a, T.Tensor(np.eye(2)))
    np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])


def test_matmul_hand_value():
    a = T.Tensor([[1.0, 2.0], [3.0, 4.0]])
    b = T.Tensor([[5.0], [6.0]])
    np.testing.assert_array_equal(T.matmul(a, b).data, [[17.0], [39.0]])


def test_matmul_bilinearity(rng):
    a = T.Tensor(rng.normal(size=(4, 4)))
    b = rng.normal(size=(4, 4))
    c = rng.normal(size=(4, 4))
    left = T.matmul(a, T.Tensor(b + c)).data
    right = T.matmul(a, T.Tensor(b)).data + T.matmul(a, T.Tensor(c)).data
    np.testing.assert_allclose(left, right, atol=1e-12)


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        T.matmul(T.Tensor(np.zeros((2, 3))), T.Tensor(np.zeros((2, 3))))


def test_masked_softmax_symmetric():
    out = T.masked_softmax(T.Tensor([[0.0, 0.0]]), np.array([[True, True]]))
    np.testing.assert_allclose(out.data, [[0.5, 0.5]], atol=1e-15)


def test_masked_softmax_ignores_masked_magnitude():
    logits = T.Tensor([[np.log(2.0), 0.0, 5.0]])
    out = T.masked_softmax(logits, np.array([[True, True, False]]))
    np.testing.assert_allclose(out.data, [[2 / 3, 1 / 3, 0.0]], atol=1e-12)
    assert out.data[0, 2] == 0.0


def test_masked_softmax_rows_sum_to_one(rng):
    logits = T.Tensor(rng.normal(size=(20, 13)) * 10)
    mask = rng.random((20, 13)) < 0.5
    mask[:, 0] = True
    out = T.masked_softmax(logits, mask)
    np.testing.assert_allclose(out.data.sum(axis=-1), np.ones(20), atol=1e-12)
    assert (out.data[~mask] == 0.0).all()


def test_masked_softmax_fully_masked_row_errors():
    with pytest.raises(PatternError):
        T.masked_softmax(T.Tensor([[1.0, 2.0]]), np.array([[False, False]]))


def test_layer_norm_zero_variance_maps_to_beta():
    out = T.layer_norm(T.Tensor([1.0, 1.0, 1.0]), T.Tensor(np.ones(3)), T.Tensor(np.zeros(3)))
    np.testing.assert_allclose(out.data, np.zeros(3), atol=1e-9)


def test_layer_norm_hand_value():
    out = T.layer_norm(
        T.Tensor([1.0, 2.0, 3.0]), T.Tensor(np.ones(3)), T.Tensor(np.zeros(3)), eps=1e-12
    )
    np.testing.assert_allclose(out.data, [-1.2247, 0.0, 1.2247], atol=1e-3)


def test_layer_norm_shift_invariance(rng):
    x = rng.normal(size=(5, 8))
    g = T.Tensor(rng.normal(size=8))
    b = T.Tensor(rng.normal(size=8))
    a = T.layer_norm(T.Tensor(x), g, b).data
    shifted = T.layer_norm(T.Tensor(x + 3.7), g, b).data
    np.testing.assert_allclose(a, shifted, atol=1e-9)


def test_cross_entropy_perfect_prediction():
    logits = T.Tensor([[100.0, 0.0], [0.0, 100.0]])
    loss = T.cross_entropy_mean(logits, [0, 1])
    assert loss.item() < 1e-12


def test_cross_entropy_uniform():
    loss = T.cross_entropy_mean(T.Tensor(np.zeros((3, 4))), [0, 1, 2])
    np.testing.assert_allclose(loss.item(), np.log(4.0), atol=1e-12)


def test_cross_entropy_ignores_marked_rows(rng):
    logits = rng.normal(size=(4, 5))
    base = T.cross_entropy_mean(T.Tensor(logits), [1, 2, -100, -100]).item()
    extended = np.concatenate([logits, rng.normal(size=(2, 5))], axis=0)
    more = T.cross_entropy_mean(T.Tensor(extended), [1, 2, -100, -100, -100, -100]).item()
    assert base == pytest.approx(more, abs=1e-15)


def test_cross_entropy_all_ignored_errors():
    with pytest.raises(ShapeError):
        T.cross_entropy_mean(T.Tensor(np.zeros((2, 3))), [-100, -100])


def test_gelu_properties(rng):
    # standard gelu dips between -1 and its minimum near -0.75, so monotonicity
    # only holds from the minimum onward
    x = np.sort(rng.uniform(-0.74, 6.0, size=200))
    y = T.gelu(T.Tensor(x)).data
    assert (np.diff(y) >= -1e-12).all()
    assert T.gelu(T.Tensor(0.0)).item() == 0.0


def test_backward_sum_of_squares():
    x = T.Tensor([1.0, -2.0, 3.0], requires_grad=True)
    with T.Tape() as tape:
        sq = T.mul(x, x)
        loss = T.reshape(
            T.matmul(T.reshape(sq, (1, 3)), T.Tensor(np.ones((3, 1)))), ()
        )
        T.backward(tape, loss)
    np.testing.assert_allclose(x.grad, 2 * x.data, atol=1e-12)


def test_unused_parameter_gets_no_gradient():
    x = T.Tensor([1.0, 2.0], requires_grad=True)
    unused = T.Tensor([5.0], requires_grad=True)
    with T.Tape() as tape:
        loss = T.reshape(T.matmul(T.reshape(x, (1, 2)), T.Tensor(np.ones((2, 1)))), ())
        T.backward(tape, loss)
    assert unused.grad is None


def test_backward_rejects_non_scalar():
    x = T.Tensor([1.0, 2.0], requires_grad=True)
    with T.Tape() as tape:
        y = T.mul(x, 2.0)
        with pytest.raises(ShapeError):
            T.backward(tape, y)


def test_composite_gradient_matches_finite_differences(rng):
    # matmul -> masked_softmax -> cross-entropy style scalar on a 3x3 instance
    a = rng.normal(size=(3, 3))
    b = rng.normal(size=(3, 3))
    mask = np.array([[True, True, False], [True, True, True], [False, True, True]])

    def build(ta, tb):
        scores = T.matmul(ta, tb)
        probs = T.masked_softmax(scores, mask)
        picked = T.mul(probs, np.eye(3))
        col = T.matmul(picked, T.Tensor(np.ones((3, 1))))
        return T.reshape(T.matmul(T.Tensor(np.ones((1, 3))), col), ())

    check_gradients(build, [a, b], rtol=1e-4, atol=1e-8)


def test_dropout_scales_and_masks(rng):
    x = T.Tensor(np.ones((1000,)))
    out = T.dropout(x, 0.25, np.random.default_rng(1))
    kept = out.data != 0.0
    assert abs(kept.mean() - 0.75) < 0.05
    np.testing.assert_allclose(out.data[kept], 1.0 / 0.75)


def test_take_rows_gather_and_scatter(rng):
    table = rng.normal(size=(6, 3))
    idx = np.array([[0, 2], [5, 5]])

    def build(t):
        rows = T.take_rows(t, idx)
        flat = T.reshape(rows, (4, 3))
        col = T.matmul(flat, T.Tensor(np.ones((3, 1))))
        return T.reshape(T.matmul(T.Tensor(np.ones((1, 4))), col), ())

    check_gradients(build, [table])


def test_bce_with_logits_matches_manual(rng):
    z = rng.normal(size=(4, 3))
    y = (rng.random((4, 3)) < 0.5).astype(float)
    loss = T.bce_with_logits_mean(T.Tensor(z), y).item()
    p = 1 / (1 + np.exp(-z))
    manual = -(y * np.log(p) + (1 - y) * np.log(1 - p)).mean()
    assert loss == pytest.approx(manual, rel=1e-12)

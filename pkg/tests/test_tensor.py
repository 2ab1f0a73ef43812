import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from define_embed.analysis import rel_error
from define_embed.tensor import (
    ContractError,
    DivisibilityError,
    ShapeError,
    Tape,
    Tensor,
    add,
    backward,
    concat,
    dot,
    embedding_lookup,
    matmul,
    mul,
    no_grad,
    permute,
    scale,
    sigmoid,
    softmax_cross_entropy,
    split,
    sub,
    tanh,
    tensor_sum,
    transpose,
)


def central_diff(f, x: np.ndarray, h=1e-5) -> np.ndarray:
    """Independent oracle: central differences of scalar f at x."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f(x)
        flat[i] = orig - h
        down = f(x)
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return g


class TestMatmul:
    def test_identity_right(self):
        out = matmul(Tensor([[1, 2], [3, 4]]), Tensor(np.eye(2)))
        np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])

    def test_identity_left(self):
        out = matmul(Tensor(np.eye(2)), Tensor([[5], [6]]))
        np.testing.assert_array_equal(out.data, [[5], [6]])

    def test_hand_product(self):
        out = matmul(Tensor([[1, 2], [3, 4]]), Tensor([[1], [1]]))
        np.testing.assert_array_equal(out.data, [[3], [7]])

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))

    def test_backward_formulas(self):
        rng = np.random.default_rng(0)
        a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
        dy = rng.normal(size=(3, 2))
        with Tape():
            backward(tensor_sum(mul(matmul(a, b), Tensor(dy))))
        np.testing.assert_allclose(a.grad, dy @ b.data.T, rtol=1e-14)
        np.testing.assert_allclose(b.grad, a.data.T @ dy, rtol=1e-14)


class TestSplitConcat:
    def test_two_groups(self):
        parts = split(Tensor([1, 2, 3, 4]), 2)
        assert [p.data.tolist() for p in parts] == [[1, 2], [3, 4]]

    def test_one_group(self):
        parts = split(Tensor([1, 2, 3, 4]), 1)
        assert [p.data.tolist() for p in parts] == [[1, 2, 3, 4]]

    def test_three_groups(self):
        parts = split(Tensor([1, 2, 3, 4, 5, 6]), 3)
        assert [p.data.tolist() for p in parts] == [[1, 2], [3, 4], [5, 6]]

    def test_indivisible(self):
        with pytest.raises(DivisibilityError):
            split(Tensor([1, 2, 3]), 2)

    def test_concat_rank1(self):
        assert concat([Tensor([1, 2]), Tensor([3, 4])]).data.tolist() == [1, 2, 3, 4]

    def test_concat_single_is_same(self):
        t = Tensor([1.0, 2.0])
        assert concat([t]) is t

    def test_concat_three(self):
        assert concat([Tensor([1]), Tensor([2]), Tensor([3])]).data.tolist() == [1, 2, 3]

    def test_concat_batch_mismatch(self):
        with pytest.raises(ShapeError):
            concat([Tensor(np.ones((2, 3))), Tensor(np.ones((3, 3)))])

    def test_concat_routes_gradient_slices(self):
        a = Tensor([1.0, 2.0], requires_grad=True)
        b = Tensor([3.0, 4.0, 5.0], requires_grad=True)
        w = Tensor([1.0, 2.0, 3.0, 4.0, 5.0])
        with Tape():
            backward(dot(concat([a, b]), w))
        assert a.grad.tolist() == [1, 2]
        assert b.grad.tolist() == [3, 4, 5]

    @given(st.integers(1, 8), st.integers(1, 8), st.integers(1, 3))
    @settings(max_examples=60, deadline=None)
    def test_concat_split_identity(self, g, width, batch):
        x = np.arange(batch * g * width, dtype=float).reshape(batch, g * width)
        back = concat(split(Tensor(x), g))
        np.testing.assert_array_equal(back.data, x)


class TestLookupAndLoss:
    def test_uniform_logits(self):
        loss = softmax_cross_entropy(Tensor(np.zeros((1, 10))), [3])
        assert loss.item() == pytest.approx(math.log(10), abs=1e-12)
        assert loss.item() == pytest.approx(2.302585, abs=1e-6)

    def test_identity_table(self):
        out = embedding_lookup(Tensor(np.eye(3)), [1])
        assert out.data.tolist() == [[0, 1, 0]]

    def test_large_logit_stable(self):
        loss = softmax_cross_entropy(Tensor([[1000.0, 0.0]]), [0])
        exact = math.log1p(math.exp(-1000.0))  # log(e^1000 + 1) - 1000
        assert math.isfinite(loss.item())
        assert loss.item() == pytest.approx(exact, abs=1e-300)

    def test_large_logit_gradient_finite(self):
        x = Tensor([[1000.0, 0.0]], requires_grad=True)
        with Tape():
            backward(softmax_cross_entropy(x, [1]))
        np.testing.assert_allclose(x.grad, [[1.0, -1.0]])

    def test_out_of_range_id(self):
        with pytest.raises(IndexError):
            embedding_lookup(Tensor(np.eye(3)), [3])
        with pytest.raises(IndexError):
            softmax_cross_entropy(Tensor(np.zeros((1, 3))), [5])

    def test_lookup_scatter_adds(self):
        table = Tensor(np.zeros((4, 2)), requires_grad=True)
        with Tape():
            backward(tensor_sum(embedding_lookup(table, [1, 1, 3])))
        np.testing.assert_array_equal(table.grad, [[0, 0], [2, 2], [0, 0], [1, 1]])

    def test_xent_matches_naive(self):
        rng = np.random.default_rng(3)
        z = rng.normal(size=(5, 7))
        t = rng.integers(0, 7, size=5)
        naive = np.mean(np.log(np.exp(z).sum(1)) - z[np.arange(5), t])
        assert softmax_cross_entropy(Tensor(z), t).item() == pytest.approx(naive, rel=1e-13)


class TestBackward:
    def test_sum(self):
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        with Tape():
            backward(tensor_sum(x))
        assert x.grad.tolist() == [1, 1, 1]

    def test_dot_self(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape():
            backward(dot(x, x))
        assert x.grad.tolist() == [2, 4]

    def test_detached_has_no_grad(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape():
            backward(tensor_sum(x.detach()))
        assert x.grad is None

    def test_non_scalar_loss(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape():
            y = scale(x, 2.0)
            with pytest.raises(ContractError):
                backward(y)

    def test_repeat_backward_accumulates(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape():
            loss = dot(x, x)
            backward(loss)
            backward(loss)
        assert x.grad.tolist() == [4, 8]

    def test_requires_grad_false_never_accumulates(self):
        x = Tensor([1.0, 2.0])
        y = Tensor([3.0, 4.0], requires_grad=True)
        with Tape():
            backward(dot(x, y))
        assert x.grad is None

    def test_no_grad_records_nothing(self):
        x = Tensor([1.0], requires_grad=True)
        with Tape() as tape, no_grad():
            y = scale(x, 3.0)
        assert len(tape) == 0 and not y.requires_grad

    def test_tape_order_topological(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape() as tape:
            dot(tanh(x), sigmoid(x))
        for idx, node in enumerate(tape.nodes):
            for t in node.inputs:
                assert t.tape_id is None or t.tape_id < idx


UNARY = {
    "tanh": tanh,
    "sigmoid": sigmoid,
    "transpose": transpose,
    "scale": lambda x: scale(x, 1.7),
    "permute": lambda x: permute(x, [2, 0, 1, 3]),
    "split0": lambda x: split(x, 2)[0],
    "split1": lambda x: split(x, 2)[1],
    "concat": lambda x: concat([x, tanh(x)]),
    "concat0": lambda x: concat([x, x], axis=0),
    "sum": lambda x: tensor_sum(x),
}

BINARY = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "matmul": lambda a, b: matmul(a, transpose(b)),
}


def _check(fn, inputs, weight_seed=0):
    """Autodiff vs central differences for loss = sum(fn(*inputs) * R)."""
    with no_grad():
        out_shape = fn(*[Tensor(x) for x in inputs]).shape
    R = np.random.default_rng(weight_seed).normal(size=out_shape) if out_shape else 1.0

    def loss_of(arrs):
        out = fn(*[Tensor(a) for a in arrs])
        return float(np.sum(out.data * R))

    ts = [Tensor(x.copy(), requires_grad=True) for x in inputs]
    with Tape():
        out = fn(*ts)
        backward(tensor_sum(mul(out, Tensor(R))) if out.shape else out)
    worst = 0.0
    for i, x in enumerate(inputs):
        arrs = [a.copy() for a in inputs]
        fd = central_diff(lambda v: loss_of(arrs[:i] + [v] + arrs[i + 1:]), arrs[i])
        worst = max(worst, float(rel_error(ts[i].grad, fd).max()))
    return worst


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_gradients_at_random_points(name):
    rng = np.random.default_rng(sorted(UNARY).index(name))
    for _ in range(20):
        x = rng.normal(size=(3, 4))
        assert _check(UNARY[name], [x], int(rng.integers(1 << 30))) < 1e-4


@pytest.mark.parametrize("name", sorted(BINARY))
def test_binary_gradients_at_random_points(name):
    rng = np.random.default_rng(len(name))
    for _ in range(20):
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
        assert _check(BINARY[name], [a, b], int(rng.integers(1 << 30))) < 1e-4


def test_bias_add_gradient():
    rng = np.random.default_rng(5)
    for _ in range(20):
        assert _check(add, [rng.normal(size=(3, 4)), rng.normal(size=4)]) < 1e-4


def test_lookup_and_xent_gradients():
    rng = np.random.default_rng(6)
    ids = np.array([0, 2, 2, 1])
    targets = np.array([1, 0, 3, 3])
    for _ in range(20):
        table = rng.normal(size=(4, 4))
        assert _check(lambda t: softmax_cross_entropy(embedding_lookup(t, ids), targets),
                      [table]) < 1e-4


def test_determinism_bit_identical():
    def run():
        rng = np.random.default_rng(11)
        w = Tensor(rng.normal(size=(6, 5)), requires_grad=True)
        x = Tensor(rng.normal(size=(4, 6)))
        with Tape():
            loss = softmax_cross_entropy(tanh(matmul(x, w)), [0, 1, 2, 3])
            backward(loss)
        return loss.data.tobytes(), w.grad.tobytes()

    assert run() == run()

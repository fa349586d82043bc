import math

import numpy as np
import pytest

from hyperqa import tensor as T
from hyperqa.tensor import Tensor


def finite_difference(build_loss, leaves, rng, eps=1e-5, coords=6):
    """Central-difference oracle over sampled coordinates of each leaf.

    Returns the worst relative error between analytic and numeric grads,
    with a small floor in the denominator so exactly-zero gradients do not
    divide by FD noise.
    """
    for leaf in leaves:
        leaf.grad = None
    loss = build_loss()
    T.backward(loss)
    analytic = [np.zeros_like(l.data) if l.grad is None else l.grad.copy() for l in leaves]
    worst = 0.0
    for leaf, an in zip(leaves, analytic):
        flat = leaf.data.reshape(-1)
        for i in rng.choice(flat.size, size=min(coords, flat.size), replace=False):
            orig = flat[i]
            flat[i] = orig + eps
            up = float(build_loss().data)
            flat[i] = orig - eps
            down = float(build_loss().data)
            flat[i] = orig
            fd = (up - down) / (2 * eps)
            a = an.reshape(-1)[i]
            worst = max(worst, abs(fd - a) / max(abs(fd), abs(a), 1e-5))
    return worst


def _t(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def test_backward_square_sum():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    T.backward(T.sum_(T.mul(x, x)))
    assert np.array_equal(x.grad, [2.0, 4.0])


def test_backward_rejects_nonscalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(T.ShapeError):
        T.backward(T.mul(x, x))


def test_shape_errors_name_op():
    a = Tensor(np.ones((2, 3)))
    b = Tensor(np.ones((4, 5)))
    with pytest.raises(T.ShapeError, match="matmul"):
        T.matmul(a, b)
    with pytest.raises(T.ShapeError, match="add"):
        T.add(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 4))))


def test_grad_accumulates_over_reuse():
    x = Tensor(np.array([3.0]), requires_grad=True)
    y = T.add(T.mul(x, x), T.mul(x, x))
    T.backward(T.sum_(y))
    assert np.allclose(x.grad, [12.0])


def test_tape_consumed_after_backward():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    y = T.mul(x, x)
    loss = T.sum_(y)
    T.backward(loss)
    assert y._backward is None and y._parents == ()
    assert y.grad is None
    assert x.grad is not None


@pytest.mark.parametrize("op_name", [
    "matmul2d", "matmul_batched", "add", "add_bias", "mul", "scale", "concat",
    "relu", "mean", "sum", "reshape", "transpose", "embedding", "layer_norm",
    "masked_softmax", "cross_entropy",
])
def test_primitive_gradients_match_finite_differences(op_name):
    rng = np.random.default_rng(hash(op_name) % 2**32)
    for trial in range(8):
        if op_name == "matmul2d":
            a, b = _t(rng, 4, 5), _t(rng, 5, 3)
            leaves, f = [a, b], lambda: T.sum_(T.mul(T.matmul(a, b), T.matmul(a, b)))
        elif op_name == "matmul_batched":
            a, b = _t(rng, 2, 3, 4, 5), _t(rng, 2, 3, 5, 2)
            leaves, f = [a, b], lambda: T.sum_(T.matmul(a, b))
        elif op_name == "add":
            a, b = _t(rng, 3, 4), _t(rng, 3, 4)
            leaves, f = [a, b], lambda: T.sum_(T.mul(T.add(a, b), T.add(a, b)))
        elif op_name == "add_bias":
            a, b = _t(rng, 2, 3, 4), _t(rng, 4)
            leaves, f = [a, b], lambda: T.sum_(T.mul(T.add(a, b), T.add(a, b)))
        elif op_name == "mul":
            a, b = _t(rng, 4, 2), _t(rng, 4, 2)
            leaves, f = [a, b], lambda: T.sum_(T.mul(T.mul(a, b), T.mul(a, b)))
        elif op_name == "scale":
            a = _t(rng, 3, 3)
            leaves, f = [a], lambda: T.sum_(T.mul(T.scale(a, -1.7), T.scale(a, -1.7)))
        elif op_name == "concat":
            a, b = _t(rng, 2, 3), _t(rng, 2, 2)
            leaves, f = [a, b], lambda: T.sum_(T.mul(T.concat([a, b], 1), T.concat([a, b], 1)))
        elif op_name == "relu":
            a = _t(rng, 5, 5)
            leaves, f = [a], lambda: T.sum_(T.mul(T.relu(a), T.relu(a)))
        elif op_name == "mean":
            a = _t(rng, 4, 6)
            leaves, f = [a], lambda: T.sum_(T.mul(T.mean(a, axis=1), T.mean(a, axis=1)))
        elif op_name == "sum":
            a = _t(rng, 4, 6)
            leaves, f = [a], lambda: T.sum_(T.mul(T.sum_(a, axis=0), T.sum_(a, axis=0)))
        elif op_name == "reshape":
            a = _t(rng, 3, 4)
            leaves, f = [a], lambda: T.sum_(T.mul(T.reshape(a, (2, 6)), T.reshape(a, (2, 6))))
        elif op_name == "transpose":
            a = _t(rng, 2, 3, 4)
            leaves, f = [a], lambda: T.sum_(
                T.mul(T.transpose(a, (2, 0, 1)), T.transpose(a, (2, 0, 1)))
            )
        elif op_name == "embedding":
            table = _t(rng, 7, 4)
            ids = rng.integers(0, 7, size=(3, 5))
            leaves = [table]
            f = lambda: T.sum_(
                T.mul(T.embedding_lookup(table, ids), T.embedding_lookup(table, ids))
            )
        elif op_name == "layer_norm":
            a, g, b = _t(rng, 3, 5, 6), _t(rng, 6), _t(rng, 6)
            leaves, f = [a, g, b], lambda: T.sum_(
                T.mul(T.layer_norm(a, g, b), T.layer_norm(a, g, b))
            )
        elif op_name == "masked_softmax":
            a = _t(rng, 4, 6)
            mask = (rng.random((4, 6)) > 0.3).astype(float)
            mask[:, 0] = 1.0
            weight = Tensor(rng.standard_normal((4, 6)))
            leaves = [a]
            f = lambda: T.sum_(T.mul(T.masked_softmax(a, mask), weight))
        else:  # cross_entropy
            a = _t(rng, 5, 8)
            targets = rng.integers(0, 8, size=5)
            leaves, f = [a], lambda: T.cross_entropy_logits(a, targets)
        assert finite_difference(f, leaves, rng) < 1e-4, f"{op_name} trial {trial}"


def test_randomized_gradcheck_battery():
    # ~100 random shapes/values across the composite forward, 64-bit.
    rng = np.random.default_rng(99)
    checked = 0
    while checked < 100:
        rows, cols = int(rng.integers(1, 6)), int(rng.integers(1, 6))
        a = _t(rng, rows, cols)
        b = _t(rng, cols, rows)
        gain, bias = _t(rng, rows), _t(rng, rows)
        mask = (rng.random((rows, rows)) > 0.4).astype(float)
        mask[np.arange(rows), rng.integers(0, rows, rows)] = 1.0

        def f():
            x = T.matmul(a, b)
            x = T.layer_norm(x, gain, bias)
            p = T.masked_softmax(x, mask)
            return T.sum_(T.mul(p, Tensor(np.ones((rows, rows)))))

        assert finite_difference(f, [a, b, gain, bias], rng, coords=3) < 1e-4
        checked += 4


def test_masked_softmax_symmetry():
    probs = T.masked_softmax(Tensor(np.array([[0.0, 0.0]])), np.array([[1.0, 1.0]]))
    assert np.allclose(probs.data, [[0.5, 0.5]])


def test_masked_softmax_single_unmasked():
    probs = T.masked_softmax(Tensor(np.array([[5.0, 9.0]])), np.array([[1.0, 0.0]]))
    assert probs.data[0, 0] == 1.0
    assert probs.data[0, 1] == 0.0


def test_masked_softmax_rows_sum_to_one():
    rng = np.random.default_rng(1)
    x = Tensor(rng.standard_normal((30, 9)) * 40)
    mask = (rng.random((30, 9)) > 0.5).astype(float)
    mask[:, 3] = 1.0
    probs = T.masked_softmax(x, mask)
    assert np.allclose(probs.data.sum(axis=1), 1.0, atol=1e-6)
    assert np.all(probs.data[mask == 0] == 0.0)


def test_masked_softmax_fully_masked_row_rejected():
    with pytest.raises(ValueError, match="fully-masked"):
        T.masked_softmax(Tensor(np.zeros((2, 3))), np.array([[1, 0, 0], [0, 0, 0]]))


def test_masked_positions_get_exactly_zero_gradient():
    rng = np.random.default_rng(2)
    x = Tensor(rng.standard_normal((3, 5)), requires_grad=True)
    mask = np.ones((3, 5))
    mask[:, 2] = 0.0
    probs = T.masked_softmax(x, mask)
    T.backward(T.sum_(T.mul(probs, Tensor(rng.standard_normal((3, 5))))))
    assert np.all(x.grad[:, 2] == 0.0)


def test_layer_norm_moments():
    rng = np.random.default_rng(3)
    x = Tensor(rng.standard_normal((40, 16)) * 3 + 1)
    out = T.layer_norm(x, Tensor(np.ones(16)), Tensor(np.zeros(16)))
    assert np.allclose(out.data.mean(axis=-1), 0.0, atol=1e-6)
    assert np.allclose(out.data.var(axis=-1), 1.0, atol=1e-5)


def test_cross_entropy_uniform_logits():
    loss = T.cross_entropy_logits(Tensor(np.zeros(3)), 1)
    assert math.isclose(float(loss.data), math.log(3), rel_tol=1e-9)


def test_cross_entropy_batch_mean():
    logits = Tensor(np.zeros((4, 5)))
    loss = T.cross_entropy_logits(logits, np.array([0, 1, 2, 3]))
    assert math.isclose(float(loss.data), math.log(5), rel_tol=1e-9)


def test_dropout_eval_identity():
    x = Tensor(np.ones((10, 10)))
    assert T.dropout(x, 0.5, train=False, seed=1) is x


def test_dropout_zero_fraction_and_rescale():
    rng = np.random.default_rng(4)
    x = Tensor(np.ones((200, 200)))
    rate = 0.3
    out = T.dropout(x, rate, train=True, seed=12)
    zeros = np.sum(out.data == 0.0)
    n = out.data.size
    sigma = math.sqrt(n * rate * (1 - rate))
    assert abs(zeros - n * rate) < 3 * sigma
    kept = out.data[out.data != 0.0]
    assert np.allclose(kept, 1.0 / (1 - rate))


def test_dropout_deterministic_given_seed():
    x = Tensor(np.ones((50, 50)))
    a = T.dropout(x, 0.2, train=True, seed=7)
    b = T.dropout(x, 0.2, train=True, seed=7)
    assert np.array_equal(a.data, b.data)


def test_dropout_rejects_bad_rate():
    with pytest.raises(ValueError):
        T.dropout(Tensor(np.ones(3)), 1.0, train=True, seed=0)


def test_adam_zero_grads_leave_params():
    p = {"w": Tensor(np.array([1.0, 2.0]), requires_grad=True)}
    state = T.AdamState()
    T.adam_step(p, {"w": np.zeros(2)}, state, lr=0.1)
    assert np.array_equal(p["w"].data, [1.0, 2.0])
    assert np.all(state.m["w"] == 0.0) and np.all(state.v["w"] == 0.0)


def test_adam_single_step_matches_hand_computation():
    # m=0.1, v=0.001, mhat=1, vhat=1 -> update = lr/(1+eps) ~= lr
    p = {"w": Tensor(np.array([0.5]), requires_grad=True)}
    state = T.AdamState()
    T.adam_step(p, {"w": np.array([1.0])}, state, lr=0.001)
    expected = 0.5 - 0.001 * 1.0 / (1.0 + 1e-8)
    assert math.isclose(p["w"].data[0], expected, rel_tol=1e-12)


def test_adam_bitwise_deterministic():
    def run():
        rng = np.random.default_rng(0)
        p = {"w": Tensor(rng.standard_normal(8), requires_grad=True)}
        state = T.AdamState()
        for step in range(20):
            g = np.sin(np.arange(8.0) + step)
            T.adam_step(p, {"w": g}, state, lr=0.01)
        return p["w"].data.tobytes()

    assert run() == run()


def test_adam_shape_mismatch():
    p = {"w": Tensor(np.zeros((2, 2)), requires_grad=True)}
    with pytest.raises(T.ShapeError, match="adam_step"):
        T.adam_step(p, {"w": np.zeros(3)}, T.AdamState(), lr=0.1)


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(8)
    arrays = {
        "a": rng.standard_normal((3, 4)),
        "b": rng.standard_normal(7).astype(np.float32),
        "scalar": np.array(3.5),
    }
    meta = {"seed": 3, "config_hash": "abc123"}
    path = tmp_path / "ckpt.bin"
    T.save_checkpoint(path, arrays, meta)
    loaded, loaded_meta = T.load_checkpoint(path)
    assert loaded_meta == meta
    for name, arr in arrays.items():
        assert loaded[name].dtype == arr.dtype
        assert loaded[name].tobytes() == arr.tobytes()


def test_checkpoint_rejects_bad_magic(tmp_path):
    path = tmp_path / "junk.bin"
    path.write_bytes(b"NOTACKPT" + b"\x00" * 32)
    with pytest.raises(ValueError, match="magic"):
        T.load_checkpoint(path)


def test_embedding_lookup_range_check():
    table = Tensor(np.zeros((4, 2)))
    with pytest.raises(IndexError):
        T.embedding_lookup(table, np.array([0, 4]))

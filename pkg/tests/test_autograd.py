import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ecgformer import autograd as ag
from ecgformer.errors import NumericalError, ShapeError

from oracles import central_difference_grad, max_rel_err

GRAD_TOL = 1e-6


def check_op_gradient(build_loss, *input_shapes, seed=0, tol=GRAD_TOL):
    """Compare analytic gradients of scalar build_loss(*tensors) to central differences."""
    rng = np.random.default_rng(seed)
    arrays = [rng.normal(size=s) for s in input_shapes]
    tensors = [ag.Tensor(a.copy(), requires_grad=True) for a in arrays]
    loss = build_loss(*tensors)
    named = {str(i): t for i, t in enumerate(tensors)}
    analytic = ag.collect_gradients(loss, named)
    for i, base in enumerate(arrays):
        def f(x, i=i):
            probe = [a.copy() for a in arrays]
            probe[i] = x
            ts = [ag.Tensor(a) for a in probe]
            return build_loss(*ts).item()

        numeric = central_difference_grad(f, base.copy())
        err = max_rel_err(analytic[str(i)], numeric)
        assert err < tol, f"input {i}: rel err {err}"


class TestForwardValues:
    def test_softmax_uniform_on_zeros(self):
        out = ag.softmax(ag.Tensor([0.0, 0.0, 0.0]))
        np.testing.assert_allclose(out.data, [1 / 3] * 3, atol=1e-15)

    def test_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(1)
        out = ag.softmax(ag.Tensor(rng.normal(size=(5, 7)) * 10))
        np.testing.assert_allclose(out.data.sum(axis=-1), 1.0, atol=1e-12)
        assert (out.data >= 0).all()

    def test_layer_norm_constant_vector_is_zero(self):
        out = ag.layer_norm(ag.Tensor(np.full((4,), 3.7)), ag.Tensor(np.ones(4)), ag.Tensor(np.zeros(4)))
        np.testing.assert_allclose(out.data, 0.0, atol=1e-12)

    def test_sigmoid_at_zero(self):
        assert ag.sigmoid(ag.Tensor([0.0])).data[0] == 0.5

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 2\)|\(2, 2\).*\(2, 3\)"):
            ag.matmul(ag.Tensor(np.zeros((2, 3))), ag.Tensor(np.zeros((2, 2))))

    def test_nan_trips_checked_error(self):
        with np.errstate(over="ignore"), pytest.raises(NumericalError):
            ag.mul(ag.Tensor([1e308]), ag.Tensor([1e308]))
        with pytest.raises(NumericalError):
            ag.Tensor([np.nan])

    def test_dropout_eval_is_identity(self):
        x = ag.Tensor(np.arange(6.0).reshape(2, 3))
        assert ag.dropout(x, 0.5, training=False) is x

    def test_dropout_deterministic_per_seed(self):
        x = ag.Tensor(np.ones((4, 4)))
        a = ag.dropout(x, 0.4, rng=123).data
        b = ag.dropout(x, 0.4, rng=123).data
        np.testing.assert_array_equal(a, b)

    def test_dropout_expectation(self):
        # Mean of dropout(x) over 1e4 trials stays within 3 sigma of x.
        p, trials = 0.3, 10_000
        x = ag.Tensor(np.ones(8))
        total = np.zeros(8)
        for seed in range(trials):
            total += ag.dropout(x, p, rng=seed).data
        est = total / trials
        sigma = np.sqrt(p / (1 - p) / trials)  # var of mask/keep for x=1
        assert np.all(np.abs(est - 1.0) < 3 * sigma + 1e-9)

    def test_bce_clamps_extreme_probabilities(self):
        loss = ag.binary_cross_entropy(ag.Tensor([0.0, 1.0]), np.array([0.0, 1.0]))
        assert np.isfinite(loss.item())


class TestBackwardBasics:
    def test_sum_gives_ones(self):
        x = ag.Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        ag.backward(ag.tensor_sum(x))
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_product_rule(self):
        rng = np.random.default_rng(2)
        xv, yv = rng.normal(size=5), rng.normal(size=5)
        x = ag.Tensor(xv, requires_grad=True)
        y = ag.Tensor(yv, requires_grad=True)
        ag.backward(ag.tensor_sum(x * y))
        np.testing.assert_allclose(x.grad, yv)
        np.testing.assert_allclose(y.grad, xv)

    def test_fanout_accumulates(self):
        x = ag.Tensor(np.ones(3), requires_grad=True)
        loss = ag.tensor_sum(ag.add(x, x))
        ag.backward(loss)
        np.testing.assert_array_equal(x.grad, np.full(3, 2.0))

    def test_second_backward_is_error(self):
        x = ag.Tensor(np.ones(3), requires_grad=True)
        loss = ag.tensor_sum(x)
        ag.backward(loss)
        with pytest.raises(RuntimeError, match="already ran"):
            ag.backward(loss)

    def test_non_scalar_loss_rejected(self):
        x = ag.Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ShapeError):
            ag.backward(x * 2.0)

    def test_detached_loss_rejected(self):
        with pytest.raises(NumericalError, match="detached"):
            ag.backward(ag.tensor_sum(ag.Tensor(np.ones(3))))

    def test_broadcast_add_backward_preserves_grad_sum(self):
        # Gradient of the broadcast operand equals the explicit-tiling gradient.
        rng = np.random.default_rng(3)
        xv = rng.normal(size=(4, 3))
        bv = rng.normal(size=3)
        x = ag.Tensor(xv, requires_grad=True)
        b = ag.Tensor(bv, requires_grad=True)
        ag.backward(ag.tensor_sum(ag.mul(ag.add(x, b), ag.Tensor(rng.normal(size=(4, 3))))))
        x2 = ag.Tensor(xv, requires_grad=True)
        b2 = ag.Tensor(np.tile(bv, (4, 1)), requires_grad=True)
        # Same weights for an apples-to-apples comparison.
        rng = np.random.default_rng(3)
        rng.normal(size=(4, 3)), rng.normal(size=3)
        w = rng.normal(size=(4, 3))
        loss2 = ag.tensor_sum(ag.mul(ag.add(x2, b2), ag.Tensor(w)))
        ag.backward(loss2)
        np.testing.assert_allclose(b.grad, b2.grad.sum(axis=0))


class TestGradientsAgainstFiniteDifferences:
    def test_add_broadcast(self):
        check_op_gradient(lambda a, b: ag.tensor_sum(ag.mul(ag.add(a, b), ag.add(a, b))), (3, 4), (4,))

    def test_mul(self):
        check_op_gradient(lambda a, b: ag.tensor_sum(ag.mul(a, b)), (3, 4), (3, 4))

    def test_matmul(self):
        check_op_gradient(lambda a, b: ag.tensor_sum(ag.matmul(a, b)), (3, 4), (4, 2))

    def test_transpose(self):
        check_op_gradient(lambda a, b: ag.tensor_sum(ag.matmul(ag.transpose(a), b)), (4, 3), (4, 2))

    def test_reshape(self):
        check_op_gradient(lambda a: ag.tensor_sum(ag.mul(ag.reshape(a, (6,)), ag.reshape(a, (6,)))), (2, 3))

    def test_concat(self):
        check_op_gradient(
            lambda a, b: ag.tensor_sum(ag.mul(ag.concat([a, b], axis=1), ag.concat([a, b], axis=1))),
            (2, 3),
            (2, 2),
        )

    def test_slice(self):
        check_op_gradient(lambda a: ag.tensor_sum(ag.mul(a[1:3, :2], a[1:3, :2])), (4, 3))

    def test_softmax(self):
        rng = np.random.default_rng(5)
        w = rng.normal(size=(3, 5))
        check_op_gradient(lambda a: ag.tensor_sum(ag.mul(ag.softmax(a), ag.Tensor(w))), (3, 5))

    def test_layer_norm(self):
        rng = np.random.default_rng(6)
        w = rng.normal(size=(3, 5))
        check_op_gradient(
            lambda a, g, b: ag.tensor_sum(ag.mul(ag.layer_norm(a, g, b), ag.Tensor(w))),
            (3, 5),
            (5,),
            (5,),
        )

    def test_gelu_tanh(self):
        check_op_gradient(lambda a: ag.tensor_sum(ag.mul(ag.gelu(a), ag.gelu(a))), (4, 4))

    def test_gelu_exact(self):
        check_op_gradient(lambda a: ag.tensor_sum(ag.gelu(a, exact=True)), (4, 4))

    def test_sigmoid(self):
        check_op_gradient(lambda a: ag.tensor_sum(ag.mul(ag.sigmoid(a), ag.sigmoid(a))), (3, 3))

    def test_mean_all(self):
        check_op_gradient(lambda a: ag.mean(ag.mul(a, a)), (3, 4))

    def test_mean_axis(self):
        check_op_gradient(lambda a: ag.tensor_sum(ag.mul(ag.mean(a, axis=0), ag.mean(a, axis=0))), (3, 4))

    def test_embedding_row_select(self):
        idx = np.array([0, 2, 2, 1])
        check_op_gradient(lambda a: ag.tensor_sum(ag.mul(ag.embedding_row_select(a, idx), ag.embedding_row_select(a, idx))), (4, 3))

    def test_binary_cross_entropy(self):
        rng = np.random.default_rng(7)
        targets = rng.integers(0, 2, size=(3, 4)).astype(float)
        check_op_gradient(
            lambda a: ag.binary_cross_entropy(ag.sigmoid(a), targets),
            (3, 4),
        )

    def test_dropout_backward_uses_same_mask(self):
        rng = np.random.default_rng(8)
        xv = rng.normal(size=(5, 5))
        x = ag.Tensor(xv, requires_grad=True)
        out = ag.dropout(x, 0.4, rng=99)
        mask = out.data / np.where(xv == 0, 1.0, xv)
        ag.backward(ag.tensor_sum(out))
        np.testing.assert_allclose(x.grad, mask)

    @settings(max_examples=25, deadline=None)
    @given(
        seed=st.integers(min_value=0, max_value=2**31 - 1),
        lead=st.integers(min_value=1, max_value=4),
        rows=st.integers(min_value=1, max_value=5),
        cols=st.integers(min_value=1, max_value=5),
    )
    def test_broadcast_add_gradients_random_shapes(self, seed, lead, rows, cols):
        # Leading-axis broadcasting keeps exact gradients for any such shape.
        rng = np.random.default_rng(seed)
        big = rng.normal(size=(lead, rows, cols))
        small = rng.normal(size=(cols,))
        w = rng.normal(size=big.shape)
        a = ag.Tensor(big, requires_grad=True)
        b = ag.Tensor(small, requires_grad=True)
        ag.backward(ag.tensor_sum(ag.mul(ag.add(a, b), ag.Tensor(w))))
        np.testing.assert_allclose(a.grad, w, atol=1e-12)
        np.testing.assert_allclose(b.grad, w.sum(axis=(0, 1)), atol=1e-12)


class TestAdam:
    def test_zero_gradient_leaves_params(self):
        p = {"w": ag.Tensor(np.array([1.0, 2.0]), requires_grad=True)}
        state = ag.adam_init(p)
        before = p["w"].data.copy()
        ag.adam_step(p, {"w": np.zeros(2)}, state, lr=0.1)
        np.testing.assert_array_equal(p["w"].data, before)

    def test_first_step_closed_form(self):
        g = np.array([0.5, -2.0, 1e-3])
        p = {"w": ag.Tensor(np.zeros(3), requires_grad=True)}
        state = ag.adam_init(p)
        lr, eps = 0.01, 1e-8
        ag.adam_step(p, {"w": g}, state, lr=lr, eps=eps)
        want = -lr * g / (np.abs(g) + eps)
        np.testing.assert_allclose(p["w"].data, want, rtol=1e-12)

    def test_convex_quadratic_convergence(self):
        rng = np.random.default_rng(9)
        c = rng.normal(size=6)
        w = ag.Tensor(c + rng.uniform(-0.25, 0.25, size=6), requires_grad=True)
        params = {"w": w}
        state = ag.adam_init(params)
        for _ in range(200):
            diff = w.data - c
            ag.adam_step(params, {"w": 2.0 * diff}, state, lr=0.05)
        assert np.linalg.norm(w.data - c) < 1e-3


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(10)
        arrays = {
            "proj.weight": rng.normal(size=(7, 5)),
            "proj.bias": rng.normal(size=5),
            "scalar": np.array(3.25),
        }
        p1 = tmp_path / "a.ckpt"
        p2 = tmp_path / "b.ckpt"
        ag.save_checkpoint(p1, arrays)
        loaded = ag.load_checkpoint(p1)
        ag.save_checkpoint(p2, loaded)
        assert p1.read_bytes() == p2.read_bytes()
        for k, v in arrays.items():
            np.testing.assert_array_equal(loaded[k], v.astype(np.float32).astype(np.float64))

    def test_magic_rejected(self, tmp_path):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"NOPE" + b"\x00" * 10)
        with pytest.raises(NumericalError):
            ag.load_checkpoint(bad)

    def test_names_and_shapes_preserved(self, tmp_path):
        arrays = {"a.b.c": np.zeros((2, 3, 4)), "d": np.ones(1)}
        path = tmp_path / "c.ckpt"
        ag.save_checkpoint(path, arrays)
        loaded = ag.load_checkpoint(path)
        assert set(loaded) == {"a.b.c", "d"}
        assert loaded["a.b.c"].shape == (2, 3, 4)


class TestDtypeMode:
    def test_float32_mode(self):
        ag.set_default_dtype(np.float32)
        try:
            t = ag.Tensor([1.0, 2.0])
            assert t.data.dtype == np.float32
        finally:
            ag.set_default_dtype(np.float64)

    def test_default_is_float64(self):
        assert ag.Tensor([1.0]).data.dtype == np.float64

import numpy as np
import pytest

from renodet.errors import ConfigError, DataError, NumericError
from renodet.neuro import (
    FINETUNE_SCHEDULE,
    PRETRAIN_SCHEDULE,
    AdamState,
    Schedule,
    Tensor,
    adam_step,
    add,
    cheb_conv,
    dense,
    finite_difference_check,
    graph_operator,
    load_weights,
    lr_at,
    mean_pool,
    parameter,
    relu,
    save_weights,
    softmax,
    softmax_xent,
    zero_grads,
)


class TestTensor:
    def test_non_finite_rejected(self):
        with pytest.raises(NumericError, match="finite"):
            Tensor(np.array([1.0, np.nan]))

    def test_backward_needs_scalar(self):
        t = parameter(np.array([1.0, 2.0]))
        with pytest.raises(DataError, match="scalar"):
            t.backward()

    def test_shared_input_accumulates(self):
        # x feeds both operands of add twice over: dz/dx = 4
        x = parameter(np.array([[3.0]]))
        z = add(add(x, x), add(x, x))
        loss = mean_pool(z)
        loss.backward()
        assert x.grad[0, 0] == pytest.approx(4.0)


class TestDense:
    def test_identity(self):
        x = Tensor(np.array([1.0, -2.0, 3.0]))
        out = dense(x, Tensor(np.eye(3)), Tensor(np.zeros(3)))
        np.testing.assert_array_equal(out.values, x.values)

    def test_zero_input_gives_bias(self):
        b = Tensor(np.array([0.5, -1.5]))
        out = dense(Tensor(np.zeros(4)), Tensor(np.zeros((4, 2))), b)
        np.testing.assert_array_equal(out.values, b.values)

    def test_shape_mismatch(self):
        with pytest.raises(DataError, match="shape"):
            dense(Tensor(np.zeros(3)), Tensor(np.zeros((4, 2))),
                  Tensor(np.zeros(2)))

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(0)
        w = parameter((4, 3), rng)
        b = parameter(np.zeros(3))
        x = parameter(rng.normal(size=4))

        def loss_fn(params):
            return softmax_xent(dense(params[2], params[0], params[1]), 1)

        assert finite_difference_check(loss_fn, [w, b, x]) <= 1e-4

    def test_batched_gradients(self):
        rng = np.random.default_rng(1)
        w = parameter((5, 3), rng)
        b = parameter(rng.normal(size=3))
        x = parameter(rng.normal(size=(6, 5)))

        def loss_fn(params):
            return softmax_xent(dense(params[2], params[0], params[1]),
                                np.array([0, 1, 2, 0, 1, 2]))

        assert finite_difference_check(loss_fn, [w, b, x]) <= 1e-4


def path_graph_operator():
    return graph_operator(2, np.array([[0, 1]]))


class TestChebConv:
    def test_two_node_path_oracle(self):
        op = path_graph_operator()
        x = Tensor(np.array([[1.0], [0.0]]))
        out = cheb_conv(op, x, Tensor(np.array([[1.0]])),
                        Tensor(np.array([[1.0]])))
        np.testing.assert_allclose(out.values, [[1.0], [-1.0]], atol=1e-15)

    def test_w1_zero_is_per_node_dense(self):
        rng = np.random.default_rng(2)
        edges = np.array([[0, 1], [1, 2], [2, 3], [3, 0]])
        op = graph_operator(4, edges)
        x = Tensor(rng.normal(size=(4, 3)))
        w0 = Tensor(rng.normal(size=(3, 2)))
        out = cheb_conv(op, x, w0, Tensor(np.zeros((3, 2))))
        np.testing.assert_allclose(out.values, x.values @ w0.values, atol=1e-15)

    def test_isolated_node_row_is_dense_only(self):
        # node 3 has no edges; its operator row is zero
        op = graph_operator(4, np.array([[0, 1], [1, 2]]))
        rng = np.random.default_rng(3)
        x = Tensor(rng.normal(size=(4, 2)))
        w0 = Tensor(rng.normal(size=(2, 2)))
        w1 = Tensor(rng.normal(size=(2, 2)))
        out = cheb_conv(op, x, w0, w1)
        np.testing.assert_allclose(out.values[3], x.values[3] @ w0.values,
                                   atol=1e-15)

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(4)
        n = 9
        edges = np.unique(np.sort(rng.integers(0, n, size=(20, 2)), axis=1),
                          axis=0)
        edges = edges[edges[:, 0] != edges[:, 1]]
        x = rng.normal(size=(n, 3))
        w0, w1 = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
        out = cheb_conv(graph_operator(n, edges), Tensor(x), Tensor(w0),
                        Tensor(w1)).values
        perm = rng.permutation(n)
        inv = np.argsort(perm)
        pedges = perm[edges]
        pout = cheb_conv(graph_operator(n, pedges), Tensor(x[inv]), Tensor(w0),
                         Tensor(w1)).values
        np.testing.assert_allclose(pout, out[inv], atol=1e-6)

    def test_accepts_kidney_graph(self):
        from renodet.mesher import KidneyGraph
        graph = KidneyGraph(node_features=np.zeros((2, 4)),
                            edges=np.array([[0, 1]]))
        x = Tensor(np.array([[1.0], [0.0]]))
        out = cheb_conv(graph, x, Tensor(np.array([[1.0]])),
                        Tensor(np.array([[1.0]])))
        np.testing.assert_allclose(out.values, [[1.0], [-1.0]])

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(5)
        edges = np.array([[0, 1], [1, 2], [0, 2], [2, 3]])
        op = graph_operator(4, edges)
        x = parameter(rng.normal(size=(4, 3)))
        w0 = parameter((3, 2), rng)
        w1 = parameter((3, 2), rng)

        def loss_fn(params):
            h = cheb_conv(op, params[0], params[1], params[2])
            return softmax_xent(mean_pool(relu(h)), 1)

        assert finite_difference_check(loss_fn, [x, w0, w1]) <= 1e-4


class TestSoftmaxXent:
    def test_uniform_two_class_loss(self):
        loss = softmax_xent(Tensor(np.array([0.3, 0.3])), 0)
        assert loss.values == pytest.approx(np.log(2.0), abs=1e-15)

    def test_gradient_sums_to_zero(self):
        logits = parameter(np.array([1.0, -0.5, 2.0]))
        loss = softmax_xent(logits, 2)
        loss.backward()
        assert logits.grad.sum() == pytest.approx(0.0, abs=1e-15)

    def test_batch_is_mean_of_singles(self):
        rng = np.random.default_rng(6)
        logits = rng.normal(size=(4, 3))
        labels = np.array([0, 2, 1, 1])
        batch = softmax_xent(Tensor(logits), labels).values
        singles = np.mean([softmax_xent(Tensor(row), lab).values
                           for row, lab in zip(logits, labels)])
        assert batch == pytest.approx(singles, abs=1e-14)

    def test_label_out_of_range(self):
        with pytest.raises(DataError, match="label"):
            softmax_xent(Tensor(np.array([0.0, 0.0])), 2)

    def test_single_class_rejected(self):
        with pytest.raises(DataError, match="2 classes"):
            softmax_xent(Tensor(np.array([0.0])), 0)

    def test_softmax_probabilities(self):
        p = softmax(np.array([0.0, 0.0]))
        np.testing.assert_allclose(p, [0.5, 0.5], atol=1e-15)
        big = softmax(np.array([1000.0, 0.0]))
        assert np.isfinite(big).all() and big[0] > 0.999


class TestAdam:
    def test_zero_gradient_no_motion(self):
        params = [parameter(np.array([1.0, 2.0]))]
        state = AdamState.for_params(params)
        adam_step(params, [np.zeros(2)], state, lr=0.1)
        np.testing.assert_array_equal(params[0].values, [1.0, 2.0])

    def test_constant_gradient_step_magnitude_approaches_lr(self):
        p = np.array([0.0])
        state = AdamState.for_params([p])
        lr = 1e-3
        prev = p.copy()
        for _ in range(300):
            prev = p.copy()
            adam_step([p], [np.array([2.7])], state, lr=lr)
        assert abs(abs((p - prev)[0]) - lr) / lr < 0.01

    def test_bitwise_deterministic(self):
        def run():
            rng = np.random.default_rng(7)
            p = rng.normal(size=(3, 3))
            state = AdamState.for_params([p])
            for _ in range(50):
                adam_step([p], [rng.normal(size=(3, 3))], state, lr=1e-2)
            return p

        a, b = run(), run()
        assert a.tobytes() == b.tobytes()

    def test_nan_gradient_aborts(self):
        params = [np.zeros(2)]
        state = AdamState.for_params(params)
        with pytest.raises(NumericError, match="parameter 0"):
            adam_step(params, [np.array([1.0, np.nan])], state, lr=0.1)


class TestSchedule:
    def test_acceptance_points_exact(self):
        s = PRETRAIN_SCHEDULE
        assert lr_at(s, 1) == s.lr_min
        assert lr_at(s, 16) == s.lr_max
        assert lr_at(s, s.k_max) == 0.0

    def test_warmup_linear(self):
        s = Schedule(lr_min=1e-4, lr_max=4e-3, a=4.0, k_max=500)
        for k in range(1, 16):
            expected = s.lr_max * ((k - 1) / 15) + s.lr_min
            assert lr_at(s, k) == expected

    def test_monotone_decay_after_peak(self):
        # strictly decreasing until the exponential underflows to zero
        for s in (PRETRAIN_SCHEDULE, FINETUNE_SCHEDULE):
            rates = [lr_at(s, k) for k in range(16, s.k_max + 1)]
            for a, b in zip(rates, rates[1:]):
                assert b < a or (a == 0.0 and b == 0.0)

    def test_warmup_monotone_rise(self):
        rates = [lr_at(PRETRAIN_SCHEDULE, k) for k in range(1, 17)]
        assert all(b > a for a, b in zip(rates, rates[1:]))

    def test_out_of_range_epoch(self):
        with pytest.raises(ConfigError, match="outside"):
            lr_at(PRETRAIN_SCHEDULE, 0)
        with pytest.raises(ConfigError, match="outside"):
            lr_at(PRETRAIN_SCHEDULE, 501)

    def test_invalid_schedule_rejected(self):
        with pytest.raises(ConfigError):
            Schedule(lr_min=0.0, lr_max=1e-3, a=4.0, k_max=100)
        with pytest.raises(ConfigError):
            Schedule(lr_min=1e-4, lr_max=1e-3, a=-1.0, k_max=100)
        with pytest.raises(ConfigError):
            Schedule(lr_min=1e-4, lr_max=1e-3, a=4.0, k_max=16)

    def test_finetune_constants(self):
        assert FINETUNE_SCHEDULE.lr_max == 5e-4
        assert FINETUNE_SCHEDULE.a == 3.0
        assert FINETUNE_SCHEDULE.k_max == 100


class TestGradientChecker:
    def test_detects_wrong_gradient(self):
        x = parameter(np.array([1.5]))

        def bad_square(t):
            def backprop(grad):
                t._accumulate(grad * 3.0 * t.values)  # should be 2x

            return Tensor(t.values**2, _parents=(t,), _backprop=backprop)

        def loss_fn(params):
            return bad_square(params[0])

        with pytest.raises(NumericError, match="gradient check"):
            finite_difference_check(loss_fn, [x])

    def test_zero_grads(self):
        x = parameter(np.array([1.0]))
        x.grad = np.array([5.0])
        zero_grads([x])
        assert x.grad is None


class TestSerialization:
    def test_roundtrip_bitwise(self, tmp_path):
        rng = np.random.default_rng(8)
        named = {"w0": rng.normal(size=(4, 3)), "b0": rng.normal(size=3),
                 "scalar": np.float64(2.5)}
        save_weights(named, tmp_path / "model", meta={"epochs": 5})
        back, meta = load_weights(tmp_path / "model")
        assert meta == {"epochs": 5}
        for name, arr in named.items():
            np.testing.assert_array_equal(back[name], np.asarray(arr))
            assert back[name].dtype == np.float64

    def test_accepts_tensors(self, tmp_path):
        t = parameter(np.arange(6.0).reshape(2, 3))
        save_weights({"p": t}, tmp_path / "m")
        back, _ = load_weights(tmp_path / "m")
        np.testing.assert_array_equal(back["p"], t.values)

    def test_payload_mismatch(self, tmp_path):
        save_weights({"w": np.zeros((2, 2))}, tmp_path / "m")
        raw = tmp_path / "m.raw"
        raw.write_bytes(raw.read_bytes()[:-8])
        with pytest.raises(DataError, match="payload"):
            load_weights(tmp_path / "m")

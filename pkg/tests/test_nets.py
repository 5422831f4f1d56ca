import numpy as np
import pytest

from labelforge import nets


def make_net(seed, widths):
    return nets.init_net(np.random.default_rng(seed), widths)


class TestForward:
    def test_zero_weight_net_maps_to_zero(self):
        net = make_net(0, [3, 5, 4, 2])
        for w in net.weights:
            w[:] = 0.0
        out = nets.forward(net, np.ones((7, 3), dtype=np.float32))
        assert np.all(out == 0.0)

    def test_identity_composition_on_positive_input(self):
        net = nets.DenseNet(
            [1, 1, 1, 1],
            [np.ones((1, 1), dtype=np.float32) for _ in range(3)],
            [np.zeros(1, dtype=np.float32) for _ in range(3)],
        )
        out = nets.forward(net, np.array([[2.0]], dtype=np.float32))
        assert out[0, 0] == pytest.approx(2.0)

    def test_matches_naive_matmul_oracle(self):
        net = make_net(3, [4, 6, 5, 3])
        rng = np.random.default_rng(4)
        x = rng.normal(size=(8, 4)).astype(np.float32)
        got = nets.forward(net, x)

        # triple-loop oracle
        a = x.astype(np.float64)
        for li, (w, b) in enumerate(zip(net.weights, net.biases)):
            nxt = np.zeros((a.shape[0], w.shape[1]))
            for i in range(a.shape[0]):
                for j in range(w.shape[1]):
                    acc = float(b[j])
                    for k in range(w.shape[0]):
                        acc += a[i, k] * float(w[k, j])
                    nxt[i, j] = acc
            a = np.maximum(nxt, 0.0) if li < 2 else nxt
        np.testing.assert_allclose(got, a, atol=1e-6)

    def test_shape_mismatch_names_widths(self):
        net = make_net(0, [3, 5, 4, 2])
        with pytest.raises(ValueError, match="3"):
            nets.forward(net, np.ones((2, 7), dtype=np.float32))


class TestBackward:
    def test_mse_perfect_prediction_zero_everything(self):
        net = make_net(1, [2, 3, 3, 2])
        x = np.array([[0.3, -0.4]], dtype=np.float32)
        target = nets.forward(net, x)
        loss, grads = nets.backward(net, x, "mse", target)
        assert loss == 0.0
        for gw, gb in grads:
            assert np.all(gw == 0.0) and np.all(gb == 0.0)

    def test_cross_entropy_even_logits_is_ln2(self):
        # logits (0, 0), target class 0 -> softmax (0.5, 0.5), loss ln 2
        net = make_net(2, [2, 3, 3, 2])
        for w in net.weights:
            w[:] = 0.0
        loss, _ = nets.backward(
            net, np.ones((1, 2), dtype=np.float32), "cross_entropy", np.array([0])
        )
        assert loss == pytest.approx(np.log(2.0), abs=1e-7)

    def test_invalid_class_index_raises(self):
        net = make_net(2, [2, 3, 3, 2])
        with pytest.raises(ValueError, match="class index"):
            nets.backward(net, np.ones((1, 2), dtype=np.float32), "cross_entropy", np.array([2]))

    @pytest.mark.parametrize("loss_kind", ["mse", "cross_entropy"])
    def test_finite_difference_agreement(self, loss_kind):
        rng = np.random.default_rng(5)
        net = nets.to_float64(make_net(5, [3, 5, 4, 3]))
        x = rng.normal(size=(6, 3))
        if loss_kind == "mse":
            targets = rng.normal(size=(6, 3))
        else:
            targets = rng.integers(0, 3, size=6)
        worst = nets.gradient_check(net, x, loss_kind, targets)
        assert worst <= 1e-3

    def test_losses_nonnegative_and_ce_monotone_limit(self):
        rng = np.random.default_rng(6)
        net = nets.to_float64(make_net(6, [2, 4, 4, 2]))
        x = rng.normal(size=(5, 2))
        loss_mse, _ = nets.backward(net, x, "mse", rng.normal(size=(5, 2)))
        loss_ce, _ = nets.backward(net, x, "cross_entropy", rng.integers(0, 2, size=5))
        assert loss_mse >= 0.0 and loss_ce >= 0.0

        # CE decreases monotonically toward 0 as the correct logit grows
        losses = []
        for t in [0.0, 1.0, 3.0, 8.0, 20.0]:
            logits = np.array([[t, 0.0]])
            loss, _ = nets.loss_and_output_grad(logits, "cross_entropy", np.array([0]))
            losses.append(loss)
        assert all(a > b for a, b in zip(losses, losses[1:]))
        assert losses[-1] < 1e-8


class TestStep:
    def test_zero_grads_leave_parameters_unchanged(self):
        for kind in ("sgd", "adam"):
            net = make_net(7, [2, 3, 3, 2])
            before = net.copy()
            grads = [(np.zeros_like(w), np.zeros_like(b)) for w, b in zip(net.weights, net.biases)]
            state = nets.OptimState(lr=0.1, kind=kind)
            nets.step(net, grads, state)
            assert state.step_count == 1
            for w0, w1 in zip(before.weights, net.weights):
                assert np.array_equal(w0, w1)

    def test_single_sgd_update_arithmetic(self):
        net = make_net(8, [2, 3, 3, 2])
        net.weights[0][0, 0] = 1.0
        grads = [(np.zeros_like(w), np.zeros_like(b)) for w, b in zip(net.weights, net.biases)]
        grads[0][0][0, 0] = 0.5
        nets.step(net, grads, nets.OptimState(lr=0.1))
        assert net.weights[0][0, 0] == pytest.approx(0.95)

    def test_quadratic_descent_reaches_analytic_minimum(self):
        # minimize (b2 - 3)^2 via the output bias; all other params fixed at
        # zero stay at zero (dead rectifier path), so b2 is the lone parameter
        net = make_net(9, [1, 1, 1, 1])
        for w in net.weights:
            w[:] = 0.0
        for b in net.biases:
            b[:] = 0.0
        state = nets.OptimState(lr=0.1)
        x = np.zeros((1, 1), dtype=np.float32)
        target = np.full((1, 1), 3.0, dtype=np.float32)
        for _ in range(200):
            _, grads = nets.backward(net, x, "mse", target)
            nets.step(net, grads, state)
        assert abs(net.biases[-1][0] - 3.0) < 1e-3
        assert state.step_count == 200

    def test_nonfinite_gradient_names_layer(self):
        net = make_net(10, [2, 3, 3, 2])
        grads = [(np.zeros_like(w), np.zeros_like(b)) for w, b in zip(net.weights, net.biases)]
        grads[1][0][0, 0] = np.nan
        with pytest.raises(ValueError, match="layer 1"):
            nets.step(net, grads, nets.OptimState(lr=0.1))


class TestProperties:
    def test_gradient_check_twenty_seeded_small_nets(self):
        rng = np.random.default_rng(11)
        for seed in range(20):
            widths = [3, 4, 4, 3]  # 52 params < 200
            net = nets.to_float64(make_net(seed, widths))
            x = rng.normal(size=(4, 3))
            kind = "mse" if seed % 2 == 0 else "cross_entropy"
            targets = rng.normal(size=(4, 3)) if kind == "mse" else rng.integers(0, 3, size=4)
            assert nets.gradient_check(net, x, kind, targets) <= 1e-3

    def test_training_is_bit_deterministic(self):
        def run():
            rng = np.random.default_rng(12)
            net = nets.init_net(rng, [4, 8, 8, 2])
            x = np.random.default_rng(13).normal(size=(32, 4)).astype(np.float32)
            y = np.random.default_rng(14).integers(0, 2, size=32)
            nets.fit(rng, net, x, y, "cross_entropy", nets.TrainParams(epochs=3, lr=0.05))
            return net
        a, b = run(), run()
        for wa, wb in zip(a.weights, b.weights):
            assert np.array_equal(wa, wb)

    def test_optimizer_buffers_mirror_parameter_shapes(self):
        net = make_net(15, [3, 5, 4, 2])
        state = nets.OptimState(lr=1e-3, kind="adam")
        _, grads = nets.backward(
            net, np.ones((2, 3), dtype=np.float32), "mse", np.zeros((2, 2), dtype=np.float32)
        )
        nets.step(net, grads, state)
        for (mw, mb), w, b in zip(state.m, net.weights, net.biases):
            assert mw.shape == w.shape and mb.shape == b.shape


class TestCheckpoint:
    def test_save_load_roundtrip(self, tmp_path):
        net = make_net(16, [4, 6, 5, 3])
        net.save(tmp_path / "ckpt")
        back = nets.DenseNet.load(tmp_path / "ckpt")
        assert back.layer_widths == net.layer_widths
        for wa, wb in zip(net.weights, back.weights):
            assert np.array_equal(wa, wb)

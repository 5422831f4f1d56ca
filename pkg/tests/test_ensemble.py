import numpy as np
import pytest

from labelforge import ensemble, hypercolumn, nets, scene


def field_from(data):
    data = np.asarray(data, dtype=np.float32)
    return hypercolumn.HypercolumnField(data.shape[0], data.shape[2], data, [0])


def constant_net(c, n_out, out_bias):
    """Zero-weight net whose output is a fixed bias vector."""
    net = nets.init_net(np.random.default_rng(0), [c, 4, 4, n_out])
    for w in net.weights:
        w[:] = 0.0
    for b in net.biases:
        b[:] = 0.0
    net.biases[-1][:] = np.asarray(out_bias, dtype=np.float32)
    return net


class TestTrainEnsemble:
    def test_single_member_memorizes_constant_label(self):
        rng = np.random.default_rng(0)
        data = rng.normal(size=(8, 8, 6)).astype(np.float32)
        labels = np.full((8, 8), 2, dtype=np.int64)
        model = ensemble.train_ensemble(
            rng, [(field_from(data), labels)], (16, 8), ensemble.DISCRETE, 4,
            ensemble.EnsembleTrainParams(epochs=60, pixels_per_image=64, lr=5e-3),
            n_members=1,
        )
        pred, _ = ensemble.predict(model, field_from(data))
        assert (pred == 2).mean() >= 0.99

    def test_identical_seeds_give_bit_identical_members(self):
        rng = np.random.default_rng(1)
        data = rng.normal(size=(8, 8, 5)).astype(np.float32)
        labels = rng.integers(0, 3, size=(8, 8))
        model = ensemble.train_ensemble(
            rng, [(field_from(data), labels)], (8, 8), ensemble.DISCRETE, 3,
            ensemble.EnsembleTrainParams(epochs=5, member_seeds=[77, 77, 77]),
            n_members=3,
        )
        for m in model.members[1:]:
            for wa, wb in zip(model.members[0].weights, m.weights):
                assert np.array_equal(wa, wb)

    def test_oracle_fixture_accuracy(self):
        # 30 oracle-labeled scenes at R=32; held-out accuracy of a small
        # ensemble should clear 0.90 comfortably
        cfg = scene.SceneConfig(resolution=32)
        rng = np.random.default_rng(2)
        lats = np.stack([scene.sample_latent(rng, cfg) for _ in range(40)])
        _, blocks = scene.render_batch(lats, cfg)
        fields = hypercolumn.build_batch(blocks, cfg.resolution)
        labels = [scene.oracle_labels(w, cfg).segmentation for w in lats]
        train = [(field_from(fields[i]), labels[i]) for i in range(30)]
        model = ensemble.train_ensemble(
            np.random.default_rng(3), train, (48, 24), ensemble.DISCRETE, cfg.classes,
            ensemble.EnsembleTrainParams(epochs=8, pixels_per_image=500),
            n_members=3,
        )
        preds, _ = ensemble.predict_batch(model, fields[30:])
        acc = np.mean([
            (preds[i] == labels[30 + i]).mean() for i in range(10)
        ])
        assert acc >= 0.90

    def test_class_index_out_of_range_rejected(self):
        data = np.zeros((4, 4, 3), dtype=np.float32)
        labels = np.full((4, 4), 7)
        with pytest.raises(ValueError, match="class index"):
            ensemble.train_ensemble(
                np.random.default_rng(0), [(field_from(data), labels)],
                (4, 4), ensemble.DISCRETE, 3, n_members=1,
            )

    def test_empty_valid_set_rejected(self):
        data = np.zeros((4, 4, 3), dtype=np.float32)
        labels = np.zeros((4, 4, 1), dtype=np.float32)
        with pytest.raises(ValueError, match="valid"):
            ensemble.train_ensemble(
                np.random.default_rng(0), [(field_from(data), labels)],
                (4, 4), ensemble.CONTINUOUS, 1, n_members=1,
                valid_masks=[np.zeros((4, 4), bool)],
            )


class TestPredict:
    def test_identical_members_have_zero_uncertainty(self):
        net = constant_net(3, 4, [3.0, 1.0, 0.0, -1.0])
        model = ensemble.EnsembleModel([net, net.copy(), net.copy()], ensemble.DISCRETE, 4, [0, 0, 0])
        data = np.random.default_rng(3).normal(size=(6, 6, 3))
        pred, umap = ensemble.predict(model, field_from(data))
        assert np.all(pred == 0)
        assert umap.values.max() <= 1e-12
        assert umap.kind == "js_divergence"

    def test_two_orthogonal_members_reach_ln2(self):
        a = constant_net(2, 2, [40.0, 0.0])  # softmax ~ (1, 0)
        b = constant_net(2, 2, [0.0, 40.0])  # softmax ~ (0, 1)
        model = ensemble.EnsembleModel([a, b], ensemble.DISCRETE, 2, [0, 1])
        _, umap = ensemble.predict(model, field_from(np.zeros((2, 2, 2))))
        np.testing.assert_allclose(umap.values, np.log(2.0), atol=1e-9)

    def test_continuous_two_point_mean_and_population_variance(self):
        a = constant_net(2, 1, [1.0])
        b = constant_net(2, 1, [3.0])
        model = ensemble.EnsembleModel([a, b], ensemble.CONTINUOUS, 1, [0, 1])
        pred, umap = ensemble.predict(model, field_from(np.zeros((3, 3, 2))))
        np.testing.assert_allclose(pred, 2.0, atol=1e-7)
        np.testing.assert_allclose(umap.values, 1.0, atol=1e-7)
        assert umap.kind == "variance"

    def test_width_mismatch_raises(self):
        net = constant_net(5, 2, [0.0, 0.0])
        model = ensemble.EnsembleModel([net], ensemble.DISCRETE, 2, [0])
        with pytest.raises(ValueError, match="width"):
            ensemble.predict(model, field_from(np.zeros((2, 2, 3))))


class TestUncertaintyMath:
    def test_js_bounds_on_random_tuples(self):
        rng = np.random.default_rng(4)
        for m in (2, 3, 10):
            raw = rng.exponential(size=(m, 1000, 5))
            probs = raw / raw.sum(axis=-1, keepdims=True)
            js = ensemble.js_divergence(probs)
            assert js.min() >= 0.0
            assert js.max() <= np.log(m) + 1e-12

    def test_js_zero_iff_members_equal(self):
        rng = np.random.default_rng(5)
        raw = rng.exponential(size=(1, 50, 4))
        probs = np.repeat(raw / raw.sum(axis=-1, keepdims=True), 6, axis=0)
        assert ensemble.js_divergence(probs).max() <= 1e-9
        probs2 = probs.copy()
        probs2[0, :, :2] = probs2[0, :, :2][..., ::-1] + 0.05
        probs2[0] /= probs2[0].sum(axis=-1, keepdims=True)
        assert ensemble.js_divergence(probs2).min() > 1e-9

    def test_member_permutation_invariance(self):
        rng = np.random.default_rng(6)
        members = [
            constant_net(2, 3, rng.normal(size=3)) for _ in range(5)
        ]
        data = field_from(rng.normal(size=(4, 4, 2)))
        base_pred, base_u = ensemble.predict(
            ensemble.EnsembleModel(members, ensemble.DISCRETE, 3, list(range(5))), data
        )
        perm = [members[i] for i in (3, 0, 4, 2, 1)]
        pred2, u2 = ensemble.predict(
            ensemble.EnsembleModel(perm, ensemble.DISCRETE, 3, list(range(5))), data
        )
        np.testing.assert_array_equal(base_pred, pred2)
        np.testing.assert_allclose(base_u.values, u2.values, atol=0)

    def test_strict_majority_wins_vote(self):
        members = [
            constant_net(2, 3, [10.0, 0.0, 0.0]),
            constant_net(2, 3, [10.0, 0.0, 0.0]),
            constant_net(2, 3, [0.0, 0.0, 10.0]),
        ]
        model = ensemble.EnsembleModel(members, ensemble.DISCRETE, 3, [0, 1, 2])
        pred, _ = ensemble.predict(model, field_from(np.zeros((2, 2, 2))))
        assert np.all(pred == 0)

    def test_vote_tie_breaks_to_lower_class(self):
        members = [
            constant_net(2, 3, [0.0, 10.0, 0.0]),
            constant_net(2, 3, [0.0, 0.0, 10.0]),
        ]
        model = ensemble.EnsembleModel(members, ensemble.DISCRETE, 3, [0, 1])
        pred, _ = ensemble.predict(model, field_from(np.zeros((2, 2, 2))))
        assert np.all(pred == 1)

    def test_continuous_mean_matches_loop(self):
        rng = np.random.default_rng(7)
        members = [constant_net(2, 2, rng.normal(size=2)) for _ in range(4)]
        model = ensemble.EnsembleModel(members, ensemble.CONTINUOUS, 2, list(range(4)))
        pred, _ = ensemble.predict(model, field_from(np.zeros((2, 2, 2))))
        manual = np.zeros(2)
        for m in members:
            manual += m.biases[-1]
        manual /= 4
        assert np.abs(pred - manual).max() <= 1e-6


class TestImageUncertainty:
    def test_zero_map(self):
        assert ensemble.image_uncertainty(np.zeros((4, 4))) == 0.0

    def test_quarter_grid(self):
        assert ensemble.image_uncertainty(np.full((2, 2), 0.25)) == 1.0

    def test_equals_double_loop_exactly(self):
        rng = np.random.default_rng(8)
        values = rng.uniform(0, 1, size=(17, 17))
        got = ensemble.image_uncertainty(values)
        acc = 0.0
        for row in values:
            for v in row:
                acc += float(v)
        assert got == acc


class TestCheckpoint:
    def test_save_load_roundtrip(self, tmp_path):
        rng = np.random.default_rng(9)
        members = [constant_net(3, 2, rng.normal(size=2)) for _ in range(3)]
        model = ensemble.EnsembleModel(members, ensemble.DISCRETE, 2, [5, 6, 7], [0.1, 0.2, 0.3])
        model.save(tmp_path / "ens")
        back = ensemble.EnsembleModel.load(tmp_path / "ens")
        assert back.task == model.task and back.member_seeds == model.member_seeds
        for ma, mb in zip(model.members, back.members):
            for wa, wb in zip(ma.weights, mb.weights):
                assert np.array_equal(wa, wb)

import numpy as np
import pytest

import renodet.ensemble as ens
from renodet.ensemble import (
    GNN_WIDTHS,
    LATENT_WIDTH,
    MLP_HIDDEN,
    LabeledShapeRecord,
    Standardizer,
    TrainingRun,
    assign_labels,
    ensemble_forward,
    fit_standardizer,
    fold_probability,
    gnn_forward,
    infer,
    init_ensemble,
    init_gnn,
    init_mlp,
    mlp_forward,
    out_of_fold_scores,
    parameter_count,
    train_ensemble,
    train_individual,
)
from renodet.errors import ConfigError, DataError
from renodet.features import N_FEATURES
from renodet.mesher import KidneyGraph


def ring_graph(n_nodes, rng, shift=0.0):
    feats = rng.normal(size=(n_nodes, 4))
    feats[:, 3] += shift
    edges = np.array([[i, (i + 1) % n_nodes] for i in range(n_nodes)])
    edges = np.sort(edges, axis=1)
    return KidneyGraph(node_features=feats, edges=np.unique(edges, axis=0))


def make_dataset(n=20, seed=0, lesion_positive=25000.5):
    """Alternating positive/negative kidneys, separable in both inputs."""
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n):
        positive = i % 2 == 0
        feats = rng.normal(size=N_FEATURES) * 0.3
        feats[:8] += 1.5 if positive else -1.5
        records.append(LabeledShapeRecord(
            kidney_id=f"k{i:03d}", patient_id=f"p{i:03d}",
            features=feats,
            graph=ring_graph(6, rng, shift=1.5 if positive else -1.5),
            lesion_volume=lesion_positive if positive else 0.0))
    return records


def simple_folds(n, n_folds=5):
    return [list(range(f, n, n_folds)) for f in range(n_folds)]


class TestAssignLabels:
    def test_threshold_table(self):
        for volume, gnn, mlp in [(0.0, 0, 0), (400.0, 0, 0), (600.0, 1, 0),
                                 (20000.0, 1, 0), (25000.0, 1, 1)]:
            assert assign_labels(volume, "gnn") == gnn
            assert assign_labels(volume, "ensemble") == gnn
            assert assign_labels(volume, "mlp") == mlp

    def test_thresholds_are_strict(self):
        assert assign_labels(500.0, "gnn") == 0
        assert assign_labels(500.0000001, "gnn") == 1
        assert assign_labels(20000.0, "mlp") == 0

    def test_accepts_records(self):
        rng = np.random.default_rng(1)
        rec = LabeledShapeRecord("k", "p", rng.normal(size=28),
                                 ring_graph(5, rng), lesion_volume=600.0)
        assert assign_labels(rec, "gnn") == 1
        assert rec.label("mlp") == 0

    def test_unknown_mode(self):
        with pytest.raises(ConfigError, match="mode"):
            assign_labels(100.0, "svm")

    def test_monotone_and_nested(self):
        volumes = np.linspace(0, 30000, 601)
        for mode in ("mlp", "gnn", "ensemble"):
            labels = [assign_labels(v, mode) for v in volumes]
            assert all(b >= a for a, b in zip(labels, labels[1:]))
        # every mlp-positive volume is gnn-positive
        for v in volumes:
            assert assign_labels(v, "gnn") >= assign_labels(v, "mlp")


class TestRecord:
    def test_bad_feature_shape(self):
        rng = np.random.default_rng(2)
        with pytest.raises(DataError, match="shape"):
            LabeledShapeRecord("k", "p", np.zeros(27), ring_graph(5, rng), 0.0)

    def test_negative_lesion(self):
        rng = np.random.default_rng(3)
        with pytest.raises(DataError, match="non-negative"):
            LabeledShapeRecord("k", "p", np.zeros(28), ring_graph(5, rng),
                               -1.0)


class TestArchitecture:
    def test_mlp_shapes(self):
        params = init_mlp(np.random.default_rng(0))
        assert params["mlp.w0"].values.shape == (28, 64)
        assert params["mlp.w1"].values.shape == (64, 32)
        assert params["mlp.head_w"].values.shape == (32, 2)

    def test_gnn_five_conv_layers(self):
        params = init_gnn(np.random.default_rng(0))
        conv = [n for n in params if ".w0" in n]
        assert len(conv) == 5
        assert params["gnn.c0.w0"].values.shape == (4, 25)
        for i in range(1, 5):
            assert params[f"gnn.c{i}.w0"].values.shape == (25, 25)
            assert params[f"gnn.c{i}.w1"].values.shape == (25, 25)
        assert params["gnn.head_w"].values.shape == (25, 2)

    def test_ensemble_parameter_count(self):
        rng = np.random.default_rng(0)
        mlp_w = {k: v.values for k, v in init_mlp(rng).items()}
        gnn_w = {k: v.values for k, v in init_gnn(rng).items()}
        params = init_ensemble(mlp_w, gnn_w, rng)
        mlp_body = 28 * 64 + 64 + 64 * 32 + 32
        gnn_body = 2 * (4 * 25 + 4 * 25 * 25)
        projections = (32 * 25 + 25) + (25 * 25 + 25)
        head = 25 * 2 + 2
        assert parameter_count(params) == \
            mlp_body + gnn_body + projections + head

    def test_ensemble_copies_bodies(self):
        rng = np.random.default_rng(4)
        mlp_w = {k: v.values for k, v in init_mlp(rng).items()}
        gnn_w = {k: v.values for k, v in init_gnn(rng).items()}
        params = init_ensemble(mlp_w, gnn_w, rng)
        np.testing.assert_array_equal(params["mlp.w0"].values, mlp_w["mlp.w0"])
        np.testing.assert_array_equal(params["gnn.c2.w1"].values,
                                      gnn_w["gnn.c2.w1"])
        # heads are projections, not the 2-class originals
        assert params["mlp.head_w"].values.shape == (32, LATENT_WIDTH)
        assert params["gnn.head_w"].values.shape == \
            (GNN_WIDTHS[-1], LATENT_WIDTH)
        assert params["shared.w"].values.shape == (LATENT_WIDTH, 2)


class TestForward:
    def test_mlp_batch_matches_single(self):
        rng = np.random.default_rng(5)
        params = init_mlp(rng)
        x = rng.normal(size=(6, 28))
        batched = mlp_forward(params, x).values
        singles = np.stack([mlp_forward(params, row).values for row in x])
        np.testing.assert_allclose(batched, singles, atol=1e-12)

    def test_gnn_permutation_invariance(self):
        rng = np.random.default_rng(6)
        params = init_gnn(rng)
        graph = ring_graph(8, rng)
        base = gnn_forward(params, graph).values
        perm = rng.permutation(8)
        inv = np.argsort(perm)
        permuted = KidneyGraph(node_features=graph.node_features[inv],
                               edges=perm[graph.edges])
        again = gnn_forward(params, permuted).values
        np.testing.assert_allclose(again, base, atol=1e-6)

    def test_ensemble_is_sum_of_projections(self):
        rng = np.random.default_rng(7)
        mlp_w = {k: v.values for k, v in init_mlp(rng).items()}
        gnn_w = {k: v.values for k, v in init_gnn(rng).items()}
        params = init_ensemble(mlp_w, gnn_w, rng)
        graph = ring_graph(7, rng)
        feats = rng.normal(size=28)
        out = ensemble_forward(params, feats, graph).values

        from renodet.neuro import Tensor, dense, graph_operator
        mlp_latent = dense(ens._mlp_body(params, Tensor(feats)),
                           params["mlp.head_w"], params["mlp.head_b"]).values
        op = graph_operator(graph.n_nodes, graph.edges)
        gnn_latent = dense(ens._gnn_body(params, op, graph.node_features),
                           params["gnn.head_w"], params["gnn.head_b"]).values
        manual = (mlp_latent + gnn_latent) @ params["shared.w"].values \
            + params["shared.b"].values
        np.testing.assert_allclose(out, manual, atol=1e-12)


class TestStandardizer:
    def test_scalars_zscored_histograms_untouched(self):
        rng = np.random.default_rng(8)
        mat = rng.normal(loc=5.0, scale=3.0, size=(40, 28))
        stats = fit_standardizer(mat)
        scaled = np.stack([stats.apply(row) for row in mat])
        np.testing.assert_allclose(scaled[:, :8].mean(axis=0), 0, atol=1e-12)
        np.testing.assert_allclose(scaled[:, :8].std(axis=0), 1, atol=1e-12)
        np.testing.assert_array_equal(scaled[:, 8:], mat[:, 8:])

    def test_constant_column_passthrough(self):
        mat = np.ones((10, 28))
        stats = fit_standardizer(mat)
        out = stats.apply(mat[0])
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(out[:8], 0.0)

    def test_apply_copies(self):
        stats = Standardizer(mean=np.zeros(8), std=np.ones(8))
        x = np.ones(28)
        stats.apply(x)
        np.testing.assert_array_equal(x, np.ones(28))


class TestTrainIndividual:
    def test_mlp_loss_decreases(self):
        dataset = make_dataset(20, seed=10)
        run = train_individual("mlp", dataset, simple_folds(20), seed=1)
        for history in run.manifest["loss_history"]:
            assert history[9] < history[0]

    def test_gnn_loss_decreases(self):
        dataset = make_dataset(20, seed=11)
        run = train_individual("gnn", dataset, simple_folds(20), seed=1)
        for history in run.manifest["loss_history"]:
            assert history[9] < history[0]

    def test_seed_reproduces_bitwise(self):
        dataset = make_dataset(10, seed=12)
        folds = simple_folds(10)
        a = train_individual("mlp", dataset, folds, seed=3)
        b = train_individual("mlp", dataset, folds, seed=3)
        assert a.manifest["loss_history"] == b.manifest["loss_history"]
        for wa, wb in zip(a.fold_weights, b.fold_weights):
            for name in wa:
                assert wa[name].tobytes() == wb[name].tobytes()

    def test_manifest_records_rates(self):
        dataset = make_dataset(10, seed=13)
        mlp = train_individual("mlp", dataset, simple_folds(10))
        gnn = train_individual("gnn", dataset, simple_folds(10))
        assert mlp.manifest["learning_rate"] == 1e-2
        assert gnn.manifest["learning_rate"] == 1e-3
        assert mlp.manifest["epochs"] == 100
        assert mlp.manifest["batch_size"] == 8

    def test_single_class_fold_aborts(self):
        # zero lesion volume everywhere: every training split is all-negative
        dataset = make_dataset(10, seed=14, lesion_positive=0.0)
        with pytest.raises(DataError, match="single class"):
            train_individual("gnn", dataset, simple_folds(10))

    def test_unknown_kind(self):
        with pytest.raises(ConfigError, match="kind"):
            train_individual("cnn", [], [])


@pytest.fixture(scope="module")
def runs():
    dataset = make_dataset(20, seed=15)
    folds = simple_folds(20)
    mlp = train_individual("mlp", dataset, folds, seed=2)
    gnn = train_individual("gnn", dataset, folds, seed=2)
    full = train_ensemble(mlp, gnn, dataset, folds, seed=2)
    return dataset, folds, mlp, gnn, full


class TestTrainEnsemble:
    def test_stage_a_freezes_bodies_bitwise(self, monkeypatch):
        dataset = make_dataset(10, seed=16)
        folds = simple_folds(10)
        mlp = train_individual("mlp", dataset, folds, seed=4)
        gnn = train_individual("gnn", dataset, folds, seed=4)
        monkeypatch.setattr(ens, "STAGE_B_EPOCHS", 0)
        frozen = train_ensemble(mlp, gnn, dataset, folds, seed=4)
        for fold in range(5):
            for name, values in mlp.fold_weights[fold].items():
                if name.startswith("mlp.head"):
                    continue
                assert frozen.fold_weights[fold][name].tobytes() == \
                    values.tobytes()
            for name, values in gnn.fold_weights[fold].items():
                if name.startswith("gnn.head"):
                    continue
                assert frozen.fold_weights[fold][name].tobytes() == \
                    values.tobytes()

    def test_manifest_and_shapes(self, runs):
        _, _, _, _, full = runs
        m = full.manifest
        assert m["stage_a_epochs"] == 30 and m["stage_b_epochs"] == 2
        assert m["learning_rate"] == 1e-3
        expected = (28 * 64 + 64 + 64 * 32 + 32) \
            + 2 * (4 * 25 + 4 * 25 * 25) \
            + (32 * 25 + 25) + (25 * 25 + 25) + (25 * 2 + 2)
        assert m["parameter_count"] == expected
        assert len(full.fold_weights) == 5

    def test_losses_recorded_per_stage(self, runs):
        _, _, _, _, full = runs
        assert all(len(h) == 30 for h in full.manifest["stage_a_loss"])
        assert all(len(h) == 2 for h in full.manifest["stage_b_loss"])

    def test_ensemble_separates_training_data(self, runs):
        dataset, folds, _, _, full = runs
        scores = out_of_fold_scores(full, dataset, folds)
        labels = np.array([r.label("ensemble") for r in dataset])
        assert scores[labels == 1].mean() > scores[labels == 0].mean()

    def test_kind_check(self, runs):
        dataset, folds, mlp, gnn, _ = runs
        with pytest.raises(ConfigError):
            train_ensemble(gnn, mlp, dataset, folds)


class TestInference:
    def zero_run(self, kind="mlp"):
        rng = np.random.default_rng(0)
        params = init_mlp(rng)
        weights = {k: np.zeros_like(v.values) for k, v in params.items()}
        stats = Standardizer(mean=np.zeros(8), std=np.ones(8))
        return TrainingRun(kind=kind, fold_weights=[dict(weights)] * 5,
                           fold_standardizers=[stats] * 5)

    def test_all_folds_half_gives_2p5(self):
        run = self.zero_run()
        rng = np.random.default_rng(1)
        rec = LabeledShapeRecord("k", "p", rng.normal(size=28),
                                 ring_graph(5, rng), 0.0)
        assert infer(run, rec) == pytest.approx(2.5, abs=1e-12)

    def test_missing_fold_rejected(self):
        run = self.zero_run()
        run.fold_weights = run.fold_weights[:4]
        run.fold_standardizers = run.fold_standardizers[:4]
        rng = np.random.default_rng(2)
        rec = LabeledShapeRecord("k", "p", np.zeros(28), ring_graph(5, rng),
                                 0.0)
        with pytest.raises(DataError, match="folds"):
            infer(run, rec)
        with pytest.raises(ConfigError, match="fold"):
            fold_probability(run, 4, rec)

    def test_sum_and_mean_rank_identically(self):
        dataset = make_dataset(8, seed=17)
        folds = simple_folds(8, n_folds=4)
        run = train_individual("mlp", dataset, folds, seed=5)
        # pad to 5 folds by reusing fold 0 so infer() accepts the run
        run.fold_weights.append(run.fold_weights[0])
        run.fold_standardizers.append(run.fold_standardizers[0])
        sums = np.array([infer(run, r) for r in dataset])
        means = sums / 5.0
        np.testing.assert_array_equal(np.argsort(sums), np.argsort(means))

    def test_out_of_fold_requires_cover(self):
        dataset = make_dataset(10, seed=18)
        folds = simple_folds(10)
        run = train_individual("mlp", dataset, folds, seed=6)
        with pytest.raises(DataError, match="cover"):
            out_of_fold_scores(run, dataset, [f[:1] for f in folds])

    def test_scores_within_unit_interval(self):
        dataset = make_dataset(10, seed=19)
        folds = simple_folds(10)
        run = train_individual("gnn", dataset, folds, seed=7)
        scores = out_of_fold_scores(run, dataset, folds)
        assert np.all(scores >= 0.0) and np.all(scores <= 1.0)

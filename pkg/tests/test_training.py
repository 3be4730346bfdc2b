import numpy as np
import pytest

from relmix import cpdist, network
from relmix.data import (
    DegenerateDataError,
    GenSpec,
    PairSample,
    Scene,
    SceneObject,
    gen_synthetic,
    positive_samples,
)
from relmix.tensor3 import TripletIndex
from relmix.training import (
    CheckpointError,
    TrainConfig,
    clip_gradients,
    load_model,
    save_model,
    train_selection,
    train_triplet,
)

SPEC = GenSpec(n_obj_classes=3, n_pred_classes=4, obj_feature_dim=4,
               n_scenes=12, objects_per_scene=3, seed=31)
CFG = TrainConfig(learning_rate=0.05, epochs=2, batch_size=8, rank=3,
                  hidden_dim=8, seed=7, sel_epochs=2)


@pytest.fixture(scope="module")
def splits():
    return gen_synthetic(SPEC)


class TestClipGradients:
    def test_below_threshold_untouched(self):
        grads = {"a": np.array([3.0, 4.0])}  # norm 5
        out = clip_gradients(grads, 5.0)
        assert np.array_equal(out["a"], grads["a"])

    def test_above_threshold_scaled_to_max_norm(self):
        grads = {"a": np.array([3.0, 4.0]), "b": np.array([12.0])}  # norm 13
        out = clip_gradients(grads, 6.5)
        total = np.sqrt(sum(np.sum(g * g) for g in out.values()))
        assert abs(total - 6.5) <= 1e-12
        np.testing.assert_allclose(out["a"], [1.5, 2.0])
        np.testing.assert_allclose(out["b"], [6.0])

    def test_direction_preserved(self):
        rng = np.random.default_rng(0)
        grads = {k: rng.normal(size=(4, 3)) * 10 for k in "xyz"}
        out = clip_gradients(grads, 1.0)
        for k in grads:
            cos = np.sum(out[k] * grads[k]) / (
                np.linalg.norm(out[k]) * np.linalg.norm(grads[k]))
            assert abs(cos - 1.0) <= 1e-12

    def test_rejects_nonpositive_max_norm(self):
        with pytest.raises(ValueError):
            clip_gradients({"a": np.ones(2)}, 0.0)


class TestTrainConfig:
    def test_rejects_bad_values(self):
        with pytest.raises(ValueError):
            TrainConfig(learning_rate=-1.0)
        with pytest.raises(ValueError):
            TrainConfig(clip_norm=0.0)
        with pytest.raises(ValueError):
            TrainConfig(batch_size=0)
        with pytest.raises(ValueError):
            TrainConfig(rank=0)


class TestTrainTriplet:
    def test_zero_lr_leaves_init_bitwise(self, splits):
        train, _, _ = splits
        cfg = TrainConfig(learning_rate=0.0, epochs=2, batch_size=8, rank=3,
                          hidden_dim=8, seed=7)
        model = train_triplet(cfg, train, SPEC.meta)
        init = network.init_params(SPEC.meta.pair_feature_dim, 8, SPEC.shape, 3, 7)
        for key in network.PARAM_KEYS:
            assert np.array_equal(model.params.params[key], init.params[key])

    def test_same_seed_same_trace_and_params(self, splits):
        train, _, _ = splits
        a = train_triplet(CFG, train, SPEC.meta)
        b = train_triplet(CFG, train, SPEC.meta)
        assert a.loss_trace == b.loss_trace
        for key in network.PARAM_KEYS:
            assert np.array_equal(a.params.params[key], b.params.params[key])

    def test_loss_decreases_on_training_data(self, splits):
        train, _, _ = splits
        cfg = TrainConfig(learning_rate=0.1, epochs=12, batch_size=8, rank=3,
                          hidden_dim=16, seed=3)
        model = train_triplet(cfg, train, SPEC.meta)
        assert model.loss_trace[-1] < model.loss_trace[0]

    def test_single_example_memorized(self):
        # with one annotated pair, SGD should drive that pair's NLL near zero
        rng = np.random.default_rng(41)
        feature = rng.normal(size=6)
        target = TripletIndex(1, 0, 2)
        pair = PairSample(0, 1, np.zeros(2), True, target, feature)
        scene = Scene(0, [], [pair])
        from relmix.data import DatasetMeta
        from relmix.tensor3 import Shape3
        meta = DatasetMeta(Shape3(3, 2, 3), 2, 2)
        cfg = TrainConfig(learning_rate=0.5, epochs=400, batch_size=1, rank=2,
                          hidden_dim=8, seed=1)
        model = train_triplet(cfg, [scene], meta)
        scores, _ = network.forward(model.params, feature)
        assert cpdist.nll_loss(scores, target) < 0.1

    def test_prior_counts_match_annotations(self, splits):
        train, _, _ = splits
        model = train_triplet(CFG, train, SPEC.meta)
        expected = {}
        for _, t in positive_samples(train):
            expected[t] = expected.get(t, 0) + 1
        assert model.prior.counts == expected

    def test_no_annotations_raises(self):
        spec = GenSpec(n_scenes=2, selection_bias_strength=-1e9, seed=43)
        train, _, _ = gen_synthetic(spec)
        assert not positive_samples(train)
        with pytest.raises(DegenerateDataError):
            train_triplet(CFG, train, spec.meta)

    def test_progress_lines_reported(self, splits):
        train, _, _ = splits
        lines = []
        train_triplet(CFG, train, SPEC.meta, progress=lines.append)
        assert len(lines) == CFG.epochs
        assert all(line.startswith("phase=triplet epoch=") for line in lines)


class TestTrainSelection:
    def test_triplet_branches_frozen_bitwise(self, splits):
        train, _, _ = splits
        base = train_triplet(CFG, train, SPEC.meta)
        tuned = train_selection(CFG, train, base)
        for key in network.PARAM_KEYS:
            if key in ("w_sel", "b_sel"):
                continue
            assert np.array_equal(tuned.params.params[key], base.params.params[key])
        assert not np.array_equal(tuned.params.params["w_sel"],
                                  base.params.params["w_sel"])

    def test_zero_epochs_is_identity(self, splits):
        train, _, _ = splits
        base = train_triplet(CFG, train, SPEC.meta)
        cfg = TrainConfig(sel_epochs=0, seed=7)
        tuned = train_selection(cfg, train, base)
        for key in network.PARAM_KEYS:
            assert np.array_equal(tuned.params.params[key], base.params.params[key])

    def test_separable_geometry_learned_perfectly(self):
        # selection depends only on one feature coordinate with a wide margin
        rng = np.random.default_rng(51)
        pairs = []
        for n in range(60):
            label = n % 2 == 1
            feature = rng.normal(size=6) * 0.1
            feature[-1] = 2.0 if label else -2.0
            anno = TripletIndex(0, 0, 1) if label else None
            pairs.append(PairSample(0, 1, feature[-2:], label, anno, feature))
        scene = Scene(0, [], pairs)
        from relmix.data import DatasetMeta
        from relmix.tensor3 import Shape3
        meta = DatasetMeta(Shape3(2, 2, 2), 2, 2)
        cfg = TrainConfig(epochs=1, rank=2, hidden_dim=4, seed=5,
                          sel_learning_rate=1.0, sel_epochs=40)
        base = train_triplet(cfg, [scene], meta)
        tuned = train_selection(cfg, [scene], base)
        preds = [network.sel_forward(tuned.params, p.pair_feature) >= 0.5 for p in pairs]
        assert all(pred == p.selected for pred, p in zip(preds, pairs))

    def test_probabilities_strictly_inside_unit_interval(self, splits):
        train, _, _ = splits
        base = train_triplet(CFG, train, SPEC.meta)
        tuned = train_selection(CFG, train, base)
        for scene in train:
            for pair in scene.pairs:
                p = network.sel_forward(tuned.params, pair.pair_feature)
                assert 0.0 < p < 1.0

    def test_progress_lines_reported(self, splits):
        train, _, _ = splits
        base = train_triplet(CFG, train, SPEC.meta)
        lines = []
        train_selection(CFG, train, base, progress=lines.append)
        assert len(lines) == CFG.sel_epochs
        assert all(line.startswith("phase=selection epoch=") for line in lines)


class TestCheckpoint:
    def test_round_trip_bit_exact(self, splits, tmp_path):
        train, _, _ = splits
        model = train_selection(CFG, train, train_triplet(CFG, train, SPEC.meta))
        path = tmp_path / "model.txt"
        save_model(model, path)
        loaded = load_model(path)
        assert loaded.config == model.config
        assert loaded.loss_trace == model.loss_trace
        assert loaded.prior.counts == model.prior.counts
        assert loaded.params.shape == model.params.shape
        for key in network.PARAM_KEYS:
            a, b = loaded.params.params[key], model.params.params[key]
            assert a.shape == b.shape and np.array_equal(a, b)

    def test_save_is_deterministic(self, splits, tmp_path):
        train, _, _ = splits
        model = train_triplet(CFG, train, SPEC.meta)
        save_model(model, tmp_path / "a.txt")
        save_model(model, tmp_path / "b.txt")
        assert (tmp_path / "a.txt").read_bytes() == (tmp_path / "b.txt").read_bytes()

    def test_wrong_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.txt"
        path.write_text("SOMETHING-ELSE 1\nEND\n")
        with pytest.raises(CheckpointError):
            load_model(path)

    def test_wrong_version_rejected(self, splits, tmp_path):
        train, _, _ = splits
        model = train_triplet(CFG, train, SPEC.meta)
        path = tmp_path / "model.txt"
        save_model(model, path)
        text = path.read_text().splitlines()
        text[0] = "RELMIX-MODEL 99"
        path.write_text("\n".join(text) + "\n")
        with pytest.raises(CheckpointError, match="version"):
            load_model(path)

    def test_truncated_file_rejected(self, splits, tmp_path):
        train, _, _ = splits
        model = train_triplet(CFG, train, SPEC.meta)
        path = tmp_path / "model.txt"
        save_model(model, path)
        lines = path.read_text().splitlines()
        path.write_text("\n".join(lines[: len(lines) // 2]) + "\n")
        with pytest.raises(CheckpointError, match="truncat|malformed"):
            load_model(path)

    def test_missing_file_rejected(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_model(tmp_path / "absent.txt")

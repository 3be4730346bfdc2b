import numpy as np
import pytest

from relmix import network
from relmix.cli import main
from relmix.data import load_dataset
from relmix.training import load_model

GEN = ["gen-data", "--scenes", "12", "--objects", "3", "--obj-classes", "3",
       "--pred-classes", "3", "--feature-dim", "4", "--seed", "8", "--quiet"]
TRAIN = ["train", "--lr", "0.05", "--epochs", "2", "--batch-size", "8",
         "--rank", "2", "--hidden-dim", "8", "--sel-epochs", "2",
         "--seed", "8", "--quiet"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert main(GEN + ["--with-gt", "--out-dir", str(data)]) == 0
    assert main(TRAIN + ["--data", str(data), "--out-dir", str(root)]) == 0
    return root, data, root / "model.txt"


class TestGenData:
    def test_writes_three_splits_with_expected_records(self, tmp_path):
        out = tmp_path / "d"
        assert main(["gen-data", "--scenes", "10", "--objects", "4",
                     "--out-dir", str(out), "--quiet"]) == 0
        total_pairs = 0
        total_scenes = 0
        for name in ("train", "val", "test"):
            scenes, meta = load_dataset(out / f"{name}.txt")
            total_scenes += len(scenes)
            total_pairs += sum(len(s.pairs) for s in scenes)
            assert all(len(s.pairs) == 12 for s in scenes)
        assert total_scenes == 10
        assert total_pairs == 120

    def test_same_seed_byte_identical(self, tmp_path):
        for name in ("a", "b"):
            assert main(GEN + ["--out-dir", str(tmp_path / name)]) == 0
        for split in ("train", "val", "test"):
            assert (tmp_path / "a" / f"{split}.txt").read_bytes() == \
                (tmp_path / "b" / f"{split}.txt").read_bytes()

    def test_with_gt_round_trips(self, workspace):
        _, data, _ = workspace
        scenes, _ = load_dataset(data / "train.txt")
        assert all(p.gt is not None for s in scenes for p in s.pairs)


class TestTrain:
    def test_checkpoint_written_and_loadable(self, workspace):
        _, _, model_path = workspace
        model = load_model(model_path)
        assert model.config.epochs == 2 and model.config.rank == 2

    def test_zero_lr_zero_sel_epochs_keeps_init(self, workspace, tmp_path):
        _, data, _ = workspace
        assert main(["train", "--data", str(data), "--out-dir", str(tmp_path),
                     "--lr", "0", "--epochs", "1", "--rank", "2",
                     "--hidden-dim", "8", "--sel-epochs", "0",
                     "--seed", "8", "--quiet"]) == 0
        model = load_model(tmp_path / "model.txt")
        _, meta = load_dataset(data / "train.txt")
        init = network.init_params(meta.pair_feature_dim, 8, meta.shape, 2, 8)
        for key in network.PARAM_KEYS:
            assert np.array_equal(model.params.params[key], init.params[key])

    def test_same_seed_byte_identical_checkpoints(self, workspace, tmp_path):
        _, data, _ = workspace
        for name in ("a", "b"):
            assert main(TRAIN + ["--data", str(data),
                                 "--out-dir", str(tmp_path / name)]) == 0
        assert (tmp_path / "a" / "model.txt").read_bytes() == \
            (tmp_path / "b" / "model.txt").read_bytes()

    def test_missing_data_dir_fails_cleanly(self, tmp_path, capsys):
        assert main(["train", "--data", str(tmp_path / "nope"),
                     "--out-dir", str(tmp_path), "--quiet"]) == 1
        assert "error:" in capsys.readouterr().err


class TestEval:
    def test_report_written_and_sane(self, workspace, capsys):
        root, data, model_path = workspace
        report_path = root / "report.txt"
        assert main(["eval", "--data", str(data), "--model", str(model_path),
                     "--n", "5", "10", "--k-grid", "1", "2", "3",
                     "--with-kl", "--report", str(report_path), "--quiet"]) == 0
        out = capsys.readouterr().out
        assert report_path.read_text() == out
        kv = dict(line.split("=") for line in out.strip().splitlines())
        assert int(kv["k_star"]) in (1, 2, 3)
        for key in ("recall_at_5_k1", "recall_at_10_free_k", "mean_kl"):
            assert key in kv
        assert 0.0 <= float(kv["recall_at_5_k1"]) <= 1.0

    def test_singleton_k_grid_forces_k1(self, workspace, capsys):
        _, data, model_path = workspace
        assert main(["eval", "--data", str(data), "--model", str(model_path),
                     "--n", "5", "--k-grid", "1", "--quiet"]) == 0
        out = capsys.readouterr().out
        assert "k_star=1" in out

    def test_missing_checkpoint_fails_cleanly(self, workspace, capsys):
        root, data, _ = workspace
        assert main(["eval", "--data", str(data),
                     "--model", str(root / "absent.txt"), "--quiet"]) == 1
        assert "error:" in capsys.readouterr().err


class TestGradcheck:
    def test_default_passes(self, capsys):
        assert main(["gradcheck", "--instances", "25", "--seed", "4"]) == 0
        assert "status=PASS" in capsys.readouterr().out

    def test_rank_one_passes(self, capsys):
        assert main(["gradcheck", "--instances", "25", "--rank", "1",
                     "--seed", "4"]) == 0
        assert "status=PASS" in capsys.readouterr().out

    def test_corrupted_gradient_detected(self, capsys):
        assert main(["gradcheck", "--instances", "25", "--seed", "4",
                     "--corrupt"]) == 1
        assert "status=FAIL" in capsys.readouterr().out


class TestInspect:
    def test_listing_matches_library_scores(self, workspace, capsys):
        from relmix import evaluation
        _, data, model_path = workspace
        assert main(["inspect", "--data", str(data), "--model", str(model_path),
                     "--split", "test", "--k", "2"]) == 0
        out = capsys.readouterr().out
        assert out.startswith("shape=(3,3,3) rank=2")
        model = load_model(model_path)
        scenes, _ = load_dataset(data / "test.txt")
        preds = evaluation.score_pairs(model, scenes[0], 2)
        top = preds[0]
        expected = (f"({top.triplet.i},{top.triplet.j},{top.triplet.k})"
                    f":{top.score:.4f}")
        assert expected in out

    def test_unknown_scene_id_fails_cleanly(self, workspace, capsys):
        _, data, model_path = workspace
        assert main(["inspect", "--data", str(data), "--model", str(model_path),
                     "--scene-id", "99999", "--quiet"]) == 1
        assert "error:" in capsys.readouterr().err


class TestConfigFile:
    def test_config_supplies_defaults_cli_wins(self, tmp_path):
        cfg = tmp_path / "gen.cfg"
        cfg.write_text(
            "# generation settings\n"
            "scenes = 6\n"
            "objects = 3\n"
            "obj-classes = 3\n"
            "pred-classes = 3\n"
            "feature-dim = 4\n"
            "with-gt = true\n"
        )
        out = tmp_path / "d"
        # --objects on the command line must beat the config file's value
        assert main(["gen-data", "--config", str(cfg), "--objects", "4",
                     "--out-dir", str(out), "--seed", "8", "--quiet"]) == 0
        scenes, meta = load_dataset(out / "train.txt")
        assert meta.shape.n_s == 3
        assert all(len(s.objects) == 4 for s in scenes)
        assert all(p.gt is not None for s in scenes for p in s.pairs)

    def test_malformed_config_fails_cleanly(self, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("scenes 6\n")
        assert main(["gen-data", "--config", str(cfg),
                     "--out-dir", str(tmp_path), "--quiet"]) == 1
        assert "error:" in capsys.readouterr().err

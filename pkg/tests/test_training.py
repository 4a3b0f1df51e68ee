import os

import numpy as np
import pytest
import torch

from conftest import tiny_config
from trinuseg.checkpoint import load_checkpoint, save_checkpoint
from trinuseg.labels import generate_dataset
from trinuseg.losses import gamma_sd_schedule
from trinuseg.model import Bottleneck, build_model
from trinuseg.training import (
    HISTORY_COLUMNS,
    TrainConfig,
    TrainingDivergedError,
    evaluate_model,
    load_config_file,
    mean_consistency_fraction,
    run_ablation_grid,
    split_dataset,
    train,
    write_history_csv,
)


def quick_train_config(**overrides) -> TrainConfig:
    base = dict(epochs=3, batch_size=4, seed=0, eval_every=2)
    base.update(overrides)
    return TrainConfig(**base)


class TestTrainConfig:
    def test_defaults(self):
        tc = TrainConfig()
        assert tc.learning_rate == 1e-4
        assert (tc.beta1, tc.beta2) == (0.9, 0.999)

    def test_validation(self):
        with pytest.raises(ValueError, match="learning_rate"):
            TrainConfig(learning_rate=0.0)
        with pytest.raises(ValueError, match="epochs"):
            TrainConfig(epochs=0)
        with pytest.raises(ValueError, match="train_fraction"):
            TrainConfig(train_fraction=0.0)

    def test_round_trip(self):
        tc = TrainConfig(epochs=7, sd_enabled=False)
        assert TrainConfig.from_dict(tc.to_dict()) == tc

    def test_unknown_key(self):
        with pytest.raises(ValueError, match="unknown"):
            TrainConfig.from_dict({"momentum": 0.9})


class TestSplit:
    def test_80_20(self, small_dataset):
        train_s, test_s = split_dataset(small_dataset, seed=0)
        assert len(train_s) == 6 and len(test_s) == 2
        ids = {s.sample_id for s in train_s} | {s.sample_id for s in test_s}
        assert len(ids) == 8

    def test_full_fraction(self, small_dataset):
        train_s, test_s = split_dataset(small_dataset, seed=0,
                                        train_fraction=1.0)
        assert len(train_s) == 8 and test_s == []

    def test_deterministic(self, small_dataset):
        a = split_dataset(small_dataset, seed=3)[0]
        b = split_dataset(small_dataset, seed=3)[0]
        assert [s.sample_id for s in a] == [s.sample_id for s in b]


class TestTrainLoop:
    def test_same_seed_identical_curves(self, small_dataset):
        cfg = tiny_config()
        tc = quick_train_config()
        h1 = train(cfg, tc, small_dataset).history
        h2 = train(cfg, tc, small_dataset).history
        for r1, r2 in zip(h1, h2):
            assert abs(r1["total"] - r2["total"]) < 1e-6
            assert abs(r1["l_n"] - r2["l_n"]) < 1e-6

    def test_history_structure_and_schedule(self, small_dataset):
        outcome = train(tiny_config(), quick_train_config(), small_dataset)
        assert len(outcome.history) == 3
        for epoch, record in enumerate(outcome.history):
            assert record["epoch"] == epoch
            assert record["gamma_sd"] == gamma_sd_schedule(epoch)
            assert record["total"] >= 0
        # eval_every=2 -> metrics at epoch index 1 and the final epoch
        assert "dsc" in outcome.history[1]
        assert "dsc" not in outcome.history[0]
        assert "dsc" in outcome.history[-1]

    def test_sd_disabled_records_zero_weight(self, small_dataset):
        outcome = train(tiny_config(), quick_train_config(sd_enabled=False),
                        small_dataset)
        assert all(r["gamma_sd"] == 0.0 for r in outcome.history)
        assert all(r["l_sd"] >= 0.0 for r in outcome.history)

    def test_divergence_aborts_with_named_term(self, small_dataset):
        bad = [s for s in small_dataset]
        bad[0].image[:] = np.nan
        with pytest.raises(TrainingDivergedError, match="l_n"):
            train(tiny_config(), quick_train_config(), bad)
        bad[0].image[:] = 0.5  # restore the shared fixture

    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            train(tiny_config(), quick_train_config(), [])

    def test_out_dir_artifacts(self, small_dataset, tmp_path):
        out = str(tmp_path / "run")
        outcome = train(tiny_config(), quick_train_config(), small_dataset,
                        out_dir=out)
        assert os.path.isfile(os.path.join(out, "checkpoint.zip"))
        assert os.path.isfile(os.path.join(out, "history.csv"))
        with open(os.path.join(out, "history.csv")) as fh:
            header = fh.readline().strip().split(",")
        assert header == list(HISTORY_COLUMNS)
        assert outcome.checkpoint is not None
        assert outcome.checkpoint.epoch == 3


class TestCheckpoint:
    def test_round_trip_bit_exact(self, small_dataset, tmp_path):
        outcome = train(tiny_config(), quick_train_config(), small_dataset)
        path = str(tmp_path / "model.zip")
        save_checkpoint(path, outcome.model, epoch=3,
                        history=outcome.history)
        loaded, meta = load_checkpoint(path)
        x = torch.rand(2, 64, 64, 1)
        a = outcome.model.predict(x)
        b = loaded.predict(x)
        for name in ("nuclei_logits", "edge_logits", "cluster_logits"):
            assert torch.equal(getattr(a, name), getattr(b, name))
        assert meta.epoch == 3
        assert len(meta.history) == 3

    def test_shared_weights_still_aliased_after_load(self, tmp_path):
        model = build_model(tiny_config(), seed=0)
        path = str(tmp_path / "m.zip")
        save_checkpoint(path, model)
        loaded, _ = load_checkpoint(path)
        groups = loaded.shared_attention_groups()
        assert groups
        blocks = [loaded.decoder_block(0, 0, d).attn for d in range(3)]
        assert blocks[0] is blocks[1] is blocks[2]

    def test_missing_params_detected(self, tmp_path):
        import zipfile

        model = build_model(tiny_config(), seed=0)
        path = str(tmp_path / "m.zip")
        save_checkpoint(path, model)
        trimmed = str(tmp_path / "trimmed.zip")
        with zipfile.ZipFile(path) as src, \
                zipfile.ZipFile(trimmed, "w") as dst:
            for item in src.namelist():
                if "patch_embed" in item:
                    continue
                dst.writestr(item, src.read(item))
        with pytest.raises(ValueError, match="misses"):
            load_checkpoint(trimmed)

    def test_not_a_checkpoint(self, tmp_path):
        import zipfile

        path = str(tmp_path / "junk.zip")
        with zipfile.ZipFile(path, "w") as zf:
            zf.writestr("something.txt", "hi")
        with pytest.raises(ValueError, match="archive"):
            load_checkpoint(path)


class TestEvaluate:
    def test_read_only_and_repeatable(self, small_dataset):
        outcome = train(tiny_config(), quick_train_config(), small_dataset)
        model = outcome.model
        before = {k: v.clone() for k, v in model.state_dict().items()}
        r1, rows1 = evaluate_model(model, outcome.test_samples)
        r2, rows2 = evaluate_model(model, outcome.test_samples)
        for k, v in model.state_dict().items():
            assert torch.equal(before[k], v)
        assert r1.as_dict() == r2.as_dict()
        assert rows1 == rows2
        assert r1.n_images == len(outcome.test_samples)

    def test_overlays_written(self, small_dataset, tmp_path):
        outcome = train(tiny_config(), quick_train_config(), small_dataset)
        overlay_dir = str(tmp_path / "ov")
        evaluate_model(outcome.model, outcome.test_samples,
                       overlay_dir=overlay_dir)
        files = os.listdir(overlay_dir)
        assert len(files) == len(outcome.test_samples)
        assert all(f.endswith(".png") for f in files)

    def test_consistency_fraction_in_range(self, small_dataset):
        outcome = train(tiny_config(), quick_train_config(), small_dataset)
        frac = mean_consistency_fraction(outcome.model, outcome.test_samples)
        assert 0.0 <= frac <= 1.0


class TestAblationGrid:
    def test_smoke_grid_epochs_1(self, tmp_path):
        dataset = generate_dataset(1, 6, size=64, n_instances=5,
                                   cluster_probability=0.4)
        results, complexity = run_ablation_grid(
            tiny_config(), quick_train_config(epochs=1, eval_every=0),
            dataset, out_dir=str(tmp_path))
        assert len(results) == 8
        combos = {(r["mlp"], r["attention_sharing"], r["sd"])
                  for r in results}
        assert len(combos) == 8
        for row in results:
            for key in ("dsc", "f1", "acc", "iou", "ercnt"):
                assert np.isfinite(row[key])
        assert len(complexity) == 4
        params = [r["params"] for r in complexity]
        assert params[0] > params[1] > params[2] > params[3]
        assert os.path.isfile(os.path.join(str(tmp_path),
                                           "ablation_results.csv"))
        assert os.path.isfile(os.path.join(str(tmp_path),
                                           "ablation_complexity.csv"))
        # additive savings identity on the emitted table
        by = {r["name"]: r["params"] for r in complexity}
        assert by["wo_mlp_wo_as"] - by["wo_mlp"] == by["wo_as"] - by["full"]


class TestConfigFile:
    def test_flat_key_value(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text(
            "# comment\n"
            "input_size = 64\n"
            "embed_dim = 48\n"
            "encoder_depths = [1, 1, 1]\n"
            "decoder_depths = [1, 1, 1]\n"
            "heads_per_stage = [3, 6, 12]\n"
            "window_size = 4\n"
            "bottleneck = \"swin\"\n"
            "attention_sharing = false\n"
            "epochs = 5\n"
            "learning_rate = 1e-4\n"
            "seed = 3\n")
        model_config, train_config = load_config_file(str(path))
        assert model_config.input_size == 64
        assert model_config.bottleneck is Bottleneck.SWIN
        assert model_config.attention_sharing is False
        assert train_config.epochs == 5 and train_config.seed == 3

    def test_json(self, tmp_path):
        path = tmp_path / "run.json"
        path.write_text('{"input_size": 64, "embed_dim": 48,'
                        '"encoder_depths": [1,1,1], "decoder_depths": [1,1,1],'
                        '"heads_per_stage": [3,6,12], "window_size": 4,'
                        '"epochs": 2}')
        model_config, train_config = load_config_file(str(path))
        assert model_config.embed_dim == 48
        assert train_config.epochs == 2

    def test_unknown_key(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("nonsense = 1\n")
        with pytest.raises(ValueError, match="nonsense"):
            load_config_file(str(path))

    def test_malformed_line(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("just some text\n")
        with pytest.raises(ValueError, match="key = value"):
            load_config_file(str(path))


def test_history_csv_blank_metrics(tmp_path):
    rows = [{"epoch": 0, "l_n": 1.0, "l_e": 1.0, "l_c": 1.0, "l_sd": 0.5,
             "gamma_sd": 1.0, "total": 1.5}]
    path = str(tmp_path / "h.csv")
    write_history_csv(path, rows)
    lines = open(path).read().strip().splitlines()
    assert lines[1].endswith(",,,,,")  # five blank metric columns

import numpy as np
import pytest

from checkpoint import file_digest
from dataset import (
    SPLIT_NAMES,
    ImageSet,
    SplitSpec,
    read_manifest,
    scan_dataset,
    stratified_split,
    synthesize_dataset,
)
from ensemble import argmax_labels
from errors import AlignmentError, DataError, EmptyDatasetError, UsageError
from hybrid import build_m1, build_toy
from log_manager import PredictionRecords, RunLogManager, read_history, read_predictions
import trainer
from trainer import (
    EnsembleConfig,
    EvalConfig,
    TrainConfig,
    Trainer,
    ensemble_eval,
    ensemble_table,
    evaluate,
    load_config,
    train,
    write_split_manifest,
)


def toy_config(root, out, **overrides):
    values = {"model": "toy", "epochs": 2, "lr": 0.005, "batch": 4, "seed": 11,
              "data_root": str(root), "out": str(out), "workers": 2}
    values.update(overrides)
    return TrainConfig(**values)


def write_records(path, ids, truth, p1):
    p1 = np.asarray(p1, dtype=np.float64)
    probs = np.stack([1 - p1, p1], axis=1)
    records = PredictionRecords.build(ids, truth, probs, argmax_labels(probs))
    return str(RunLogManager(path.parent).write_predictions(records, path))


class TestLoadConfig:
    def test_defaults(self):
        config = load_config()
        assert (config.model, config.epochs, config.lr, config.batch, config.seed) == ("m1", 100, 0.001, 4, 42)
        assert config.head_mode.analytic

    def test_file_then_flags(self, tmp_path):
        path = tmp_path / "run.env"
        path.write_text("MODEL=toy\nEPOCHS=5\nLEARNING_RATE=0.01\nhead=shots:128\n")
        config = load_config({"epochs": 3, "seed": None}, str(path))
        assert config.model == "toy"
        assert config.epochs == 3
        assert config.lr == 0.01
        assert config.seed == 42
        assert config.head == "shots:128"

    @pytest.mark.parametrize("overrides", [{"epochs": 0}, {"lr": -1.0}, {"model": "m9"},
                                           {"head": "shots:0"}, {"colour": "red"}])
    def test_invalid(self, overrides):
        with pytest.raises(UsageError):
            load_config(overrides)

    def test_missing_file(self, tmp_path):
        with pytest.raises(UsageError):
            load_config(None, str(tmp_path / "missing.env"))

    def test_eval_settings_from_shared_file(self, tmp_path):
        path = tmp_path / "run.env"
        path.write_text("MODEL=toy\nEPOCHS=5\nCHECKPOINT=runs/toy/best.ckpt\nSPLIT=val\nMETHOD=majority\n")
        config = load_config({"workers": 3}, str(path), schema=EvalConfig)
        assert (config.checkpoint, config.model, config.split, config.workers) == ("runs/toy/best.ckpt", "toy", "val", 3)
        assert config.data_root is None
        assert load_config(None, str(path)).epochs == 5
        assert load_config(None, str(path), schema=EnsembleConfig).method == "majority"

    def test_ensemble_weight_list_from_file(self, tmp_path):
        path = tmp_path / "ensemble.env"
        path.write_text("METHOD=weighted\nWEIGHT_FROM=a_predictions_val.jsonl b_predictions_val.jsonl\nTABLE=true\n")
        config = load_config(None, str(path), schema=EnsembleConfig)
        assert config.weight_from == ["a_predictions_val.jsonl", "b_predictions_val.jsonl"]
        assert config.table

    @pytest.mark.parametrize("extra", ["COLOUR=red", "SPLIT=holdout", "WORKERS=0"])
    def test_invalid_eval_file(self, tmp_path, extra):
        path = tmp_path / "eval.env"
        path.write_text(f"CHECKPOINT=x\n{extra}\n")
        with pytest.raises(UsageError):
            load_config(None, str(path), schema=EvalConfig)


class TestTrainerLoop:
    def test_empty_training_set(self):
        empty = ImageSet(np.zeros((0, 3, 8, 8), np.float32), [])
        with pytest.raises(EmptyDatasetError):
            Trainer(build_toy(), TrainConfig(model="toy")).fit(empty, empty)

    def test_fit_history_and_best(self):
        data = synthesize_dataset(6, seed=2, image_size=8)
        config = TrainConfig(model="toy", epochs=4, lr=0.01, batch=3, seed=5)
        fit = Trainer(build_toy(seed=5), config).fit(data.subset(range(0, 12, 2)), data.subset(range(1, 12, 2)))
        assert len(fit.history) == 4
        assert fit.best_val_loss == min(fit.history.val_loss)
        assert fit.best_epoch == fit.history.best_epoch
        assert fit.history.improved[0]
        assert fit.history.improved.count(True) >= 1

    def test_epoch_is_deterministic(self):
        data = synthesize_dataset(4, seed=2, image_size=8)
        config = TrainConfig(model="toy", lr=0.01, batch=3, seed=8)
        losses = []
        for _ in range(2):
            model = build_toy(seed=8)
            losses.append(Trainer(model, config).train_epoch(data, epoch=1))
            state = model.state_dict()
        assert losses[0] == losses[1]
        assert all(np.all(np.isfinite(v)) for v in state.values())


class TestTrain:
    def test_end_to_end(self, synthetic_root, tmp_path):
        out = tmp_path / "run"
        outcome = train(toy_config(synthetic_root, out))
        assert outcome.checkpoint_path.exists()
        assert (out / "manifest.tsv").exists()
        history = read_history(out / "history.csv")
        assert len(history) == 2
        assert outcome.checkpoint.meta["val_loss"] == pytest.approx(history["val_loss"].min())
        assert set(outcome.reports) == {"val", "test"}
        test_records = read_predictions(out / "toy_predictions_test.jsonl")
        assert len(test_records) == 4
        np.testing.assert_allclose(test_records.probs.sum(axis=1), 1.0, atol=1e-12)

    def test_rerun_is_identical(self, synthetic_root, tmp_path):
        out = tmp_path / "run"
        config = toy_config(synthetic_root, out)
        first = train(config)
        checkpoint_bytes = first.checkpoint_path.read_bytes()
        second = train(config)
        assert second.checkpoint_path.read_bytes() == checkpoint_bytes
        assert first.history.rows() == second.history.rows()

    def test_no_images(self, tmp_path):
        (tmp_path / "empty").mkdir()
        with pytest.raises(EmptyDatasetError):
            train(toy_config(tmp_path / "empty", tmp_path / "run"))

    def test_retrain_rewrites_derived_manifest(self, synthetic_root, tmp_path):
        out = tmp_path / "run"
        train(toy_config(synthetic_root, out, seed=1, epochs=1))
        outcome = train(toy_config(synthetic_root, out, seed=2, epochs=1))
        expected = dict(zip(SPLIT_NAMES, stratified_split(scan_dataset(synthetic_root), SplitSpec(2))))
        written = read_manifest(out / "manifest.tsv", synthetic_root)
        for name in SPLIT_NAMES:
            assert sorted(r.sample_id for r in written[name]) == sorted(r.sample_id for r in expected[name])
        assert outcome.checkpoint.meta["manifest"] == str((out / "manifest.tsv").resolve())

    def test_given_manifest_is_not_rewritten(self, synthetic_root, tmp_path):
        manifest = tmp_path / "split.tsv"
        write_split_manifest(str(synthetic_root), 5, str(manifest))
        content = manifest.read_text()
        train(toy_config(synthetic_root, tmp_path / "run", seed=11, epochs=1, manifest=str(manifest)))
        assert manifest.read_text() == content
        assert not (tmp_path / "run" / "manifest.tsv").exists()


class TestEvaluate:
    def test_evaluate_is_read_only_and_repeatable(self, synthetic_root, tmp_path):
        outcome = train(toy_config(synthetic_root, tmp_path / "run"))
        digest = file_digest(outcome.checkpoint_path)
        first, records = evaluate(str(outcome.checkpoint_path), "test", str(synthetic_root), workers=3)
        second, again = evaluate(str(outcome.checkpoint_path), "test", str(synthetic_root), workers=1)
        assert file_digest(outcome.checkpoint_path) == digest
        np.testing.assert_array_equal(records.probs, again.probs)
        assert first.to_dict() == second.to_dict()
        assert first.accuracy == outcome.reports["test"].accuracy

    def test_unknown_split(self, tmp_path):
        with pytest.raises(UsageError):
            evaluate(str(tmp_path / "x.ckpt"), "holdout")

    def test_uses_training_manifest(self, synthetic_root, tmp_path):
        manifest = tmp_path / "split.tsv"
        write_split_manifest(str(synthetic_root), 5, str(manifest))
        outcome = train(toy_config(synthetic_root, tmp_path / "run", seed=11, epochs=1, manifest=str(manifest)))
        splits = read_manifest(manifest, synthetic_root)
        train_ids = {r.sample_id for r in splits["train"]}
        for data_root in (str(synthetic_root), None):
            _, records = evaluate(str(outcome.checkpoint_path), "test", data_root)
            assert records.ids == [r.sample_id for r in splits["test"]]
            assert not train_ids & set(records.ids)

    def test_missing_training_manifest(self, synthetic_root, tmp_path):
        outcome = train(toy_config(synthetic_root, tmp_path / "run", epochs=1))
        (tmp_path / "run" / "manifest.tsv").unlink()
        with pytest.raises(DataError):
            evaluate(str(outcome.checkpoint_path), "test", str(synthetic_root))
        with pytest.raises(DataError):
            evaluate(str(outcome.checkpoint_path), "test", str(synthetic_root), manifest=str(tmp_path / "none.tsv"))

    def test_predict_single_image(self, synthetic_root, tmp_path):
        outcome = train(toy_config(synthetic_root, tmp_path / "run", epochs=1))
        image = sorted((synthetic_root / "malignant").iterdir())[0]
        result = trainer.predict(str(outcome.checkpoint_path), str(image))
        assert result["model"] == "toy"
        assert result["p0"] + result["p1"] == pytest.approx(1.0)
        assert result["label"] == ("malignant" if result["pred"] == 1 else "benign")


class TestEnsembleEval:
    IDS = ["s0", "s1", "s2", "s3"]
    TRUTH = [1, 0, 1, 0]

    def files(self, tmp_path):
        return [
            write_records(tmp_path / "a_predictions_test.jsonl", self.IDS, self.TRUTH, [0.9, 0.2, 0.8, 0.1]),
            write_records(tmp_path / "b_predictions_test.jsonl", self.IDS, self.TRUTH, [0.3, 0.2, 0.8, 0.1]),
            write_records(tmp_path / "c_predictions_test.jsonl", self.IDS, self.TRUTH, [0.9, 0.4, 0.6, 0.3]),
        ]

    def test_identical_models(self, tmp_path):
        path = write_records(tmp_path / "m_predictions_test.jsonl", self.IDS, self.TRUTH, [0.7, 0.6, 0.2, 0.1])
        single = read_predictions(path)
        for method in ("majority", "average"):
            metrics, records = ensemble_eval([path, path, path], method)
            np.testing.assert_array_equal(records.preds, single.preds)
            assert metrics.accuracy == 0.5

    def test_flip_is_voted_out(self, tmp_path):
        files = self.files(tmp_path)
        assert read_predictions(files[1]).preds.tolist() == [0, 0, 1, 0]
        for method in ("majority", "average"):
            metrics, records = ensemble_eval(files, method)
            assert records.preds.tolist() == self.TRUTH
            assert metrics.accuracy == 1.0
        _, records = ensemble_eval(files, "average")
        assert records.probs[0, 1] == pytest.approx(0.7)

    def test_weighted_with_equal_errors_matches_average(self, tmp_path):
        files = self.files(tmp_path)
        val_ids, val_truth = ["v0", "v1", "v2"], [1, 0, 1]
        weight_files = [
            write_records(tmp_path / "a_predictions_val.jsonl", val_ids, val_truth, [0.2, 0.1, 0.9]),
            write_records(tmp_path / "b_predictions_val.jsonl", val_ids, val_truth, [0.8, 0.7, 0.9]),
            write_records(tmp_path / "c_predictions_val.jsonl", val_ids, val_truth, [0.8, 0.1, 0.3]),
        ]
        weights = trainer.weights_from(weight_files)
        np.testing.assert_allclose(weights.weights, [1 / 3] * 3)
        weighted, weighted_records = ensemble_eval(files, "weighted", weight_files)
        average, average_records = ensemble_eval(files, "average")
        np.testing.assert_array_equal(weighted_records.preds, average_records.preds)
        assert weighted.accuracy == average.accuracy

    def test_weighted_needs_weight_files(self, tmp_path):
        files = self.files(tmp_path)
        with pytest.raises(UsageError):
            ensemble_eval(files, "weighted")
        with pytest.raises(UsageError):
            ensemble_eval(files, "weighted", files[:2])
        with pytest.raises(UsageError):
            ensemble_eval(files, "vote")

    def test_weight_files_must_pair_by_model(self, tmp_path):
        files = self.files(tmp_path)
        val_ids, val_truth = ["v0", "v1", "v2"], [1, 0, 1]
        weight_files = [
            write_records(tmp_path / "a_predictions_val.jsonl", val_ids, val_truth, [0.2, 0.1, 0.9]),
            write_records(tmp_path / "b_predictions_val.jsonl", val_ids, val_truth, [0.8, 0.7, 0.9]),
            write_records(tmp_path / "c_predictions_val.jsonl", val_ids, val_truth, [0.8, 0.1, 0.3]),
        ]
        ensemble_eval(files, "weighted", weight_files)
        with pytest.raises(UsageError, match="b != a"):
            ensemble_eval(files, "weighted", [weight_files[1], weight_files[0], weight_files[2]])
        with pytest.raises(UsageError):
            ensemble_table(files, weight_files[::-1])

    def test_misaligned_ids(self, tmp_path):
        files = self.files(tmp_path)
        shuffled = write_records(tmp_path / "d_predictions_test.jsonl", ["s0", "s2", "s1", "s3"],
                                 self.TRUTH, [0.9, 0.2, 0.8, 0.1])
        with pytest.raises(AlignmentError, match="s2"):
            ensemble_eval([files[0], shuffled], "average")
        shorter = write_records(tmp_path / "e_predictions_test.jsonl", self.IDS[:3], self.TRUTH[:3], [0.9, 0.2, 0.8])
        with pytest.raises(AlignmentError):
            ensemble_eval([files[0], shorter], "average")

    def test_truth_mismatch(self, tmp_path):
        files = self.files(tmp_path)
        other = write_records(tmp_path / "f_predictions_test.jsonl", self.IDS, [1, 1, 1, 0], [0.9, 0.2, 0.8, 0.1])
        with pytest.raises(AlignmentError, match="s1"):
            ensemble_eval([files[0], other], "majority")

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError):
            ensemble_eval([str(tmp_path / "none.jsonl"), str(tmp_path / "none.jsonl")], "average")

    def test_table(self, tmp_path):
        files = self.files(tmp_path)
        table = ensemble_table(files)
        assert len(table) == 3 + 4 * 2
        assert table["models"].tolist()[:3] == ["a", "b", "c"]
        assert set(table["method"]) == {"single", "majority", "average"}
        row = table[(table["models"] == "a+b+c") & (table["method"] == "average")].iloc[0]
        assert row["accuracy"] == 100.0
        single_b = table[(table["models"] == "b") & (table["method"] == "single")].iloc[0]
        assert single_b["accuracy"] == 75.0

    def test_table_with_weights(self, tmp_path):
        files = self.files(tmp_path)
        table = ensemble_table(files, files)
        assert len(table) == 3 + 4 * 3
        assert "weighted" in set(table["method"])


@pytest.mark.slow
class TestConvergence:
    def test_toy_loss_decreases_every_epoch(self):
        # 전체 배치, 드롭아웃 없음: 에폭 손실이 매 에폭 감소해야 함
        data = synthesize_dataset(16, seed=0, image_size=8)
        decreased = 0
        for seed in range(10):
            config = TrainConfig(model="toy", lr=0.002, batch=len(data), seed=seed)
            model_trainer = Trainer(build_toy(seed=seed, dropout_rate=0.0), config)
            losses = [model_trainer.train_epoch(data, epoch) for epoch in range(1, 6)]
            decreased += all(later < earlier for earlier, later in zip(losses, losses[1:]))
        assert decreased >= 9

    def test_m1_overfits_small_set(self):
        data = synthesize_dataset(16, seed=1, image_size=32)
        reached = 0
        for seed in range(10):
            config = TrainConfig(model="m1", lr=0.001, batch=4, seed=seed)
            model = build_m1(seed=seed)
            model_trainer = Trainer(model, config)
            for epoch in range(1, 201):
                model_trainer.train_epoch(data, epoch)
                accuracy = model_trainer.validate(data)[1]
                if accuracy == 1.0:
                    reached += 1
                    break
        assert reached >= 9

import json

from main import build_parser, main
from log_manager import read_predictions
import trainer


class TestExitCodes:
    def test_bad_arguments(self):
        assert main(["train", "--epochs", "many"]) == 1
        assert main(["train", "--model", "m9"]) == 1
        assert main([]) == 1

    def test_invalid_config_value(self, tmp_path):
        assert main(["train", "--model", "toy", "--epochs", "0", "--out", str(tmp_path)]) == 1

    def test_missing_data_root(self, tmp_path):
        args = ["train", "--model", "toy", "--data-root", str(tmp_path / "nowhere"), "--out", str(tmp_path / "run")]
        assert main(args) == 2

    def test_bad_checkpoint(self, tmp_path):
        broken = tmp_path / "broken.ckpt"
        broken.write_bytes(b"definitely not a checkpoint file")
        assert main(["eval", "--checkpoint", str(broken), "--out", str(tmp_path)]) == 4

    def test_missing_prediction_file(self, tmp_path):
        assert main(["ensemble", str(tmp_path / "a.jsonl"), str(tmp_path / "b.jsonl"), "--out", str(tmp_path)]) == 2

    def test_parser_leaves_unset_flags_to_config(self):
        args = build_parser().parse_args(["ensemble", "a.jsonl", "b.jsonl"])
        assert args.method is None
        assert args.table is None
        config = trainer.load_config({"method": args.method, "table": args.table}, schema=trainer.EnsembleConfig)
        assert config.method == "average"
        assert not config.table

    def test_eval_requires_checkpoint(self, tmp_path):
        assert main(["eval", "--out", str(tmp_path)]) == 1


class TestWorkflow:
    def test_synth_split_train_eval_ensemble_predict(self, tmp_path, capsys):
        data, run = tmp_path / "data", tmp_path / "run"
        manifest = tmp_path / "manifest.tsv"
        assert main(["synth-data", "--out", str(data), "--n-per-class", "10", "--image-size", "16", "--seed", "3"]) == 0
        assert main(["split", "--data-root", str(data), "--seed", "5", "--manifest", str(manifest)]) == 0
        assert len(manifest.read_text().splitlines()) == 20

        train_args = ["train", "--model", "toy", "--data-root", str(data), "--manifest", str(manifest),
                      "--epochs", "2", "--lr", "0.005", "--seed", "5", "--out", str(run)]
        assert main(train_args) == 0
        checkpoint = run / "best.ckpt"
        assert checkpoint.exists()

        assert main(["eval", "--checkpoint", str(checkpoint), "--model", "toy", "--split", "val",
                     "--data-root", str(data), "--manifest", str(manifest), "--out", str(run)]) == 0
        assert main(["eval", "--checkpoint", str(checkpoint), "--model", "m1",
                     "--data-root", str(data), "--out", str(run)]) == 4

        # 데이터 루트와 매니페스트는 체크포인트에 기록된 학습 설정에서
        assert main(["eval", "--checkpoint", str(checkpoint), "--out", str(tmp_path / "again")]) == 0
        again = read_predictions(tmp_path / "again" / "toy_predictions_test.jsonl")
        assert again.ids == read_predictions(run / "toy_predictions_test.jsonl").ids

        predictions = str(run / "toy_predictions_test.jsonl")
        assert main(["ensemble", predictions, predictions, "--method", "majority", "--out", str(run)]) == 0
        assert (run / "ensemble_majority_predictions_test.jsonl").exists()
        assert (run / "report_ensemble_majority_test.json").exists()

        settings = tmp_path / "ensemble.env"
        settings.write_text(f"METHOD=average\nOUT={tmp_path / 'from_file'}\nEPOCHS=7\n")
        assert main(["ensemble", predictions, predictions, "--config", str(settings)]) == 0
        assert (tmp_path / "from_file" / "ensemble_average_predictions_test.jsonl").exists()
        settings.write_text("METHOD=average\nCOLOUR=red\n")
        assert main(["ensemble", predictions, predictions, "--config", str(settings)]) == 1
        assert main(["ensemble", predictions, predictions, "--table", "--out", str(run)]) == 0
        assert (run / "ensemble_table.csv").exists()

        capsys.readouterr()
        image = sorted((data / "benign").iterdir())[0]
        assert main(["predict", "--checkpoint", str(checkpoint), "--image", str(image)]) == 0
        result = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        assert result["model"] == "toy"
        assert result["pred"] in (0, 1)

import json

import numpy as np
import pytest

from spatial_mtl import cli
from spatial_mtl.model import Checkpoint
from spatial_mtl.records import read_predictions
from spatial_mtl.scenegen.io import read_sample_records, read_smap

SMALL_MODEL = ["--embed-dim", "16", "--num-layers", "1", "--num-heads", "2", "--decoder-channels", "4"]


def run(argv, capsys):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def error_line(err: str) -> dict:
    lines = err.strip().splitlines()
    return json.loads(lines[-1])


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "data"
    assert cli.main(["gen-data", "--n", "40", "--seed", "2", "--image-size", "32", "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "baseline"
    argv = ["train", "--data", str(dataset), "--out", str(out), "--variant", "baseline", "--epochs", "1",
            "--batch-size", "8", *SMALL_MODEL]
    assert cli.main(argv) == 0
    return out


class TestGenData:
    def test_split_sizes(self, tmp_path, capsys):
        code, out, _ = run(["gen-data", "--n", "1000", "--seed", "0", "--image-size", "32", "--out", tmp_path], capsys)
        assert code == 0
        assert out.splitlines() == ["split\tsize", "train\t700", "val\t100", "test\t200"]
        for name, size in (("train", 700), ("val", 100), ("test", 200)):
            assert len(read_sample_records(tmp_path / name / "samples.jsonl")) == size

    def test_config_echo(self, dataset):
        echo = json.loads((dataset / "gen-data.config.json").read_text())
        assert echo["command"] == "gen-data" and echo["n"] == 40 and echo["seed"] == 2
        assert echo["split"] == [0.7, 0.1, 0.2]

    def test_deterministic(self, tmp_path, capsys):
        for name in ("a", "b"):
            run(["gen-data", "--n", "12", "--seed", "5", "--image-size", "32", "--out", tmp_path / name], capsys)
        for f in sorted((tmp_path / "a").rglob("*")):
            # the config echo records the output directory, which differs
            if f.is_file() and f.name != "gen-data.config.json":
                assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes()

    def test_too_small(self, tmp_path, capsys):
        code, _, err = run(["gen-data", "--n", "3", "--out", tmp_path], capsys)
        assert code == cli.EXIT_DATA and error_line(err)["exit"] == cli.EXIT_DATA


class TestConfig:
    def test_file_and_flag_precedence(self, tmp_path, capsys, monkeypatch):
        monkeypatch.delenv(cli.SEED_ENV, raising=False)
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"n": 12, "seed": 9, "image_size": 32}))
        run(["gen-data", "--config", cfg, "--n", "14", "--out", tmp_path / "d"], capsys)
        echo = json.loads((tmp_path / "d" / "gen-data.config.json").read_text())
        assert (echo["n"], echo["seed"], echo["image_size"]) == (14, 9, 32)

    def test_env_seed(self, tmp_path, capsys, monkeypatch):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"seed": 9}))
        monkeypatch.setenv(cli.SEED_ENV, "21")
        args = cli.build_parser().parse_args(["gen-data", "--config", str(cfg), "--out", "x"])
        assert cli.effective_config(args)["seed"] == 21
        args = cli.build_parser().parse_args(["gen-data", "--config", str(cfg), "--out", "x", "--seed", "4"])
        assert cli.effective_config(args)["seed"] == 4

    def test_env_seed_must_be_int(self, monkeypatch, capsys):
        monkeypatch.setenv(cli.SEED_ENV, "abc")
        code, _, err = run(["gen-data", "--out", "x"], capsys)
        assert code == cli.EXIT_USAGE and cli.SEED_ENV in error_line(err)["message"]

    @pytest.mark.parametrize("text", ['{"n": 10, "colour": 1}', "[1, 2]", "{not json"])
    def test_bad_config(self, tmp_path, capsys, text):
        cfg = tmp_path / "c.json"
        cfg.write_text(text)
        code, _, err = run(["gen-data", "--config", cfg, "--out", tmp_path], capsys)
        assert code == cli.EXIT_USAGE and error_line(err)["error"] == "UsageError"

    def test_missing_config(self, tmp_path, capsys):
        code, _, _ = run(["gen-data", "--config", tmp_path / "nope.json", "--out", tmp_path], capsys)
        assert code == cli.EXIT_USAGE


class TestUsage:
    @pytest.mark.parametrize("argv", [
        [], ["fly"], ["gen-data"], ["train", "--data", "x"], ["train", "--data", "x", "--out", "y", "--variant", "big"],
        ["gen-data", "--n", "ten", "--out", "x"], ["report"],
    ])
    def test_exit_2(self, argv, capsys):
        code, _, err = run(argv, capsys)
        assert code == cli.EXIT_USAGE
        assert error_line(err) == {"error": "UsageError", "exit": 2, "message": error_line(err)["message"]}

    def test_missing_flag_named(self, capsys):
        _, _, err = run(["predict", "--data", "x"], capsys)
        assert "--checkpoint" in error_line(err)["message"] and "--out" in error_line(err)["message"]


class TestFeatex:
    def test_in_place(self, tmp_path, capsys):
        data = tmp_path / "d"
        run(["gen-data", "--n", "10", "--seed", "1", "--image-size", "32", "--out", data], capsys)
        code, out, _ = run(["featex", "--data", data], capsys)
        assert code == 0
        assert out.splitlines()[0] == "split\tsamples\tedge_pixels" and len(out.splitlines()) == 4
        for rec in read_sample_records(data / "train" / "samples.jsonl"):
            assert rec["edges_path"].endswith("_canny.smap")
            edges = read_smap(data / "train" / rec["edges_path"])
            assert edges.shape == (32, 32) and set(np.unique(edges)) <= {0.0, 1.0}
        assert json.loads((data / "featex.config.json").read_text())["sigma"] == 1.0

    def test_single_split(self, tmp_path, capsys):
        data = tmp_path / "d"
        run(["gen-data", "--n", "10", "--seed", "1", "--image-size", "32", "--out", data], capsys)
        code, out, _ = run(["featex", "--data", data / "val", "--unit-intrinsics"], capsys)
        assert code == 0 and out.splitlines()[1].startswith("val\t1\t")

    def test_no_samples(self, tmp_path, capsys):
        code, _, err = run(["featex", "--data", tmp_path], capsys)
        assert code == cli.EXIT_DATA and error_line(err)["error"] == "FileNotFoundError"


class TestTrainPredict:
    def test_outputs(self, trained):
        ckpt = Checkpoint.load(trained / "model.ckpt")
        assert ckpt.config.variant == "baseline" and ckpt.config.embed_dim == 16
        epochs = [json.loads(line) for line in (trained / "epochs.jsonl").read_text().splitlines()]
        assert [e["epoch"] for e in epochs] == [1]
        assert json.loads((trained / "train.config.json").read_text())["epochs"] == 1

    def test_predict(self, dataset, trained, tmp_path, capsys):
        code, out, _ = run(["predict", "--checkpoint", trained / "model.ckpt", "--data", dataset, "--split", "val",
                            "--out", tmp_path / "p.jsonl"], capsys)
        assert code == 0
        records = read_predictions(tmp_path / "p.jsonl")
        assert len(records) == 4 and {r["model_id"] for r in records} == {"baseline"}
        header, row = out.splitlines()
        assert header == "model_id\tsplit\tn\taccuracy" and row.startswith("baseline\tval\t4\t")

    def test_missing_data(self, tmp_path, capsys):
        code, _, err = run(["train", "--data", tmp_path / "none", "--out", tmp_path / "o", "--epochs", "1"], capsys)
        assert code == cli.EXIT_DATA

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_exit_4(self, dataset, tmp_path, capsys):
        code, _, err = run(["train", "--data", dataset, "--out", tmp_path, "--variant", "spatial", "--epochs", "2",
                            "--lr", "1e30", "--clip-norm", "1e30", *SMALL_MODEL], capsys)
        assert code == cli.EXIT_NUMERIC and error_line(err)["exit"] == 4


class TestEnsembleAndReport:
    @pytest.fixture
    def predictions(self, dataset, trained, tmp_path, capsys):
        paths = {}
        for split in ("val", "test"):
            for mid in ("a", "b"):
                paths[split, mid] = tmp_path / f"{split}_{mid}.jsonl"
                run(["predict", "--checkpoint", trained / "model.ckpt", "--data", dataset, "--split", split,
                     "--model-id", mid, "--out", paths[split, mid]], capsys)
        return paths

    def test_fit_predict_report(self, predictions, tmp_path, capsys):
        code, out, _ = run(["ensemble-fit", "--predictions", predictions["val", "a"], predictions["val", "b"],
                            "--out", tmp_path / "w.json"], capsys)
        assert code == 0 and out.splitlines()[0] == "meta_category\trelation\ta\tb"
        code, out, _ = run(["ensemble-predict", "--weights", tmp_path / "w.json", "--predictions",
                            predictions["test", "a"], predictions["test", "b"], "--out", tmp_path / "e.jsonl"], capsys)
        assert code == 0
        ens = read_predictions(tmp_path / "e.jsonl")
        # both members are the same model, so every vote is unanimous
        assert [r["predicted"] for r in ens] == [r["predicted"] for r in read_predictions(predictions["test", "a"])]
        code, out, _ = run(["report", "--predictions", predictions["test", "a"], tmp_path / "e.jsonl",
                            "--out", tmp_path / "rep"], capsys)
        assert code == 0 and out.splitlines()[0] == "model\tn\taccuracy\tf1"
        for name in ("report.txt", "report.json", "report.config.json", "figures/overall.png", "figures/overall.csv"):
            assert (tmp_path / "rep" / name).exists()
        assert (tmp_path / "rep" / "report.txt").read_text() == out
        doc = json.loads((tmp_path / "rep" / "report.json").read_text())
        assert set(doc["models"]) == {"a", "ensemble"} and doc["comparison"]["target"] == "ensemble"

    def test_single_model_report(self, predictions, capsys):
        code, out, _ = run(["report", "--predictions", predictions["test", "a"]], capsys)
        assert code == 0 and len(out.splitlines()) == 2

    def test_empty_predictions(self, tmp_path, capsys):
        (tmp_path / "p.jsonl").write_text("")
        code, _, err = run(["report", "--predictions", tmp_path / "p.jsonl"], capsys)
        assert code == cli.EXIT_DATA and "no records" in error_line(err)["message"]

    def test_missing_member(self, predictions, tmp_path, capsys):
        run(["ensemble-fit", "--predictions", predictions["val", "a"], predictions["val", "b"],
             "--out", tmp_path / "w.json"], capsys)
        code, _, err = run(["ensemble-predict", "--weights", tmp_path / "w.json", "--predictions",
                            predictions["test", "a"], "--out", tmp_path / "e.jsonl"], capsys)
        assert code == cli.EXIT_DATA and error_line(err)["error"] == "AlignmentError"

    def test_schema_error(self, tmp_path, capsys):
        (tmp_path / "p.jsonl").write_text('{"id": "x"}\n')
        code, _, err = run(["report", "--predictions", tmp_path / "p.jsonl"], capsys)
        assert code == cli.EXIT_DATA and error_line(err)["error"] == "SchemaError"

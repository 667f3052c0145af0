"""End-to-end subcommand behavior on miniature fixtures."""

import csv
import json
import os

import pytest

from ktopt.cli import ABLATION_VARIANTS, main
from ktopt.ingest import load_dataset
from ktopt.predict import load_model
from ktopt.pretrain import load_embeddings

TINY = [
    "--set", "synth.n_students=24", "--set", "synth.n_questions=20",
    "--set", "synth.n_skills=4", "--set", "synth.seq_len=20",
]
FAST = [
    "--set", "predictor.epochs=1", "--set", "predictor.hidden_dim=8",
    "--set", "predictor.batch=16", "--set", "pretrain.epochs=2",
    "--set", "pretrain.dim_vertex=4", "--set", "pretrain.dim_final=8",
]


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    rc = main(["synth", "--seed", "3", "--out-dir", str(d)] + TINY)
    assert rc == 0
    return d


def read_metrics(out_dir):
    with open(os.path.join(out_dir, "metrics.json"), encoding="utf-8") as fh:
        return json.load(fh)


class TestSynth:
    def test_outputs(self, data_dir):
        ds = load_dataset(str(data_dir / "dataset.json"))
        assert len(ds.students) == 24
        assert ds.num_questions == 20
        with open(data_dir / "latent.json", encoding="utf-8") as fh:
            latent = json.load(fh)
        assert len(latent) == 24
        assert all(len(row) == 20 for row in latent)


class TestIngest:
    def test_csv_round_trip(self, tmp_path):
        raw = tmp_path / "log.csv"
        raw.write_text("order_id,user_id,problem_id,skill_id,correct\n"
                       "1,7,101,9,1\n2,7,102,9,0\n3,8,101,9,1\n")
        rc = main(["ingest", "--input", str(raw), "--format", "assist_csv",
                   "--out-dir", str(tmp_path)])
        assert rc == 0
        ds = load_dataset(str(tmp_path / "dataset.json"))
        assert len(ds.students) == 2
        assert ds.num_records == 3

    def test_missing_input(self, tmp_path):
        rc = main(["ingest", "--input", str(tmp_path / "nope.csv"),
                   "--out-dir", str(tmp_path)])
        assert rc == 2


class TestDifficultyAndOptimize:
    def test_difficulty_csv(self, data_dir, tmp_path):
        rc = main(["difficulty", "--data", str(data_dir / "dataset.json"),
                   "--out-dir", str(tmp_path)])
        assert rc == 0
        with open(tmp_path / "difficulty.csv", newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["question_id", "attempts", "correct", "p",
                           "reciprocal", "d"]
        assert len(rows) > 1

    def test_optimize_preserves_observed(self, data_dir, tmp_path):
        rc = main(["optimize", "--data", str(data_dir / "dataset.json"),
                   "--out-dir", str(tmp_path), "--ov", "--su",
                   "--set", "detect.alpha=0.3"])
        assert rc == 0
        original = load_dataset(str(data_dir / "dataset.json"))
        optimized = load_dataset(str(tmp_path / "optimized.json"))
        with open(tmp_path / "corrections.csv", newline="") as fh:
            corrections = list(csv.DictReader(fh))
        flipped = {(int(r["student_id"]), int(r["position"]))
                   for r in corrections}
        for o_seq, c_seq in zip(original.students, optimized.students):
            for pos, (o, c) in enumerate(zip(o_seq.interactions,
                                             c_seq.interactions)):
                assert c.observed == o.observed
                if (o_seq.student_id, pos) in flipped:
                    assert c.response != o.response
                else:
                    assert c.response == o.response


class TestPretrainCmd:
    def test_embeddings_written(self, data_dir, tmp_path):
        rc = main(["pretrain", "--data", str(data_dir / "dataset.json"),
                   "--out-dir", str(tmp_path)] + FAST)
        assert rc == 0
        emb = load_embeddings(str(tmp_path / "embeddings.bin"))
        assert emb.question.shape == (20, 4)
        assert emb.dim_final == 8
        with open(tmp_path / "pretrain_loss.csv", newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["epoch", "loss"]
        assert len(rows) == 3


class TestTrainEval:
    def test_artifacts_and_variant(self, data_dir, tmp_path):
        out = tmp_path / "run"
        rc = main(["train", "--data", str(data_dir / "dataset.json"),
                   "--seed", "3", "--out-dir", str(out), "--ov", "--be"]
                  + FAST)
        assert rc == 0
        blob = read_metrics(str(out))
        assert blob["variant_name"] == "DKT+Be+ov"
        assert 0.0 <= blob["acc"] <= 1.0
        assert os.path.exists(out / "model.bin")
        assert os.path.exists(out / "embeddings.bin")
        assert os.path.exists(out / "optimized.json")
        model = load_model(str(out / "model.bin"),
                           emb=load_embeddings(str(out / "embeddings.bin")))
        assert model.fusion.use_embeddings

    def test_determinism_byte_identical(self, data_dir, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        args = ["train", "--data", str(data_dir / "dataset.json"),
                "--seed", "11", "--ov"] + FAST
        assert main(args + ["--out-dir", str(a)]) == 0
        assert main(args + ["--out-dir", str(b)]) == 0
        assert (a / "metrics.json").read_bytes() == \
            (b / "metrics.json").read_bytes()

    def test_eval_reproduces_metrics(self, data_dir, tmp_path):
        out = tmp_path / "run"
        args = ["--data", str(data_dir / "dataset.json"), "--seed", "4",
                "--out-dir", str(out), "--ov"] + FAST
        assert main(["train"] + args) == 0
        trained = read_metrics(str(out))
        assert main(["eval"] + args) == 0
        assert read_metrics(str(out)) == trained

    def test_missing_data_exits_2(self, tmp_path):
        rc = main(["train", "--data", str(tmp_path / "absent.json"),
                   "--out-dir", str(tmp_path)])
        assert rc == 2

    def test_bad_config_file_exits_1(self, data_dir, tmp_path):
        bad = tmp_path / "bad.toml"
        bad.write_text("[detect]\nwut = 3\n")
        rc = main(["train", "--data", str(data_dir / "dataset.json"),
                   "--config", str(bad), "--out-dir", str(tmp_path)])
        assert rc == 1

    def test_bad_set_value_exits_1(self, data_dir, tmp_path):
        rc = main(["train", "--data", str(data_dir / "dataset.json"),
                   "--out-dir", str(tmp_path), "--set", "dp.gamma=-1"])
        assert rc == 1


class TestAblate:
    def test_all_variants_reported(self, data_dir, tmp_path):
        rc = main(["ablate", "--data", str(data_dir / "dataset.json"),
                   "--seed", "3", "--out-dir", str(tmp_path)] + FAST)
        assert rc == 0
        with open(tmp_path / "ablation.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == len(ABLATION_VARIANTS) == 14
        names = [r["variant"] for r in rows]
        assert names[0] == "DKT"
        assert names[-1] == "DKT+Be+ov+su+per"
        assert len(set(names)) == 14
        for name in names:
            sub = tmp_path / name
            assert (sub / "metrics.json").exists()
            assert json.loads((sub / "metrics.json").read_text())[
                "variant_name"] == name


class TestSweep:
    def test_alpha_sweep_sorted(self, data_dir, tmp_path):
        rc = main(["sweep", "--data", str(data_dir / "dataset.json"),
                   "--seed", "3", "--out-dir", str(tmp_path), "--ov",
                   "--param", "alpha", "--values", "0.9,0.5"] + FAST)
        assert rc == 0
        with open(tmp_path / "sweep.csv", newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["alpha", "auc", "acc"]
        assert [r[0] for r in rows[1:]] == ["0.5", "0.9"]

    def test_unknown_param(self, data_dir, tmp_path):
        rc = main(["sweep", "--data", str(data_dir / "dataset.json"),
                   "--out-dir", str(tmp_path), "--param", "zeta",
                   "--values", "1"])
        assert rc == 1

    def test_empty_values(self, data_dir, tmp_path):
        rc = main(["sweep", "--data", str(data_dir / "dataset.json"),
                   "--out-dir", str(tmp_path), "--param", "alpha",
                   "--values", " , "])
        assert rc == 1


class TestQuantize:
    def test_zero_fraction_equals_baseline(self, data_dir, tmp_path):
        base_out = tmp_path / "base"
        assert main(["train", "--data", str(data_dir / "dataset.json"),
                     "--seed", "6", "--out-dir", str(base_out)] + FAST) == 0
        baseline = read_metrics(str(base_out))
        rc = main(["quantize", "--data", str(data_dir / "dataset.json"),
                   "--seed", "6", "--out-dir", str(tmp_path), "--ov",
                   "--fractions", "0,1.0"] + FAST)
        assert rc == 0
        with open(tmp_path / "quantize.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert [r["fraction"] for r in rows] == ["0.0", "1.0"]
        assert float(rows[0]["auc"]) == pytest.approx(baseline["auc"],
                                                      abs=1e-12)

    def test_bad_fraction(self, data_dir, tmp_path):
        rc = main(["quantize", "--data", str(data_dir / "dataset.json"),
                   "--out-dir", str(tmp_path), "--fractions", "1.5"])
        assert rc == 1

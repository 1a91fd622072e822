import csv
from types import SimpleNamespace

import numpy as np
import pytest

from speechqual.cli import enumerate_selections, main
from speechqual.data import SynthSpec, synth_dataset, with_subset, write_manifest
from speechqual.trainer import load_checkpoint

DIMS = (2, 6, 6)


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    alpha = synth_dataset(
        SynthSpec(n=56, dims=DIMS, noise_sd=0.0, seed=10, tag="ALPHA"), root / "alpha"
    )
    beta = synth_dataset(
        SynthSpec(n=24, dims=DIMS, noise_sd=0.0, seed=20, tag="BETA"), root / "beta"
    )
    train_manifest = root / "train.csv"
    write_manifest(list(alpha.records[:40]) + list(beta.records), train_manifest)
    eval_manifest = root / "eval_set.csv"
    write_manifest(with_subset(alpha.records[40:], "test"), eval_manifest)

    config = root / "run.ini"
    config.write_text(
        "[train]\nlr_init = 0.01\nbatch_size = 16\nmax_epochs = 25\n"
        "[arch]\nmodel_dim = 8\ntransformer_layers = 1\nattention_heads = 2\n"
    )
    return SimpleNamespace(
        root=root,
        train_manifest=train_manifest,
        eval_manifest=eval_manifest,
        config=config,
        feature_file=alpha.records[0].feature_path,
    )


@pytest.fixture(scope="module")
def trained(corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("trained")
    code = main([
        "train",
        "--train-manifest", str(corpus.train_manifest),
        "--datasets", "ALPHA",
        "--config", str(corpus.config),
        "--seed", "5",
        "--out", str(out),
    ])
    assert code == 0
    return out


@pytest.fixture(scope="module")
def trained_multi(corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("trained_multi")
    code = main([
        "train",
        "--train-manifest", str(corpus.train_manifest),
        "--datasets", "ALPHA",
        "--config", str(corpus.config),
        "--heads", "multi",
        "--max-epochs", "2",
        "--seed", "5",
        "--out", str(out),
    ])
    assert code == 0
    return out


def read_csv_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


class TestTrainCommand:
    def test_writes_checkpoint_and_report(self, trained):
        assert (trained / "checkpoint.wsqc").exists()
        rows = read_csv_rows(trained / "train_report.csv")
        assert len(rows) >= 1
        assert set(rows[0]) == {"epoch", "lr", "train_loss", "val_loss", "is_best"}

    def test_bad_label_fails_with_row_context(self, corpus, tmp_path, capsys):
        bad = tmp_path / "bad.csv"
        bad.write_text(
            "id,feature_path,mos,noi,col,dis,loud,scale,dataset,subset\n"
            "x,none.wsqf,9.0,,,,,mos_1_5,ALPHA,train\n"
        )
        code = main(["train", "--train-manifest", str(bad), "--out", str(tmp_path / "o")])
        assert code != 0
        err = capsys.readouterr().err
        assert ":2:" in err and "9.0" in err

    def test_bias_aware_single_dataset_matches_mse(self, corpus, tmp_path):
        outs = {}
        for loss in ("mse", "bias_aware"):
            out = tmp_path / loss
            code = main([
                "train",
                "--train-manifest", str(corpus.train_manifest),
                "--datasets", "ALPHA",
                "--config", str(corpus.config),
                "--max-epochs", "3",
                "--seed", "5",
                "--loss", loss,
                "--out", str(out),
            ])
            assert code == 0
            outs[loss] = load_checkpoint(out / "checkpoint.wsqc")
        a, b = outs["mse"].params, outs["bias_aware"].params
        for k in a.keys():
            assert np.array_equal(a[k], b[k])

    def test_unknown_config_key_rejected(self, corpus, tmp_path, capsys):
        cfg = tmp_path / "bad.ini"
        cfg.write_text("[train]\nturbo = yes\n")
        code = main([
            "train",
            "--train-manifest", str(corpus.train_manifest),
            "--config", str(cfg),
            "--out", str(tmp_path / "o"),
        ])
        assert code != 0
        assert "unknown" in capsys.readouterr().err


class TestPredictCommand:
    def test_single_file_row_in_mos_range(self, trained, corpus, capsys):
        code = main(["predict", "--checkpoint", str(trained / "checkpoint.wsqc"),
                     str(corpus.feature_file)])
        assert code == 0
        lines = capsys.readouterr().out.strip().split("\n")
        assert lines[0] == "id,MOS,MOS_mos"
        cells = lines[1].split(",")
        assert 0.0 < float(cells[1]) < 1.0
        assert 1.0 <= float(cells[2]) <= 5.0

    def test_multi_head_columns_ordered(self, trained_multi, corpus, capsys):
        code = main(["predict", "--checkpoint", str(trained_multi / "checkpoint.wsqc"),
                     str(corpus.feature_file)])
        assert code == 0
        header = capsys.readouterr().out.strip().split("\n")[0].split(",")
        assert header[1:6] == ["MOS", "NOI", "COL", "DIS", "LOUD"]

    def test_repeat_run_identical(self, trained, corpus, capsys, tmp_path):
        args = ["predict", "--checkpoint", str(trained / "checkpoint.wsqc"),
                str(corpus.feature_file)]
        main(args)
        first = capsys.readouterr().out
        main(args)
        second = capsys.readouterr().out
        assert first == second

    def test_writes_csv_when_out_given(self, trained, corpus, tmp_path, capsys):
        out = tmp_path / "preds"
        code = main(["predict", "--checkpoint", str(trained / "checkpoint.wsqc"),
                     str(corpus.feature_file), "--out", str(out)])
        assert code == 0
        assert (out / "predictions.csv").read_text() == capsys.readouterr().out


class TestEvaluateCommand:
    def test_per_testset_rows_plus_average(self, trained, corpus, tmp_path, capsys):
        out = tmp_path / "eval"
        code = main(["evaluate", "--checkpoint", str(trained / "checkpoint.wsqc"),
                     "--test-manifest", str(corpus.eval_manifest), "--out", str(out)])
        assert code == 0
        rows = read_csv_rows(out / "evaluation.csv")
        assert [row["testset"] for row in rows] == ["eval_set", "AVERAGE"]
        assert float(rows[0]["r"]) == float(rows[1]["r"])
        assert int(rows[0]["n"]) == 16
        # trained on the same synthetic world: ranking should be learned well
        assert float(rows[0]["r"]) >= 0.8

    def test_average_is_mean_over_testsets(self, trained, corpus, tmp_path):
        out = tmp_path / "eval2"
        code = main(["evaluate", "--checkpoint", str(trained / "checkpoint.wsqc"),
                     "--test-manifest", str(corpus.eval_manifest),
                     "--test-manifest", str(corpus.train_manifest),
                     "--out", str(out)])
        assert code == 0
        rows = read_csv_rows(out / "evaluation.csv")
        assert len(rows) == 3
        r_avg = (float(rows[0]["r"]) + float(rows[1]["r"])) / 2.0
        e_avg = (float(rows[0]["e"]) + float(rows[1]["e"])) / 2.0
        assert float(rows[2]["r"]) == pytest.approx(r_avg, abs=1e-15)
        assert float(rows[2]["e"]) == pytest.approx(e_avg, abs=1e-15)

    def test_rerun_byte_identical(self, trained, corpus, tmp_path):
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        for out in (out_a, out_b):
            main(["evaluate", "--checkpoint", str(trained / "checkpoint.wsqc"),
                  "--test-manifest", str(corpus.eval_manifest), "--out", str(out)])
        assert (out_a / "evaluation.csv").read_bytes() == (out_b / "evaluation.csv").read_bytes()


class TestAblateCommand:
    def test_enumeration_counts(self):
        assert len(enumerate_selections(["A", "B"])) == 3
        assert len(enumerate_selections(["A", "B", "C", "D"])) == 15
        with pytest.raises(ValueError):
            enumerate_selections([])

    def test_two_datasets_three_rows_sorted(self, corpus, tmp_path, capsys):
        out = tmp_path / "abl"
        code = main([
            "ablate",
            "--train-manifest", str(corpus.train_manifest),
            "--test-manifest", str(corpus.eval_manifest),
            "--config", str(corpus.config),
            "--max-epochs", "2",
            "--seed", "7",
            "--out", str(out),
        ])
        assert code == 0
        rows = read_csv_rows(out / "ablation.csv")
        assert len(rows) == 3
        assert {row["selection"] for row in rows} == {"ALPHA", "BETA", "ALPHA+BETA"}
        points = [int(row["train_points"]) for row in rows]
        assert points == sorted(points)
        by_sel = {row["selection"]: row for row in rows}
        assert int(by_sel["ALPHA"]["train_points"]) == 40
        assert int(by_sel["BETA"]["train_points"]) == 24
        assert int(by_sel["ALPHA+BETA"]["train_points"]) == 64
        for row in rows:
            assert float(row["r_avg"]) == pytest.approx(float(row["r_eval_set"]), abs=1e-15)
            run_dir = out / "runs" / row["selection"]
            assert (run_dir / "checkpoint.wsqc").exists()


class TestReportCommand:
    def test_distribution_rows(self, corpus, tmp_path):
        out = tmp_path / "rep"
        code = main(["report", "--manifest", str(corpus.train_manifest), "--out", str(out)])
        assert code == 0
        rows = read_csv_rows(out / "distribution.csv")
        assert [row["dataset"] for row in rows] == ["ALPHA", "BETA", "COMBINED"]
        assert int(rows[2]["count"]) == int(rows[0]["count"]) + int(rows[1]["count"])
        assert not (out / "distribution.svg").exists()

    def test_correlation_matrix_from_scores(self, tmp_path):
        scores = tmp_path / "scores.csv"
        rng = np.random.default_rng(0)
        human = rng.normal(size=25)
        with open(scores, "w") as fh:
            fh.write("human,model\n")
            for h in human:
                fh.write(f"{float(h)!r},{float(h)!r}\n")
        out = tmp_path / "rep"
        code = main(["report", "--scores", str(scores), "--out", str(out)])
        assert code == 0
        lines = (out / "correlation_matrix.csv").read_text().strip().split("\n")
        assert lines[0] == ",human,model"
        assert float(lines[1].split(",")[2]) == 1.0

    def test_svg_emitted_only_with_flag(self, corpus, tmp_path):
        out = tmp_path / "rep_svg"
        code = main(["report", "--manifest", str(corpus.train_manifest),
                     "--out", str(out), "--svg"])
        assert code == 0
        assert (out / "distribution.svg").exists()

    def test_rerun_byte_identical(self, corpus, tmp_path):
        outs = []
        for name in ("r1", "r2"):
            out = tmp_path / name
            main(["report", "--manifest", str(corpus.train_manifest), "--out", str(out)])
            outs.append((out / "distribution.csv").read_bytes())
        assert outs[0] == outs[1]

    def test_no_input_rejected(self, tmp_path, capsys):
        code = main(["report", "--out", str(tmp_path / "rep")])
        assert code != 0
        assert "report needs" in capsys.readouterr().err

import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from mrlscm.channel_model import read_matrix_bin
from mrlscm.cli import main
from mrlscm.evaluation import read_locations
from mrlscm.synth_data import read_csv


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """Scenario, data and matrices shared by the stage tests."""
    d = tmp_path_factory.mktemp("cli")
    assert run("scenario", "--out", d / "s.json", "--regions", 4, "--seed", 7) == 0
    assert run("gen", "--scenario", d / "s.json", "--out", d / "train.csv",
               "--out-test", d / "test.csv", "--matrix-out", d / "A.bin",
               "--matrix-test-out", d / "Ap.bin", "--n-calls", 12, "--samples-per-call", 10,
               "--shadowing", 2, "--seed", 7) == 0
    return d


def stage_commands(d, tag):
    """Every CLI stage with outputs suffixed by ``tag``."""
    (d / "matrix.json").write_text(json.dumps({"grid": {"tilt": [-30, 30, 10],
                                                        "azimuth": [-60, 60, 20]}}))
    (d / "ybar.csv").write_text("S1,S2,S3,S4,S5,S6,S7,S8\n"
                                "-80,-85,x,-90,-95,-88,x,-100\n")
    (d / "pipe.json").write_text(json.dumps({"n_regions": 3, "n_calls": 8, "samples_per_call": 8,
                                             "epochs": 10, "iterations": 2, "c": 3}))
    (d / "sweep.json").write_text(json.dumps({
        "base": {"n_regions": 3, "n_calls": 8, "samples_per_call": 8, "true_locations": True,
                 "iterations": 2, "c": 3},
        "vary": {"method": ["uniform", "kmeans_location"], "seed": [0, 1]}}))
    return [
        ("matrix", ["--config", d / "matrix.json", "--out", d / f"m{tag}.bin"], [f"m{tag}.bin"]),
        ("scenario", ["--out", d / f"s{tag}.json", "--regions", 4, "--seed", 7], [f"s{tag}.json"]),
        ("gen", ["--scenario", d / "s.json", "--out", d / f"tr{tag}.csv", "--out-test",
                 d / f"te{tag}.csv", "--n-calls", 6, "--samples-per-call", 5, "--seed", 3],
         [f"tr{tag}.csv", f"te{tag}.csv"]),
        ("localize", ["--train", d / "train.csv", "--out", d / f"l{tag}.csv", "--epochs", 15,
                      "--checkpoint", d / f"c{tag}.bin", "--seed", 7],
         [f"l{tag}.csv", f"c{tag}.bin"]),
        ("fit", ["--train", d / "train.csv", "--true-locs", "--matrix", d / "A.bin",
                 "--out", d / f"model{tag}.json", "--k", 4, "--c", 3, "--iters", 3],
         [f"model{tag}.json"]),
        ("aps", ["--matrix", d / "A.bin", "--ybar", d / "ybar.csv", "--c", 3,
                 "--out", d / f"aps{tag}.csv"], [f"aps{tag}.csv"]),
        ("eval", ["--model", d / f"model{tag}.json", "--test", d / "test.csv",
                  "--matrix-test", d / "Ap.bin", "--train", d / "train.csv", "--matrix", d / "A.bin",
                  "--out", d / f"r{tag}.json"], [f"r{tag}.json"]),
        ("pipeline", ["--config", d / "pipe.json", "--out-dir", d / f"p{tag}"],
         [f"p{tag}/{n}" for n in ("scenario.json", "train.csv", "test.csv", "A.bin",
                                  "Aprime.bin", "locs.csv", "model.json", "report.json")]),
        ("sweep", ["--spec", d / "sweep.json", "--out", d / f"sw{tag}.csv"], [f"sw{tag}.csv"]),
    ]


def test_every_stage_is_byte_identical_on_rerun(workdir):
    first = stage_commands(workdir, "1")
    second = stage_commands(workdir, "2")
    for (name, argv1, outs1), (_, argv2, outs2) in zip(first, second):
        assert run(name, *argv1) == 0, name
        assert run(name, *argv2) == 0, name
        for o1, o2 in zip(outs1, outs2):
            assert (workdir / o1).read_bytes() == (workdir / o2).read_bytes(), (name, o1)


def test_gen_outputs_are_consistent(workdir):
    train = read_csv(workdir / "train.csv")
    test = read_csv(workdir / "test.csv")
    assert len(train) == 120 and len(test) == 30
    a = read_matrix_bin(workdir / "A.bin")
    assert a.a.shape == (8, 6552)
    assert not np.allclose(a.a, read_matrix_bin(workdir / "Ap.bin").a)


def test_localize_output_format(workdir):
    assert run("localize", "--train", workdir / "train.csv", "--out", workdir / "loc.csv",
               "--epochs", 10, "--label-fraction", 0.2) == 0
    header = (workdir / "loc.csv").read_text().splitlines()[0]
    assert header == "sample_index,pred_x,pred_y"
    assert read_locations(workdir / "loc.csv").shape == (120, 2)


def test_fit_with_predicted_locations_and_eval(workdir):
    assert run("localize", "--train", workdir / "train.csv", "--out", workdir / "loc2.csv",
               "--epochs", 10) == 0
    assert run("fit", "--train", workdir / "train.csv", "--locs", workdir / "loc2.csv",
               "--matrix", workdir / "A.bin", "--method", "uniform", "--width", 100,
               "--out", workdir / "mu.json") == 0
    model = json.loads((workdir / "mu.json").read_text())
    assert len(model["assignment"]) == 120 and len(model["locations"]) == 120
    assert run("eval", "--model", workdir / "mu.json", "--test", workdir / "test.csv",
               "--matrix-test", workdir / "Ap.bin", "--out", workdir / "ru.json") == 0
    rep = json.loads((workdir / "ru.json").read_text())
    assert rep["test_mae_db"] >= 0 and rep["train_mae_db"] is None


def test_aps_output_rows(workdir):
    (workdir / "yb.csv").write_text("S1,S2,S3,S4,S5,S6,S7,S8\n-80,-85,x,-90,-95,-88,x,-100\n")
    assert run("aps", "--matrix", workdir / "A.bin", "--ybar", workdir / "yb.csv", "--c", 2,
               "--out", workdir / "aps.csv") == 0
    with open(workdir / "aps.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert 1 <= len(rows) <= 2
    assert all(float(r["power_linear"]) > 0 for r in rows)
    assert set(rows[0]) == {"angle_index", "tilt_deg", "azimuth_deg", "power_linear"}


def test_errors_give_exit_code_one(workdir, capsys):
    assert run("fit", "--train", workdir / "train.csv", "--matrix", workdir / "A.bin",
               "--out", workdir / "x.json") == 1
    assert "--locs" in capsys.readouterr().err
    (workdir / "bad.csv").write_text("Time,gNodeBCellID,CallID,S1\n1,c,1,abc\n")
    assert run("localize", "--train", workdir / "bad.csv", "--out", workdir / "x.csv") == 1
    assert "line 2" in capsys.readouterr().err
    assert run("gen", "--scenario", workdir / "missing.json", "--out", workdir / "x.csv") == 1


def test_pipeline_stage_failure_is_tagged(workdir, capsys):
    (workdir / "bad_pipe.json").write_text(json.dumps({"n_regions": 3, "n_calls": 1,
                                                       "samples_per_call": 2, "k": 40,
                                                       "true_locations": True,
                                                       "method": "kmeans_location"}))
    assert run("pipeline", "--config", workdir / "bad_pipe.json",
               "--out-dir", workdir / "bp") == 1
    assert "[fit]" in capsys.readouterr().err


def test_console_entry_point(tmp_path):
    out = subprocess.run([sys.executable, "-m", "mrlscm.cli", "scenario", "--out",
                          tmp_path / "s.json", "--regions", "2"], capture_output=True, text=True)
    assert out.returncode == 0, out.stderr
    assert json.loads((tmp_path / "s.json").read_text())["c_true"] == 3

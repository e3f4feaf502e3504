import json
import shutil
import subprocess
import sys

import numpy as np
import pytest

from danlab.archive import load_model, read_metrics
from danlab.cli import main

SMALL = ["--n-examples", "60"]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def last_json(out):
    return json.loads(out.strip().splitlines()[-1])


@pytest.mark.parametrize("argv", [[], ["bogus"], ["cost", "--nope"], ["attach"], ["eval", "--model", "m"],
                                  ["scenario", "original", "--trials", "x"]])
def test_usage_errors(capsys, argv):
    code, out, err = run(capsys, *argv)
    assert code == 1
    assert "usage:" in err and out == ""


def test_help(capsys):
    code, out, _ = run(capsys, "--help")
    assert code == 0 and "scenario" in out


def test_runtime_errors(capsys, tmp_path):
    code, _, err = run(capsys, "eval", "--model", tmp_path / "missing", "--task", "0")
    assert code == 2 and "error" in err
    code, _, err = run(capsys, "scenario", "upside-down", "--trials", "1", "--epochs", "1", "--out", tmp_path)
    assert code == 2 and "unknown scenario" in err


def test_archive_error_code_reported(capsys, tmp_path):
    run(capsys, "train-base", *SMALL, "--epochs", "1", "--out", tmp_path)
    (tmp_path / "base" / "tensors.bin").write_bytes(b"NOPE")
    code, _, err = run(capsys, "eval", "--model", tmp_path / "base", "--task", "0")
    assert code == 2 and "BadMagic" in err and "code 11" in err


def test_workflow(capsys, tmp_path):
    o = tmp_path
    code, out, _ = run(capsys, "gen-bars", "--variant", "red-vertical", *SMALL, "--out", o)
    assert code == 0 and (o / "bars_red-vertical.bin").exists()

    code, out, _ = run(capsys, "train-base", *SMALL, "--epochs", "2", "--out", o)
    assert code == 0 and (o / "base" / "manifest.json").exists()
    assert len(read_metrics(o / "base_history.csv")) == 2

    before = load_model(o / "base").named_tensors()
    code, out, _ = run(capsys, "attach", "--model", o / "base", "--name", "vert", "--mode", "dan-linear",
                       "--init", "random")
    assert code == 0 and last_json(out)["task"] == 1
    after = load_model(o / "base").named_tensors()
    assert all(np.array_equal(before[k], after[k]) for k in before)
    assert {"task1.conv0.W", "task1.conv1.W"} <= set(after)

    code, out, _ = run(capsys, "train-task", "--model", o / "base", "--task", "vert", "--data",
                       o / "bars_red-vertical.bin", "--epochs", "2", "--out", o)
    assert code == 0
    trained = load_model(o / "base")
    assert all(np.array_equal(before[k], trained.named_tensors()[k]) for k in before)
    assert trained.tasks[1].head.frozen

    code, out, _ = run(capsys, "eval", "--model", o / "base", "--task", "vert", "--data", o / "bars_red-vertical.bin")
    res = last_json(out)
    assert code == 0 and 0.0 <= res["accuracy"] <= 1.0

    code, out, _ = run(capsys, "quantize", "--model", o / "base", "--task", "0", *SMALL, "--bits", "32,8", "--out", o)
    rows = read_metrics(o / "quant_red-horizontal.csv")
    assert code == 0 and [r["bits"] for r in rows] == [32, 8]
    code, out, _ = run(capsys, "eval", "--model", o / "base", "--task", "0", *SMALL)
    assert rows[0]["accuracy"] == last_json(out)["accuracy"]

    code, out, _ = run(capsys, "interp", "--model", o / "base", "--tasks", "0,vert",
                       "--variants", "red-horizontal,red-vertical", *SMALL, "--steps", "5", "--out", o)
    rows = read_metrics(o / "interp.csv")
    assert code == 0 and [r["alpha"] for r in rows] == [0.0, 0.25, 0.5, 0.75, 1.0]
    assert rows[0]["head"] == "red-horizontal" and rows[-1]["head"] == "vert"


def test_attach_linear_approx(capsys, tmp_path):
    run(capsys, "train-base", *SMALL, "--epochs", "1", "--out", tmp_path)
    run(capsys, "--seed", "5", "train-base", "--variant", "red-vertical", *SMALL, "--epochs", "1",
        "--name", "tgt", "--out", tmp_path)
    code, _, err = run(capsys, "attach", "--model", tmp_path / "base", "--name", "x", "--init", "linear_approx")
    assert code == 2 and "--target" in err
    code, _, _ = run(capsys, "attach", "--model", tmp_path / "base", "--name", "x", "--init", "linear_approx",
                     "--target", tmp_path / "tgt", "--to", tmp_path / "out")
    net = load_model(tmp_path / "out")
    tgt = load_model(tmp_path / "tgt")
    assert code == 0
    assert np.array_equal(net.tasks[1].layers[0].controller.bias.data, tgt.base[0].bias.data)


def test_decider_eval(capsys, tmp_path):
    o = tmp_path
    run(capsys, "train-base", *SMALL, "--epochs", "1", "--out", o)
    run(capsys, "attach", "--model", o / "base", "--name", "vert")
    run(capsys, "train-base", "--domains", "red-horizontal,red-vertical", *SMALL, "--epochs", "1",
        "--name", "dec", "--out", o)
    code, out, _ = run(capsys, "eval", "--model", o / "base", "--decider", o / "dec",
                       "--variants", "red-horizontal,red-vertical", *SMALL)
    res = last_json(out)
    assert code == 0 and set(res) == {"decider_accuracy", "task_accuracy", "end_to_end_accuracy"}
    code, _, err = run(capsys, "eval", "--model", o / "base", "--decider", o / "dec", *SMALL)
    assert code == 2


def test_scenario_csv_rows(capsys, tmp_path):
    code, out, _ = run(capsys, "--seed", "1", "scenario", "original", "--trials", "2", "--epochs", "2", "--out", tmp_path)
    assert code == 0
    rows = read_metrics(tmp_path / "scenario_original.csv")
    assert len(rows) == 2 * 2
    assert [(r["trial"], r["epoch"]) for r in rows] == [(0, 1), (0, 2), (1, 1), (1, 2)]
    assert len(read_metrics(tmp_path / "scenario_original_summary.csv")) == 2


def test_cost_outputs(capsys):
    code, out, _ = run(capsys, "cost")
    assert code == 0 and out.startswith("layer 0: C_o=1 C_i=3 k=5 ratio=0.0263")
    code, out, _ = run(capsys, "cost", "--layer", "256,256,5")
    assert "ratio=0.0401" in out and abs(last_json(out)["layer_ratios"][0] - 0.04) < 1e-3
    code, out, _ = run(capsys, "cost", "--increment", "0.13", "--tasks", "10", "--bits", "8")
    res = last_json(out)
    assert abs(res["total"] - 2.17) < 1e-12 and abs(res["quantized_increment"] - 0.0325) < 1e-12


def test_config_file(capsys, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"epochs": 1, "trials": 1, "seed": 3, "out": str(tmp_path / "fromcfg")}))
    code, _, _ = run(capsys, "--config", cfg, "scenario", "transposed")
    rows = read_metrics(tmp_path / "fromcfg" / "scenario_transposed.csv")
    assert code == 0 and len(rows) == 1
    # explicit flags beat the file
    code, _, _ = run(capsys, "--config", cfg, "scenario", "transposed", "--epochs", "2", "--out", tmp_path / "cli")
    assert len(read_metrics(tmp_path / "cli" / "scenario_transposed.csv")) == 2
    bad = tmp_path / "bad.json"
    bad.write_text("[1, 2]")
    assert run(capsys, "--config", bad, "cost")[0] == 1


def test_reproducible_csv(capsys, tmp_path):
    for d in ("a", "b"):
        run(capsys, "--seed", "2", "scenario", "channel-switch", "--trials", "1", "--epochs", "2", "--out", tmp_path / d)
    a = (tmp_path / "a" / "scenario_channel-switch.csv").read_bytes()
    assert a == (tmp_path / "b" / "scenario_channel-switch.csv").read_bytes()


def test_console_script_exit_codes(tmp_path):
    exe = shutil.which("danlab")
    cmd = [exe] if exe else [sys.executable, "-m", "danlab.cli"]
    r = subprocess.run(cmd + ["frobnicate"], capture_output=True, text=True)
    assert r.returncode == 1 and "usage:" in r.stderr
    r = subprocess.run(cmd + ["cost", "--layer", "256,256,5"], capture_output=True, text=True)
    assert r.returncode == 0 and "0.0401" in r.stdout

import csv
import json

import numpy as np
import pytest

from dmlhedge.cli import main
from dmlhedge.pipeline import DEFAULTS, RunConfig, substream

FAST = ["--net.epochs", "3"]


def run(tmp_path, name, *argv):
    out = tmp_path / name
    code = main([argv[0], "--out", str(out), *argv[1:]])
    return code, out


def manifest(out):
    return json.loads((out / "manifest.json").read_text())


def read_csv(path):
    return list(csv.reader(path.open()))


def test_simulate_row_count(tmp_path):
    code, out = run(tmp_path, "a", "simulate", "--paths", "10")
    assert code == 0
    rows = read_csv(out / "paths.csv")
    assert rows[0] == ["path_id", "step", "time", "spot", "tangent_to_T"]
    assert len(rows) - 1 == 10 * (DEFAULTS["market.n_steps"] + 1)
    m = manifest(out)
    assert m["status"] == "ok" and "paths.csv" in m["outputs"]


def test_flat_market_constant_spot(tmp_path):
    code, out = run(tmp_path, "a", "simulate", "--paths", "5", "--market.sigma", "0")
    assert code == 0
    assert {r[3] for r in read_csv(out / "paths.csv")[1:]} == {"100.0"}


@pytest.mark.parametrize("argv", [
    ["simulate", "--paths", "50"],
    ["train", "--method", "lsmc_poly", "--paths", "500"],
    ["train", "--method", "diff_nn", "--paths", "600", *FAST],
    ["hedge", "--method", "lsmc_nn", "--train.paths", "600", "--paths", "300", *FAST],
])
def test_reruns_are_checksum_identical(tmp_path, argv):
    c1, a = run(tmp_path, "a", *argv)
    c2, b = run(tmp_path, "b", *argv)
    assert c1 == c2 == 0
    ma, mb = manifest(a), manifest(b)
    assert ma["outputs"] == mb["outputs"] and len(ma["outputs"]) >= 2
    for name in ma["outputs"]:
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_seed_changes_outputs(tmp_path):
    _, a = run(tmp_path, "a", "simulate", "--paths", "5", "--seed", "1")
    _, b = run(tmp_path, "b", "simulate", "--paths", "5", "--seed", "2")
    assert manifest(a)["outputs"]["paths.csv"] != manifest(b)["outputs"]["paths.csv"]


def test_config_roundtrip(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# experiment\nmarket.sigma = 0.25\nseed=7\ntable1.sizes=100,200\n")
    code, out = run(tmp_path, "a", "simulate", "--config", str(cfg), "--market.n_steps=4")
    assert code == 0
    resolved = RunConfig.parse_text((out / "config.resolved").read_text())
    m = manifest(out)
    assert resolved.echo() == m["config"]
    assert m["config"]["market.sigma"] == "0.25" and m["config"]["market.n_steps"] == "4"
    assert m["seeds"]["sim.paths"] == substream(7, "sim.paths")
    assert RunConfig.parse_text(resolved.format()).values == resolved.values


def test_train_outputs(tmp_path):
    code, out = run(tmp_path, "a", "train", "--method", "diff_nn", "--paths", "600", *FAST)
    assert code == 0
    curve = read_csv(out / "curve.csv")
    assert curve[0] == ["spot", "model_price", "model_delta", "bs_price", "bs_delta"]
    spots = [float(r[0]) for r in curve[1:]]
    assert spots == list(np.arange(60.0, 161.0))
    loss = read_csv(out / "loss.csv")
    assert loss[0] == ["epoch", "loss"] and len(loss) == 1 + 1 + 3
    model = json.loads((out / "model.json").read_text())
    assert model["method"] == "diff_nn" and model["lam"] == DEFAULTS["net.lam"]


def test_hedge_records_isolation(tmp_path):
    code, out = run(tmp_path, "a", "hedge", "--method", "black_scholes", "--paths", "400")
    assert code == 0
    m = manifest(out)
    assert m["isolation"]["disjoint"] is True
    summary = json.loads((out / "hedge.json").read_text())
    assert summary["n_test_paths"] == 400 and summary["rel_error"] > 0
    hist = read_csv(out / "hist.csv")
    assert sum(int(r[2]) for r in hist[1:]) == 400


def test_training_failure_sets_exit_status(tmp_path):
    code, out = run(tmp_path, "a", "train", "--method", "lsmc_nn", "--paths", "100")
    assert code == 1
    m = manifest(out)
    assert m["status"] == "error"
    assert "lsmc_nn" in m["stages"]["train.lsmc_nn"]["error"]


def test_table1_small_grid(tmp_path):
    argv = ["table1", "--table1.sizes", "300,400", "--table1.seeds", "2", "--paths", "500",
            "--net.batch_size", "64", *FAST]
    code, out = run(tmp_path, "a", *argv)
    assert code == 0
    t = json.loads((out / "table1.json").read_text())
    assert set(t["grid"]) == {"black_scholes", "lsmc_poly", "lsmc_nn", "diff_nn"}
    assert all(set(row) == {"300", "400"} for row in t["grid"].values())
    assert len(t["cells"]) == 2 * 2 * 3
    for name in ("hist.csv", "pnl_black_scholes.csv", "pnl_diff_nn.csv", "curve_lsmc_poly.csv"):
        assert (out / name).exists()
    m = manifest(out)
    assert m["isolation"]["disjoint"] is True
    code2, out2 = run(tmp_path, "b", *argv)
    assert manifest(out2)["outputs"] == m["outputs"]


def test_table1_partial_failure_continues(tmp_path):
    # the smallest size cannot fill one minibatch, so its network cells fail
    code, out = run(tmp_path, "a", "table1", "--table1.sizes", "100,300", "--table1.seeds", "1",
                    "--paths", "200", "--net.batch_size", "200", *FAST)
    assert code == 1
    t = json.loads((out / "table1.json").read_text())
    failed = {(c["method"], c["size"]) for c in t["cells"] if c["error"]}
    assert failed == {("lsmc_nn", 100), ("diff_nn", 100)}
    assert t["grid"]["diff_nn"]["300"] > 0


@pytest.mark.parametrize("argv", [
    ["simulate", "--nope", "1"],
    ["simulate", "--market.sigma", "abc"],
    ["train", "--method", "ridge"],
    ["simulate", "--market.sigma"],
])
def test_config_errors_exit_2(tmp_path, argv, capsys):
    code, _ = run(tmp_path, "a", *argv)
    assert code == 2
    assert "config error" in capsys.readouterr().err

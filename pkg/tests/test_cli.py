import csv
import io
import json

import numpy as np
import pytest

from stagefgl import cli, fedsim
from stagefgl import graphdata as gd
from stagefgl.propagation import dirichlet_energy

SMALL = {
    "data": {"node_count": 120, "class_count": 3, "p_in": 0.15, "p_out": 0.01,
             "modality_dims": [6, 4], "dim_jitter": 1, "seed": 2},
    "partition": {"clients": 2},
    "model": {"anchors": 16, "d_p": 8},
    "run": {"rounds": 2, "seeds": [0]},
}


@pytest.fixture
def config(tmp_path):
    p = tmp_path / "config.json"
    p.write_text(json.dumps(SMALL))
    return str(p)


def run(*argv):
    return cli.main([str(a) for a in argv])


def test_gen_roundtrips_through_loader(tmp_path, config):
    assert run("gen", "--config", config, "--out", tmp_path / "g.mag") == 0
    data, h = gd.load_with_hash(tmp_path / "g.mag")
    assert isinstance(data, gd.FederatedGraph)
    cfg = cli._settings(cli.build_parser().parse_args(["gen", "--config", config, "--out", "x"])).run
    assert h == fedsim.data_hash(cfg, 0)
    assert gd.encode(data, h) == (tmp_path / "g.mag").read_bytes()


def feature_span(data):
    """Byte range of the global plus client feature blocks in a MAG1 file."""
    g, K, M = data.graph, data.client_count, len(data.graph.features)
    start = 4 + 6 * 4 + 2 * 4 * M + 4 * K * M + 4 * g.node_count
    size = sum(4 * f.size for f in g.features) + sum(4 * f.size for c in data.clients
                                                      for f in c.features)
    return start, start + size


def test_alpha_changes_only_feature_blocks(tmp_path, config):
    run("gen", "--config", config, "--set", "data.alpha=0", "--out", tmp_path / "a0.mag")
    run("gen", "--config", config, "--set", "data.alpha=1", "--out", tmp_path / "a1.mag")
    b0, b1 = (tmp_path / "a0.mag").read_bytes(), (tmp_path / "a1.mag").read_bytes()
    assert len(b0) == len(b1)
    d0, h0 = gd.decode_with_hash(b0)
    lo, hi = feature_span(d0)
    tail = len(b0) - 4 - len(h0)  # the config hash trailer legitimately tracks alpha
    diff = np.flatnonzero(np.frombuffer(b0, np.uint8) != np.frombuffer(b1, np.uint8))
    assert diff.size > 0
    assert np.all(((diff >= lo) & (diff < hi)) | (diff >= tail))
    # the global (pre-drift) features are untouched, only client blocks move
    g_hi = lo + sum(4 * f.size for f in d0.graph.features)
    assert not np.any((diff >= lo) & (diff < g_hi))


def test_unknown_key_exits_2_naming_it(tmp_path, config, capsys):
    assert run("gen", "--config", config, "--set", "stage.tua_s=0.5", "--out", tmp_path) == 2
    err = capsys.readouterr().err
    assert err.startswith("ERROR 2 ") and "stage.tua_s" in err
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"stage": {"tua_s": 0.5}}))
    assert run("train", "--config", bad, "--out", tmp_path / "r") == 2


def test_missing_file_exits_3(tmp_path, config, capsys):
    assert run("train", "--config", config, "--data", tmp_path / "nope.mag", "--out", tmp_path) == 3
    assert capsys.readouterr().err.startswith("ERROR 3 ")


def test_train_fedavg_and_stage_on_same_file(tmp_path, config):
    run("gen", "--config", config, "--out", tmp_path / "g.mag")
    for m in ("fedavg", "stage"):
        assert run("train", "--config", config, "--data", tmp_path / "g.mag", "--method", m,
                   "--out", tmp_path / m) == 0
    a, b = (json.loads((tmp_path / m / "summary.json").read_text()) for m in ("fedavg", "stage"))
    assert (a["method"], b["method"]) == ("fedavg", "stage")
    assert a["metric"] == b["metric"] == "accuracy"
    assert a["per_seed"].keys() == b["per_seed"].keys()
    rows = list(csv.DictReader(io.StringIO((tmp_path / "stage" / "metrics.csv").read_text())))
    assert rows and all(r["config_hash"] == b["config_hash"] for r in rows)


def test_rounds_zero_and_rerun_identical(tmp_path, config):
    for d in ("r1", "r2"):
        assert run("train", "--config", config, "--rounds", 0, "--out", tmp_path / d) == 0
    s1 = (tmp_path / "r1" / "summary.json").read_bytes()
    assert s1 == (tmp_path / "r2" / "summary.json").read_bytes()
    assert json.loads(s1)["config"]["rounds"] == 0


def test_train_divergence_exits_4(tmp_path, config, capsys):
    assert run("train", "--config", config, "--set", "run.lr=1e6", "--out", tmp_path) == 4
    assert capsys.readouterr().err.startswith("ERROR 4 client")


@pytest.fixture
def trained(tmp_path, config):
    run("gen", "--config", config, "--out", tmp_path / "g.mag")
    for m in ("stage", "stage_no_gap"):
        run("train", "--config", config, "--data", tmp_path / "g.mag", "--method", m,
            "--out", tmp_path / m)
    return tmp_path


def test_diagnose_emits_all_reports(trained):
    out = trained / "diag"
    assert run("diagnose", "--checkpoint", trained / "stage", "--data", trained / "g.mag",
               "--baseline", trained / "stage_no_gap", "--out", out) == 0
    h = json.loads((trained / "stage" / "summary.json").read_text())["config_hash"]
    for name in ("drift", "purity", "calibration", "energy"):
        assert json.loads((out / f"{name}.json").read_text())["config_hash"] == h
    pd = json.loads((out / "purity_delta.json").read_text())
    for row in pd["delta"].values():
        assert abs(sum(row)) < 1e-9


def test_diagnose_untrained_checkpoint(trained):
    ck = trained / "stage" / "checkpoints" / "seed_0" / "round_0000"
    assert run("diagnose", "--checkpoint", ck, "--data", trained / "g.mag",
               "--out", trained / "d0") == 0
    drift = json.loads((trained / "d0" / "drift.json").read_text())
    assert drift["round"] == 0 and drift["layers"][0]["overall"] > 0


def test_energy_report_matches_direct_computation(trained):
    run("diagnose", "--checkpoint", trained / "stage", "--data", trained / "g.mag",
        "--out", trained / "d")
    rep = json.loads((trained / "d" / "energy.json").read_text())["clients"]
    sim, _, _ = cli._open_checkpoint(trained / "stage", trained / "g.mag")
    for c in sim.clients:
        direct = [dirichlet_energy(H, c.msg_edges) for H in c.layer_embeddings()]
        np.testing.assert_allclose(rep[str(c.cid)], direct, rtol=1e-12)


def test_diagnose_hash_mismatch_exits_5(trained, config, capsys):
    run("gen", "--config", config, "--set", "data.alpha=0.1", "--out", trained / "other.mag")
    assert run("diagnose", "--checkpoint", trained / "stage", "--data", trained / "other.mag",
               "--out", trained / "d") == 5
    assert capsys.readouterr().err.startswith("ERROR 5 ")


def test_report_rows_and_std_oracle(tmp_path, config):
    cfg = json.loads(json.dumps(SMALL))
    cfg["run"].update(rounds=1, seeds=[0, 1, 2])
    p = tmp_path / "c3.json"
    p.write_text(json.dumps(cfg))
    for m in ("stage", "fedavg"):
        run("train", "--config", p, "--method", m, "--out", tmp_path / m)
    assert run("report", tmp_path / "stage", tmp_path / "fedavg", "--out", tmp_path / "t.csv") == 0
    rows = list(csv.DictReader(io.StringIO((tmp_path / "t.csv").read_text(encoding="utf-8"))))
    summary = [r for r in rows if r["seed"] == "mean"]
    assert [r["method"] for r in summary] == ["stage", "fedavg"]
    for s in summary:
        vals = [float(r["value"]) for r in rows if r["method"] == s["method"] and r["seed"] != "mean"]
        mean = sum(vals) / len(vals)
        std = (sum((v - mean) ** 2 for v in vals) / len(vals)) ** 0.5
        assert float(s["value"]) == pytest.approx(mean, abs=1e-15)
        assert float(s["std"]) == pytest.approx(std, abs=1e-15)


def test_report_single_run_passthrough(tmp_path, config, capsys):
    run("train", "--config", config, "--rounds", 0, "--out", tmp_path / "r")
    capsys.readouterr()
    assert run("report", tmp_path / "r") == 0
    rows = list(csv.DictReader(io.StringIO(capsys.readouterr().out)))
    assert [r["seed"] for r in rows] == ["0", "mean"]
    assert rows[0]["value"] == rows[1]["value"] and float(rows[1]["std"]) == 0.0


def test_dump_describes_artifacts(trained, capsys):
    capsys.readouterr()
    assert run("dump", trained / "g.mag") == 0
    info = json.loads(capsys.readouterr().out)
    assert info["kind"] == "graph" and info["nodes"] == 120 and len(info["client_sizes"]) == 2
    assert run("dump", trained / "stage") == 0
    assert json.loads(capsys.readouterr().out)["kind"] == "clients"
    (trained / "junk").write_bytes(b"XXXX1234")
    assert run("dump", trained / "junk") == 3

import copy
import hashlib
import json

import numpy as np
import pytest

from xbprune.cli import main
from xbprune.model_io import save_tensor

from oracles import WORKED_NET


@pytest.fixture(scope="module")
def demo_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("demo")
    assert main(["make-demo", "--out", str(out)]) == 0
    return out


@pytest.fixture()
def worked_dir(tmp_path):
    doc = copy.deepcopy(WORKED_NET)
    doc["layers"][0]["weights"] = "conv.npy"
    rng = np.random.default_rng(0)
    save_tensor(rng.standard_normal((2, 2, 4, 4)), tmp_path / "conv.npy")
    save_tensor(rng.random((12, 2, 3, 4)), tmp_path / "calib.npy")
    (tmp_path / "net.json").write_text(json.dumps(doc))
    return tmp_path


def test_map_worked(worked_dir, capsys):
    out = worked_dir / "layout.json"
    assert main(["map", str(worked_dir / "net.json"), "--out", str(out)]) == 0
    assert "compute=4" in capsys.readouterr().out
    layout = json.loads(out.read_text())["layers"]["conv"]
    assert layout["compute_count"] == 4
    assert {(x["rows_used"], x["cols_used"]) for x in layout["crossbars"]} == {(12, 4)}
    csv_lines = (worked_dir / "layout.overhead.csv").read_text().splitlines()
    assert csv_lines[0] == "layer,dense_T,dense_C,pruned_T,pruned_C" and csv_lines[1] == "conv,4,4,4,4"
    assert main(["map", str(worked_dir / "net.json"), "--out", str(out), "--format", "json"]) == 0
    assert json.loads((worked_dir / "layout.overhead.json").read_text())["totals"]["dense_C"] == 4
    manifest = json.loads((worked_dir / "layout.manifest.json").read_text())
    assert manifest["command"] == "map" and "layout.json" in manifest["outputs"]


def test_map_missing_weights(tmp_path, capsys):
    doc = copy.deepcopy(WORKED_NET)
    doc["layers"][0]["weights"] = "gone.npy"
    (tmp_path / "net.json").write_text(json.dumps(doc))
    assert main(["map", str(tmp_path / "net.json"), "--out", str(tmp_path / "l.json")]) == 2
    assert "conv" in capsys.readouterr().err


def test_map_with_masks(demo_dir, tmp_path, capsys):
    out = tmp_path / "p"
    assert main(["prune-layer", str(demo_dir / "net.json"), "--layer", "conv2", "--ratio", "0.5",
                 "--calib", str(demo_dir / "calib.npy"), "--out", str(out)]) == 0
    capsys.readouterr()
    assert main(["map", str(demo_dir / "net.json"), "--out", str(tmp_path / "l.json"),
                 "--masks", str(out / "masks")]) == 0
    report = json.loads((out / "report.json").read_text())
    layout = json.loads((tmp_path / "l.json").read_text())["layers"]["conv2"]
    assert layout["grain"] == "column" and layout["compute_count"] == report["compute_crossbars"]


def test_prune_layer_ratio_zero(demo_dir, tmp_path):
    out = tmp_path / "o"
    assert main(["prune-layer", str(demo_dir / "net.json"), "--layer", "conv3", "--ratio", "0",
                 "--calib", str(demo_dir / "calib.npy"), "--out", str(out)]) == 0
    rec = json.loads((out / "masks" / "conv3.json").read_text())
    assert np.all(np.array(rec["masks"]) == 1)
    report = json.loads((out / "report.json").read_text())
    assert report["loss_after"] <= 1e-10 * max(1.0, report["loss_before"])


def test_prune_layer_grain_validation(worked_dir):
    args = ["prune-layer", str(worked_dir / "net.json"), "--layer", "conv", "--ratio", "0.5",
            "--calib", str(worked_dir / "calib.npy")]
    assert main(args + ["--grain", "column", "--out", str(worked_dir / "a")]) == 2
    assert main(args + ["--grain", "crossbar", "--out", str(worked_dir / "b")]) == 0


def test_prune_layer_deterministic(demo_dir, tmp_path):
    paths = []
    for k in range(2):
        out = tmp_path / f"run{k}"
        assert main(["prune-layer", str(demo_dir / "net.json"), "--layer", "fc1", "--ratio", "0.5",
                     "--reorder", "--seed", "7", "--calib", str(demo_dir / "calib.npy"), "--out", str(out)]) == 0
        paths.append(out)
    for rel in ("masks/fc1.json", "weights/fc1.npy", "report.json"):
        assert (paths[0] / rel).read_bytes() == (paths[1] / rel).read_bytes()


def test_prune_layer_unknown_layer_and_divergence(demo_dir, tmp_path, capsys):
    base = ["prune-layer", str(demo_dir / "net.json"), "--ratio", "0.5",
            "--calib", str(demo_dir / "calib.npy"), "--out", str(tmp_path / "x")]
    assert main(base + ["--layer", "nope"]) == 2
    assert main(base + ["--layer", "conv2", "--eta", "1e308"]) == 3
    assert "eta" in capsys.readouterr().err


def test_prune_net_sweep_only(demo_dir, tmp_path, capsys):
    out = tmp_path / "s"
    assert main(["prune-net", str(demo_dir / "net.json"), "--calib", str(demo_dir / "calib.npy"),
                 "--eval", str(demo_dir / "data.npz"), "--sweep-only", "--Td", "0.04", "--Tp", "0.6",
                 "--Tc", "400", "--out", str(out)]) == 0
    assert (out / "sensitivity.csv").exists() and (out / "sensitivity.json").exists()
    assert not (out / "masks").exists() and not (out / "weights").exists()
    dec = json.loads((out / "decisions.json").read_text())
    assert dec["thresholds"] == {"T_d_initial": 0.01, "T_d": 0.04, "T_p": 0.6, "T_c": 400,
                                 "cap_mode": "stop_after"}
    assert {d["stop_reason"] for d in dec["decisions"]} <= {"AccuracyDrop", "RatioCap", "CrossbarFloor",
                                                            "SweepEnd"}
    assert [d["layer"] for d in dec["decisions"]] == ["conv2", "conv3", "fc1"]

    # reuse the decisions for a second, pruning run
    out2 = tmp_path / "p"
    assert main(["prune-net", str(demo_dir / "net.json"), "--calib", str(demo_dir / "calib.npy"),
                 "--decisions", str(out / "decisions.json"), "--out", str(out2)]) == 0
    assert (out2 / "overhead.csv").exists()


def test_prune_net_outputs_and_manifest(demo_dir, tmp_path, monkeypatch):
    out = tmp_path / "n"
    assert main(["prune-net", str(demo_dir / "net.json"), "--calib", str(demo_dir / "calib.npy"),
                 "--eval", str(demo_dir / "data.npz"), "--ratio", "conv2=0.5", "--ratio", "fc1=0.25",
                 "--out", str(out)]) == 0
    assert sorted(p.name for p in (out / "masks").iterdir()) == ["conv2.json", "fc1.json"]
    manifest = json.loads((out / "manifest.json").read_text())
    for rel, digest in manifest["outputs"].items():
        assert hashlib.sha256((out / rel).read_bytes()).hexdigest() == digest
    assert manifest["seed"] == 0 and manifest["toolkit_version"]
    acc = json.loads((out / "accuracy.json").read_text())
    assert acc["dense"] == 1.0 and 0 <= acc["pruned"] <= 1
    # the pruned network description points at the new weights and loads back
    assert main(["map", str(out / "net.json"), "--out", str(tmp_path / "m.json")]) == 0

    monkeypatch.setenv("XBAR_PRUNE_THREADS", "4")
    out2 = tmp_path / "n2"
    assert main(["prune-net", str(demo_dir / "net.json"), "--calib", str(demo_dir / "calib.npy"),
                 "--eval", str(demo_dir / "data.npz"), "--ratio", "conv2=0.5", "--ratio", "fc1=0.25",
                 "--out", str(out2)]) == 0
    assert json.loads((out2 / "manifest.json").read_text())["outputs"] == manifest["outputs"]


@pytest.mark.parametrize("extra", [[], ["--ratio", "conv1=0.5"], ["--ratio", "conv2"], ["--sweep"]])
def test_prune_net_validation(demo_dir, tmp_path, extra):
    assert main(["prune-net", str(demo_dir / "net.json"), "--calib", str(demo_dir / "calib.npy"),
                 "--out", str(tmp_path / "v")] + extra) == 2


def test_noise(demo_dir, tmp_path, capsys):
    out = tmp_path / "grid.csv"
    assert main(["noise", str(demo_dir / "net.json"), "--eval", str(demo_dir / "data.npz"),
                 "--sigmas", "0", "0.1", "--levels", "inf", "16", "--trials", "2", "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "sigma,levels=inf,levels=16"
    assert lines[1].split(",")[1] == "1.0"
    assert (tmp_path / "grid.manifest.json").exists()


def test_noise_bad_eval(demo_dir, tmp_path):
    np.savez(tmp_path / "bad.npz", inputs=np.zeros(3))
    assert main(["noise", str(demo_dir / "net.json"), "--eval", str(tmp_path / "bad.npz"),
                 "--out", str(tmp_path / "g.csv")]) == 2
    assert main(["noise", str(demo_dir / "net.json"), "--eval", str(demo_dir / "data.npz"),
                 "--sigmas", "-1", "--out", str(tmp_path / "g.csv")]) == 2


def test_bad_flags_exit_2():
    with pytest.raises(SystemExit) as err:
        main(["prune-layer"])
    assert err.value.code == 2

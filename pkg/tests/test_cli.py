import json

import numpy as np
import pytest

from tradi.cli import EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, main
from tradi.metrics import ClassificationDump, write_dump
from tradi.tracker import load_state


def write_cfg(tmp_path, raw):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(raw))
    return str(p)


def small_toy(**opt):
    return {"task": "toy_regression", "data": {"n_train": 10, "n_test": 41},
            "architecture": {"hidden": [16]},
            "optimizer": {"lr": 0.01, "batch_size": 16, "epochs": 20, **opt}}


@pytest.mark.slow
def test_verify_passes(capsys):
    assert main(["verify"]) == 0
    assert "FAIL" not in capsys.readouterr().out


@pytest.mark.slow
def test_verify_fault_injection_fails(capsys):
    assert main(["verify", "--fault-inject"]) == 1
    assert "gradient" in capsys.readouterr().err


def test_bad_config_exit_code(tmp_path, capsys):
    assert main(["run", write_cfg(tmp_path, {"task": "toy_regression", "bogus": 1})]) == EXIT_CONFIG
    assert "config error" in capsys.readouterr().err


def test_missing_dataset_is_config_error(tmp_path):
    raw = {"task": "uci_regression", "data": {"source": "boston"}, "output_dir": str(tmp_path / "o")}
    assert main(["run", write_cfg(tmp_path, raw)]) == EXIT_CONFIG


@pytest.mark.filterwarnings("ignore:overflow")
def test_divergence_exit_code(tmp_path, capsys):
    raw = small_toy(lr=1e12)
    raw["output_dir"] = str(tmp_path / "o")
    assert main(["run", write_cfg(tmp_path, raw)]) == EXIT_NUMERIC
    assert "numeric error" in capsys.readouterr().err


def test_missing_dump_exit_code(tmp_path):
    assert main(["curves", str(tmp_path / "nope.dump.csv"), "--kind", "calib"]) == EXIT_IO


def test_curves_deterministic(tmp_path, rng):
    probs = rng.dirichlet(np.ones(3), 50)
    dump = ClassificationDump.from_probs(probs, rng.integers(0, 3, 50), rng.random(50) < 0.8)
    path = write_dump(tmp_path / "m.dump.csv", dump)
    outs = []
    for d in ("a", "b"):
        assert main(["curves", str(path), "--kind", "avc", "--out", str(tmp_path / d)]) == 0
        outs.append((tmp_path / d / "m.avc.curve.csv").read_bytes())
    assert outs[0] == outs[1] and len(outs[0]) > 0


def test_toy_run_writes_report(tmp_path, capsys):
    raw = small_toy()
    raw["output_dir"] = str(tmp_path / "o")
    assert main(["run", write_cfg(tmp_path, raw)]) == 0
    report = json.loads((tmp_path / "o" / "report.json").read_text())
    assert report["checks"]["tracker_passive"] is True
    methods = {r["method"] for r in report["rows"]}
    assert {"tradi", "single"} <= methods
    assert (tmp_path / "o" / "table.csv").read_text().startswith("method,metric,mean,std,n")
    assert "std_ratio" in capsys.readouterr().out


def test_digits_end_to_end(tmp_path):
    pytest.importorskip("sklearn")
    raw = {"task": "mnist_ood", "data": {"source": "digits", "calibration_size": 100},
           "architecture": {"hidden": [32], "batchnorm": True},
           "optimizer": {"lr": 0.05, "batch_size": 64, "epochs": 2},
           "sampler": {"n_model": 3},
           "baselines": [{"method": "mcp"}, {"method": "gauss_perturb", "M": 3},
                         {"method": "mc_dropout", "M": 3}, {"method": "deep_ensemble", "M": 2}],
           "output_dir": str(tmp_path / "o")}
    assert main(["run", write_cfg(tmp_path, raw)]) == 0
    out = tmp_path / "o"
    report = json.loads((out / "report.json").read_text())
    assert report["checks"]["tracker_passive"] is True and report["checks"]["ood_source"] == "digits_holdout"
    methods = {r["method"] for r in report["rows"]}
    assert methods == {"tradi", "mcp", "gauss_perturb", "mc_dropout", "deep_ensemble"}
    for r in report["rows"]:
        if r["metric"] == "auc":
            assert 0 <= r["mean"] <= 100
    st = load_state(out / "tradi.tracker.bin")
    assert st.mu.size > 0 and np.all(st.var > 0)
    assert (out / "tradi.calib.curve.csv").exists()

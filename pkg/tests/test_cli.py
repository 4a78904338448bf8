import csv
import json
from pathlib import Path

import numpy as np
import pytest

from pbnet import cli
from pbnet.diagnostics import gradcheck_network
from pbnet.fixed_point import FixedPointConfig
from pbnet.layers import QuadraticProxLayer, SmoothProxLayer
from pbnet.network import Network

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
SR = str(CONFIGS / "gradcheck_sr.json")


def run(capsys, *argv):
    code = cli.main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_train_one_epoch(tmp_path, capsys):
    code, out, err = run(capsys, "train", "--config", SR, "--override", "epochs=1", "--out", str(tmp_path))
    assert code == 0, err
    rows = read_csv(tmp_path / "log.csv")
    assert rows[0] == ["epoch", "train_loss", "test_loss", "peak_stored_states", "operator_applications", "grad_norm"]
    assert len(rows) == 3
    assert "final test loss" in out
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["certificate"]["accepted"]
    assert json.loads((tmp_path / "config.json").read_text())["epochs"] == 1


def test_certificate_refusal(tmp_path, capsys):
    code, _, err = run(capsys, "train", "--config", SR, "--override", "step_contraction=1.2",
                       "--override", "engine=memory-efficient", "--out", str(tmp_path))
    assert code != 0
    assert err.startswith("error: certificate:")
    assert err.count("\n") == 1


def test_engines_agree_through_cli(tmp_path, capsys):
    finals = {}
    for engine in ("standard", "memory-efficient"):
        out = tmp_path / engine
        code, _, err = run(capsys, "train", "--config", SR, "--override", "epochs=2",
                           "--override", f"engine={engine}", "--out", str(out))
        assert code == 0, err
        finals[engine] = json.loads((out / "summary.json").read_text())["final_test_loss"]
    assert finals["memory-efficient"] == pytest.approx(finals["standard"], rel=1e-5)


def test_artifacts_byte_stable(tmp_path, capsys):
    for name in ("a", "b"):
        assert run(capsys, "train", "--config", SR, "--override", "epochs=1", "--seed", "3",
                   "--shadow-diagnostics", "--out", str(tmp_path / name))[0] == 0
    for f in ("config.json", "log.csv", "residuals.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    a = json.loads((tmp_path / "a" / "summary.json").read_text())
    b = json.loads((tmp_path / "b" / "summary.json").read_text())
    assert list(a) == list(b)
    a.pop("timestamp"), b.pop("timestamp")
    assert a == b
    assert a["config"]["seed"] == 3


def test_gradcheck_default_passes(tmp_path, capsys):
    code, out, err = run(capsys, "gradcheck", "--config", SR, "--out", str(tmp_path))
    assert code == 0, err
    rows = read_csv(tmp_path / "gradcheck.csv")
    assert rows[0] == ["check", "target", "max_rel_err", "threshold", "status"]
    checks = {r[0] for r in rows[1:]}
    assert checks == {"layer-vjp-vs-fd", "standard-vs-fd", "memory-efficient-vs-standard", "hybrid-vs-standard"}
    assert all(r[4] == "pass" for r in rows[1:])


def test_gradcheck_broken_vjp_names_layer(monkeypatch, capsys):
    original = SmoothProxLayer.vjp

    def broken(self, x_in, q_out, x_out=None, counters=None):
        q_in, grads = original(self, x_in, q_out, x_out) if counters is None else original(self, x_in, q_out, x_out, counters)
        return 1.01 * q_in, grads

    monkeypatch.setattr(SmoothProxLayer, "vjp", broken)
    code, _, err = run(capsys, "gradcheck", "--config", SR)
    assert code != 0
    assert err.startswith("error: gradcheck:")
    assert "layer 1 (smooth-prox): input" in err


def test_identity_network_gradcheck_exact_zeros():
    x = np.arange(16, dtype=complex).reshape(4, 4)
    net = Network([QuadraticProxLayer(0.0, keys={}) for _ in range(4)])
    rows = gradcheck_network(net, x, np.zeros_like(x), FixedPointConfig(30), checkpoint_every=2,
                             per_layer=False)
    assert {r.check for r in rows} == {"standard-vs-fd", "memory-efficient-vs-standard", "hybrid-vs-standard"}
    for r in rows:
        assert r.passed, r
        if r.check != "standard-vs-fd":
            assert r.rel_err == 0.0, r


def test_bench_counts(tmp_path, capsys):
    code, out, err = run(capsys, "bench", "--config", str(CONFIGS / "bench.json"), "--out", str(tmp_path))
    assert code == 0, err
    rows = read_csv(tmp_path / "bench.csv")
    header, body = rows[0], rows[1:]
    col = {name: i for i, name in enumerate(header)}
    me_peaks = set()
    for r in body:
        n, peak = int(r[col["n_layers"]]), int(r[col["peak_stored_states"]])
        assert peak == int(r[col["expected_peak"]])
        if r[col["engine"]] == "standard":
            assert peak == n + 1
        elif r[col["engine"]] == "memory-efficient":
            me_peaks.add(peak)
        else:
            assert peak == -(-n // 10) + 1
    assert len(me_peaks) == 1 and me_peaks.pop() <= 4
    assert {int(r[col["n_layers"]]) for r in body} == {5, 10, 20, 40}


@pytest.mark.parametrize("argv, reason", [
    (["train", "--config", "/nonexistent/config.json"], "config"),
    (["train", "--config", SR, "--override", "bogus=1"], "config"),
    (["train", "--config", SR, "--override", "noreason"], "config"),
    (["bench", "--config", SR, "--override", "schema_version=2"], "config"),
])
def test_failures_are_single_line(argv, reason, capsys):
    code, _, err = run(capsys, *argv)
    assert code != 0
    assert err.startswith(f"error: {reason}:")
    assert err.count("\n") == 1


def test_unwritable_output_is_io_failure(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    code, _, err = run(capsys, "train", "--config", SR, "--override", "epochs=0", "--out", str(blocker / "sub"))
    assert code != 0 and err.startswith("error: io:")


def test_module_entry_point():
    import subprocess
    import sys

    res = subprocess.run([sys.executable, "-m", "pbnet", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "gradcheck" in res.stdout

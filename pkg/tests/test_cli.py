import dataclasses
import json
import subprocess
import sys

import pytest

from sdlatency import (NonConvergenceError, SpecCostCoefficients, nominal_coefficients,
                       predict_latency)
from sdlatency import cli
from sdlatency import io as sio

from helpers import eq1_dataset, eq3_datasets

SUBCOMMANDS = ("fit", "predict", "speedup", "optimize-k", "simulate", "sweep", "scaling")

SIM = {
    "seed": 7,
    "workload": {"model_id": "toy", "hardware_id": "sim", "prefill_tokens": 128,
                 "decode_tokens": 64},
    "step_costs": {"verify": [0.01, 0.0005], "draft": [0.001, 0.00005]},
    "measured_requests": 2000,
}


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def write_doc(path, model, params, **kw):
    sio.write_coefficients(sio.CoefficientDocument(model, params, **kw), path)
    return path


@pytest.fixture
def sim_json(tmp_path):
    path = tmp_path / "sim.json"
    path.write_text(json.dumps(SIM))
    return path


@pytest.mark.parametrize("sub", SUBCOMMANDS)
def test_help_exits_zero(sub):
    proc = subprocess.run([sys.executable, "-m", "sdlatency", sub, "--help"],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert "usage:" in proc.stdout


def test_fit_help_documents_flags(capsys):
    with pytest.raises(SystemExit) as info:
        cli.main(["fit", "--help"])
    assert info.value.code == 0
    out = capsys.readouterr().out
    for flag in ("--input", "--model", "--column", "--moe", "--output", "--strict"):
        assert flag in out


# -- fit --------------------------------------------------------------------

def test_fit_eq1_on_simulated_sweep(capsys, tmp_path, sim_json):
    sweep = tmp_path / "sweep.csv"
    assert run(capsys, "sweep", "--config", sim_json, "--out", sweep)[0] == 0
    coeffs = tmp_path / "c.json"
    code, out, _ = run(capsys, "fit", "--input", sweep, "--model", "eq1", "--output", coeffs)
    assert code == 0
    r2 = float(out.split("r2=")[1].split()[0])
    assert r2 >= 0.999
    doc = sio.read_coefficients(coeffs)
    nominal = nominal_coefficients(sio.read_sim_config(sim_json).config)
    assert doc.params["c1"] == pytest.approx(nominal.c1, rel=0.02)
    assert doc.params["c2"] == pytest.approx(nominal.c2, rel=0.02)


def test_fit_eq3_single_k_warns(capsys, tmp_path):
    costs = SpecCostCoefficients(0.05, 0.01, 0.002, 0.001, 0.0005, 0.0001)
    path = tmp_path / "s.csv"
    sio.write_sweep_csv(eq3_datasets(costs, [0.6, 0.8], [3]), path)
    code, out, err = run(capsys, "fit", "--input", path, "--model", "eq3")
    assert code == 0
    assert "IdentifiabilityWarning" in err
    assert json.loads(out[:out.rindex("}") + 1])["model"] == "eq3"


def test_fit_missing_file(capsys, tmp_path):
    missing = tmp_path / "nope.csv"
    code, _, err = run(capsys, "fit", "--input", missing, "--model", "eq1")
    assert code == 1
    assert str(missing) in err


def test_fit_bad_csv(capsys, tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("rps,latency\n1,2\n")
    code, _, err = run(capsys, "fit", "--input", path, "--model", "eq1")
    assert code == 1 and "header" in err


def test_strict_nonconvergence_exits_2(capsys, tmp_path, monkeypatch):
    path = tmp_path / "s.csv"
    sio.write_sweep_csv([eq1_dataset(1.0, 0.1)], path)

    def stuck(*a, **kw):
        raise NonConvergenceError("iteration limit reached")

    monkeypatch.setattr(cli, "fit_basic", stuck)
    code, _, err = run(capsys, "fit", "--input", path, "--model", "eq1", "--strict")
    assert code == 2 and "converge" in err


# -- predict ----------------------------------------------------------------

def test_predict_eq1(capsys, tmp_path):
    doc = write_doc(tmp_path / "c.json", "eq1", {"c1": 2, "c2": 0.5})
    code, out, _ = run(capsys, "predict", "--coeffs", doc, "--rps", 1)
    assert (code, out) == (0, "4.00000\n")


def test_predict_beyond_saturation(capsys, tmp_path):
    doc = write_doc(tmp_path / "c.json", "eq1", {"c1": 2, "c2": 0.5})
    code, _, err = run(capsys, "predict", "--coeffs", doc, "--rps", 3)
    assert code == 1 and "1/c2" in err


def test_predict_eq3_k0_is_dense(capsys, tmp_path):
    costs = SpecCostCoefficients(0.05, 0.01, 0.002, 0.001, 0.0005, 0.0001)
    doc = write_doc(tmp_path / "c.json", "eq3", dataclasses.asdict(costs), g=64)
    code, out, _ = run(capsys, "predict", "--coeffs", doc, "--rps", 5, "--k", 0)
    assert code == 0
    assert float(out) == pytest.approx(predict_latency(costs.dense(64), 5), rel=1e-5)


def test_predict_eq3_needs_k(capsys, tmp_path):
    doc = write_doc(tmp_path / "c.json", "eq3", {n: 0.01 for n in sio.MODEL_PARAMS["eq3"]}, g=64)
    assert run(capsys, "predict", "--coeffs", doc, "--rps", 1)[0] == 1


# -- speedup ----------------------------------------------------------------

def _speedup(capsys, tmp_path, dense, sd, grid="0:5:11"):
    d = write_doc(tmp_path / "d.json", "eq1", dense)
    s = write_doc(tmp_path / "s.json", "eq1", sd)
    return run(capsys, "speedup", "--dense", d, "--sd", s, "--rps-grid", grid)


def test_speedup_identical_files(capsys, tmp_path):
    code, out, _ = _speedup(capsys, tmp_path, {"c1": 1, "c2": 0.1}, {"c1": 1, "c2": 0.1})
    assert code == 0
    rep = sio.parse_report(out)
    assert rep.column("speedup_formula") == pytest.approx([1.0] * 11, rel=1e-12)
    assert "independent of load" in out


@pytest.mark.parametrize("sd_c2,phrase", [(0.12, "decreases"), (0.08, "increases")])
def test_speedup_summary_sign(capsys, tmp_path, sd_c2, phrase):
    code, out, _ = _speedup(capsys, tmp_path, {"c1": 1, "c2": 0.1}, {"c1": 0.5, "c2": sd_c2})
    assert code == 0
    assert f"speedup {phrase} with load" in out.splitlines()[-1]
    for row in sio.parse_report(out).rows:
        assert row[2] == pytest.approx(row[3], rel=1e-12)


def test_speedup_writes_file(capsys, tmp_path):
    d = write_doc(tmp_path / "d.json", "eq1", {"c1": 1, "c2": 0.1})
    s = write_doc(tmp_path / "s.json", "eq1", {"c1": 0.5, "c2": 0.2})
    out = tmp_path / "curve.csv"
    code, _, err = run(capsys, "speedup", "--dense", d, "--sd", s, "--rps-grid", "0:6:7",
                       "--out", out)
    assert code == 0 and "skipped" in err
    assert sio.read_report(out).column("rps") == [0.0, 1.0, 2.0, 3.0, 4.0]


# -- optimize-k ---------------------------------------------------------------

def test_optimize_k_reports_speculation_off(capsys, tmp_path):
    # drafting costs as much as verifying: speculation never pays
    params = {"c1p": 0.1, "c1v": 0.01, "c1d": 0.01, "c2p": 0.0, "c2v": 0.001, "c2d": 0.001}
    doc = write_doc(tmp_path / "c.json", "eq3", params, g=64)
    code, out, _ = run(capsys, "optimize-k", "--coeffs", doc, "--alpha", 0.3, "--rps", 1)
    assert code == 0
    assert "k* = 0 (speculation off)" in out
    assert "predicted latency =" in out


def test_optimize_k_picks_speculation(capsys, tmp_path):
    params = {"c1p": 0.1, "c1v": 0.02, "c1d": 0.001, "c2p": 0.0, "c2v": 0.001, "c2d": 0.0001}
    doc = write_doc(tmp_path / "c.json", "eq3", params, g=64)
    code, out, _ = run(capsys, "optimize-k", "--coeffs", doc, "--alpha", 0.9, "--rps", 1)
    assert code == 0
    assert int(out.split("k* = ")[1].split()[0]) > 0


def test_optimize_k_requires_eq3(capsys, tmp_path):
    doc = write_doc(tmp_path / "c.json", "eq1", {"c1": 1, "c2": 0.1})
    assert run(capsys, "optimize-k", "--coeffs", doc, "--alpha", 0.5, "--rps", 1)[0] == 1


# -- simulate / sweep ---------------------------------------------------------

def test_simulate_is_deterministic(capsys, tmp_path, sim_json):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    ra = run(capsys, "simulate", "--config", sim_json, "--rps", 10, "--out", a)
    rb = run(capsys, "simulate", "--config", sim_json, "--rps", 10, "--out", b)
    assert ra[0] == rb[0] == 0
    assert a.read_bytes() == b.read_bytes()
    assert ra[1] == rb[1]
    assert "little_err=" in ra[1] and "SATURATED" not in ra[1]


def test_simulate_marks_saturation(capsys, tmp_path, sim_json):
    out = tmp_path / "a.csv"
    code, text, _ = run(capsys, "simulate", "--config", sim_json, "--rps", 60, "--out", out)
    assert code == 0 and "SATURATED" in text


def test_sweep_is_deterministic_across_workers(capsys, tmp_path):
    cfg = dict(SIM, spec={"alpha": 0.8, "k": 2}, measured_requests=400, warmup_requests=100)
    path = tmp_path / "sim.json"
    path.write_text(json.dumps(cfg))
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert run(capsys, "sweep", "--config", path, "--out", a)[0] == 0
    assert run(capsys, "sweep", "--config", path, "--out", b, "--workers", 4)[0] == 0
    assert a.read_bytes() == b.read_bytes()
    [ds] = sio.read_sweep_csv(a)
    assert len(ds.points) == 9 and ds.config.draft_k == 2


def test_simulate_bad_config(capsys, tmp_path):
    path = tmp_path / "sim.json"
    path.write_text("{not json")
    code, _, err = run(capsys, "simulate", "--config", path, "--rps", 1, "--out",
                       tmp_path / "o.csv")
    assert code == 1 and "error" in err


# -- scaling ------------------------------------------------------------------

def test_scaling_with_leave_n(capsys, tmp_path):
    lines = ["name,verifier_params,c1,c2"]
    for i in range(1, 9):
        lines.append(f"m{i},{i}e9,{0.1 * i + 0.01 * (i % 3)},{0.002 * i}")
    table = tmp_path / "t.csv"
    table.write_text("\n".join(lines) + "\n")
    out = tmp_path / "r.csv"
    code, text, _ = run(capsys, "scaling", "--coeff-table", table, "--predictor",
                        "verifier_params", "--leave-n", 1, "--leave-n", 2, "--out", out)
    assert code == 0
    assert "c1: slope=" in text and "leave-2-out held-out r2=" in text
    rep = sio.read_report(out)
    assert len(rep.rows) == 16


def test_scaling_insufficient_data(capsys, tmp_path):
    table = tmp_path / "t.csv"
    table.write_text("verifier_params,c1\n1,0.5\n")
    assert run(capsys, "scaling", "--coeff-table", table, "--predictor", "verifier_params")[0] == 1


def test_scaling_effective_tokens_from_lengths(capsys, tmp_path):
    table = tmp_path / "t.csv"
    table.write_text("prefill_tokens,decode_tokens,c1\n128,64,1\n256,64,1.5\n512,128,2.6\n")
    code, text, _ = run(capsys, "scaling", "--coeff-table", table, "--predictor",
                        "effective_tokens")
    assert code == 0 and text.startswith("c1: slope=")

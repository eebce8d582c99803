import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from sdlatency import (LoadPoint, MissingInputError, MoeRouting, ParseError, SchemaError,
                       ServingCoefficients, SpecCostCoefficients, SweepDataset,
                       ValidationError, VersionError, WorkloadConfig, fit_basic,
                       fit_scaling_trend,
                       min_cost_ratios_over_k, predict_latency, speedup)
from sdlatency import io as sio
from sdlatency.simulator import PhaseCost

from helpers import eq1_dataset, workload

HEADER = ",".join(sio.SWEEP_HEADER)


def test_header_is_the_documented_schema():
    assert HEADER == ("model_id,hardware_id,prefill_tokens,decode_tokens,mode,alpha,draft_k,"
                      "rps,mean_latency_s,p95_latency_s,p99_latency_s,n_requests")


# -- sweep CSV --------------------------------------------------------------

def test_one_dense_row():
    text = HEADER + "\nm,h,128,64,dense,,,2.0,1.5,1.9,2.1,100\n"
    [ds] = sio.parse_sweep_csv(text)
    assert ds.config == WorkloadConfig("m", "h", 128, 64)
    assert ds.points == (LoadPoint(2.0, 1.5, 1.9, 2.1, 100),)


def test_two_configs_by_nine_rates_grouped_and_sorted():
    rows = []
    for rps in reversed(range(1, 10)):
        rows.append(f"m,h,128,64,dense,,,{rps},1.0,,,10")
        rows.append(f"m,h,128,64,sd,0.8,3,{rps},0.5,,,10")
    datasets = sio.parse_sweep_csv(HEADER + "\n" + "\n".join(rows) + "\n")
    assert len(datasets) == 2
    for ds in datasets:
        assert [p.rps for p in ds.points] == list(range(1, 10))
    assert datasets[1].config.alpha == 0.8 and datasets[1].config.draft_k == 3


def test_sd_row_missing_alpha_names_the_row():
    text = HEADER + "\nm,h,128,64,dense,,,1,1,,,1\nm,h,128,64,sd,,3,1,1,,,1\n"
    with pytest.raises(ValidationError, match="row 3") as info:
        sio.parse_sweep_csv(text)
    assert info.value.line == 3 and info.value.column == "alpha"


def test_dense_row_with_alpha_rejected():
    with pytest.raises(ValidationError):
        sio.parse_sweep_csv(HEADER + "\nm,h,128,64,dense,0.5,,1,1,,,1\n")


def test_header_mismatch():
    with pytest.raises(SchemaError):
        sio.parse_sweep_csv(HEADER.replace("rps", "qps") + "\n")
    with pytest.raises(SchemaError):
        sio.parse_sweep_csv("")


def test_unparseable_cell_reports_line_and_column():
    with pytest.raises(ParseError) as info:
        sio.parse_sweep_csv(HEADER + "\nm,h,128,64,dense,,,fast,1,,,1\n")
    assert info.value.line == 2 and info.value.column == "rps"


def test_nonpositive_rps_rejected():
    with pytest.raises(ValidationError):
        sio.parse_sweep_csv(HEADER + "\nm,h,128,64,dense,,,0,1,,,1\n")


def test_wrong_field_count():
    with pytest.raises(ParseError):
        sio.parse_sweep_csv(HEADER + "\nm,h,128,64,dense,,,1,1\n")


@given(st.lists(st.tuples(st.floats(1e-6, 1e6), st.floats(1e-6, 1e6)), min_size=1, max_size=12,
                unique_by=lambda t: t[0]))
def test_sweep_round_trip_is_exact(pairs):
    pts = tuple(LoadPoint(r, l, l * 1.5, None, 7) for r, l in pairs)
    datasets = [SweepDataset(workload(), pts), SweepDataset(workload(0.7, 2), pts)]
    back = sio.parse_sweep_csv(sio.sweep_csv_text(datasets))
    assert back == datasets


def test_sweep_files(tmp_path):
    ds = eq1_dataset(0.5, 0.02)
    path = tmp_path / "s.csv"
    sio.write_sweep_csv([ds], path)
    assert sio.read_sweep_csv(path) == [ds]


# -- coefficient documents --------------------------------------------------

def test_document_round_trip_keeps_17_digits(tmp_path):
    src = tmp_path / "s.csv"
    sio.write_sweep_csv([eq1_dataset(2 / 3, 0.1 / 7)], src)
    res = fit_basic(sio.read_sweep_csv(src)[0])
    doc = sio.document_from_fit(res, inputs=[src], seed=11)
    path = tmp_path / "c.json"
    sio.write_coefficients(doc, path)
    back = sio.read_coefficients(path)
    assert back == doc
    assert back.params["c1"] == res.params["c1"]
    assert back.provenance.inputs[0][1] == sio.file_digest(src)
    assert back.diagnostics.n_points == 9 and back.provenance.seed == 11


@given(st.dictionaries(st.sampled_from(sio.MODEL_PARAMS["eq5"]), st.floats(0, 1e3),
                       min_size=8, max_size=8))
def test_eq5_document_round_trip(params):
    doc = sio.CoefficientDocument("eq5", params, g=128, routing=MoeRouting(8, 64))
    assert sio.parse_coefficients(sio.document_to_json(doc)) == doc


def test_unknown_model_kind():
    text = json.dumps({"version": 1, "model": "eq9", "parameters": {}})
    with pytest.raises(VersionError):
        sio.parse_coefficients(text)


def test_unknown_version():
    text = json.dumps({"version": 7, "model": "eq1", "parameters": {"c1": 1, "c2": 0}})
    with pytest.raises(VersionError):
        sio.parse_coefficients(text)


def test_eq3_missing_c2d():
    params = {n: 0.1 for n in sio.MODEL_PARAMS["eq3"] if n != "c2d"}
    text = json.dumps({"version": 1, "model": "eq3", "parameters": params})
    with pytest.raises(SchemaError):
        sio.parse_coefficients(text)
    with pytest.raises(SchemaError):
        sio.CoefficientDocument("eq3", params)


def test_moe_document_needs_routing():
    with pytest.raises(SchemaError):
        sio.CoefficientDocument("eq4", {"c1u": 1, "c1s": 0, "c2u": 0.1, "c2s": 0})


def test_malformed_json():
    with pytest.raises(ParseError) as info:
        sio.parse_coefficients('{"version": 1,\n "model": }')
    assert info.value.line == 2


def test_typed_coefficients():
    doc = sio.CoefficientDocument("eq3", dict(zip(sio.MODEL_PARAMS["eq3"], [1, 2, 3, 4, 5, 6])))
    assert doc.coefficients() == SpecCostCoefficients(1, 2, 3, 4, 5, 6)


# -- simulator configs ------------------------------------------------------

SIM = {
    "seed": 3,
    "workload": {"prefill_tokens": 128, "decode_tokens": 64},
    "step_costs": {"verify": [0.01, 0.0005], "draft": {"fixed": 0.001, "per_batch": 5e-5}},
    "spec_grid": {"alpha": [0.6, 0.8], "k": [0, 2]},
    "routing": {"active": 2, "total": 16, "saturation": [0.01, 0.0]},
    "measured_requests": 500,
}


def test_sim_config_parses():
    f = sio.parse_sim_config(json.dumps(SIM))
    assert f.config.seed == 3 and f.config.measured_requests == 500
    assert f.config.step_costs.draft == PhaseCost(0.001, 5e-5)
    assert f.config.moe_saturation == PhaseCost(0.01, 0.0)
    ks = [c.draft_k for c in f.configs()]
    assert ks == [0, 2, 0, 2]


def test_sim_config_requires_seed():
    raw = {k: v for k, v in SIM.items() if k != "seed"}
    with pytest.raises(SchemaError, match="seed"):
        sio.parse_sim_config(json.dumps(raw))


def test_sim_config_rejects_bad_values():
    with pytest.raises(ValidationError):
        sio.parse_sim_config(json.dumps(dict(SIM, seed=-1)))
    with pytest.raises(ValidationError):
        sio.parse_sim_config(json.dumps(dict(SIM, spec_grid={"alpha": [1.5], "k": [1]})))
    with pytest.raises(SchemaError):
        sio.parse_sim_config(json.dumps(dict(SIM, step_costs={"verify": [1]})))


# -- reports ----------------------------------------------------------------

def test_collapse_of_exact_data():
    c = ServingCoefficients(0.8, 0.03)
    pts = [LoadPoint(r, predict_latency(c, r)) for r in (1, 5, 10, 20, 30)]
    rep = sio.emit_report("collapse", coeffs=c, points=pts)
    assert rep.columns == ("x", "y", "y_model")
    for x, y, ym in rep.rows:
        assert y == pytest.approx(ym, rel=1e-12, abs=0)


def test_collapse_skips_saturated():
    c = ServingCoefficients(0.8, 0.03)
    pts = [LoadPoint(1, 0.9), LoadPoint(2, 5.0, saturated=True), LoadPoint(40, 9.0)]
    assert len(sio.emit_report("collapse", coeffs=c, points=pts).rows) == 1


@given(st.floats(0.01, 10), st.floats(1e-4, 1), st.floats(0.01, 10), st.floats(1e-4, 1))
def test_speedup_curve_identity(d1, d2, s1, s2):
    dense, sd = ServingCoefficients(d1, d2), ServingCoefficients(s1, s2)
    top = 0.99 / max(d2, s2)
    rep = sio.emit_report("speedup_curve", dense=dense, sd=sd,
                          rps=[top * i / 10 for i in range(11)])
    assert len(rep.rows) == 11
    for rps, r, formula, ratio in rep.rows:
        assert formula == pytest.approx(ratio, rel=1e-12)
        assert formula == speedup(dense, sd, rps)


def test_speedup_curve_skips_unstable_rates():
    rep = sio.emit_report("speedup_curve", dense=ServingCoefficients(1, 0.1),
                          sd=ServingCoefficients(0.5, 0.2), rps=[1, 4, 5, 9])
    assert rep.column("rps") == [1.0, 4.0]


def test_ratio_minima_delegates():
    dense = ServingCoefficients(1.0, 0.1)
    per_alpha = {0.8: {1: ServingCoefficients(0.6, 0.12), 3: ServingCoefficients(0.4, 0.15)},
                 0.6: {1: ServingCoefficients(0.7, 0.11), 2: ServingCoefficients(0.65, 0.13)}}
    rep = sio.emit_report("ratio_minima", dense=dense, per_alpha=per_alpha)
    assert rep.column("alpha") == [0.6, 0.8]
    for row in rep.rows:
        m = min_cost_ratios_over_k(per_alpha[row[0]], dense)
        assert row[1:] == (m.min_c1r, m.argmin_k_c1r, m.min_c2r, m.argmin_k_c2r)


def test_scaling_report():
    pts = [(1.0, 2.0), (2.0, 4.1), (3.0, 5.9)]
    rep = sio.emit_report("scaling", points=pts, trend=fit_scaling_trend(pts, "verifier_params"))
    assert rep.columns == ("predictor", "coefficient", "fitted_line")
    assert rep.column("fitted_line")[1] == pytest.approx(4.0)


def test_missing_inputs():
    with pytest.raises(MissingInputError):
        sio.emit_report("collapse", points=[])
    with pytest.raises(MissingInputError):
        sio.emit_report("speedup_curve", dense=ServingCoefficients(1, 0.1))
    with pytest.raises(ValueError):
        sio.emit_report("histogram")


def test_reports_reread(tmp_path):
    reps = [
        sio.emit_report("collapse", coeffs=ServingCoefficients(1, 0.1),
                        points=[LoadPoint(1, 1.2), LoadPoint(3, 1.5)]),
        sio.emit_report("speedup_curve", dense=ServingCoefficients(1, 0.1),
                        sd=ServingCoefficients(0.5, 0.12), rps=[0, 1 / 3, 2]),
        sio.emit_report("ratio_minima", dense=ServingCoefficients(1, 0.1),
                        per_alpha={0.7: {1: ServingCoefficients(0.6, 0.12)}}),
    ]
    for i, rep in enumerate(reps):
        path = tmp_path / f"r{i}.csv"
        sio.write_report(rep, path)
        assert sio.read_report(path) == rep
    assert sio.parse_report("# note\n" + reps[0].to_csv()) == reps[0]


def test_read_table(tmp_path):
    path = tmp_path / "t.csv"
    path.write_text("name,verifier_params,c1\na,1e9,0.5\nb,2e9,0.7\n")
    t = sio.read_table(path)
    assert t == {"name": ["a", "b"], "verifier_params": [1e9, 2e9], "c1": [0.5, 0.7]}

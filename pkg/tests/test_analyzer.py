import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qvla.analyzer import (
    DistributionSurface,
    LayerErrorRecord,
    emit_report,
    layer_error,
    magnitude_pipeline,
    peaks_non_increasing,
    step_gap_report,
    write_csv,
)
from qvla.calibration import build_table, constructed_drift_traces, single_bucket_table
from qvla.errors import ConfigError
from qvla.package import PackageManifest
from qvla.quant import QuantConfig
from synthetic import correlated_outlier_layer


def _layer(seed=0, n=256):
    w, draw = correlated_outlier_layer(seed, c_in=128, c_out=64)
    return draw(n), w


def test_no_quantization_variant_is_exact():
    x, w = _layer()
    rec = layer_error(x, w, "svd-hadamard", "none", layer_id="l")
    assert rec.rel_output_error == 0.0 and rec.nmse == 0.0
    assert rec.a4_ceiling > 0
    assert rec.variant == "svd-hadamard/none"


@pytest.mark.parametrize("kind", ["identity", "permute", "svd", "svd-hadamard"])
@pytest.mark.parametrize("solver", ["rtn", "gptq"])
def test_four_bit_variants_are_lossy(kind, solver):
    x, w = _layer(1)
    rec = layer_error(x, w, kind, solver)
    assert rec.rel_output_error > 0 and rec.nmse > 0
    assert rec.rel_output_error < 1 and rec.nmse < 1


def test_spike_ceiling_identity():
    x = np.zeros((10, 64), dtype=np.float32)
    x[:, 5] = 1.0
    x[3, 7] = 42.0
    w = np.random.default_rng(0).standard_normal((64, 8)).astype(np.float32)
    rec = layer_error(x, w, "identity", "none")
    # 99th percentile of per-token maxima: nine ones and one 42
    assert rec.a4_ceiling == pytest.approx(1 + 0.91 * 41)
    x1 = np.zeros((1, 64), dtype=np.float32)
    x1[0, 9] = -17.0
    assert layer_error(x1, w, "identity", "none").a4_ceiling == 17.0


def test_rel_output_error_is_weight_only():
    x, w = _layer(2)
    a = layer_error(x, w, "svd", "rtn")
    b = layer_error(x, w, "svd", "rtn", config=QuantConfig(4, 16))
    assert a.rel_output_error == b.rel_output_error
    assert b.nmse < a.nmse


def test_layer_error_rejects_mismatch():
    x, w = _layer(3)
    with pytest.raises(ConfigError):
        layer_error(x[:, :64], w)
    with pytest.raises(ConfigError):
        layer_error(x, w, solver="adaround")


def test_composite_rotation_wins_on_outlier_layers():
    wins = 0
    for seed in range(10):
        x, w = _layer(seed)
        raw = layer_error(x, w, "identity", "rtn").nmse
        svd = layer_error(x, w, "svd", "rtn").nmse
        both = layer_error(x, w, "svd-hadamard", "rtn").nmse
        wins += both < min(raw, svd)
    assert wins >= 9


def test_magnitude_pipeline_identity_stage_is_raw():
    x, w = _layer(4)
    surfaces = magnitude_pipeline(x, w)
    assert [s.kind for s in surfaces] == ["identity", "permute", "svd", "svd-hadamard"]
    raw = surfaces[0]
    np.testing.assert_array_equal(raw.channel_max, np.abs(x).max(axis=0))
    np.testing.assert_array_equal(raw.token_max, np.abs(x).max(axis=1))
    np.testing.assert_allclose(raw.row_norms, np.linalg.norm(w.astype(np.float64), axis=1))
    for s in surfaces:
        assert s.peak >= s.channel_max.max() and s.peak >= s.token_max.max()


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from([64, 128, 256]), st.floats(0.0, 2.0))
def test_svd_stage_row_norms_are_majorizing(seed, c_out, skew):
    # Rotated row energies are the squared singular values, which majorize the
    # raw row energies: the largest row can only grow and the mean norm shrink.
    rng = np.random.default_rng(seed)
    w = (rng.standard_normal((128, c_out)) * np.exp(skew * rng.standard_normal((128, 1)))).astype(np.float32)
    x = rng.standard_normal((4, 128)).astype(np.float32)
    raw, perm, svd, _ = magnitude_pipeline(x, w, block_size=64)
    np.testing.assert_allclose(np.sort(perm.row_norms), np.sort(raw.row_norms), rtol=1e-6)
    assert svd.row_norms.max() >= raw.row_norms.max() * (1 - 1e-5)
    assert svd.row_norms.mean() <= raw.row_norms.mean() * (1 + 1e-5)
    assert svd.row_norm_std >= raw.row_norm_std * (1 - 1e-5)


def test_hadamard_stage_equalizes_skewed_rows():
    rng = np.random.default_rng(5)
    for c_out in (64, 512):
        w = (rng.standard_normal((128, c_out)) * np.exp(rng.standard_normal((128, 1)))).astype(np.float32)
        x = rng.standard_normal((16, 128)).astype(np.float32)
        raw, _, svd, both = magnitude_pipeline(x, w)
        assert raw.row_norm_ratio > 5
        assert both.row_norm_ratio < 1.5
        assert both.row_norm_std < min(raw.row_norm_std, svd.row_norm_std)


def test_spike_tokens_never_grow():
    # a token with a single non-zero channel has |x R|_inf <= |x|_2 = |x|_inf
    rng = np.random.default_rng(6)
    w = rng.standard_normal((128, 64)).astype(np.float32)
    x = np.zeros((40, 128), dtype=np.float32)
    x[np.arange(40), rng.integers(0, 128, 40)] = rng.uniform(5, 60, 40)
    surfaces = magnitude_pipeline(x, w)
    for s in surfaces[1:]:
        assert s.peak <= surfaces[0].peak * (1 + 1e-6)
    assert surfaces[-1].peak < 0.5 * surfaces[0].peak


def test_peaks_non_increasing_reads_the_sequence():
    def surf(p):
        return DistributionSurface("identity", np.array([p]), np.array([p]), np.ones(2))
    assert peaks_non_increasing([surf(4), surf(4), surf(2), surf(1)])
    assert not peaks_non_increasing([surf(4), surf(2), surf(2.1)])
    assert peaks_non_increasing([surf(4), surf(2), surf(2.1)], rtol=0.1)
    assert peaks_non_increasing([])


@settings(max_examples=20, deadline=None)
@given(st.lists(st.floats(0.0, 1e3), min_size=1, max_size=20))
def test_surface_peak_dominates(values):
    arr = np.asarray(values)
    s = DistributionSurface("identity", arr, arr[::-1].copy(), np.ones(3))
    assert s.peak >= arr.max()
    assert s.channel_ratio >= 1.0 or np.median(arr) == 0


def _tables(layers, seed=0):
    traces = constructed_drift_traces(layers, seed=seed)
    return traces, build_table(traces, 7, 8), single_bucket_table(traces, 7, 8)


def test_step_gap_no_drift():
    traces, per_step, bucket = _tables({"a": "plain"})
    report = step_gap_report(traces, per_step, bucket)
    assert len(report["rows"]) == 8
    for row in report["rows"]:
        assert abs(row["gap"]) <= 1e-7 * row["mse_per_step"]
    assert abs(report["mean_gap"]) < 1e-12


def test_step_gap_drift():
    traces, per_step, bucket = _tables({"ada": "adaln", "plain": "plain"})
    held_out = constructed_drift_traces({"ada": "adaln", "plain": "plain"}, seed=0)
    report = step_gap_report(held_out, per_step, bucket)
    rows = {(r["layer"], r["step"]): r for r in report["rows"]}
    assert rows[("ada", 0)]["gap"] > 0 and rows[("ada", 7)]["gap"] > 0
    assert all(abs(rows[("plain", t)]["gap"]) < 1e-9 for t in range(8))
    assert report["mean_gap"] > 0


def test_step_gap_mismatch():
    traces, per_step, _ = _tables({"a": "adaln"})
    other = single_bucket_table(constructed_drift_traces({"b": "adaln"}), 7, 8)
    with pytest.raises(ConfigError):
        step_gap_report(traces, per_step, other)
    short = build_table(constructed_drift_traces({"a": "adaln"}, T=4), 7, 4)
    with pytest.raises(ConfigError):
        step_gap_report(traces, per_step, short)


def test_empty_report_is_valid():
    doc = json.loads(emit_report())
    assert doc["schema_version"] == 1
    assert doc["layer_errors"] == [] and doc["magnitude_pipeline"] == {}
    assert doc["step_gaps"]["rows"] == []


def test_report_is_deterministic_and_rounded():
    x, w = _layer(7)
    records = [layer_error(x, w, k, "rtn", layer_id="l") for k in ("svd", "identity")]
    surfaces = {"l": magnitude_pipeline(x, w)}
    traces, per_step, bucket = _tables({"a": "adaln"})
    gaps = step_gap_report(traces, per_step, bucket)
    manifest = PackageManifest(
        {"l": dict(packed_bytes=3, scale_bytes=4, bias_bytes=0, rotation_bytes=0, perm_bytes=0, table_bytes=0)},
        0, 30)
    a = emit_report(records, surfaces, gaps, manifest, {"seed": 1})
    b = emit_report(list(reversed(records)), surfaces, gaps, manifest, {"seed": 1})
    assert a == b
    doc = json.loads(a)
    assert doc["savings_ratio"] == pytest.approx(manifest.savings_ratio)
    assert [r["rotation"] for r in doc["layer_errors"]] == ["identity", "svd"]
    value = doc["layer_errors"][0]["nmse"]
    assert value == float(f"{records[1].nmse:.9g}")


def test_csv_tables(tmp_path):
    x, w = _layer(8)
    records = [LayerErrorRecord("l", "svd", "rtn", 0.1, 0.2, 3.0)]
    report = emit_report(records, {"l": magnitude_pipeline(x, w)})
    paths = write_csv(report, tmp_path / "csv")
    assert len(paths) == 3
    lines = (tmp_path / "csv" / "layer_errors.csv").read_text().splitlines()
    assert lines[0] == "layer,rotation,solver,rel_output_error,nmse,a4_ceiling"
    assert lines[1] == "l,svd,rtn,0.1,0.2,3.0"
    assert len((tmp_path / "csv" / "magnitude_pipeline.csv").read_text().splitlines()) == 5

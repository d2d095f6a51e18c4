import xml.etree.ElementTree as ET

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uam import probe
from uam.probe import CompTrace, TraceError

SVG = "{http://www.w3.org/2000/svg}"


def trace(layer_id, comps, start=0):
    t = CompTrace(layer_id)
    for i, c in enumerate(comps):
        t.record(start + i, c)
    return t


def test_record_first_sample():
    t = probe.record(CompTrace("fc1"), 0, -1.0)
    assert t.samples == [(0, -1.0)]


def test_record_requires_increasing_steps():
    t = trace("fc1", [1.0, 2.0])
    with pytest.raises(TraceError):
        t.record(1, 3.0)
    with pytest.raises(TraceError):
        t.record(0, 3.0)


def test_monotone_check():
    t = CompTrace("fc1", check_monotone=True).record(0, 2.0)
    with pytest.raises(TraceError):
        t.record(1, 1.9)


def test_delta_examples():
    a = trace("fc1", [1.0, 2.0, 4.0])
    assert probe.delta_trace(a, a) == ([0, 1, 2], [0.0, 0.0, 0.0])
    b = trace("fc2", [3.5, 4.5, 6.5])
    assert probe.delta_trace(a, b)[1] == [2.5, 2.5, 2.5]
    c = trace("fc2", [0.0, 5.0, 1.0])
    assert probe.delta_trace(a, c) == ([0, 1, 2], [-1.0, 3.0, -3.0])


def test_delta_uses_shared_steps_only():
    a = trace("fc1", [1.0, 2.0, 3.0])
    b = trace("fc2", [10.0, 20.0], start=1)
    assert probe.delta_trace(a, b) == ([1, 2], [8.0, 17.0])
    with pytest.raises(TraceError):
        probe.delta_trace(a, trace("fc2", [1.0], start=9))


def test_derivative_examples():
    steps = np.arange(40.0)
    np.testing.assert_allclose(probe.smoothed_derivative(3.0 * steps, 1, 5), 3.0)
    np.testing.assert_allclose(probe.smoothed_derivative(3.0 * steps, 2, 5), 0.0, atol=1e-12)
    np.testing.assert_allclose(probe.smoothed_derivative(steps ** 2, 2, 1), 2.0)


def test_derivative_lengths_and_errors():
    assert len(probe.smoothed_derivative(np.arange(30.0), 1, 10)) == 20
    assert len(probe.smoothed_derivative(np.arange(30.0), 2, 10)) == 10
    with pytest.raises(TraceError):
        probe.smoothed_derivative(np.arange(10.0), 1, 10)
    with pytest.raises(ValueError):
        probe.smoothed_derivative(np.arange(10.0), 3, 1)


def test_build_report_consecutive_layers():
    report = probe.build_report([trace("fc2", np.arange(30.0) * 2), trace("fc1", np.arange(30.0))],
                                window=5)
    assert len(report.deltas) == 1
    (pair, steps, values) = report.deltas[0]
    assert pair == ("fc1", "fc2")
    np.testing.assert_allclose(values, np.arange(30.0))
    np.testing.assert_allclose(report.derivatives["fc2"][1], 2.0)


def test_empty_report_csv_is_header_only():
    assert probe.traces_to_csv([]) == "step,layer_id,comp\n"


traces_strategy = st.lists(
    st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=1, max_size=30),
    min_size=1, max_size=3)


@settings(max_examples=50)
@given(traces_strategy)
def test_csv_round_trip(series):
    traces = [trace(f"fc{i + 1}", s) for i, s in enumerate(series)]
    back = probe.traces_from_csv(probe.traces_to_csv(traces))
    assert [t.layer_id for t in back] == [t.layer_id for t in traces]
    for a, b in zip(traces, back):
        assert a.steps == b.steps
        np.testing.assert_allclose(b.comps, a.comps, rtol=1e-9, atol=1e-9)


@settings(max_examples=30)
@given(traces_strategy)
def test_json_round_trip(series):
    report = probe.build_report([trace(f"fc{i + 1}", s) for i, s in enumerate(series)], window=2)
    back = probe.report_from_json(probe.report_to_json(report))
    for a, b in zip(report.sorted_traces, back.traces):
        np.testing.assert_allclose(b.comps, a.comps, rtol=1e-9, atol=1e-9)
    for (pa, sa, va), (pb, sb, vb) in zip(report.deltas, back.deltas):
        assert pa == pb and sa == sb
        np.testing.assert_allclose(vb, va, rtol=1e-9, atol=1e-9)
    for k, d in report.derivatives.items():
        for order, vals in d.items():
            np.testing.assert_allclose(back.derivatives[k][order], vals, rtol=1e-9, atol=1e-9)


def test_exports_are_byte_identical(tmp_path):
    report = probe.build_report([trace("fc1", np.sqrt(np.arange(50.0))),
                                 trace("fc2", np.log1p(np.arange(50.0)))])
    for fmt_name in ("csv", "json"):
        a = probe.export_report(report, fmt_name, tmp_path / f"a.{fmt_name}").read_bytes()
        b = probe.export_report(report, fmt_name, tmp_path / f"b.{fmt_name}").read_bytes()
        assert a == b
    with pytest.raises(ValueError):
        probe.export_report(report, "xml", tmp_path / "c")


def test_svg_single_two_point_trace(tmp_path):
    report = probe.build_report([trace("fc1", [1.0, 2.0])])
    path = probe.emit_svg_lineplot(report, tmp_path / "comp.svg")
    root = ET.parse(path).getroot()
    polylines = root.findall(f"{SVG}polyline")
    assert len(polylines) == 1
    assert len(polylines[0].get("points").split()) == 2


def test_svg_well_formed_and_deterministic():
    series = [("a & <b>", [0, 1, 2], [1.0, 0.5, 2.0]), ("fc2", [0, 1, 2], [3.0, 3.0, 3.0])]
    text = probe.render_svg(series, title="COMP <test>")
    ET.fromstring(text)
    assert text == probe.render_svg(series, title="COMP <test>")


def test_svg_needs_data():
    with pytest.raises(TraceError):
        probe.render_svg([("fc1", [], [])])

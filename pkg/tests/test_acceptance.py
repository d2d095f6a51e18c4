"""Acceptance criteria, one test each.

Every test records a PASS/FAIL line that is printed in the terminal summary.
The imbalance-table and COMP-curve checks train on real MNIST at the full
784-1000-1000-10 size with the harness defaults; set UAM_ACCEPTANCE_HIDDEN
(e.g. 256) to run them on a narrower net, and UAM_ACCEPTANCE_SEEDS to
change the seed count (at least 5).
"""

import math
import os
import time
import xml.etree.ElementTree as ET
from contextlib import contextmanager

import numpy as np
import pytest

from conftest import ACCEPTANCE
from uam import data, experiment, nml, probe, verify
from uam.experiment import ExperimentConfig
from uam.nml import CompAccumulator, SaliencyTable
from uam.norms import NormVariant, RegularityNorm

HIDDEN = int(os.environ.get("UAM_ACCEPTANCE_HIDDEN", "1000"))
SEEDS = list(range(max(5, int(os.environ.get("UAM_ACCEPTANCE_SEEDS", "5")))))

TABLE = {0: ["none", "rn"], 4: ["none", "wn", "rn"], 3: ["none", "rn", "rln", "ln_rn"],
         9: ["ln", "rn"]}


@contextmanager
def criterion(name):
    state = {"detail": ""}
    try:
        yield state
    except BaseException as exc:
        detail = state["detail"] or f"{type(exc).__name__}: {exc}"
        ACCEPTANCE.append((False, name, detail.splitlines()[0] if detail else ""))
        raise
    ACCEPTANCE.append((True, name, state["detail"]))


# property suite

def comp_monotone_10k(rng):
    acc = CompAccumulator()
    for _ in range(10_000):
        before = acc.log_sum
        acc = nml.comp_increment(acc, rng.normal(-3, 5, size=rng.integers(1, 4)))
        assert acc.log_sum >= before


def code_length_nonnegative(rng):
    acc = CompAccumulator()
    for _ in range(500):
        terms = rng.normal(-2, 10, size=16)
        acc = nml.comp_increment(acc, terms)
        assert np.all(nml.code_length(acc, terms) >= 0)
    layer = RegularityNorm(8)
    for _ in range(50):
        _, l_values = layer.forward(rng.standard_t(2, size=(16, 8)))
        assert np.all(l_values >= 0)


def welford_two_pass(rng):
    ok, detail = verify.check_welford_oracle(streams=100, tol=1e-9, seed=int(rng.integers(1 << 30)))
    assert ok, detail


def log_sum_exp_extremes(rng):
    ok, detail = verify.check_log_sum_exp_extremes()
    assert ok, detail
    assert nml.log_sum_exp(-1000.0, -1000.5) == pytest.approx(
        -1000.0 + math.log1p(math.exp(-0.5)), abs=1e-12)
    assert nml.log_sum_exp(nml.NEG_INF, -3.5) == -3.5
    assert nml.log_sum_exp(1e308, 1e308) == pytest.approx(1e308)


def sn_rn_exact(rng):
    rn = RegularityNorm(6)
    sn = RegularityNorm(6, saliency=SaliencyTable({c: 1.0 for c in range(10)}))
    for _ in range(10):
        x = rng.normal(size=(8, 6))
        labels = rng.integers(0, 10, size=8)
        y_rn, l_rn = rn.forward(x)
        y_sn, l_sn = sn.forward(x, labels=labels)
        np.testing.assert_array_equal(l_sn, l_rn)
        np.testing.assert_array_equal(y_sn, y_rn)


def saliency_scale_invariance(rng):
    for factor in (1e-3, 0.5, 2.0, 37.0):
        table = SaliencyTable({c: float(w) for c, w in enumerate(rng.uniform(0.1, 5, 10))}, 1.0)
        a = RegularityNorm(5, saliency=table)
        b = RegularityNorm(5, saliency=table.scaled(factor))
        for _ in range(6):
            x = rng.normal(size=(7, 5))
            y = rng.integers(0, 10, size=7)
            np.testing.assert_allclose(a.forward(x, labels=y)[1], b.forward(x, labels=y)[1],
                                       rtol=0, atol=1e-9)


def permutation_invariance(rng):
    for _ in range(200):
        start = CompAccumulator(float(rng.normal(0, 10)), 3)
        batch = rng.normal(-5, 20, size=rng.integers(1, 200))
        a = nml.comp_increment(start, batch).log_sum
        b = nml.comp_increment(start, rng.permutation(batch)).log_sum
        assert abs(a - b) <= 1e-12 * max(1.0, abs(a))


PROPERTIES = [comp_monotone_10k, code_length_nonnegative, welford_two_pass,
              log_sum_exp_extremes, sn_rn_exact, saliency_scale_invariance,
              permutation_invariance]


def test_property_suite():
    with criterion("property suite (< 1 min)") as c:
        rng = np.random.default_rng(2024)
        start = time.perf_counter()
        for check in PROPERTIES:
            check(rng)
        elapsed = time.perf_counter() - start
        c["detail"] = f"{len(PROPERTIES)} property groups in {elapsed:.1f}s"
        assert elapsed < 60


def test_gradient_suite():
    with criterion("gradient suite (< 1 min)") as c:
        start = time.perf_counter()
        errors = {v.value: verify.network_gradient_error(v) for v in NormVariant}
        ok, detail = verify.check_softmax_gradient(tol=1e-6)
        elapsed = time.perf_counter() - start
        worst = max(errors, key=errors.get)
        c["detail"] = (f"worst variant {worst} rel err {errors[worst]:.2g}; softmax-CE {detail}; "
                       f"{elapsed:.1f}s")
        assert all(e < 1e-4 for e in errors.values()), errors
        assert ok, detail
        assert elapsed < 60


def test_parser_suite(mnist_path):
    with criterion("parser suite") as c:
        rng = np.random.default_rng(7)
        for shape in [(0,), (13,), (4, 28, 28), (2, 3, 5)]:
            arr = rng.integers(0, 256, size=shape, dtype=np.uint8)
            np.testing.assert_array_equal(data.parse_idx(data.serialize_idx(arr)), arr)
        tri, trl, tei, tel = data.load_raw(mnist_path)
        assert (len(tri), len(trl), len(tei), len(tel)) == (60000, 60000, 10000, 10000)
        train, val, test = data.load_splits(mnist_path)
        sizes = (len(train), len(val), len(test))
        c["detail"] = f"raw 60000/10000, split {sizes}"
        assert sizes == (55000, 5000, 10000)


# imbalance table

@pytest.fixture(scope="module")
def cells(mnist_path, tmp_path_factory):
    root = tmp_path_factory.mktemp("imbalance")
    cells = {}
    for n, variants in TABLE.items():
        config = ExperimentConfig(data_dir=str(mnist_path), variants=variants, ns=[n],
                                  seeds=SEEDS, output_dir=str(root / f"n{n}"))
        config.net.layer_sizes = [784, HIDDEN, HIDDEN, 10]
        result = experiment.cmd_sweep(config)
        for v in variants:
            cells[(v, n)] = result.cells[(NormVariant.parse(v).value, n)]
    return cells


def cell_text(cells, v, n):
    c = cells[(v, n)]
    return f"{NormVariant.parse(v).label} {c['mean']:.2f}±{c['stderr']:.2f}"


SCALE = f"784-{HIDDEN}-{HIDDEN}-10, {len(SEEDS)} seeds"


@pytest.mark.slow
def test_imbalance_table_balanced(cells):
    with criterion(f"imbalance n=0: RN within 3 points of baseline ({SCALE})") as c:
        rn, base = cells[("rn", 0)]["mean"], cells[("none", 0)]["mean"]
        c["detail"] = f"{cell_text(cells, 'rn', 0)} vs {cell_text(cells, 'none', 0)}"
        assert abs(rn - base) <= 3.0


@pytest.mark.slow
def test_imbalance_table_n4(cells):
    with criterion(f"imbalance n=4: RN >= 10 points below baseline and WN ({SCALE})") as c:
        rn = cells[("rn", 4)]["mean"]
        c["detail"] = ", ".join(cell_text(cells, v, 4) for v in ("rn", "none", "wn"))
        assert rn <= cells[("none", 4)]["mean"] - 10
        assert rn <= cells[("wn", 4)]["mean"] - 10


@pytest.mark.slow
def test_imbalance_table_n3(cells):
    with criterion(f"imbalance n=3: one of RN/RLN/LN+RN beats baseline by >= 8 ({SCALE})") as c:
        base = cells[("none", 3)]["mean"]
        best = min(("rn", "rln", "ln_rn"), key=lambda v: cells[(v, 3)]["mean"])
        c["detail"] = ", ".join(cell_text(cells, v, 3) for v in TABLE[3])
        assert cells[(best, 3)]["mean"] <= base - 8


@pytest.mark.slow
def test_imbalance_table_n9(cells):
    with criterion(f"imbalance n=9: LN >= 20 points below RN ({SCALE})") as c:
        c["detail"] = f"{cell_text(cells, 'ln', 9)} vs {cell_text(cells, 'rn', 9)}"
        assert cells[("ln", 9)]["mean"] <= cells[("rn", 9)]["mean"] - 20


# COMP curves and output integrity from one n=0 RN run

def rn_config(mnist_path, out):
    config = ExperimentConfig(data_dir=str(mnist_path), variant="rn", imbalance_n=0,
                              seeds=[0], output_dir=str(out))
    config.net.layer_sizes = [784, HIDDEN, HIDDEN, 10]
    return config


@pytest.fixture(scope="module")
def rn_run(mnist_path, tmp_path_factory):
    out = tmp_path_factory.mktemp("rn_run")
    result = experiment.cmd_train(rn_config(mnist_path, out))[0]
    return out, result


@pytest.mark.slow
def test_comp_nondecreasing(rn_run):
    with criterion("COMP traces nondecreasing (n=0 RN run)") as c:
        _, result = rn_run
        traces = result["traces"]
        c["detail"] = ", ".join(f"{t.layer_id}: {len(t)} steps, {t.comps[0]:.3f} -> "
                                f"{t.comps[-1]:.3f}" for t in traces)
        assert all(len(t) > 0 for t in traces)
        for t in traces:
            assert all(b >= a for a, b in zip(t.comps, t.comps[1:])), t.layer_id


@pytest.mark.slow
def test_comp_later_layer_exceeds_earlier(rn_run):
    with criterion("later layer COMP exceeds earlier layer at the final step") as c:
        _, result = rn_run
        fc1, fc2 = result["traces"]
        c["detail"] = f"final fc1 {fc1.comps[-1]:.4f}, fc2 {fc2.comps[-1]:.4f}"
        assert fc2.comps[-1] > fc1.comps[-1]


@pytest.mark.slow
def test_comp_plateau(rn_run):
    with criterion("smoothed dCOMP over final 10% below 20% of its peak") as c:
        _, result = rn_run
        parts = []
        ok = True
        for t in result["traces"]:
            d1 = np.abs(probe.smoothed_derivative(t.comps, 1, probe.DEFAULT_WINDOW))
            tail = d1[-max(1, len(d1) // 10):]
            parts.append(f"{t.layer_id} tail max {tail.max():.3g} / peak {d1.max():.3g}")
            ok &= bool(tail.max() < 0.2 * d1.max())
        c["detail"] = "; ".join(parts)
        assert ok


@pytest.mark.slow
def test_output_integrity(rn_run, mnist_path, tmp_path):
    with criterion("output integrity: SVG XML, CSV/JSON round trip <= 1e-9, "
                   "byte-identical artifacts") as c:
        out, result = rn_run
        run_dir = out / "rn_n0_seed0"
        report, files = experiment.cmd_analyze(run_dir)
        svgs = [f for f in files if f.suffix == ".svg"]
        for f in svgs:
            ET.parse(f)

        worst = 0.0
        back = probe.traces_from_csv((run_dir / "trace.csv").read_text())
        for a, b in zip(result["traces"], back):
            assert a.steps == b.steps
            worst = max(worst, float(np.max(np.abs(np.subtract(a.comps, b.comps)))))
        loaded = probe.report_from_json((run_dir / "analysis" / "report.json").read_text())
        for (_, _, va), (_, _, vb) in zip(report.deltas, loaded.deltas):
            worst = max(worst, float(np.max(np.abs(np.subtract(va, vb)))))
        for k, d in report.derivatives.items():
            for order, vals in d.items():
                worst = max(worst, float(np.max(np.abs(np.subtract(vals, loaded.derivatives[k][order])))))
        assert worst <= 1e-9

        again = tmp_path / "again"
        experiment.cmd_train(rn_config(mnist_path, again))
        experiment.cmd_analyze(again / "rn_n0_seed0")
        names = sorted(p.relative_to(run_dir) for p in run_dir.rglob("*") if p.is_file())
        for name in names:
            assert (run_dir / name).read_bytes() == (again / "rn_n0_seed0" / name).read_bytes(), name
        c["detail"] = (f"{len(svgs)} SVGs parsed, max round-trip error {worst:.1g}, "
                       f"{len(names)} files identical across reruns")

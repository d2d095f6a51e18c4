"""Experiment orchestration: single runs, seed sweeps and trace analysis."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import probe
from .probe import DEFAULT_WINDOW
from .data import ImbalanceSpec, SplitSpec, apply_imbalance, batch_stream, load_splits
from .network import NetworkConfig, Network, confusion_matrix, evaluate, train_epoch
from .norms import NormVariant, saliency_from_labels

log = logging.getLogger(__name__)

SALIENCY_MODES = ("uniform", "class_frequency", "inverse_class_frequency")


class ConfigError(ValueError):
    pass


class SweepError(RuntimeError):
    pass


@dataclass
class NetSettings:
    layer_sizes: list = field(default_factory=lambda: [784, 1000, 1000, 10])
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 128
    warmup_batches: int = 1
    sigma_floor: float = 1e-3
    init: str = "he"
    prior: str = "gaussian"
    rescale: bool = True


@dataclass
class ExperimentConfig:
    data_dir: str | None = None
    variant: str = "rn"
    imbalance_n: int = 0
    seeds: list = field(default_factory=lambda: [0])
    epochs: int = 1
    net: NetSettings = field(default_factory=NetSettings)
    probe: bool = True
    window: int = DEFAULT_WINDOW
    saliency_mode: str = "class_frequency"
    keep_probability: float = 0.01
    split_seed: int = 0
    output_dir: str = "runs"
    variants: list = field(default_factory=list)
    ns: list = field(default_factory=list)
    workers: int = 0

    def validate(self) -> "ExperimentConfig":
        def fail(path, msg):
            raise ConfigError(f"{path}: {msg}")

        for path, name in [("variant", self.variant)] + [
                (f"variants[{i}]", v) for i, v in enumerate(self.variants)]:
            try:
                NormVariant.parse(name)
            except ValueError:
                fail(path, f"unknown variant {name!r}")
        for path, n in [("imbalance_n", self.imbalance_n)] + [
                (f"ns[{i}]", n) for i, n in enumerate(self.ns)]:
            if not isinstance(n, int) or not 0 <= n <= 9:
                fail(path, "must be an integer in 0..9")
        if not self.seeds:
            fail("seeds", "must be nonempty")
        if any(not isinstance(s, int) or s < 0 for s in self.seeds):
            fail("seeds", "must be nonnegative integers")
        if self.epochs < 1:
            fail("epochs", "must be positive")
        if self.window < 1:
            fail("window", "must be positive")
        if self.saliency_mode not in SALIENCY_MODES:
            fail("saliency_mode", f"must be one of {', '.join(SALIENCY_MODES)}")
        if not 0 < self.keep_probability <= 1:
            fail("keep_probability", "must lie in (0, 1]")
        if self.workers < 0:
            fail("workers", "must be nonnegative")
        try:
            self.network_config(NormVariant.NONE, 0)
        except ValueError as exc:
            fail("net", str(exc))
        return self

    def network_config(self, variant, seed) -> NetworkConfig:
        n = self.net
        return NetworkConfig(layer_sizes=list(n.layer_sizes), norm_variant=variant,
                             learning_rate=n.learning_rate, momentum=n.momentum, seed=seed,
                             batch_size=n.batch_size, warmup_batches=n.warmup_batches,
                             sigma_floor=n.sigma_floor, prior=n.prior, rescale=n.rescale,
                             shadow=self.probe, init=n.init)

    @property
    def sweep_variants(self):
        return [NormVariant.parse(v) for v in (self.variants or [self.variant])]

    @property
    def sweep_ns(self):
        return list(self.ns or [self.imbalance_n])

    def to_dict(self):
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, doc) -> "ExperimentConfig":
        doc = dict(doc)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ConfigError(f"{unknown[0]}: unknown field")
        net = doc.pop("net", {}) or {}
        net_known = {f.name for f in dataclasses.fields(NetSettings)}
        bad = sorted(set(net) - net_known)
        if bad:
            raise ConfigError(f"net.{bad[0]}: unknown field")
        return cls(net=NetSettings(**net), **doc)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"<root>: invalid JSON ({exc})") from exc
        return cls.from_dict(doc)


_SPLITS = {}


def get_splits(data_dir, split_seed):
    key = (str(data_dir), split_seed)
    if key not in _SPLITS:
        _SPLITS.clear()
        _SPLITS[key] = load_splits(data_dir, SplitSpec(shuffle_seed=split_seed))
    return _SPLITS[key]


def run_name(variant: NormVariant, n: int, seed: int) -> str:
    return f"{variant.value}_n{n}_seed{seed}"


def run_single(config: ExperimentConfig, variant, n: int, seed: int, splits=None):
    """Train and evaluate one (variant, n, seed) run; returns an in-memory result."""
    variant = NormVariant.parse(variant) if isinstance(variant, str) else variant
    train, val, test = splits or get_splits(config.data_dir, config.split_seed)
    net = Network(config.network_config(variant, seed))
    traces = {lid: probe.CompTrace(lid, check_monotone=True) for lid in net.layer_ids}
    has_comp = variant.is_regularity or bool(net.shadows)
    records = []
    chosen_per_epoch = []
    train_sizes = []
    for epoch in range(config.epochs):
        subset, chosen = apply_imbalance(
            train, ImbalanceSpec(n, config.keep_probability, seed + epoch))
        chosen_per_epoch.append(sorted(chosen))
        train_sizes.append(len(subset))
        if variant is NormVariant.SN:
            net.set_saliency(saliency_from_labels(subset.labels, config.saliency_mode))
        batches = batch_stream(subset, config.net.batch_size, [seed, epoch])
        net, recs = train_epoch(net, batches, step_offset=len(records))
        records.extend(recs)
    if config.probe and has_comp:
        for rec in records:
            comps = rec.comp if variant.is_regularity else rec.shadow_comp
            for lid, c in zip(net.layer_ids, comps):
                traces[lid].record(rec.step, c)
    test_error = evaluate(net, test.images, test.labels)
    metrics = {
        "variant": variant.value,
        "n": n,
        "seed": seed,
        "test_error": test_error,
        "validation_error": evaluate(net, val.images, val.labels),
        "chosen_classes": chosen_per_epoch,
        "train_examples": train_sizes,
        "steps": len(records),
        "final_train_loss": records[-1].train_loss if records else None,
        "comp_source": ("regularity" if variant.is_regularity else "shadow") if has_comp else None,
        "final_comp": {lid: t.comps[-1] for lid, t in traces.items() if len(t)},
    }
    cm = confusion_matrix(net, test.images, test.labels)
    return {"metrics": metrics, "traces": list(traces.values()), "confusion": cm}


def _metrics_json(metrics):
    def clean(v):
        if isinstance(v, float):
            return float(v)
        if isinstance(v, dict):
            return {k: clean(x) for k, x in v.items()}
        if isinstance(v, list):
            return [clean(x) for x in v]
        return v
    return json.dumps(clean(metrics), indent=2, sort_keys=True) + "\n"


def _confusion_csv(cm) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["true\\pred"] + list(range(cm.shape[1])))
    for i, row in enumerate(cm):
        w.writerow([i] + row.tolist())
    return buf.getvalue()


def write_run(result, run_dir) -> Path:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "metrics.json").write_text(_metrics_json(result["metrics"]))
    (run_dir / "trace.csv").write_text(probe.traces_to_csv(result["traces"]))
    (run_dir / "confusion.csv").write_text(_confusion_csv(result["confusion"]))
    return run_dir


def cmd_train(config: ExperimentConfig):
    """Run every seed of ``config.variant`` at ``config.imbalance_n``; write artifacts."""
    config.validate()
    variant = NormVariant.parse(config.variant)
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(config.to_json())
    results = []
    for seed in config.seeds:
        result = run_single(config, variant, config.imbalance_n, seed)
        write_run(result, out / run_name(variant, config.imbalance_n, seed))
        log.info("%s n=%d seed=%d test error %.2f%%", variant.label, config.imbalance_n,
                 seed, result["metrics"]["test_error"])
        results.append(result)
    return results


def _sweep_job(args):
    config_doc, variant, n, seed = args
    config = ExperimentConfig.from_dict(config_doc)
    run_dir = Path(config.output_dir) / run_name(NormVariant(variant), n, seed)
    try:
        result = run_single(config, NormVariant(variant), n, seed)
    except Exception as exc:  # reported with run identification by the caller
        return variant, n, seed, None, f"{type(exc).__name__}: {exc}"
    write_run(result, run_dir)
    return variant, n, seed, result["metrics"]["test_error"], None


def aggregate(values):
    """(mean, standard error) with stderr = sample std / sqrt(runs)."""
    values = np.asarray(values, dtype=np.float64)
    mean = float(values.mean())
    if len(values) < 2:
        return mean, float("nan")
    return mean, float(values.std(ddof=1) / math.sqrt(len(values)))


@dataclass
class SweepResult:
    cells: dict  # (variant, n) -> {"mean", "stderr", "values"}
    failures: list = field(default_factory=list)

    def mean(self, variant, n):
        return self.cells[(NormVariant.parse(variant).value, n)]["mean"]

    def to_json(self):
        doc = {"cells": [{"variant": v, "n": n, "mean": c["mean"], "stderr": c["stderr"],
                          "values": [float(x) for x in c["values"]]}
                         for (v, n), c in sorted(self.cells.items())],
               "failures": self.failures}
        return json.dumps(doc, indent=2, sort_keys=True, allow_nan=True) + "\n"

    def table_csv(self, variants, ns) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method"] + [f"n={n}" for n in ns])
        for v in variants:
            row = [v.label]
            for n in ns:
                c = self.cells.get((v.value, n))
                row.append("" if c is None else f"{c['mean']:.2f} ± {c['stderr']:.2f}")
            w.writerow(row)
        return buf.getvalue()


def cmd_sweep(config: ExperimentConfig) -> SweepResult:
    config.validate()
    if len(config.seeds) < 2:
        raise ConfigError("seeds: a sweep needs at least 2 seeds for a standard error")
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(config.to_json())
    variants, ns = config.sweep_variants, config.sweep_ns
    jobs = [(config.to_dict(), v.value, n, s) for v in variants for n in ns for s in config.seeds]
    workers = config.workers or os.cpu_count() or 1
    if workers == 1:
        outcomes = [_sweep_job(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_sweep_job, jobs))

    values, failures = {}, []
    for variant, n, seed, err, failure in outcomes:
        if failure:
            failures.append({"run": run_name(NormVariant(variant), n, seed), "error": failure})
        else:
            values.setdefault((variant, n), []).append(err)
    cells = {}
    for key, vals in values.items():
        mean, stderr = aggregate(vals)
        cells[key] = {"mean": mean, "stderr": stderr, "values": vals}
    result = SweepResult(cells, failures)
    (out / "sweep.json").write_text(result.to_json())
    (out / "table.csv").write_text(result.table_csv(variants, ns))
    if failures:
        raise SweepError(f"{len(failures)} run(s) failed, first: {failures[0]['run']}: "
                         f"{failures[0]['error']}")
    return result


def cmd_analyze(run_dir, out_dir=None, window: int = DEFAULT_WINDOW):
    """Build deltas/derivatives from a run's trace.csv and export JSON, CSV and SVGs."""
    run_dir = Path(run_dir)
    trace_path = run_dir / "trace.csv"
    if not trace_path.exists():
        raise FileNotFoundError(f"no trace.csv in {run_dir}")
    traces = [t for t in probe.traces_from_csv(trace_path.read_text()) if len(t)]
    if not traces:
        raise probe.TraceError(f"{trace_path} holds no samples")
    out = Path(out_dir) if out_dir else run_dir / "analysis"
    out.mkdir(parents=True, exist_ok=True)
    report = probe.build_report(traces, window)
    probe.export_report(report, "json", out / "report.json")
    probe.export_report(report, "csv", out / "traces.csv")
    probe.emit_svg_lineplot(report, out / "comp.svg")
    files = [out / "report.json", out / "traces.csv", out / "comp.svg"]
    if report.deltas:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "layers", "delta"])
        for (a, b), steps, vals in report.deltas:
            for s, v in zip(steps, vals):
                w.writerow([s, f"{b}-{a}", probe.fmt(v)])
        (out / "deltas.csv").write_text(buf.getvalue())
        series = [(f"{b} - {a}", steps, vals) for (a, b), steps, vals in report.deltas]
        (out / "delta.svg").write_text(probe.render_svg(series, "Delta COMP between layers",
                                                        y_label="delta COMP"))
        files += [out / "deltas.csv", out / "delta.svg"]
    for order in (1, 2):
        series = []
        for t in report.sorted_traces:
            d = report.derivatives[t.layer_id].get(order)
            if d:
                series.append((t.layer_id, t.steps[:len(d)], d))
        if series:
            path = out / f"derivative{order}.svg"
            path.write_text(probe.render_svg(series, f"Smoothed order-{order} derivative of COMP",
                                             y_label=f"d{order} COMP"))
            files.append(path)
    return report, files

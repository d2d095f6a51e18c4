"""Self-contained invariant and oracle checks behind ``uam verify``.

Each check returns ``(passed, detail)``; :func:`run_checks` collects them
into records with the check name and its tolerance.
"""

from __future__ import annotations

import math

import numpy as np

from . import data, nml, norms
from . import network as nn


def two_pass_moments(xs):
    xs = np.asarray(xs, dtype=np.float64)
    mean = math.fsum(xs) / len(xs)
    return mean, math.fsum((x - mean) ** 2 for x in xs)


def rel_err(a, b):
    return abs(a - b) / max(abs(b), 1e-300)


def check_welford_oracle(streams=100, tol=1e-9, seed=0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(streams):
        xs = rng.normal(rng.uniform(-50, 50), rng.uniform(0.01, 20), size=rng.integers(2, 400))
        g = nml.RunningGaussian()
        for x in xs:
            g = nml.welford_update(g, float(x))
        mean, m2 = two_pass_moments(xs)
        if g.count != len(xs):
            return False, f"count {g.count} != {len(xs)}"
        worst = max(worst, rel_err(g.mean, mean) if mean else abs(g.mean), rel_err(g.m2, m2))
    return worst <= tol, f"max relative error {worst:.3g}"


def check_comp_oracle(tol=1e-9, seed=1):
    rng = np.random.default_rng(seed)
    acc = nml.CompAccumulator()
    every = []
    worst = 0.0
    for _ in range(200):
        batch = rng.normal(-3, 2, size=rng.integers(1, 50))
        before = acc.log_sum
        acc = nml.comp_increment(acc, batch)
        if acc.log_sum < before:
            return False, "COMP decreased"
        every.extend(batch.tolist())
        hi = max(every)
        oracle = hi + math.log(math.fsum(math.exp(t - hi) for t in every))
        worst = max(worst, abs(acc.log_sum - oracle))
    return worst <= tol, f"max absolute error {worst:.3g}"


def check_code_length_nonnegative(seed=2):
    rng = np.random.default_rng(seed)
    acc = nml.CompAccumulator()
    for _ in range(100):
        batch = rng.normal(-2, 3, size=32)
        acc = nml.comp_increment(acc, batch)
        if np.any(nml.code_length(acc, batch) < 0):
            return False, "negative code length"
    return True, "all code lengths >= 0"


def check_log_sum_exp_extremes():
    cases = [((0.0, 0.0), math.log(2)), ((nml.NEG_INF, -3.5), -3.5),
             ((-1000.0, -1000.5), -1000.0 + math.log1p(math.exp(-0.5))),
             ((700.0, 700.0), 700.0 + math.log(2)), ((-745.0, 709.0), 709.0)]
    worst = max(abs(nml.log_sum_exp(*args) - want) for args, want in cases)
    return worst <= 1e-12, f"max error {worst:.3g}"


def check_sn_rn_reduction(seed=3):
    rng = np.random.default_rng(seed)
    rn = norms.RegularityNorm(6)
    sn = norms.RegularityNorm(6, saliency=nml.SaliencyTable({c: 3.7 for c in range(10)}, 3.7))
    for _ in range(5):
        x = rng.normal(size=(8, 6))
        labels = rng.integers(0, 10, size=8)
        _, l_rn = rn.forward(x)
        _, l_sn = sn.forward(x, labels=labels)
        if not np.allclose(l_rn, l_sn, rtol=0, atol=1e-9):
            return False, f"max difference {np.abs(l_rn - l_sn).max():.3g}"
    return True, "SN with constant saliency equals RN"


def numeric_grad(f, x, h=1e-5):
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def grad_rel_error(analytic, numeric):
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-8)
    return float(np.abs(analytic - numeric).max() / scale)


def network_gradient_error(variant, seed=0, sizes=(6, 4, 3), batch=5):
    """Max relative error between backprop and central differences on a toy net."""
    rng = np.random.default_rng(seed)
    net = nn.Network(nn.NetworkConfig(list(sizes), variant, seed=seed, rescale=False))
    x = rng.normal(size=(batch, sizes[0]))
    y = rng.integers(0, sizes[-1], size=batch)
    labels = y if variant is norms.NormVariant.SN else None
    if variant is norms.NormVariant.SN:
        net.set_saliency(nml.SaliencyTable({c: 1.0 + c for c in range(sizes[-1])}))
    # two training batches seed statistics and move past warm-up, then pin L
    for _ in range(2):
        _, cache = nn.forward(net, x, True, labels)
    net.freeze_regularity(cache["l_values"])

    def loss():
        logits, _ = nn.forward(net, x, True, labels)
        return nn.softmax_cross_entropy(logits, y)[0]

    logits, cache = nn.forward(net, x, True, labels)
    _, dlogits = nn.softmax_cross_entropy(logits, y)
    grads = nn.backward(net, cache, dlogits)
    worst = 0.0
    for name, p in net.parameters().items():
        worst = max(worst, grad_rel_error(grads[name], numeric_grad(loss, p)))
    net.freeze_regularity(None)
    return worst


def check_gradients(tol=1e-4):
    errors = {v.value: network_gradient_error(v) for v in norms.NormVariant}
    worst = max(errors.values())
    return worst < tol, ", ".join(f"{k}={e:.2g}" for k, e in errors.items())


def check_softmax_gradient(tol=1e-6, seed=4):
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=(4, 5))
    y = rng.integers(0, 5, size=4)
    _, analytic = nn.softmax_cross_entropy(logits, y)
    numeric = numeric_grad(lambda: nn.softmax_cross_entropy(logits, y)[0], logits)
    err = grad_rel_error(analytic, numeric)
    return err < tol, f"relative error {err:.3g}"


def check_idx_round_trip(seed=5):
    rng = np.random.default_rng(seed)
    for shape in [(7,), (3, 4, 5), (0,), (1, 28, 28)]:
        arr = rng.integers(0, 256, size=shape, dtype=np.uint8)
        back = data.parse_idx(data.serialize_idx(arr))
        if back.shape != arr.shape or not np.array_equal(back, arr):
            return False, f"round trip failed for shape {shape}"
    return True, "serialize -> parse is the identity"


CHECKS = [
    ("welford_two_pass_oracle", "1e-9 relative", check_welford_oracle),
    ("comp_log_sum_oracle", "1e-9 absolute", check_comp_oracle),
    ("code_length_nonnegative", "exact", check_code_length_nonnegative),
    ("log_sum_exp_extremes", "1e-12 absolute", check_log_sum_exp_extremes),
    ("sn_rn_reduction", "1e-9 absolute", check_sn_rn_reduction),
    ("network_gradients", "1e-4 relative", check_gradients),
    ("softmax_ce_gradient", "1e-6 relative", check_softmax_gradient),
    ("idx_round_trip", "exact", check_idx_round_trip),
]


def run_checks():
    results = []
    for name, tol, fn in CHECKS:
        try:
            ok, detail = fn()
        except Exception as exc:
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        results.append({"check": name, "tolerance": tol, "passed": bool(ok), "detail": detail})
    return results

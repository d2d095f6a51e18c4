"""Normalization layers: the regularity family (RN, SN, RBN, RLN, LN+RN) and
the BN / LN / WN baselines.

Every layer exposes ``forward(x, train, labels=None) -> (y, cache)`` and
``backward(dy, cache) -> (dx, grads)`` where ``grads`` maps parameter names to
gradient arrays. Regularity layers have no trainable parameters.
"""

from __future__ import annotations

import copy
import math
from collections import deque
from enum import Enum

import numpy as np

from .nml import (
    DEFAULT_SIGMA_FLOOR,
    LOG_2PI,
    NEG_INF,
    CompAccumulator,
    RunningGaussian,
    SaliencyTable,
    fit_mixture_em,
    merge_moments,
)


class NormVariant(str, Enum):
    NONE = "none"
    BN = "bn"
    LN = "ln"
    WN = "wn"
    RN = "rn"
    SN = "sn"
    RBN = "rbn"
    RLN = "rln"
    LN_RN = "ln_rn"

    @classmethod
    def parse(cls, name: str) -> "NormVariant":
        key = name.strip().lower().replace("+", "_").replace("-", "_")
        if key in ("baseline", ""):
            key = "none"
        return cls(key)

    @property
    def is_regularity(self) -> bool:
        return self in (NormVariant.RN, NormVariant.SN, NormVariant.RBN,
                        NormVariant.RLN, NormVariant.LN_RN)

    @property
    def label(self) -> str:
        return {"none": "baseline", "ln_rn": "LN+RN"}.get(self.value, self.value.upper())


class AxisScheme(str, Enum):
    ELEMENTWISE = "elementwise"
    PER_NEURON = "per_neuron"
    PER_SAMPLE_LAYER = "per_sample_layer"


def _check_batch(x, width):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != width:
        raise ValueError(f"expected a (batch, {width}) matrix, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite activations")
    return x


def _column_log_sum_exp(log_sum, terms):
    """Per-column log(exp(log_sum) + sum_rows exp(terms))."""
    hi = np.maximum(log_sum, terms.max(axis=0))
    total = np.exp(terms - hi).sum(axis=0) + np.exp(log_sum - hi)
    return np.maximum(hi + np.log(total), log_sum)


class RegularityNorm:
    """Regularity normalization ``y = L * x`` with ``L = COMP - log P(x)``.

    ``axis_scheme`` picks the implicit space: one estimator for the whole
    layer and batch (RN/SN), one per neuron (RBN), or a per-sample fit over the
    layer with one shared accumulator (RLN). Pass ``saliency`` for SN. With
    ``observe_only`` the layer only tracks statistics and returns ``x``.
    """

    def __init__(self, width, axis_scheme=AxisScheme.ELEMENTWISE, *, saliency=None,
                 warmup_batches=1, sigma_floor=DEFAULT_SIGMA_FLOOR, prior="gaussian",
                 mixture_k=2, em_iterations=20, refit_every=50,
                 history_capacity=100_000, initial_params=None, rescale=False,
                 observe_only=False):
        self.width = int(width)
        self.axis_scheme = AxisScheme(axis_scheme)
        if self.axis_scheme is AxisScheme.PER_SAMPLE_LAYER and self.width < 2:
            raise ValueError("per-sample layer fits need at least 2 features")
        if prior not in ("gaussian", "mixture"):
            raise ValueError(f"unknown prior {prior!r}")
        if prior == "mixture" and self.axis_scheme is not AxisScheme.ELEMENTWISE:
            raise ValueError("mixture priors are only supported elementwise")
        self.saliency = saliency
        self.warmup_batches = int(warmup_batches)
        self.sigma_floor = float(sigma_floor)
        self.prior = prior
        self.mixture_k = mixture_k
        self.em_iterations = em_iterations
        self.refit_every = refit_every
        self.initial_params = initial_params
        self.rescale = rescale
        self.observe_only = observe_only
        self.train_mode = True
        self.frozen_l = None
        self.params = {}

        n = {AxisScheme.ELEMENTWISE: 1, AxisScheme.PER_NEURON: self.width,
             AxisScheme.PER_SAMPLE_LAYER: 1}[self.axis_scheme]
        self.count = np.zeros(n)
        self.mean = np.zeros(n)
        self.m2 = np.zeros(n)
        self.log_sum = np.full(n, NEG_INF)
        self.comp_count = np.zeros(n, dtype=np.int64)
        self.batches_seen = 0
        self.l_mean = 0.0
        self.l_count = 0
        self.mixture = None
        self._history = deque(maxlen=history_capacity) if prior == "mixture" else None

    # state views

    @property
    def estimators(self):
        """(RunningGaussian, CompAccumulator) pairs, one per implicit space."""
        out = []
        for i in range(self.count.size):
            c = int(self.count[i])
            g = RunningGaussian(c, float(self.mean[i]) if c else 0.0,
                                float(self.m2[i]) if c else 0.0, self.sigma_floor)
            out.append((g, CompAccumulator(float(self.log_sum[i]), int(self.comp_count[i]))))
        return out

    @property
    def comp(self) -> float:
        """Layer COMP: the log of the summed likelihood mass over all estimators."""
        ls = self.log_sum[np.isfinite(self.log_sum)]
        if ls.size == 0:
            return NEG_INF
        hi = ls.max()
        return float(hi + np.log(np.exp(ls - hi).sum()))

    def load_estimators(self, pairs, batches_seen=None):
        """Overwrite state from (RunningGaussian, CompAccumulator) pairs.

        ``batches_seen`` defaults to ``warmup_batches`` so the next training
        batch is already past warm-up.
        """
        pairs = list(pairs)
        if len(pairs) != self.count.size:
            raise ValueError(f"expected {self.count.size} estimator pairs, got {len(pairs)}")
        for i, (g, acc) in enumerate(pairs):
            self.count[i], self.mean[i], self.m2[i] = g.count, g.mean, g.m2
            self.log_sum[i], self.comp_count[i] = acc.log_sum, acc.count
        self.batches_seen = self.warmup_batches if batches_seen is None else batches_seen
        return self

    def clone(self) -> "RegularityNorm":
        return copy.deepcopy(self)

    def freeze(self, l_values):
        """Replay fixed L values on every forward (state untouched)."""
        self.frozen_l = None if l_values is None else np.array(l_values, dtype=np.float64)

    # core

    def _log_prob(self, x):
        """log P(x | theta_t) against the current estimator, same shape as x."""
        if self.axis_scheme is AxisScheme.PER_SAMPLE_LAYER:
            mu = x.mean(axis=1, keepdims=True)
            sigma = np.maximum(x.std(axis=1, keepdims=True), self.sigma_floor)
            z = (x - mu) / sigma
            return -0.5 * LOG_2PI - np.log(sigma) - 0.5 * z * z
        cols = x.reshape(-1, 1) if self.axis_scheme is AxisScheme.ELEMENTWISE else x
        if self.mixture is not None:
            logp = self.mixture.log_pdf(cols)
        elif self.count[0] == 0 and self.initial_params is not None:
            mu, sigma = self.initial_params
            z = (cols - mu) / sigma
            logp = -0.5 * LOG_2PI - math.log(sigma) - 0.5 * z * z
        else:
            with np.errstate(invalid="ignore", divide="ignore"):
                sigma = np.maximum(np.sqrt(self.m2 / self.count), self.sigma_floor)
            z = (cols - self.mean) / sigma
            logp = -0.5 * LOG_2PI - np.log(sigma) - 0.5 * z * z
        return logp.reshape(x.shape)

    def _saliency_terms(self, labels, batch):
        if self.saliency is None:
            return None
        if labels is None:
            if self.train_mode:
                raise ValueError("saliency normalization needs sample labels in training")
            return np.full((batch, 1), math.log(self.saliency.default_weight))
        labels = list(np.asarray(labels).tolist())
        if len(labels) != batch:
            raise ValueError(f"got {len(labels)} labels for a batch of {batch}")
        return self.saliency.log_weights(labels)[:, None]

    def _absorb_stats(self, x):
        if self.axis_scheme is AxisScheme.PER_SAMPLE_LAYER:
            return
        cols = x.reshape(-1, 1) if self.axis_scheme is AxisScheme.ELEMENTWISE else x
        n_b = cols.shape[0]
        mean_b = cols.mean(axis=0)
        m2_b = ((cols - mean_b) ** 2).sum(axis=0)
        self.count, self.mean, self.m2 = merge_moments(
            self.count, self.mean, self.m2, n_b, mean_b, m2_b)
        if self._history is not None:
            self._history.extend(cols.ravel().tolist())

    def _maybe_refit(self):
        if self._history is None or len(self._history) < self.mixture_k:
            return
        if self.mixture is None or self.batches_seen % self.refit_every == 0:
            self.mixture = fit_mixture_em(np.fromiter(self._history, float),
                                          self.mixture_k, self.em_iterations,
                                          self.sigma_floor)[0]

    def _increment(self, logp):
        if self.axis_scheme is AxisScheme.PER_NEURON:
            terms = logp
        else:
            terms = logp.reshape(-1, 1)
        self.log_sum = _column_log_sum_exp(self.log_sum, terms)
        self.comp_count = self.comp_count + terms.shape[0]

    def _code_length(self, logp):
        if self.axis_scheme is AxisScheme.PER_NEURON:
            return self.log_sum[None, :] - logp
        return self.log_sum[0] - logp

    def forward(self, x, train=None, labels=None):
        if train is not None:
            self.train_mode = bool(train)
        x = _check_batch(x, self.width)
        if self.frozen_l is not None:
            if self.frozen_l.shape != x.shape:
                raise ValueError("frozen L does not match the input shape")
            return x * self.frozen_l, self.frozen_l
        sal = self._saliency_terms(labels, x.shape[0])

        if not self.train_mode:
            if self.comp_count[0] == 0 or self.observe_only:
                ones = np.ones_like(x)
                return x, ones
            logp = self._log_prob(x)
            if sal is not None:
                logp = logp + sal
            l_values = self._code_length(logp)
            if self.rescale and self.l_mean > 0:
                l_values = l_values / self.l_mean
            return x * l_values, l_values

        warming = self.batches_seen < self.warmup_batches
        empty = (self.axis_scheme is not AxisScheme.PER_SAMPLE_LAYER
                 and self.count[0] == 0 and self.initial_params is None)
        if empty:
            # no history yet: score the first batch against its own fit
            self._absorb_stats(x)
        logp = self._log_prob(x)
        if sal is not None:
            logp = logp + sal
        self._increment(logp)
        if warming or self.observe_only:
            l_values = np.ones_like(x)
        else:
            l_values = self._code_length(logp)
            if self.rescale:
                self.l_count += l_values.size
                self.l_mean += (l_values.mean() - self.l_mean) * (l_values.size / self.l_count)
                l_values = l_values / self.l_mean
        if not empty:
            self._absorb_stats(x)
        self.batches_seen += 1
        self._maybe_refit()
        if self.observe_only:
            return x, l_values
        return x * l_values, l_values

    def backward(self, dy, l_values):
        dy = np.asarray(dy, dtype=np.float64)
        if dy.shape != np.shape(l_values):
            raise ValueError(f"gradient shape {dy.shape} != L shape {np.shape(l_values)}")
        return dy * l_values, {}


def rn_forward(x, state: RegularityNorm, labels=None):
    """Functional form: returns ``(y, new_state, l_values)``; ``state`` is untouched."""
    new = state.clone()
    y, l_values = new.forward(x, labels=labels)
    return y, new, l_values


def rn_backward(dy, l_values):
    return np.asarray(dy, dtype=np.float64) * l_values


def sn_forward(x, state: RegularityNorm, sample_labels):
    if state.saliency is None:
        raise ValueError("saliency normalization needs a saliency table")
    if sample_labels is None:
        raise ValueError("saliency normalization needs sample labels")
    return rn_forward(x, state, labels=sample_labels)


def rbn_forward(x, state: RegularityNorm):
    if state.axis_scheme is not AxisScheme.PER_NEURON:
        raise ValueError("RBN needs a per-neuron state")
    return rn_forward(x, state)


def rln_forward(x, state: RegularityNorm):
    if state.axis_scheme is not AxisScheme.PER_SAMPLE_LAYER:
        raise ValueError("RLN needs a per-sample-layer state")
    return rn_forward(x, state)


class LayerNorm:
    def __init__(self, width, eps=1e-5):
        self.width = width
        self.eps = eps
        self.params = {"gain": np.ones(width), "bias": np.zeros(width)}

    def forward(self, x, train=None, labels=None):
        x = _check_batch(x, self.width)
        mu = x.mean(axis=1, keepdims=True)
        var = x.var(axis=1, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mu) * inv_std
        return self.params["gain"] * xhat + self.params["bias"], (xhat, inv_std)

    def backward(self, dy, cache):
        xhat, inv_std = cache
        if dy.shape != xhat.shape:
            raise ValueError(f"gradient shape {dy.shape} != activation shape {xhat.shape}")
        grads = {"gain": (dy * xhat).sum(axis=0), "bias": dy.sum(axis=0)}
        dxhat = dy * self.params["gain"]
        dx = inv_std * (dxhat - dxhat.mean(axis=1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=1, keepdims=True))
        return dx, grads


class BatchNorm:
    def __init__(self, width, momentum=0.9, eps=1e-5):
        self.width = width
        self.momentum = momentum
        self.eps = eps
        self.params = {"gamma": np.ones(width), "beta": np.zeros(width)}
        self.running_mean = np.zeros(width)
        self.running_var = np.ones(width)

    def forward(self, x, train=True, labels=None):
        x = _check_batch(x, self.width)
        if train:
            if x.shape[0] < 2:
                raise ValueError("batch normalization needs at least 2 samples in training")
            mu = x.mean(axis=0)
            var = x.var(axis=0)
            self.running_mean = self.momentum * self.running_mean + (1 - self.momentum) * mu
            self.running_var = self.momentum * self.running_var + (1 - self.momentum) * var
        else:
            mu, var = self.running_mean, self.running_var
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mu) * inv_std
        return self.params["gamma"] * xhat + self.params["beta"], (xhat, inv_std, train)

    def backward(self, dy, cache):
        xhat, inv_std, train = cache
        if dy.shape != xhat.shape:
            raise ValueError(f"gradient shape {dy.shape} != activation shape {xhat.shape}")
        grads = {"gamma": (dy * xhat).sum(axis=0), "beta": dy.sum(axis=0)}
        dxhat = dy * self.params["gamma"]
        if not train:
            return dxhat * inv_std, grads
        dx = inv_std * (dxhat - dxhat.mean(axis=0) - xhat * (dxhat * xhat).mean(axis=0))
        return dx, grads


class LayerNormRegularity:
    """LN followed by RN on the LN output."""

    def __init__(self, ln: LayerNorm, rn: RegularityNorm):
        self.ln = ln
        self.rn = rn
        self.params = ln.params

    def forward(self, x, train=None, labels=None):
        h, ln_cache = self.ln.forward(x)
        y, l_values = self.rn.forward(h, train, labels)
        return y, (ln_cache, l_values)

    def backward(self, dy, cache):
        ln_cache, l_values = cache
        dh, _ = self.rn.backward(dy, l_values)
        return self.ln.backward(dh, ln_cache)


def ln_rn_forward(x, ln: LayerNorm, rn_state: RegularityNorm):
    h, _ = ln.forward(x)
    return rn_forward(h, rn_state)


def wn_reparameterize(g, v):
    """w_row = g_row * v_row / ||v_row||."""
    v = np.asarray(v, dtype=np.float64)
    norms = np.linalg.norm(v, axis=1)
    if np.any(norms == 0):
        raise ValueError("weight normalization needs nonzero rows")
    return (np.asarray(g, dtype=np.float64) / norms)[:, None] * v


def wn_backward(g, v, dw):
    """Chain rule from dL/dw to (dL/dg, dL/dv)."""
    norms = np.linalg.norm(v, axis=1)
    vhat = v / norms[:, None]
    dg = (dw * vhat).sum(axis=1)
    dv = (g / norms)[:, None] * (dw - dg[:, None] * vhat)
    return dg, dv


def saliency_from_labels(labels, mode: str, num_classes: int = 10) -> SaliencyTable | None:
    """Build a class saliency table from training labels.

    ``mode`` is ``uniform``, ``class_frequency`` or ``inverse_class_frequency``.
    Classes absent from ``labels`` get a small pseudo-count so weights stay positive.
    The default weight (used when no label is available, i.e. at evaluation)
    is the mean class weight.
    """
    if mode == "uniform":
        return SaliencyTable({c: 1.0 for c in range(num_classes)}, 1.0)
    counts = np.bincount(np.asarray(labels, dtype=np.int64), minlength=num_classes)
    freq = (counts + 0.5) / (counts.sum() + 0.5 * num_classes)
    if mode == "class_frequency":
        weights = freq
    elif mode == "inverse_class_frequency":
        weights = 1.0 / freq
    else:
        raise ValueError(f"unknown saliency mode {mode!r}")
    return SaliencyTable({c: float(w) for c, w in enumerate(weights)}, float(weights.mean()))

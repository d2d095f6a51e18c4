"""Feedforward ReLU network with a pluggable normalization slot, trained by
SGD with classical momentum. Everything is float64."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .norms import (
    AxisScheme,
    BatchNorm,
    LayerNorm,
    LayerNormRegularity,
    NormVariant,
    RegularityNorm,
    wn_backward,
    wn_reparameterize,
)


@dataclass
class NetworkConfig:
    layer_sizes: list = field(default_factory=lambda: [784, 1000, 1000, 10])
    norm_variant: NormVariant = NormVariant.NONE
    learning_rate: float = 0.01
    momentum: float = 0.9
    seed: int = 0
    batch_size: int = 128
    warmup_batches: int = 1
    sigma_floor: float = 1e-3
    bn_momentum: float = 0.9
    ln_eps: float = 1e-5
    prior: str = "gaussian"
    rescale: bool = False
    shadow: bool = False
    init: str = "he"

    def __post_init__(self):
        self.norm_variant = NormVariant.parse(self.norm_variant) \
            if isinstance(self.norm_variant, str) else NormVariant(self.norm_variant)
        sizes = [int(s) for s in self.layer_sizes]
        if len(sizes) < 2 or any(s < 1 for s in sizes):
            raise ValueError(f"invalid layer sizes {self.layer_sizes}")
        self.layer_sizes = sizes
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")


@dataclass
class TrainRecord:
    step: int
    train_loss: float
    comp: list
    shadow_comp: list = field(default_factory=list)


def init_weights(n_in, n_out, rng, scheme="he"):
    if scheme == "he":
        return rng.normal(0.0, np.sqrt(2.0 / n_in), size=(n_out, n_in))
    if scheme == "uniform":
        bound = 1.0 / np.sqrt(n_in)
        return rng.uniform(-bound, bound, size=(n_out, n_in))
    raise ValueError(f"unknown init scheme {scheme!r}")


class Dense:
    def __init__(self, n_in, n_out, rng, init="he"):
        self.params = {"W": init_weights(n_in, n_out, rng, init), "b": np.zeros(n_out)}

    @property
    def weight(self):
        return self.params["W"]

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.weight.shape[1]:
            raise ValueError(f"expected width {self.weight.shape[1]}, got shape {x.shape}")
        return x @ self.weight.T + self.params["b"], x

    def backward(self, dy, x):
        return dy @ self.weight, {"W": dy.T @ x, "b": dy.sum(axis=0)}


class WeightNormDense(Dense):
    """Dense layer with w = g * v / ||v||, initialized so w equals the He draw."""

    def __init__(self, n_in, n_out, rng, init="he"):
        super().__init__(n_in, n_out, rng, init)
        v = self.params.pop("W")
        self.params = {"v": v, "g": np.linalg.norm(v, axis=1), "b": self.params["b"]}

    @property
    def weight(self):
        return wn_reparameterize(self.params["g"], self.params["v"])

    def backward(self, dy, x):
        w = self.weight
        dg, dv = wn_backward(self.params["g"], self.params["v"], dy.T @ x)
        return dy @ w, {"g": dg, "v": dv, "b": dy.sum(axis=0)}


def _make_norm(config: NetworkConfig, width):
    variant = config.norm_variant
    rn_kwargs = dict(warmup_batches=config.warmup_batches, sigma_floor=config.sigma_floor,
                     rescale=config.rescale)
    if variant is NormVariant.BN:
        return BatchNorm(width, momentum=config.bn_momentum)
    if variant is NormVariant.LN:
        return LayerNorm(width, eps=config.ln_eps)
    if variant in (NormVariant.RN, NormVariant.SN):
        # SN gets its saliency table later via Network.set_saliency
        return RegularityNorm(width, AxisScheme.ELEMENTWISE, prior=config.prior, **rn_kwargs)
    if variant is NormVariant.RBN:
        return RegularityNorm(width, AxisScheme.PER_NEURON, **rn_kwargs)
    if variant is NormVariant.RLN:
        return RegularityNorm(width, AxisScheme.PER_SAMPLE_LAYER, **rn_kwargs)
    if variant is NormVariant.LN_RN:
        return LayerNormRegularity(
            LayerNorm(width, eps=config.ln_eps),
            RegularityNorm(width, AxisScheme.ELEMENTWISE, prior=config.prior, **rn_kwargs))
    return None


class Network:
    """Hidden blocks are affine -> norm -> ReLU; the output block is affine only."""

    def __init__(self, config: NetworkConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        sizes = config.layer_sizes
        dense_cls = WeightNormDense if config.norm_variant is NormVariant.WN else Dense
        self.dense = [dense_cls(sizes[i], sizes[i + 1], rng, config.init) for i in range(len(sizes) - 1)]
        self.norms = [_make_norm(config, w) for w in sizes[1:-1]]
        self.shadows = []
        if config.shadow and not config.norm_variant.is_regularity:
            self.shadows = [RegularityNorm(w, observe_only=True,
                                           warmup_batches=config.warmup_batches,
                                           sigma_floor=config.sigma_floor)
                            for w in sizes[1:-1]]
        self.velocity = {k: np.zeros_like(v) for k, v in self.parameters().items()}
        self._version = 0

    @property
    def layer_ids(self):
        return [f"fc{i + 1}" for i in range(len(self.norms))]

    def parameters(self):
        out = {}
        for i, layer in enumerate(self.dense):
            for k, v in layer.params.items():
                out[f"dense{i}.{k}"] = v
        for i, norm in enumerate(self.norms):
            if norm is not None:
                for k, v in norm.params.items():
                    out[f"norm{i}.{k}"] = v
        return out

    def regularity_layers(self):
        out = []
        for norm in self.norms:
            if isinstance(norm, RegularityNorm):
                out.append(norm)
            elif isinstance(norm, LayerNormRegularity):
                out.append(norm.rn)
        return out

    def comp_snapshot(self):
        return [layer.comp for layer in self.regularity_layers()]

    def shadow_snapshot(self):
        return [layer.comp for layer in self.shadows]

    def set_saliency(self, table):
        for layer in self.regularity_layers():
            layer.saliency = table

    def freeze_regularity(self, l_values):
        """Pin every regularity layer to the given L matrices (None to release)."""
        layers = self.regularity_layers()
        if l_values is None:
            l_values = [None] * len(layers)
        for layer, lv in zip(layers, l_values):
            layer.freeze(lv)

    def set_train(self, train: bool):
        for layer in self.regularity_layers() + self.shadows:
            layer.train_mode = train


def init_network(config: NetworkConfig) -> Network:
    return Network(config)


def forward(net: Network, x_batch, train_mode=True, labels=None):
    """Return ``(logits, cache)``; ``cache`` feeds :func:`backward`."""
    h = np.asarray(x_batch, dtype=np.float64)
    if h.ndim != 2 or h.shape[1] != net.config.layer_sizes[0]:
        raise ValueError(f"expected input width {net.config.layer_sizes[0]}, got shape {h.shape}")
    net.set_train(train_mode)
    blocks = []
    l_values = []
    last = len(net.dense) - 1
    for i, dense in enumerate(net.dense):
        z, dense_cache = dense.forward(h)
        if not np.all(np.isfinite(z)):
            raise FloatingPointError(f"non-finite pre-activations at layer {i + 1}")
        if i == last:
            blocks.append((dense_cache, None, None))
            h = z
            break
        if net.shadows:
            net.shadows[i].forward(z, train_mode)
        norm = net.norms[i]
        norm_cache = None
        if norm is not None:
            z, norm_cache = norm.forward(z, train_mode, labels) if not isinstance(norm, BatchNorm) \
                else norm.forward(z, train_mode)
            if isinstance(norm, RegularityNorm):
                l_values.append(norm_cache)
            elif isinstance(norm, LayerNormRegularity):
                l_values.append(norm_cache[1])
            if not np.all(np.isfinite(z)):
                raise FloatingPointError(f"non-finite normalized activations at layer {i + 1}")
        mask = z > 0
        blocks.append((dense_cache, norm_cache, mask))
        h = z * mask
    net._version += 1
    return h, {"blocks": blocks, "l_values": l_values, "version": net._version}


def softmax_cross_entropy(logits, labels):
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ValueError("one label per row required")
    if np.any(labels < 0) or np.any(labels >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    log_probs = shifted - log_z[:, None]
    loss = -log_probs[np.arange(n), labels].mean()
    dlogits = np.exp(log_probs)
    dlogits[np.arange(n), labels] -= 1.0
    return float(loss), dlogits / n


def backward(net: Network, cache, dlogits):
    """Reverse-mode gradients for every parameter in ``net.parameters()``."""
    if cache.get("version") != net._version:
        raise ValueError("stale cache: the network ran another forward since")
    grads = {}
    dh = np.asarray(dlogits, dtype=np.float64)
    for i in reversed(range(len(net.dense))):
        dense_cache, norm_cache, mask = cache["blocks"][i]
        if mask is not None:
            if dh.shape != mask.shape:
                raise ValueError(f"gradient shape {dh.shape} != activation shape {mask.shape}")
            dh = dh * mask
            norm = net.norms[i]
            if norm is not None:
                dh, norm_grads = norm.backward(dh, norm_cache)
                for k, g in norm_grads.items():
                    grads[f"norm{i}.{k}"] = g
        dh, dense_grads = net.dense[i].backward(dh, dense_cache)
        for k, g in dense_grads.items():
            grads[f"dense{i}.{k}"] = g
    return grads


def sgd_momentum_step(net: Network, gradients, lr=None, momentum=None):
    """Classical momentum: v <- mu * v + g ; p <- p - lr * v (in place)."""
    lr = net.config.learning_rate if lr is None else lr
    momentum = net.config.momentum if momentum is None else momentum
    params = net.parameters()
    for name, g in gradients.items():
        p = params[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, expected {p.shape}")
        v = net.velocity[name]
        v *= momentum
        v += g
        p -= lr * v
    return net


def predict(net: Network, images, chunk=2000):
    out = []
    for start in range(0, len(images), chunk):
        logits, _ = forward(net, images[start:start + chunk], train_mode=False)
        out.append(np.argmax(logits, axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def evaluate(net: Network, images, labels) -> float:
    """Test error in percent (argmax, ties to the lowest class index)."""
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("cannot evaluate on an empty set")
    pred = predict(net, images)
    return 100.0 * float(np.mean(pred != labels))


def confusion_matrix(net: Network, images, labels, num_classes=None):
    num_classes = num_classes or net.config.layer_sizes[-1]
    pred = predict(net, images)
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(labels, dtype=np.int64), pred), 1)
    return cm


def train_step(net: Network, images, labels):
    logits, cache = forward(net, images, train_mode=True, labels=labels)
    loss, dlogits = softmax_cross_entropy(logits, labels)
    grads = backward(net, cache, dlogits)
    sgd_momentum_step(net, grads)
    return loss


def train_epoch(net: Network, batches, step_offset=0):
    """One pass over ``batches``; returns per-batch :class:`TrainRecord` s."""
    records = []
    for step, (images, labels) in enumerate(batches, start=step_offset):
        loss = train_step(net, images, labels)
        records.append(TrainRecord(step, loss, net.comp_snapshot(), net.shadow_snapshot()))
    return net, records

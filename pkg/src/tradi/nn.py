"""Small feed-forward networks over a flat parameter vector.

A :class:`Network` is a chain of dense, ReLU, dropout and batch-norm layers.
All trainable tensors live in one contiguous float64 array (``ParamVector``)
so that optimizers and the weight tracker can treat the model as a vector of
``K`` scalars.  Backpropagation is written out by hand for each layer kind.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, NumericOverflowError

LAYER_KINDS = ("dense", "relu", "dropout", "batchnorm")
BN_EPS = 1e-5
VAR_FLOOR = 1e-6


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_dim: int
    out_dim: int
    dropout_rate: float = 0.0

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}")
        if self.in_dim < 1 or self.out_dim < 1:
            raise ConfigError(f"{self.kind} layer needs positive dims, got {self.in_dim}->{self.out_dim}")
        if self.kind != "dense" and self.in_dim != self.out_dim:
            raise ConfigError(f"{self.kind} layer must preserve width, got {self.in_dim}->{self.out_dim}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")

    @classmethod
    def dense(cls, in_dim, out_dim):
        return cls("dense", in_dim, out_dim)

    @classmethod
    def relu(cls, dim):
        return cls("relu", dim, dim)

    @classmethod
    def dropout(cls, dim, rate):
        return cls("dropout", dim, dim, rate)

    @classmethod
    def batchnorm(cls, dim):
        return cls("batchnorm", dim, dim)

    def to_dict(self):
        d = {"kind": self.kind, "in_dim": self.in_dim, "out_dim": self.out_dim}
        if self.kind == "dropout":
            d["dropout_rate"] = self.dropout_rate
        return d


def mlp_specs(in_dim, hidden, out_dim, *, batchnorm=False, dropout=0.0):
    """Dense/ReLU stack with optional batch-norm and dropout after each hidden layer."""
    specs = []
    prev = in_dim
    for width in hidden:
        specs.append(LayerSpec.dense(prev, width))
        specs.append(LayerSpec.relu(width))
        if batchnorm:
            specs.append(LayerSpec.batchnorm(width))
        if dropout > 0:
            specs.append(LayerSpec.dropout(width, dropout))
        prev = width
    specs.append(LayerSpec.dense(prev, out_dim))
    return specs


@dataclass(frozen=True)
class ParamBlock:
    """One trainable tensor inside the flat vector."""

    layer: int
    name: str
    offset: int
    shape: tuple
    fan_in: int

    @property
    def length(self):
        return int(np.prod(self.shape))

    @property
    def stop(self):
        return self.offset + self.length


@dataclass
class ParamVector:
    values: np.ndarray
    layout: tuple

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.layout = tuple(self.layout)
        pos = 0
        for block in self.layout:
            if block.offset != pos:
                raise ContractError(f"layout block {block.name}@{block.layer} is not contiguous")
            pos = block.stop
        if pos != self.values.size:
            raise ContractError(f"layout covers {pos} values but vector has {self.values.size}")

    @property
    def size(self):
        return self.values.size

    def tensors(self):
        """Views of the flat array keyed by ``(layer, name)``."""
        return unflatten(self.values, self.layout)

    @classmethod
    def from_tensors(cls, tensors, layout):
        return cls(flatten(tensors, layout), layout)

    def copy(self):
        return ParamVector(self.values.copy(), self.layout)

    def layer_slices(self):
        """Map each layer id to the slice of ``values`` it owns."""
        out = {}
        for block in self.layout:
            start, stop = out.get(block.layer, (block.offset, block.stop))
            out[block.layer] = (min(start, block.offset), max(stop, block.stop))
        return {k: slice(a, b) for k, (a, b) in out.items()}


def unflatten(values, layout):
    return {(b.layer, b.name): values[b.offset:b.stop].reshape(b.shape) for b in layout}


def flatten(tensors, layout):
    total = sum(b.length for b in layout)
    out = np.empty(total)
    for b in layout:
        t = np.asarray(tensors[(b.layer, b.name)], dtype=np.float64)
        if t.shape != tuple(b.shape):
            raise ContractError(f"tensor {(b.layer, b.name)} has shape {t.shape}, expected {b.shape}")
        out[b.offset:b.stop] = t.ravel()
    return out


@dataclass
class BatchNormState:
    mean: dict = field(default_factory=dict)
    var: dict = field(default_factory=dict)
    momentum: float = 0.1

    def copy(self):
        return BatchNormState(
            {k: v.copy() for k, v in self.mean.items()},
            {k: v.copy() for k, v in self.var.items()},
            self.momentum,
        )


@dataclass
class ForwardCache:
    mode: str
    inputs: list
    output_shape: tuple
    masks: dict = field(default_factory=dict)
    bn: dict = field(default_factory=dict)


def _values(params):
    if isinstance(params, ParamVector):
        return params.values
    return np.asarray(params, dtype=np.float64)


def _rng(rng):
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


class Network:
    """A chain of layers with a fixed flat parameter layout."""

    def __init__(self, specs):
        specs = [s if isinstance(s, LayerSpec) else LayerSpec(**s) for s in specs]
        if not specs:
            raise ConfigError("network needs at least one layer")
        for i in range(1, len(specs)):
            if specs[i - 1].out_dim != specs[i].in_dim:
                raise ConfigError(
                    f"layer {i - 1} outputs {specs[i - 1].out_dim} features but layer {i} expects {specs[i].in_dim}"
                )
        self.specs = tuple(specs)
        layout = []
        pos = 0
        for i, spec in enumerate(self.specs):
            if spec.kind == "dense":
                blocks = [("W", (spec.in_dim, spec.out_dim)), ("b", (spec.out_dim,))]
                fan_in = spec.in_dim
            elif spec.kind == "batchnorm":
                blocks = [("gamma", (spec.in_dim,)), ("beta", (spec.in_dim,))]
                fan_in = spec.in_dim
            else:
                continue
            for name, shape in blocks:
                block = ParamBlock(i, name, pos, shape, fan_in)
                layout.append(block)
                pos = block.stop
        if pos == 0:
            raise ConfigError("network has no trainable parameters")
        self.layout = tuple(layout)
        self.K = pos

    @property
    def in_dim(self):
        return self.specs[0].in_dim

    @property
    def out_dim(self):
        return self.specs[-1].out_dim

    @property
    def has_batchnorm(self):
        return any(s.kind == "batchnorm" for s in self.specs)

    @property
    def has_dropout(self):
        return any(s.kind == "dropout" and s.dropout_rate > 0 for s in self.specs)

    def init_variances(self):
        """He variance ``2 / fan_in`` for every trainable scalar."""
        var = np.empty(self.K)
        for b in self.layout:
            var[b.offset:b.stop] = 2.0 / b.fan_in
        return var

    def init_weights(self, rng_seed):
        """He-normal dense weights, zero biases, unit batch-norm scales.

        Returns the parameter vector and the per-weight prior variances that
        seed the tracker.
        """
        rng = _rng(rng_seed)
        values = np.zeros(self.K)
        for b in self.layout:
            if b.name == "W":
                values[b.offset:b.stop] = rng.normal(0.0, np.sqrt(2.0 / b.fan_in), size=b.length)
            elif b.name == "gamma":
                values[b.offset:b.stop] = 1.0
        return ParamVector(values, self.layout), self.init_variances()

    def new_batchnorm_state(self, momentum=0.1):
        state = BatchNormState(momentum=momentum)
        for i, s in enumerate(self.specs):
            if s.kind == "batchnorm":
                state.mean[i] = np.zeros(s.in_dim)
                state.var[i] = np.ones(s.in_dim)
        return state

    def forward(self, params, batch, mode="eval", rng_seed=None, bn_state=None):
        """Run the chain on a ``(n, in_dim)`` batch.

        In ``train`` mode dropout masks are drawn from ``rng_seed`` and
        batch-norm normalizes with batch statistics (updating ``bn_state`` with
        momentum when one is given).  In ``eval`` mode dropout is the identity
        and batch-norm uses ``bn_state``.  ``mc`` mode keeps dropout active
        but normalizes like ``eval`` (Monte-Carlo dropout inference).
        """
        if mode not in ("train", "eval", "mc"):
            raise ContractError(f"mode must be 'train', 'eval' or 'mc', got {mode!r}")
        x = np.asarray(batch, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ContractError(f"batch must have shape (n, {self.in_dim}), got {x.shape}")
        tensors = unflatten(_values(params), self.layout)
        if self.has_batchnorm and mode != "train" and bn_state is None:
            raise ContractError(f"{mode}-mode forward of a batch-norm network needs a BatchNormState")
        rng = None
        cache = ForwardCache(mode, [], ())
        for i, spec in enumerate(self.specs):
            cache.inputs.append(x)
            if spec.kind == "dense":
                x = x @ tensors[(i, "W")] + tensors[(i, "b")]
            elif spec.kind == "relu":
                x = np.maximum(x, 0.0)
            elif spec.kind == "dropout":
                if mode != "eval" and spec.dropout_rate > 0:
                    if rng is None:
                        rng = _rng(rng_seed)
                    keep = 1.0 - spec.dropout_rate
                    mask = (rng.random(x.shape) < keep) / keep
                    cache.masks[i] = mask
                    x = x * mask
            else:
                if mode == "train":
                    mean = x.mean(axis=0)
                    var = x.var(axis=0)
                    if bn_state is not None:
                        m = bn_state.momentum
                        bn_state.mean[i] = (1 - m) * bn_state.mean[i] + m * mean
                        bn_state.var[i] = (1 - m) * bn_state.var[i] + m * var
                else:
                    mean = bn_state.mean[i]
                    var = bn_state.var[i]
                inv_std = 1.0 / np.sqrt(var + BN_EPS)
                xhat = (x - mean) * inv_std
                cache.bn[i] = (xhat, inv_std)
                x = tensors[(i, "gamma")] * xhat + tensors[(i, "beta")]
            if not np.isfinite(x).all():
                raise NumericOverflowError(i)
        cache.output_shape = x.shape
        return x, cache

    def backward(self, params, cache, output_grad):
        """Gradient of the loss with respect to every parameter.

        ``output_grad`` is the derivative of the mini-batch mean loss with
        respect to the network output, so the result is already averaged over
        the batch.
        """
        g = np.asarray(output_grad, dtype=np.float64)
        if g.shape != tuple(cache.output_shape) or len(cache.inputs) != len(self.specs):
            raise ContractError(
                f"output_grad shape {g.shape} does not match cached forward output {cache.output_shape}"
            )
        tensors = unflatten(_values(params), self.layout)
        grad = np.zeros(self.K)
        grads = unflatten(grad, self.layout)
        for i in range(len(self.specs) - 1, -1, -1):
            spec = self.specs[i]
            x = cache.inputs[i]
            if spec.kind == "dense":
                grads[(i, "W")][...] = x.T @ g
                grads[(i, "b")][...] = g.sum(axis=0)
                if i > 0:
                    g = g @ tensors[(i, "W")].T
            elif spec.kind == "relu":
                g = g * (x > 0)
            elif spec.kind == "dropout":
                if i in cache.masks:
                    g = g * cache.masks[i]
            else:
                xhat, inv_std = cache.bn[i]
                gamma = tensors[(i, "gamma")]
                grads[(i, "gamma")][...] = (g * xhat).sum(axis=0)
                grads[(i, "beta")][...] = g.sum(axis=0)
                dxhat = g * gamma
                if cache.mode == "train":
                    n = g.shape[0]
                    g = inv_std / n * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
                else:
                    g = dxhat * inv_std
        return grad

    def predict(self, params, batch, bn_state=None, batch_size=4096):
        """Eval-mode output, processed in chunks."""
        x = np.asarray(batch, dtype=np.float64)
        outs = [self.forward(params, x[i:i + batch_size], "eval", bn_state=bn_state)[0]
                for i in range(0, len(x), batch_size)]
        if not outs:
            return np.zeros((0, self.out_dim))
        return np.concatenate(outs)

    def refresh_batchnorm(self, params, batches, momentum=0.1):
        """Recompute batch-norm statistics from scratch over calibration data.

        Layers are visited in order; each batch-norm layer receives the exact
        mean and (biased) variance of its inputs over all calibration rows,
        computed with the already-refreshed statistics of earlier layers.
        """
        if not self.has_batchnorm:
            raise ContractError("network has no batch-norm layer to refresh")
        if isinstance(batches, np.ndarray):
            batches = [batches]
        batches = [np.asarray(b, dtype=np.float64) for b in batches if len(b)]
        if not batches:
            raise ContractError("empty calibration set")
        x = np.concatenate(batches)
        tensors = unflatten(_values(params), self.layout)
        state = BatchNormState(momentum=momentum)
        for i, spec in enumerate(self.specs):
            if spec.kind == "dense":
                x = x @ tensors[(i, "W")] + tensors[(i, "b")]
            elif spec.kind == "relu":
                x = np.maximum(x, 0.0)
            elif spec.kind == "batchnorm":
                mean = x.mean(axis=0)
                var = x.var(axis=0)
                state.mean[i] = mean
                state.var[i] = var
                x = tensors[(i, "gamma")] * (x - mean) / np.sqrt(var + BN_EPS) + tensors[(i, "beta")]
        return state

    def with_output_dim(self, out_dim):
        """Same architecture with the final dense layer widened or narrowed."""
        if self.specs[-1].kind != "dense":
            raise ConfigError("last layer must be dense to change the output width")
        last = self.specs[-1]
        return Network(self.specs[:-1] + (LayerSpec.dense(last.in_dim, out_dim),))


def expand_output(net, params, out_dim, rng_seed):
    """Add output columns to the last dense layer of a trained network.

    Existing weights are copied unchanged; new columns get He-normal weights
    and zero biases.  Returns ``(new_net, new_params, old_positions,
    new_positions)`` where ``old_positions[j]`` is the index in the new vector
    of old parameter ``j`` and ``new_positions`` lists the freshly initialised
    indices.
    """
    old_out = net.out_dim
    if out_dim <= old_out:
        raise ConfigError(f"expand_output needs more than {old_out} outputs, got {out_dim}")
    new_net = net.with_output_dim(out_dim)
    fresh, _ = new_net.init_weights(rng_seed)
    new_tensors = {k: v.copy() for k, v in fresh.tensors().items()}
    old_tensors = unflatten(_values(params), net.layout)
    last = len(net.specs) - 1
    for key, val in old_tensors.items():
        if key[0] == last:
            if key[1] == "W":
                new_tensors[key][:, :old_out] = val
            else:
                new_tensors[key][:old_out] = val
        else:
            new_tensors[key] = val
    new_values = flatten(new_tensors, new_net.layout)

    index = np.arange(new_net.K)
    idx_tensors = unflatten(index, new_net.layout)
    old_idx = {k: v.copy() for k, v in idx_tensors.items()}
    for key in list(old_idx):
        if key[0] == last:
            old_idx[key] = old_idx[key][:, :old_out] if key[1] == "W" else old_idx[key][:old_out]
    old_positions = np.concatenate([np.asarray(old_idx[(b.layer, b.name)]).ravel() for b in net.layout])
    mask = np.ones(new_net.K, dtype=bool)
    mask[old_positions] = False
    return new_net, ParamVector(new_values, new_net.layout), old_positions, np.flatnonzero(mask)


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def regression_heads(output):
    """Split a two-column output into predictive mean and variance."""
    out = np.asarray(output, dtype=np.float64)
    if out.ndim != 2 or out.shape[1] != 2:
        raise ContractError(f"regression output needs exactly 2 columns, got shape {out.shape}")
    return out[:, 0].copy(), softplus(out[:, 1]) + VAR_FLOOR


def regression_heads_backward(output, grad_mu, grad_var):
    """Chain gradients w.r.t. (mean, variance) back to the raw two-column output."""
    out = np.asarray(output, dtype=np.float64)
    g = np.empty_like(out)
    g[:, 0] = grad_mu
    g[:, 1] = np.asarray(grad_var) * sigmoid(out[:, 1])
    return g

"""Plain mini-batch SGD with optional per-step weight tracking.

The tracker only observes the run: the parameter trajectory is the same with
and without it for a given seed.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .losses import cross_entropy_loss, gaussian_nll_loss, mse_loss
from .nn import Network, expand_output, regression_heads, regression_heads_backward
from .tracker import TrackerHyper, cov_tracker_init, cov_tracker_step, tracker_init, tracker_step


def loss_and_grad(kind, output, targets):
    """Batch loss and its gradient w.r.t. the raw network output."""
    if kind == "ce":
        lv = cross_entropy_loss(output, targets)
        return lv.value, lv.grad
    if kind == "mse":
        lv = mse_loss(output[:, 0], targets)
        return lv.value, lv.grad.reshape(-1, 1)
    if kind == "nll":
        mu, var = regression_heads(output)
        lv = gaussian_nll_loss(mu, var, targets)
        return lv.value, regression_heads_backward(output, lv.grad[:, 0], lv.grad[:, 1])
    raise ConfigError(f"unknown loss {kind!r}")


@dataclass
class Timer:
    wall: float = 0.0
    cpu: float = 0.0

    def __enter__(self):
        self._w, self._c = time.perf_counter(), time.process_time()
        return self

    def __exit__(self, *exc):
        self.wall += time.perf_counter() - self._w
        self.cpu += time.process_time() - self._c


@dataclass
class TrainResult:
    net: Network
    params: np.ndarray
    bn_state: object
    init_var: np.ndarray
    tracker: object = None
    layercov: object = None
    losses: list = field(default_factory=list)
    timer: Timer = field(default_factory=Timer)


def run_sgd(net, params, x, y, loss, *, epochs, lr, batch_size, rng, bn_state=None,
            tracker=None, track_every=1, layercov=None, cov_hyper=None, fault=None):
    """Epochs of shuffled mini-batch SGD; returns ``(params, tracker, layercov, epoch_losses)``.

    With ``track_every > 1`` the tracker sees the summed gradient of the
    skipped steps, i.e. the net displacement divided by ``lr``.
    """
    if lr <= 0 or epochs < 0 or batch_size < 1:
        raise ConfigError("need lr > 0, epochs >= 0 and batch_size >= 1")
    params = np.array(params, dtype=np.float64, copy=True)
    n = len(x)
    losses = []
    pending = np.zeros_like(params) if tracker is not None and track_every > 1 else None
    if tracker is not None:
        tracker = tracker.copy()
    step = np.empty_like(params)
    since = 0
    for _ in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            out, cache = net.forward(params, x[idx], "train", rng, bn_state)
            value, gout = loss_and_grad(loss, out, y[idx])
            grad = net.backward(params, cache, gout)
            if fault is not None:
                grad = fault(grad)
            np.multiply(grad, lr, out=step)
            params -= step
            total += value * len(idx)
            if tracker is not None:
                if pending is not None:
                    pending += grad
                since += 1
                if since == track_every:
                    seen = grad if pending is None else pending
                    tracker_step(tracker, params, seen, lr, inplace=True)
                    if layercov is not None:
                        layercov = cov_tracker_step(layercov, seen, tracker.mu, params, lr,
                                                    cov_hyper or tracker.hyper)
                    if pending is not None:
                        pending[:] = 0.0
                    since = 0
        losses.append(total / n)
    return params, tracker, layercov, losses


def train_classifier(net, x, y, *, epochs, lr, batch_size, seed, track=False, hyper=None,
                     track_every=1, full_cov=False, cov_limit=100):
    rng = np.random.default_rng(seed)
    with Timer() as timer:
        params, init_var = net.init_weights(rng)
        bn = net.new_batchnorm_state() if net.has_batchnorm else None
        tracker = tracker_init(init_var, hyper or TrackerHyper()) if track else None
        layercov = cov_tracker_init(init_var, _slices(net), cov_limit) if track and full_cov else None
        p, tracker, layercov, losses = run_sgd(
            net, params.values, x, y, "ce", epochs=epochs, lr=lr, batch_size=batch_size, rng=rng,
            bn_state=bn, tracker=tracker, track_every=track_every, layercov=layercov)
    return TrainResult(net, p, bn, init_var, tracker, layercov, losses, timer)


def train_regressor(net_one, x, y, *, epochs_mse, epochs_nll, lr, batch_size, seed, track=False,
                    hyper=None, track_every=1, lr_nll=None):
    """Two-phase regression: MSE on a single-output net, then a variance head is
    added and the whole net is fine-tuned on the Gaussian NLL.
    """
    if net_one.out_dim != 1:
        raise ConfigError("phase-one regression network must have a single output")
    rng = np.random.default_rng(seed)
    with Timer() as timer:
        params, init_var = net_one.init_weights(rng)
        bn = net_one.new_batchnorm_state() if net_one.has_batchnorm else None
        tracker = tracker_init(init_var, hyper or TrackerHyper()) if track else None
        p, tracker, _, l1 = run_sgd(net_one, params.values, x, y, "mse", epochs=epochs_mse, lr=lr,
                                    batch_size=batch_size, rng=rng, bn_state=bn, tracker=tracker,
                                    track_every=track_every)
        net, p2, old_pos, new_pos = expand_output(net_one, p, 2, rng)
        full_var = net.init_variances()
        if tracker is not None:
            tracker = tracker.extend(old_pos, new_pos, full_var[new_pos])
        init_full = np.empty(net.K)
        init_full[old_pos] = init_var
        init_full[new_pos] = full_var[new_pos]
        p, tracker, _, l2 = run_sgd(net, p2.values, x, y, "nll", epochs=epochs_nll, lr=lr_nll or lr,
                                    batch_size=batch_size, rng=rng, bn_state=bn, tracker=tracker,
                                    track_every=track_every)
    return TrainResult(net, p, bn, init_full, tracker, None, l1 + l2, timer)


def _slices(net):
    from .sampler import net_layer_slices

    return net_layer_slices(net)

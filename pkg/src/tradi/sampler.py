"""Sampling weight ensembles from the tracked distribution and averaging their predictions."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, NumericError
from .losses import softmax
from .nn import regression_heads
from .rff import build_factor, rff_init

JITTER_START = 1e-10
JITTER_MAX = 1e-4
LOG_2PI = np.log(2.0 * np.pi)


@dataclass
class WeightSample:
    values: np.ndarray
    bn_state: object = None
    index: int = 0


def _cholesky(cov):
    """Cholesky factor of ``cov + jitter * I`` with escalating jitter."""
    cov = np.asarray(cov, dtype=np.float64)
    eye = np.eye(cov.shape[0])
    jitter = JITTER_START
    while jitter <= JITTER_MAX * (1 + 1e-9):
        try:
            return np.linalg.cholesky(cov + jitter * eye), jitter
        except np.linalg.LinAlgError:
            jitter *= 10.0
    raise NumericError(f"covariance block of size {cov.shape[0]} is not positive definite even with jitter {JITTER_MAX}")


def sample_full_cov(mu, layercov, rng, index=0):
    """``mu + L @ m`` per layer block, ``L`` the (jittered) Cholesky factor."""
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    out = np.array(mu, dtype=np.float64, copy=True)
    for layer, sl in layercov.slices.items():
        L, _ = _cholesky(layercov.blocks[layer])
        out[sl] += L @ rng.standard_normal(L.shape[0])
    return WeightSample(out, None, index)


def sample_rff(mu, factor, rng, index=0, layer_slices=None):
    """``mu + R @ m`` with one standard-normal ``m`` of length ``N``.

    The same draw is shared by every weight unless ``layer_slices`` is given,
    in which case each layer gets its own draw.
    """
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    mu = np.asarray(mu, dtype=np.float64)
    R = np.asarray(factor, dtype=np.float64)
    if R.ndim != 2 or R.shape[0] != mu.size:
        raise ContractError(f"factor has shape {R.shape}, expected ({mu.size}, N)")
    if layer_slices is None:
        return WeightSample(mu + R @ rng.standard_normal(R.shape[1]), None, index)
    out = mu.copy()
    for sl in layer_slices.values():
        out[sl] += R[sl] @ rng.standard_normal(R.shape[1])
    return WeightSample(out, None, index)


def build_ensemble(mode, n_model, net, state, weights=None, calibration=None, seed=0,
                   rff_N=10, sigma_rbf=1.0, layercov=None, per_layer=False):
    """Draw ``n_model`` networks from the tracked distribution.

    ``mode`` is ``"rff"`` (needs the final trained ``weights`` to build the
    low-rank factor) or ``"full_cov"`` (needs ``layercov``).  Networks with
    batch-norm get their statistics recomputed on ``calibration`` data.
    """
    if n_model < 1:
        raise ContractError("n_model must be at least 1")
    master = np.random.SeedSequence(seed)
    proj_seed, *member_seeds = master.spawn(n_model + 1)
    if mode == "rff":
        if weights is None:
            raise ContractError("rff sampling needs the trained weights")
        proj = rff_init(rff_N, sigma_rbf, np.random.default_rng(proj_seed))
        R = build_factor(proj, weights, state.std, allow_zero=True)
        slices = net_layer_slices(net) if per_layer else None
        draw = lambda rng, j: sample_rff(state.mu, R, rng, j, slices)
    elif mode == "full_cov":
        if layercov is None:
            raise ContractError("full_cov sampling needs a LayerCovariance")
        draw = lambda rng, j: sample_full_cov(state.mu, layercov, rng, j)
    else:
        raise ContractError(f"unknown sampling mode {mode!r}")
    members = []
    for j, ss in enumerate(member_seeds):
        sample = draw(np.random.default_rng(ss), j)
        if net.has_batchnorm:
            if calibration is None:
                raise ContractError("batch-norm networks need calibration data for sampled members")
            sample.bn_state = net.refresh_batchnorm(sample.values, calibration)
        members.append(sample)
    return members


def net_layer_slices(net):
    out = {}
    for b in net.layout:
        a, z = out.get(b.layer, (b.offset, b.stop))
        out[b.layer] = (min(a, b.offset), max(z, b.stop))
    return {k: slice(a, z) for k, (a, z) in out.items()}


@dataclass
class ClassPrediction:
    probs: np.ndarray

    @property
    def confidence(self):
        return self.probs.max(axis=1)

    @property
    def predicted(self):
        return self.probs.argmax(axis=1)


@dataclass
class MixturePrediction:
    """Equal-weight Gaussian mixture per input; ``mus``/``vars`` are ``(n, M)``."""

    mus: np.ndarray
    vars: np.ndarray

    @property
    def mean(self):
        return self.mus.mean(axis=1)

    @property
    def variance(self):
        m = self.mean
        return (self.vars + self.mus ** 2).mean(axis=1) - m ** 2

    def log_pdf(self, y):
        return mixture_log_pdf(y, self.mus, self.vars)

    def nll(self, y):
        return -self.log_pdf(y)


def mixture_log_pdf(y, mus, vars_):
    """Log density of equal-weight Gaussian mixtures, one row per point."""
    y = np.asarray(y, dtype=np.float64).reshape(-1, 1)
    mus = np.atleast_2d(mus)
    vars_ = np.atleast_2d(vars_)
    comp = -0.5 * (LOG_2PI + np.log(vars_) + (y - mus) ** 2 / vars_)
    top = comp.max(axis=1, keepdims=True)
    return (top + np.log(np.exp(comp - top).mean(axis=1, keepdims=True))).ravel()


def predict_classification(net, ensemble, inputs):
    if not ensemble:
        raise ContractError("empty ensemble")
    probs = None
    for member in ensemble:
        p = softmax(net.predict(member.values, inputs, member.bn_state))
        probs = p if probs is None else probs + p
    return ClassPrediction(probs / len(ensemble))


def predict_regression(net, ensemble, inputs):
    if not ensemble:
        raise ContractError("empty ensemble")
    mus, vars_ = [], []
    for member in ensemble:
        mu, var = regression_heads(net.predict(member.values, inputs, member.bn_state))
        mus.append(mu)
        vars_.append(var)
    return MixturePrediction(np.stack(mus, axis=1), np.stack(vars_, axis=1))


def average_class_probs(prob_list):
    return ClassPrediction(np.mean(np.stack(prob_list), axis=0))


def save_ensemble(directory, ensemble):
    """Write members as tracker checkpoints (weights in the mean slot, zero variance)."""
    import json
    from pathlib import Path

    from .tracker import TrackerState, dumps_state

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = []
    for m in ensemble:
        st = TrackerState(m.values, np.zeros_like(m.values), 0.0, 0.0, m.index)
        p = d / f"member_{m.index:03d}.bin"
        p.write_bytes(dumps_state(st))
        paths.append(p)
        if m.bn_state is not None:
            bn = {str(k): {"mean": m.bn_state.mean[k].tolist(), "var": m.bn_state.var[k].tolist()}
                  for k in m.bn_state.mean}
            (d / f"member_{m.index:03d}.bn.json").write_text(json.dumps(bn))
    return paths


def load_ensemble(directory):
    import json
    from pathlib import Path

    from .nn import BatchNormState
    from .tracker import loads_state

    members = []
    for p in sorted(Path(directory).glob("member_*.bin")):
        st = loads_state(p.read_bytes())
        bn = None
        bn_path = p.with_suffix(".bn.json")
        if bn_path.exists():
            raw = json.loads(bn_path.read_text())
            bn = BatchNormState({int(k): np.array(v["mean"]) for k, v in raw.items()},
                                {int(k): np.array(v["var"]) for k, v in raw.items()})
        members.append(WeightSample(st.mu, bn, st.t))
    return members

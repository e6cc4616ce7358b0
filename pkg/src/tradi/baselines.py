"""Reference uncertainty methods: deep ensembles, MC dropout, Gaussian weight
perturbation and maximum class probability.

They produce the same prediction objects as the tracked ensembles so every
method goes through one evaluation path.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError, NumericError
from .losses import softmax
from .nn import regression_heads
from .sampler import ClassPrediction, MixturePrediction, WeightSample

METHODS = ("deep_ensemble", "mc_dropout", "gauss_perturb", "mcp")


@dataclass(frozen=True)
class BaselineConfig:
    method: str
    M: int = 20
    perturb_scale: float = 1.0
    dropout_rate: float = 0.1

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown baseline {self.method!r}; expected one of {METHODS}")
        if self.M < 1:
            raise ConfigError("M must be at least 1")
        if self.perturb_scale < 0:
            raise ConfigError("perturb_scale must be non-negative")


def member_seeds(seed, M):
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(M)]


def deep_ensemble_train(train_fn, M, seed=0, workers=1):
    """Train ``M`` networks with ``train_fn(member_seed)``, one distinct seed each.

    ``train_fn`` must be picklable when ``workers > 1``.
    """
    seeds = member_seeds(seed, M)
    if workers > 1 and M > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(train_fn, s) for s in seeds]
            results = []
            for j, fut in enumerate(futures):
                try:
                    results.append(fut.result())
                except Exception as exc:
                    raise NumericError(f"deep ensemble member {j} failed: {exc}") from exc
            return results
    results = []
    for j, s in enumerate(seeds):
        try:
            results.append(train_fn(s))
        except Exception as exc:
            raise NumericError(f"deep ensemble member {j} failed: {exc}") from exc
    return results


def mc_dropout_predict(net, params, inputs, M, rng, bn_state=None, task="classification", batch_size=4096):
    """Average of ``M`` forward passes with dropout active and batch-norm frozen."""
    if not net.has_dropout:
        raise ConfigError("MC dropout needs a network with at least one dropout layer of positive rate")
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    x = np.asarray(inputs, dtype=np.float64)

    def one_pass():
        chunks = [net.forward(params, x[i:i + batch_size], "mc", rng, bn_state)[0]
                  for i in range(0, len(x), batch_size)]
        return np.concatenate(chunks)

    if task == "classification":
        total = None
        for _ in range(M):
            p = softmax(one_pass())
            total = p if total is None else total + p
        return ClassPrediction(total / M)
    mus, vars_ = zip(*(regression_heads(one_pass()) for _ in range(M)))
    return MixturePrediction(np.stack(mus, axis=1), np.stack(vars_, axis=1))


def gauss_perturb_ensemble(params, init_var, M, perturb_scale, rng):
    """Members ``w + eps`` with ``eps ~ N(0, (perturb_scale * init_std)**2)`` per weight."""
    if perturb_scale < 0:
        raise ContractError("perturb_scale must be non-negative")
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    w = np.asarray(params, dtype=np.float64)
    std = perturb_scale * np.sqrt(np.asarray(init_var, dtype=np.float64))
    return [WeightSample(w + std * rng.standard_normal(w.size), None, j) for j in range(M)]


def mcp_confidence(net, params, inputs, bn_state=None):
    """Maximum softmax probability of a single deterministic network."""
    return softmax(net.predict(params, inputs, bn_state)).max(axis=1)

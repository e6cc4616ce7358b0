"""Kalman tracking of per-weight Gaussian distributions along an SGD run.

Each weight ``k`` carries a mean ``mu[k]`` and variance ``var[k]``.  After
every SGD step the tracker predicts both from the gradient (state equation)
and corrects them with the observed weight (measurement), using two scalar
Kalman gains shared by all weights.

Three variance state equations are supported:

``algorithm`` (default)
    ``var + eta**2 * (grad - mu)**2``.
``main``
    ``var + (eta * grad)**2``.
``appendix``
    ``var + (eta * grad)**2 - eta**2 * mu**2``.

The measurement correction is ``omega**2 - mu**2`` for all three.
"""

from __future__ import annotations

import struct
import time
from dataclasses import dataclass, field, replace

import numba
import numpy as np

from .errors import ConfigError, ContractError, NumericError

VARIANCE_RULES = ("algorithm", "main", "appendix")
VAR_FLOOR = 1e-8


@dataclass(frozen=True)
class TrackerHyper:
    sigma_mu: float = 1e-4
    sigma_mu_obs: float = 1e-3
    sigma_sigma: float = 1e-4
    sigma_sigma_obs: float = 1e-3
    variance_rule: str = "algorithm"
    var_floor: float = VAR_FLOOR

    def __post_init__(self):
        if min(self.sigma_mu, self.sigma_sigma) < 0:
            raise ConfigError("state noises must be non-negative")
        if not (self.sigma_mu_obs > 0 and self.sigma_sigma_obs > 0):
            raise ConfigError("observation noises must be strictly positive")
        if self.variance_rule not in VARIANCE_RULES:
            raise ConfigError(f"variance_rule must be one of {VARIANCE_RULES}")
        if self.var_floor < 0:
            raise ConfigError("var_floor must be non-negative")


@dataclass
class TrackerState:
    mu: np.ndarray
    var: np.ndarray
    p_mu: float = 0.0
    p_sigma: float = 0.0
    t: int = 0
    hyper: TrackerHyper = field(default_factory=TrackerHyper)

    @property
    def K(self):
        return self.mu.size

    @property
    def std(self):
        return np.sqrt(self.var)

    def copy(self):
        return replace(self, mu=self.mu.copy(), var=self.var.copy())

    def extend(self, old_positions, new_positions, new_init_var):
        """Re-index onto a larger parameter vector (e.g. after adding a head).

        Tracked entries move to ``old_positions``; the entries at
        ``new_positions`` restart from the zero-mean prior.
        """
        K = len(old_positions) + len(new_positions)
        mu = np.zeros(K)
        var = np.zeros(K)
        mu[old_positions] = self.mu
        var[old_positions] = self.var
        var[new_positions] = np.asarray(new_init_var, dtype=np.float64)
        return replace(self, mu=mu, var=var)


def tracker_init(init_var, hyper=None):
    init_var = np.asarray(init_var, dtype=np.float64).ravel()
    if init_var.size == 0:
        raise ContractError("tracker needs at least one weight")
    if not np.all(init_var > 0):
        raise ContractError("initial variances must be positive")
    return TrackerState(np.zeros_like(init_var), init_var.copy(), 0.0, 0.0, 0, hyper or TrackerHyper())


def kalman_gains(p_mu, p_sigma, hyper):
    """One predict/gain/correct cycle of the shared scalar covariances.

    Returns ``(q_mu, q_sigma, p_mu_next, p_sigma_next)``.
    """
    pm = p_mu + hyper.sigma_mu
    ps = p_sigma + hyper.sigma_sigma
    q_mu = pm / (pm + hyper.sigma_mu_obs)
    q_sigma = ps / (ps + hyper.sigma_sigma_obs)
    return q_mu, q_sigma, (1.0 - q_mu) * pm, (1.0 - q_sigma) * ps


@numba.njit(cache=True, nogil=True)
def _fused_update(mu, var, g, w, eta, q_mu, q_sigma, rule, floor):
    # One pass over the weights; the tracker is memory bound.
    eta2 = eta * eta
    for k in range(mu.size):
        m = (1.0 - q_mu) * (mu[k] - eta * g[k]) + q_mu * w[k]
        if rule == 0:
            d = g[k] - m
            drift = eta2 * d * d
        elif rule == 1:
            drift = eta2 * g[k] * g[k]
        else:
            drift = eta2 * (g[k] * g[k] - m * m)
        v = (1.0 - q_sigma) * (var[k] + drift) + q_sigma * (w[k] * w[k] - m * m)
        mu[k] = m
        var[k] = v if v > floor else floor


def warm_up():
    """Load (or compile) the update kernel now; returns the seconds spent.

    The cost is paid once per process, so the runner calls this before
    timing any training.
    """
    start = time.perf_counter()
    one = np.ones(1)
    _fused_update(one.copy(), one.copy(), one, one, 0.1, 0.5, 0.5, 0, VAR_FLOOR)
    return time.perf_counter() - start


def tracker_step(state, weights, grad, eta, inplace=False):
    """Fold one SGD step into the tracked distribution.

    ``weights`` are the parameters *after* the update ``w - eta * grad``.
    Returns a new state and leaves the inputs untouched, unless ``inplace``
    is set, in which case ``state`` is overwritten and returned (the training
    loop uses this to avoid reallocating ``2 K`` floats per step).
    """
    w = weights.values if hasattr(weights, "values") else np.asarray(weights, dtype=np.float64)
    g = grad.values if hasattr(grad, "values") else np.asarray(grad, dtype=np.float64)
    if w.shape != state.mu.shape or g.shape != state.mu.shape:
        raise ContractError(f"tracker holds {state.K} weights, got {w.shape} weights and {g.shape} gradients")
    if not np.isfinite(g).all():
        raise NumericError(f"non-finite gradient at tracker step {state.t}")
    w = np.ascontiguousarray(w)
    g = np.ascontiguousarray(g)
    h = state.hyper
    q_mu, q_sigma, p_mu, p_sigma = kalman_gains(state.p_mu, state.p_sigma, h)

    mu = state.mu if inplace else state.mu.copy()
    var = state.var if inplace else state.var.copy()
    _fused_update(mu, var, g, w, eta, q_mu, q_sigma, VARIANCE_RULES.index(h.variance_rule), h.var_floor)
    if inplace:
        state.p_mu, state.p_sigma, state.t = p_mu, p_sigma, state.t + 1
        return state
    return TrackerState(mu, var, p_mu, p_sigma, state.t + 1, h)


@dataclass
class LayerCovariance:
    """Dense within-layer covariance blocks; entries across layers are zero."""

    blocks: dict
    slices: dict
    p: float = 0.0
    limit: int = 100

    def diagonal(self, K):
        d = np.zeros(K)
        for layer, sl in self.slices.items():
            d[sl] = np.diag(self.blocks[layer])
        return d


def cov_tracker_init(init_var, layer_slices, limit=100):
    """Diagonal start: weights are independent before training."""
    init_var = np.asarray(init_var, dtype=np.float64)
    blocks = {}
    for layer, sl in layer_slices.items():
        size = sl.stop - sl.start
        if size > limit:
            raise ConfigError(
                f"layer {layer} has {size} weights, above the full-covariance limit of {limit}; use rff sampling"
            )
        blocks[layer] = np.diag(init_var[sl])
    return LayerCovariance(blocks, dict(layer_slices), 0.0, limit)


def cov_tracker_step(layercov, grad, mu, weights, eta, hyper):
    """Entrywise Kalman update of each within-layer covariance block.

    ``mu`` must be the already-updated means of the same step.  The block
    update generalizes :func:`tracker_step` to outer products, so the
    diagonal follows the same recursion when the hyperparameters match (the
    floor excepted).  The gain uses ``hyper.sigma_sigma`` /
    ``hyper.sigma_sigma_obs``.
    """
    g = np.asarray(grad, dtype=np.float64)
    m = np.asarray(mu, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    ps = layercov.p + hyper.sigma_sigma
    q = ps / (ps + hyper.sigma_sigma_obs)
    blocks = {}
    for layer, sl in layercov.slices.items():
        gl, ml, wl = g[sl], m[sl], w[sl]
        if hyper.variance_rule == "algorithm":
            d = gl - ml
            drift = eta * eta * np.outer(d, d)
        elif hyper.variance_rule == "main":
            drift = eta * eta * np.outer(gl, gl)
        else:
            drift = eta * eta * (np.outer(gl, gl) - np.outer(ml, ml))
        prior = layercov.blocks[layer] + drift
        post = (1.0 - q) * prior + q * (np.outer(wl, wl) - np.outer(ml, ml))
        blocks[layer] = 0.5 * (post + post.T)
    return LayerCovariance(blocks, layercov.slices, (1.0 - q) * ps, layercov.limit)


# Binary checkpoint:
#   8s   magic b"TRADIKF1"
#   <u4  format version (1)
#   <u4  variance rule index into VARIANCE_RULES
#   <u8  K
#   <u8  t
#   <d   p_mu, p_sigma
#   <d   sigma_mu, sigma_mu_obs, sigma_sigma, sigma_sigma_obs, var_floor
#   <d*K mu
#   <d*K var
MAGIC = b"TRADIKF1"
_HEADER = struct.Struct("<8sIIQQ7d")


def dumps_state(state):
    h = state.hyper
    header = _HEADER.pack(
        MAGIC, 1, VARIANCE_RULES.index(h.variance_rule), state.K, state.t,
        state.p_mu, state.p_sigma,
        h.sigma_mu, h.sigma_mu_obs, h.sigma_sigma, h.sigma_sigma_obs, h.var_floor,
    )
    return header + state.mu.astype("<f8").tobytes() + state.var.astype("<f8").tobytes()


def loads_state(data):
    if len(data) < _HEADER.size:
        raise ContractError("checkpoint is truncated")
    magic, version, rule, K, t, p_mu, p_sigma, s_mu, s_mu_o, s_s, s_s_o, floor = _HEADER.unpack_from(data)
    if magic != MAGIC or version != 1:
        raise ContractError("not a tracker checkpoint")
    expected = _HEADER.size + 16 * K
    if len(data) != expected:
        raise ContractError(f"checkpoint holds {len(data)} bytes, expected {expected}")
    arr = np.frombuffer(data, dtype="<f8", offset=_HEADER.size).astype(np.float64)
    hyper = TrackerHyper(s_mu, s_mu_o, s_s, s_s_o, VARIANCE_RULES[rule], floor)
    return TrackerState(arr[:K].copy(), arr[K:].copy(), p_mu, p_sigma, t, hyper)


def save_state(path, state):
    with open(path, "wb") as f:
        f.write(dumps_state(state))


def load_state(path):
    with open(path, "rb") as f:
        return loads_state(f.read())

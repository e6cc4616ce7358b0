"""Random Fourier features for the RBF kernel over scalar weight values.

The covariance between weights ``k`` and ``k'`` is modelled as
``std[k] * std[k'] * exp(-(w_k - w_k')**2 / (2 * sigma_rbf**2))``.  With
``N`` random cosine features ``z`` the kernel is approximated by
``z(w_k) @ z(w_k')``, so the covariance becomes ``R @ R.T`` with the ``K x N``
factor ``R[k] = std[k] * z(w_k)``.  Only ``R`` is ever stored.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ContractError


@dataclass(frozen=True)
class RFFProjection:
    theta: np.ndarray
    phi: np.ndarray
    sigma_rbf: float = 1.0
    seed: int | None = None

    @property
    def N(self):
        return self.theta.size


def rff_init(N=10, sigma_rbf=1.0, seed=None):
    """Draw frequencies ``theta ~ N(0, sigma_rbf**2)`` and phases ``phi ~ U[0, 2pi]``."""
    if N < 1:
        raise ContractError(f"need at least one random feature, got N={N}")
    if not sigma_rbf > 0:
        raise ContractError(f"sigma_rbf must be positive, got {sigma_rbf}")
    rng = np.random.default_rng(seed)
    theta = rng.normal(0.0, sigma_rbf, size=N)
    phi = rng.uniform(0.0, 2.0 * np.pi, size=N)
    theta.flags.writeable = False
    phi.flags.writeable = False
    return RFFProjection(theta, phi, float(sigma_rbf), seed)


def feature_map(proj, w):
    """``sqrt(2/N) * cos(theta * w + phi)``; a vector for scalar ``w``, else shape ``(K, N)``."""
    w = np.asarray(w, dtype=np.float64)
    scale = np.sqrt(2.0 / proj.N)
    return scale * np.cos(np.multiply.outer(w, proj.theta) + proj.phi)


def rbf_kernel(a, b, sigma_rbf=1.0):
    d = np.subtract.outer(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64))
    return np.exp(-d * d / (2.0 * sigma_rbf ** 2))


def build_factor(proj, weights, std, allow_zero=False):
    """Low-rank covariance factor ``R`` with rows ``std[k] * z(w[k])``."""
    w = weights.values if hasattr(weights, "values") else np.asarray(weights, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64).ravel()
    if w.shape != std.shape:
        raise ContractError(f"{w.size} weights but {std.size} standard deviations")
    if allow_zero:
        if np.any(std < 0):
            raise ContractError("standard deviations must be non-negative")
    elif not np.all(std > 0):
        raise ContractError("standard deviations must be strictly positive")
    return std[:, None] * feature_map(proj, w)

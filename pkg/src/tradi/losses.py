"""Mini-batch losses with analytic gradients.

Every loss reduces by the batch mean, so gradients carry the ``1/n`` factor
and can be fed straight into :meth:`tradi.nn.Network.backward`.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ContractError


@dataclass
class LossValue:
    value: float
    grad: np.ndarray


def _check_pair(pred, target):
    pred = np.asarray(pred, dtype=np.float64).ravel()
    target = np.asarray(target, dtype=np.float64).ravel()
    if pred.size == 0:
        raise ContractError("empty batch")
    if pred.shape != target.shape:
        raise ContractError(f"prediction length {pred.size} != target length {target.size}")
    return pred, target


def mse_loss(mu_pred, targets):
    mu, y = _check_pair(mu_pred, targets)
    r = mu - y
    return LossValue(float(np.mean(r * r)), 2.0 * r / r.size)


def gaussian_nll_loss(mu_pred, var_pred, targets):
    """Heteroscedastic Gaussian NLL without the constant ``log(2*pi)/2``.

    ``grad`` has two columns: derivatives w.r.t. the mean and the variance.
    """
    mu, y = _check_pair(mu_pred, targets)
    var = np.asarray(var_pred, dtype=np.float64).ravel()
    if var.shape != mu.shape:
        raise ContractError("variance and mean heads differ in length")
    if not np.all(var > 0):
        raise ContractError("predicted variance must be strictly positive")
    n = mu.size
    r = mu - y
    per = 0.5 * r * r / var + 0.5 * np.log(var)
    grad = np.empty((n, 2))
    grad[:, 0] = r / var / n
    grad[:, 1] = (0.5 / var - 0.5 * r * r / (var * var)) / n
    return LossValue(float(per.mean()), grad)


def log_softmax(logits):
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax(logits):
    return np.exp(log_softmax(logits))


def cross_entropy_loss(logits, labels):
    z = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int64).ravel()
    if z.ndim != 2 or z.shape[0] == 0:
        raise ContractError(f"logits must be a non-empty (n, classes) matrix, got {z.shape}")
    if labels.size != z.shape[0]:
        raise ContractError(f"{labels.size} labels for {z.shape[0]} rows")
    if labels.min() < 0 or labels.max() >= z.shape[1]:
        raise ContractError(f"labels must lie in [0, {z.shape[1]})")
    n = z.shape[0]
    logp = log_softmax(z)
    rows = np.arange(n)
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    return LossValue(float(-logp[rows, labels].mean()), grad / n)

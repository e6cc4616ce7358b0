"""Oracle battery: each check compares a production code path with an
independent computation (finite differences, a textbook scalar Kalman filter,
Monte-Carlo moments, brute-force threshold enumeration, quadrature).
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import metrics as M
from .losses import cross_entropy_loss
from .nn import LayerSpec, Network
from .rff import build_factor, feature_map, rff_init
from .sampler import mixture_log_pdf, sample_rff
from .tracker import TrackerHyper, tracker_init, tracker_step
from .training import loss_and_grad

FD_STEP = 1e-5
FD_TOL = 1e-5


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


# --- finite differences ---------------------------------------------------------

def fd_gradient(f, w, h=FD_STEP):
    g = np.empty_like(w)
    for k in range(w.size):
        wp = w.copy()
        wm = w.copy()
        wp[k] += h
        wm[k] -= h
        g[k] = (f(wp) - f(wm)) / (2 * h)
    return g


# Central differences at h=1e-5 carry ~1e-11 absolute round-off, so coordinates whose
# true gradient is structurally zero (a bias feeding batchnorm) need a floor well above it.
FD_FLOOR = 1e-4


def grad_rel_error(analytic, numeric, floor=FD_FLOOR):
    """Largest coordinate-wise ``|a - n| / max(|a|, |n|, floor)``."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


NET_SHAPES = {
    "dense": lambda i, o: [LayerSpec.dense(i, o)],
    "dense_relu": lambda i, o: [LayerSpec.dense(i, 7), LayerSpec.relu(7), LayerSpec.dense(7, o)],
    "dense_bn": lambda i, o: [LayerSpec.dense(i, 6), LayerSpec.batchnorm(6), LayerSpec.relu(6), LayerSpec.dense(6, o)],
    "dense_dropout": lambda i, o: [LayerSpec.dense(i, 8), LayerSpec.relu(8), LayerSpec.dropout(8, 0.3),
                                   LayerSpec.dense(8, o)],
    "three_layer": lambda i, o: [LayerSpec.dense(i, 9), LayerSpec.relu(9), LayerSpec.batchnorm(9),
                                 LayerSpec.dropout(9, 0.2), LayerSpec.dense(9, 5), LayerSpec.relu(5),
                                 LayerSpec.dense(5, o)],
}
LOSS_OUT = {"mse": 1, "nll": 2, "ce": 4}


def gradient_case(shape, loss, seed=0, fault=None):
    rng = np.random.default_rng(seed)
    in_dim, n = 3, 6
    net = Network(NET_SHAPES[shape](in_dim, LOSS_OUT[loss]))
    params, _ = net.init_weights(rng)
    w = params.values + 0.1 * rng.standard_normal(net.K)
    x = rng.standard_normal((n, in_dim))
    y = rng.integers(0, LOSS_OUT[loss], n) if loss == "ce" else rng.standard_normal(n)
    mask_seed = int(rng.integers(1 << 31))

    def f(v):
        out, _ = net.forward(v, x, "train", mask_seed)
        return loss_and_grad(loss, out, y)[0]

    out, cache = net.forward(w, x, "train", mask_seed)
    analytic = net.backward(w, cache, loss_and_grad(loss, out, y)[1])
    if fault is not None:
        analytic = fault(analytic)
    return grad_rel_error(analytic, fd_gradient(f, w))


def check_gradients(fault=None):
    worst, where = 0.0, None
    for shape in NET_SHAPES:
        for loss in LOSS_OUT:
            for seed in range(2):
                err = gradient_case(shape, loss, seed, fault)
                if err > worst:
                    worst, where = err, f"{shape}/{loss}/seed{seed}"
    # raw-logit cross-entropy on its own
    rng = np.random.default_rng(7)
    z = rng.standard_normal((5, 4))
    lab = rng.integers(0, 4, 5)
    num = fd_gradient(lambda v: cross_entropy_loss(v.reshape(5, 4), lab).value, z.ravel())
    err = grad_rel_error(cross_entropy_loss(z, lab).grad.ravel(), num)
    if err > worst:
        worst, where = err, "cross_entropy/logits"
    return worst < FD_TOL, f"max rel err {worst:.2e} ({where})"


# --- scalar Kalman oracle -------------------------------------------------------

class ScalarKalman:
    """Textbook 1-D filter: x' = x + u + w (var q), z = x + v (var r)."""

    def __init__(self, x0, p0, q, r):
        self.x, self.p, self.q, self.r = x0, p0, q, r

    def predict(self, u):
        self.x = self.x + u
        self.p = self.p + self.q

    def update(self, z):
        gain = self.p / (self.p + self.r)
        self.x = self.x + gain * (z - self.x)
        self.p = (1 - gain) * self.p
        return gain


def kalman_oracle_trajectory(omegas, grads, eta, init_var, hyper):
    mean_f = ScalarKalman(0.0, 0.0, hyper.sigma_mu, hyper.sigma_mu_obs)
    var_f = ScalarKalman(init_var, 0.0, hyper.sigma_sigma, hyper.sigma_sigma_obs)
    traj = []
    for w, g in zip(omegas, grads):
        mean_f.predict(-eta * g)
        mean_f.update(w)
        mu = mean_f.x
        var_f.predict(eta * eta * (g - mu) ** 2)
        var_f.update(w * w - mu * mu)
        var_f.x = max(var_f.x, hyper.var_floor)
        traj.append((mean_f.x, var_f.x, mean_f.p, var_f.p))
    return np.array(traj)


def tracker_trajectory(omegas, grads, eta, init_var, hyper):
    st = tracker_init([init_var], hyper)
    traj = []
    for w, g in zip(omegas, grads):
        st = tracker_step(st, np.array([w]), np.array([g]), eta)
        traj.append((st.mu[0], st.var[0], st.p_mu, st.p_sigma))
    return np.array(traj)


def check_kalman(steps=50, seed=0):
    rng = np.random.default_rng(seed)
    eta = 0.05
    hyper = TrackerHyper()
    w = 0.3
    omegas, grads = [], []
    for _ in range(steps):
        g = 2.0 * w + 0.3 * rng.standard_normal()
        w = w - eta * g
        omegas.append(w)
        grads.append(g)
    a = tracker_trajectory(omegas, grads, eta, 0.01, hyper)
    b = kalman_oracle_trajectory(omegas, grads, eta, 0.01, hyper)
    err = float(np.max(np.abs(a - b)))
    return err <= 1e-12, f"max abs diff {err:.1e} over {steps} steps"


# --- random features ------------------------------------------------------------

def rff_kernel_errors(Ns=(10, 100, 1000, 10000), reseeds=100, sigma_rbf=1.0, seed=0):
    pairs = np.array([[0.0, 1.0], [0.2, -0.5], [1.5, 1.4], [-1.0, 1.0]])
    target = np.exp(-(pairs[:, 0] - pairs[:, 1]) ** 2 / (2 * sigma_rbf ** 2))
    ss = np.random.SeedSequence(seed)
    errs = []
    for N in Ns:
        e = []
        for child in ss.spawn(reseeds):
            proj = rff_init(N, sigma_rbf, np.random.default_rng(child))
            za, zb = feature_map(proj, pairs[:, 0]), feature_map(proj, pairs[:, 1])
            e.append(np.abs((za * zb).sum(axis=1) - target))
        errs.append(float(np.mean(e)))
    return errs


def check_rff_convergence():
    errs = rff_kernel_errors()
    ok = errs[-1] < 0.05 and all(b <= a for a, b in zip(errs, errs[1:]))
    return ok, "mean |err| at N=10,100,1e3,1e4: " + ", ".join(f"{e:.4f}" for e in errs)


def check_rff_sampling(draws=100_000, seed=0):
    rng = np.random.default_rng(seed)
    w = rng.normal(0, 0.5, 10)
    std = rng.uniform(0.3, 1.0, 10)
    R = build_factor(rff_init(10, 1.0, seed), w, std)
    mu = rng.standard_normal(10)
    xs = np.stack([sample_rff(mu, R, rng).values for _ in range(draws)])
    emp = np.cov((xs - mu).T, bias=True)
    dev = float(np.max(np.abs(emp - R @ R.T)))
    return dev < 0.02, f"max |cov - RR^T| {dev:.4f}"


# --- metrics --------------------------------------------------------------------

def brute_force_roc(scores, ood):
    """All-threshold enumeration; AUC by pair counting, AP by recall steps."""
    scores = np.asarray(scores, float)
    ood = np.asarray(ood, bool)
    pos, neg = scores[ood], scores[~ood]
    auc = (np.sum(pos[:, None] > neg[None, :]) + 0.5 * np.sum(pos[:, None] == neg[None, :])) / (pos.size * neg.size)
    ths = sorted(set(scores.tolist()), reverse=True)
    prev_r, ap, fprs = 0.0, 0.0, []
    for t in ths:
        flag = scores >= t
        tp = np.sum(flag & ood)
        fp = np.sum(flag & ~ood)
        r = tp / pos.size
        ap += (r - prev_r) * tp / (tp + fp)
        prev_r = r
        if r >= 0.95:
            fprs.append(fp / neg.size)
    return float(auc), float(ap), float(min(fprs))


def brute_force_ece(conf, correct, bins):
    total = 0.0
    n = len(conf)
    for b in range(bins):
        lo, hi = b / bins, (b + 1) / bins
        sel = [(c > lo or (b == 0 and c >= 0)) and c <= hi for c in conf]
        sel = np.array(sel)
        if sel.any():
            total += sel.sum() / n * abs(np.mean(np.asarray(correct)[sel]) - np.mean(np.asarray(conf)[sel]))
    return total


HAND_DUMP = dict(
    labels=[0, 1, 2, 1, 0, -1, -1, 2, 1, -1],
    preds=[0, 1, 1, 1, 2, 0, 1, 2, 0, 2],
    confidence=[0.95, 0.85, 0.55, 0.72, 0.40, 0.62, 0.30, 0.91, 0.55, 0.85],
    in_dist=[1, 1, 1, 1, 1, 0, 0, 1, 1, 0],
)


def check_metrics():
    d = M.ClassificationDump(np.arange(10), HAND_DUMP["labels"], HAND_DUMP["preds"], HAND_DUMP["confidence"],
                             np.array(HAND_DUMP["in_dist"], bool))
    problems = []
    got = M.ood_metrics(d)
    want = brute_force_roc(1 - d.confidence, ~d.in_dist)
    if not np.allclose(got, want, rtol=0, atol=1e-12):
        problems.append(f"roc {got} != {want}")
    for bins in (1, 3, 5, 15):
        e = M.ece(d, bins)
        o = brute_force_ece(d.confidence.tolist(), d.correct.tolist(), bins)
        if abs(e - o) > 1e-12:
            problems.append(f"ece[{bins}] {e} != {o}")
    ths = np.linspace(0, 1, 11)
    c = M.accuracy_vs_confidence(d, ths)
    for t, v, s in c.rows():
        sel = [i for i in range(10) if d.confidence[i] >= t]
        if s != len(sel) or (sel and abs(v - np.mean(d.correct[sel])) > 1e-12):
            problems.append(f"avc at {t}")
    cal = M.calibration_curve(d, 4)
    if int(cal.support.sum()) != len(d):
        problems.append("calibration supports")
    return not problems, "; ".join(problems) or "roc/ece/curves match enumeration"


def check_mixture_quadrature(seed=0):
    rng = np.random.default_rng(seed)
    mus = rng.normal(0, 2, 5)
    vars_ = rng.uniform(0.2, 2.0, 5)
    sd = np.sqrt(vars_)
    grid = np.linspace((mus - 10 * sd).min(), (mus + 10 * sd).max(), 200_001)
    dens = np.exp(mixture_log_pdf(grid, np.tile(mus, (grid.size, 1)), np.tile(vars_, (grid.size, 1))))
    integrate = getattr(np, "trapezoid", None) or np.trapz
    total = float(integrate(dens, grid))
    return abs(total - 1) < 1e-4, f"integral {total:.8f}"


CHECKS = {
    "finite_difference_gradients": check_gradients,
    "scalar_kalman_oracle": check_kalman,
    "rff_kernel_convergence": check_rff_convergence,
    "rff_sample_covariance": check_rff_sampling,
    "metrics_brute_force": check_metrics,
    "mixture_density_quadrature": check_mixture_quadrature,
}


def verify_suite(fault_gradient=False, only=None):
    results = []
    for name, fn in CHECKS.items():
        if only and name not in only:
            continue
        t0 = time.perf_counter()
        try:
            if name == "finite_difference_gradients" and fault_gradient:
                passed, detail = fn(fault=lambda g: g * (1 + 1e-3))
            else:
                passed, detail = fn()
        except Exception as exc:  # a crashing oracle is a failing oracle
            passed, detail = False, f"{type(exc).__name__}: {exc}"
        results.append(CheckResult(name, bool(passed), detail, time.perf_counter() - t0))
    return results

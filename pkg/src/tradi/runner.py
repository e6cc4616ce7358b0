"""Experiment orchestration: train, track, sample, compare baselines, write reports."""

from __future__ import annotations

import csv
import functools
import hashlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import metrics as M
from .baselines import deep_ensemble_train, gauss_perturb_ensemble, mc_dropout_predict
from .config import ExperimentConfig, load_config
from .data import (Dataset, Normalizer, data_dir, digits_load, make_folds, mnist_split, ood_folder_load,
                   synth_gp, uci_load, write_xy_csv)
from .errors import ConfigError, ContractError
from .losses import softmax
from .nn import Network, regression_heads
from .sampler import (ClassPrediction, MixturePrediction, WeightSample, build_ensemble, predict_classification,
                      predict_regression, save_ensemble)
from .tracker import save_state, warm_up
from .training import Timer, train_classifier, train_regressor

log = logging.getLogger(__name__)

CURVE_KINDS = ("calib", "avc", "prec")


class DatasetNotFound(ConfigError):
    pass


@dataclass
class RunReport:
    run_id: str
    task: str
    rows: list
    timings: dict
    curves: list = field(default_factory=list)
    dumps: list = field(default_factory=list)
    checks: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def metric(self, method, name):
        for r in self.rows:
            if r["method"] == method and r["metric"] == name:
                return r["mean"]
        raise KeyError((method, name))

    def to_json(self):
        return asdict(self)


def config_run_id(cfg):
    payload = cfg.model_dump(mode="json")
    payload.pop("output_dir", None)
    return hashlib.sha1(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:12]


# --- data ---------------------------------------------------------------------

def _require(path):
    path = Path(path)
    if not path.exists() and not Path(str(path) + ".gz").exists():
        raise DatasetNotFound(f"dataset path {path} does not exist (set TRADI_DATA_DIR or data.path)")
    return path


def load_classification_data(cfg):
    d = cfg.data
    source = "mnist" if d.source == "default" else d.source
    ood_source = d.ood_source or ("digits_holdout" if source == "digits" else "notmnist")
    if source in ("mnist", "fashion_mnist"):
        root = Path(d.path) if d.path else data_dir() / source
        train = mnist_split(_require(root / "train-images-idx3-ubyte").parent, "train")
        test = mnist_split(root, "test")
    elif source == "digits":
        holdout = cfg.task == "mnist_ood" and ood_source == "digits_holdout"
        full = digits_load(range(5) if holdout else range(10))
        perm = np.random.default_rng(cfg.seed).permutation(len(full))
        cut = int(0.8 * len(full))
        train, test = full.subset(np.sort(perm[:cut])), full.subset(np.sort(perm[cut:]))
    else:
        raise ConfigError(f"unknown classification data source {source!r}")
    if d.max_train:
        train = train.subset(np.arange(min(d.max_train, len(train))))
    if d.max_test:
        test = test.subset(np.arange(min(d.max_test, len(test))))
    ood = None
    if cfg.task == "mnist_ood":
        if ood_source == "notmnist":
            ood = ood_folder_load(_require(Path(d.ood_path) if d.ood_path else data_dir() / "notMNIST_small"),
                                  name="notmnist")
        elif ood_source == "folder":
            if not d.ood_path:
                raise ConfigError("ood_source 'folder' needs data.ood_path")
            ood = ood_folder_load(_require(d.ood_path))
        elif ood_source == "fashion_mnist":
            root = Path(d.ood_path) if d.ood_path else data_dir() / "fashion_mnist"
            _require(root / "t10k-images-idx3-ubyte")
            ood = mnist_split(root, "test", in_dist=False, name="fashion_mnist")
            ood.targets = np.full(len(ood), -1)
        elif ood_source == "digits_holdout":
            ood = digits_load(range(5, 10), in_dist=False)
            ood.targets = np.full(len(ood), -1)
        else:
            raise ConfigError(f"unknown OOD source {ood_source!r}")
    return train, test, ood, source, ood_source


# --- classification -----------------------------------------------------------

def _train_plain_classifier(specs, x, y, opt, seed):
    return train_classifier(Network(specs), x, y, epochs=opt["epochs"], lr=opt["lr"],
                            batch_size=opt["batch_size"], seed=seed)


def _refresh_all(net, members, calib):
    if net.has_batchnorm:
        for m in members:
            m.bn_state = net.refresh_batchnorm(m.values, calib)
    return members


def _classification_metrics(dump, cfg, has_ood):
    ind = dump.subset(dump.in_dist)
    out = {"accuracy": M.accuracy(ind), "nll": M.classification_nll(ind), "ece": M.ece(dump, cfg.metrics.ece_bins)}
    if has_ood:
        auc, aupr, fpr = M.ood_metrics(dump)
        out.update(auc=auc, aupr=aupr, fpr95=fpr)
    return out


def run_classification(cfg, out, workers):
    train, test, ood, source, ood_source = load_classification_data(cfg)
    n_classes = int(train.targets.max()) + 1
    eval_set = test if ood is None else Dataset(np.r_[test.features, ood.features],
                                                np.r_[test.targets, ood.targets],
                                                np.r_[test.in_dist, ood.in_dist])
    x, y = train.features, train.targets.astype(np.int64)
    opt = cfg.optimizer
    specs = cfg.architecture.specs(x.shape[1], n_classes)
    net = Network(specs)
    rng = np.random.default_rng(cfg.seed)
    calib = x[rng.choice(len(x), size=min(cfg.data.calibration_size, len(x)), replace=False)]
    preds, timings, checks = {}, {}, {"data_source": source}
    if ood is not None:
        checks["ood_source"] = ood_source
        checks["n_ood"] = int(len(ood))

    plain = train_classifier(net, x, y, epochs=opt.epochs, lr=opt.lr, batch_size=opt.batch_size, seed=cfg.seed)
    timings["single"] = asdict(plain.timer)
    tradi = train_classifier(net, x, y, epochs=opt.epochs, lr=opt.lr, batch_size=opt.batch_size, seed=cfg.seed,
                             track=True, hyper=cfg.tracker.hyper(), track_every=opt.track_every,
                             full_cov=cfg.sampler.mode == "full_cov", cov_limit=cfg.sampler.cov_limit)
    timings["tradi"] = asdict(tradi.timer)
    checks["tracker_passive"] = bool(np.array_equal(plain.params, tradi.params))
    save_state(out / "tradi.tracker.bin", tradi.tracker)
    s = cfg.sampler
    with Timer() as t_ens:
        ens = build_ensemble(s.mode, s.n_model, net, tradi.tracker, tradi.params, calib, seed=cfg.seed + 1,
                             rff_N=s.rff_n, sigma_rbf=s.sigma_rbf, layercov=tradi.layercov, per_layer=s.per_layer)
        preds["tradi"] = predict_classification(net, ens, eval_set.features)
    timings["tradi_inference"] = asdict(t_ens)
    if cfg.save_ensemble:
        save_ensemble(out / "tradi_ensemble", ens)

    b = cfg.baseline("mcp")
    if b is not None:
        preds["mcp"] = ClassPrediction(softmax(net.predict(plain.params, eval_set.features, plain.bn_state)))
    b = cfg.baseline("gauss_perturb")
    if b is not None:
        members = gauss_perturb_ensemble(plain.params, plain.init_var, b.M, b.perturb_scale,
                                         np.random.default_rng(cfg.seed + 2))
        preds["gauss_perturb"] = predict_classification(net, _refresh_all(net, members, calib), eval_set.features)
    b = cfg.baseline("mc_dropout")
    if b is not None:
        dnet = Network(cfg.architecture.specs(x.shape[1], n_classes, dropout=b.dropout_rate))
        dres = train_classifier(dnet, x, y, epochs=opt.epochs, lr=opt.lr, batch_size=opt.batch_size, seed=cfg.seed)
        timings["mc_dropout"] = asdict(dres.timer)
        preds["mc_dropout"] = mc_dropout_predict(dnet, dres.params, eval_set.features, b.M,
                                                 np.random.default_rng(cfg.seed + 3), dres.bn_state)
    b = cfg.baseline("deep_ensemble")
    if b is not None:
        fn = functools.partial(_train_plain_classifier, specs, x, y,
                               {"epochs": opt.epochs, "lr": opt.lr, "batch_size": opt.batch_size})
        with Timer() as t_de:
            members = deep_ensemble_train(fn, b.M, cfg.seed + 4, workers)
        timings["deep_ensemble"] = asdict(t_de)
        timings["deep_ensemble"]["member_wall_sum"] = sum(m.timer.wall for m in members)
        probs = [softmax(net.predict(m.params, eval_set.features, m.bn_state)) for m in members]
        preds["deep_ensemble"] = ClassPrediction(np.mean(probs, axis=0))

    rows, dumps, curves = [], [], []
    for method, pred in preds.items():
        dump = M.ClassificationDump.from_probs(pred.probs, eval_set.targets, eval_set.in_dist)
        path = M.write_dump(out / f"{method}.dump.csv", dump)
        dumps.append(str(path))
        for name, val in _classification_metrics(dump, cfg, ood is not None).items():
            rows.append({"method": method, "metric": name, "mean": val, "std": 0.0, "n": 1})
        curves += [str(p) for p in emit_curves([path], CURVE_KINDS, out, cfg.metrics.curve_bins,
                                               cfg.metrics.thresholds, cfg.metrics.binning)]
    _efficiency_checks(timings, checks)
    return rows, timings, dumps, curves, checks


def _efficiency_checks(timings, checks):
    single = timings.get("single", {}).get("wall")
    if not single:
        return
    if "tradi" in timings:
        checks["tradi_over_single"] = timings["tradi"]["wall"] / single
    if "deep_ensemble" in timings:
        checks["deep_ensemble_over_single"] = timings["deep_ensemble"]["wall"] / single


# --- regression ---------------------------------------------------------------

def _phase_epochs(opt):
    e1 = max(1, int(round(opt["epochs"] * opt["phase_split"])))
    return e1, max(1, opt["epochs"] - e1)


def _train_plain_regressor(specs, x, y, opt, seed, track=False, hyper=None):
    e1, e2 = _phase_epochs(opt)
    return train_regressor(Network(specs), x, y, epochs_mse=e1, epochs_nll=e2, lr=opt["lr"],
                           batch_size=opt["batch_size"], seed=seed, track=track, hyper=hyper,
                           track_every=opt.get("track_every", 1))


def _denorm(pred, ynorm):
    return MixturePrediction(pred.mus * ynorm.std + ynorm.mean, pred.vars * ynorm.std ** 2)


def regression_fold(cfg_json, x_train, y_train, x_test, seed, workers=1):
    """Train every requested method on one split; predictions are in original target units."""
    cfg = ExperimentConfig.model_validate(cfg_json)
    xn, yn = Normalizer.fit(x_train), Normalizer.fit(y_train)
    xt, yt, xe = xn.apply(x_train), yn.apply(y_train), xn.apply(x_test)
    opt = cfg.optimizer.model_dump()
    specs = cfg.architecture.specs(xt.shape[1], 1)
    preds, timings = {}, {}
    plain = _train_plain_regressor(specs, xt, yt, opt, seed)
    timings["single"] = asdict(plain.timer)
    tradi = _train_plain_regressor(specs, xt, yt, opt, seed, track=True, hyper=cfg.tracker.hyper())
    timings["tradi"] = asdict(tradi.timer)
    passive = bool(np.array_equal(plain.params, tradi.params))
    net = tradi.net
    s = cfg.sampler
    if s.mode != "rff":
        raise ConfigError("regression runs support rff sampling only")
    ens = build_ensemble("rff", s.n_model, net, tradi.tracker, tradi.params, xt, seed=seed + 1,
                         rff_N=s.rff_n, sigma_rbf=s.sigma_rbf, per_layer=s.per_layer)
    preds["tradi"] = _denorm(predict_regression(net, ens, xe), yn)
    preds["single"] = _denorm(predict_regression(net, [WeightSample(plain.params)], xe), yn)
    b = cfg.baseline("mc_dropout")
    if b is not None:
        dspecs = cfg.architecture.specs(xt.shape[1], 1, dropout=b.dropout_rate)
        dres = _train_plain_regressor(dspecs, xt, yt, opt, seed)
        timings["mc_dropout"] = asdict(dres.timer)
        preds["mc_dropout"] = _denorm(mc_dropout_predict(dres.net, dres.params, xe, b.M,
                                                         np.random.default_rng(seed + 3), task="regression"), yn)
    b = cfg.baseline("gauss_perturb")
    if b is not None:
        members = gauss_perturb_ensemble(plain.params, plain.init_var, b.M, b.perturb_scale,
                                         np.random.default_rng(seed + 2))
        preds["gauss_perturb"] = _denorm(predict_regression(plain.net, members, xe), yn)
    b = cfg.baseline("deep_ensemble")
    if b is not None:
        fn = functools.partial(_train_plain_regressor, specs, xt, yt, opt)
        with Timer() as t_de:
            members = deep_ensemble_train(fn, b.M, seed + 4, workers)
        timings["deep_ensemble"] = asdict(t_de)
        parts = [predict_regression(m.net, [WeightSample(m.params)], xe) for m in members]
        preds["deep_ensemble"] = _denorm(MixturePrediction(np.concatenate([p.mus for p in parts], axis=1),
                                                           np.concatenate([p.vars for p in parts], axis=1)), yn)
    return preds, timings, passive


def _std_ratio(x_test, x_train, pred):
    lo, hi = x_train.min(), x_train.max()
    sd = np.sqrt(pred.variance)
    inside = (x_test >= lo) & (x_test <= hi)
    outside = (x_test <= lo - 1.0) | (x_test >= hi + 1.0)
    return float(sd[outside].mean() / sd[inside].mean())


def run_toy(cfg, out, workers):
    d = cfg.data
    train, test = synth_gp(d.n_train, d.n_test, cfg.seed, tuple(d.train_range), tuple(d.test_range))
    write_xy_csv(out / "gp_train.csv", train)
    write_xy_csv(out / "gp_test.csv", test)
    preds, timings, passive = regression_fold(cfg.model_dump(mode="json"), train.features, train.targets,
                                              test.features, cfg.seed, workers)
    rows, dumps = [], []
    checks = {"tracker_passive": passive}
    for method, pred in preds.items():
        dump = M.RegressionDump(np.arange(len(test)), test.targets, pred.mus, pred.vars)
        dumps.append(str(M.write_dump(out / f"{method}.dump.csv", dump)))
        ratio = _std_ratio(test.features[:, 0], train.features[:, 0], pred)
        for name, val in (("rmse", M.rmse(dump)), ("nll", M.regression_mixture_nll(dump)), ("std_ratio", ratio)):
            rows.append({"method": method, "metric": name, "mean": val, "std": 0.0, "n": 1})
    _efficiency_checks(timings, checks)
    return rows, timings, dumps, [], checks


def _uci_path(cfg):
    if cfg.data.path:
        return _require(cfg.data.path)
    return _require(data_dir() / "uci" / f"{cfg.data.source}.csv")


def run_uci(cfg, out, workers):
    ds = uci_load(_uci_path(cfg), cfg.data.target_column)
    plan = make_folds(len(ds), cfg.data.folds, cfg.seed, cfg.data.test_fraction)
    cfg_json = cfg.model_dump(mode="json")
    jobs = [(cfg_json, ds.features[tr], ds.targets[tr], ds.features[te], cfg.seed + 1000 * i)
            for i, (tr, te) in enumerate(zip(plan.train, plan.test))]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(regression_fold, *zip(*jobs)))
    else:
        results = [regression_fold(*job) for job in jobs]
    per_fold, dumps_acc = {}, {}
    timings = {}
    passive = True
    for i, (preds, t, p) in enumerate(results):
        passive &= p
        for k, v in t.items():
            timings.setdefault(k, {"wall": 0.0, "cpu": 0.0})
            timings[k]["wall"] += v["wall"]
            timings[k]["cpu"] += v["cpu"]
        te = plan.test[i]
        for method, pred in preds.items():
            dump = M.RegressionDump([f"{i}-{j}" for j in te], ds.targets[te], pred.mus, pred.vars)
            per_fold.setdefault(method, []).append((M.rmse(dump), M.regression_mixture_nll(dump)))
            dumps_acc.setdefault(method, []).append(dump)
    rows, dumps = [], []
    for method, vals in per_fold.items():
        arr = np.array(vals)
        for j, name in enumerate(("rmse", "nll")):
            rows.append({"method": method, "metric": name, "mean": float(arr[:, j].mean()),
                         "std": float(arr[:, j].std()), "n": len(arr)})
        parts = dumps_acc[method]
        joined = M.RegressionDump(np.concatenate([p.ids for p in parts]), np.concatenate([p.targets for p in parts]),
                                  np.concatenate([p.mus for p in parts]), np.concatenate([p.vars for p in parts]))
        dumps.append(str(M.write_dump(out / f"{method}.dump.csv", joined)))
    checks = {"tracker_passive": passive, "folds": len(plan), "n_rows": len(ds)}
    _efficiency_checks(timings, checks)
    return rows, timings, dumps, [], checks


# --- entry points -------------------------------------------------------------

TASKS = {
    "toy_regression": run_toy,
    "uci_regression": run_uci,
    "mnist_classification": run_classification,
    "mnist_ood": run_classification,
}


def run_experiment(config, out_dir=None, workers=1, seed=None):
    """Run one configured experiment and write ``report.json`` and ``table.csv``."""
    cfg = config if isinstance(config, ExperimentConfig) else load_config(config)
    if seed is not None:
        cfg = cfg.model_copy(update={"seed": seed})
    out = Path(out_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    kernel_load = warm_up()
    rows, timings, dumps, curves, checks = TASKS[cfg.task](cfg, out, workers)
    timings["tracker_kernel_load"] = {"wall": kernel_load}
    report = RunReport(config_run_id(cfg), cfg.task, rows, timings, curves, dumps, checks,
                       cfg.model_dump(mode="json"))
    (out / "report.json").write_text(json.dumps(report.to_json(), indent=2, default=float))
    with (out / "table.csv").open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["method", "metric", "mean", "std", "n"])
        for r in rows:
            w.writerow([r["method"], r["metric"], repr(r["mean"]), repr(r["std"]), r["n"]])
    return report


def emit_curves(dump_paths, kinds=CURVE_KINDS, out_dir=None, bins=10, thresholds=21, binning="width"):
    """Write one ``<stem>.<kind>.curve.csv`` per dump and curve kind."""
    written = []
    for p in dump_paths:
        p = Path(p)
        if not p.exists():
            raise FileNotFoundError(f"missing dump {p}")
        dump = M.read_dump(p)
        if not isinstance(dump, M.ClassificationDump):
            raise ContractError(f"{p} is not a classification dump")
        stem = p.name[:-len(".dump.csv")] if p.name.endswith(".dump.csv") else p.stem
        target = Path(out_dir) if out_dir else p.parent
        target.mkdir(parents=True, exist_ok=True)
        for kind in kinds:
            if kind == "calib":
                curve = M.calibration_curve(dump, bins, binning)
            elif kind == "avc":
                curve = M.accuracy_vs_confidence(dump, np.linspace(0.0, 1.0, thresholds))
            elif kind == "prec":
                curve = M.precision_calibration_curve(dump, bins, binning)
            else:
                raise ContractError(f"unknown curve kind {kind!r}")
            written.append(M.write_curve(target / f"{stem}.{kind}.curve.csv", curve))
    return written

"""Transfer probes, feature compactness, and the Monte-Carlo loss check.

``linear_probe`` trains a fresh classifier on a backbone's penultimate
(post-ReLU) representation, standardised with frozen train-split statistics.
In ``finetune`` mode the backbone is updated as well.
"""

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .distill import SGD, cross_entropy, learning_rate, TrainConfig
from .errors import ConfigError, DegenerateError
from .linalg import as_feature_matrix
from .nn import backward, forward
from .rng import SplitMix64, derive_seed

LINEAR, FINETUNE = "linear", "finetune"


@dataclass(frozen=True)
class ProbeConfig:
    mode: str = LINEAR
    epochs: int = 50
    lrs: tuple = (0.01, 0.001)
    batch_size: int = 64
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    standardize: bool = True

    def validate(self):
        if self.mode not in (LINEAR, FINETUNE):
            raise ConfigError(f"probe mode must be linear or finetune, got {self.mode!r}")
        if self.epochs < 1 or self.batch_size < 1 or not self.lrs:
            raise ConfigError("probe needs epochs >= 1, batch_size >= 1 and at least one lr")
        if any(not lr > 0 for lr in self.lrs):
            raise ConfigError("probe learning rates must be positive")


@dataclass
class ProbeResult:
    top1: float
    per_class: np.ndarray
    class_counts: np.ndarray
    mode: str
    lr: float
    seeds: tuple
    by_lr: dict = field(default_factory=dict)


def _relu_after_tap(net):
    nxt = net.spec[net.tap + 1] if net.tap + 1 < len(net.spec) else None
    return nxt is not None and nxt.kind == "relu"


def _representation(net, x):
    feats, _, cache = forward(net, x)
    if _relu_after_tap(net):
        return np.maximum(feats, 0.0), feats, cache
    return feats, feats, cache


def _accuracy(pred, labels, classes):
    per_class = np.zeros(classes)
    counts = np.bincount(labels, minlength=classes)
    for c in range(classes):
        if counts[c]:
            per_class[c] = np.mean(pred[labels == c] == c)
    return float(np.mean(pred == labels)), per_class, counts


def _run_probe(backbone, x_tr, y_tr, x_te, y_te, classes, cfg, lr):
    net = backbone.copy()
    rep_tr, _, _ = _representation(net, x_tr)
    mu = rep_tr.mean(axis=0)
    sd = np.maximum(rep_tr.std(axis=0), 1e-12) if cfg.standardize else np.ones_like(mu)
    if not cfg.standardize:
        mu = np.zeros_like(mu)
    d = rep_tr.shape[1]

    stream = SplitMix64(derive_seed(cfg.seed, "probe-head"))
    head = np.concatenate([stream.normal((d, classes), np.sqrt(2.0 / d)).ravel(), np.zeros(classes)])
    params, masks = [head], [None]
    if cfg.mode == FINETUNE:
        params.append(net.params)
        masks.append(None)
    opt = SGD(params, cfg.momentum, cfg.weight_decay, masks)
    sched = TrainConfig(lr0=lr, epochs=cfg.epochs)
    shuffle = SplitMix64(derive_seed(cfg.seed, "probe-shuffle"))
    fixed = (rep_tr - mu) / sd
    n = x_tr.shape[0]

    for epoch in range(cfg.epochs):
        rate = learning_rate(sched, epoch)
        order = shuffle.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            w, b = head[:d * classes].reshape(d, classes), head[d * classes:]
            if cfg.mode == LINEAR:
                z = fixed[idx]
            else:
                rep, feats, cache = _representation(net, x_tr[idx])
                z = (rep - mu) / sd
            _, g = cross_entropy(z @ w + b, y_tr[idx])
            grads = [np.concatenate([(z.T @ g).ravel(), g.sum(axis=0)])]
            if cfg.mode == FINETUNE:
                dz = (g @ w.T) / sd
                if _relu_after_tap(net):
                    dz = dz * (feats > 0)
                grads.append(backward(net, cache, feature_grad=dz))
            opt.step(grads, rate)

    w, b = head[:d * classes].reshape(d, classes), head[d * classes:]
    rep_te, _, _ = _representation(net, x_te)
    pred = np.argmax(((rep_te - mu) / sd) @ w + b, axis=1)
    return _accuracy(pred, y_te, classes)


def linear_probe(backbone, train, test, cfg=ProbeConfig()):
    """Train a new linear classifier on ``backbone`` features; report test top-1.

    ``train`` and ``test`` are ``(samples, labels)`` pairs. Every learning
    rate in ``cfg.lrs`` is tried and the best test accuracy is reported
    (first lr wins ties).
    """
    cfg.validate()
    x_tr, y_tr = np.asarray(train[0], dtype=np.float64), np.asarray(train[1], dtype=np.int64)
    x_te, y_te = np.asarray(test[0], dtype=np.float64), np.asarray(test[1], dtype=np.int64)
    classes = int(max(y_tr.max(), y_te.max())) + 1
    best, by_lr = None, {}
    for lr in cfg.lrs:
        top1, per_class, counts = _run_probe(backbone, x_tr, y_tr, x_te, y_te, classes, cfg, lr)
        by_lr[lr] = top1
        if best is None or top1 > best.top1:
            best = ProbeResult(top1, per_class, counts, cfg.mode, lr, (cfg.seed,))
    best.by_lr = by_lr
    return best


def compactness(features, labels):
    """Mean distance to own class centroid over mean distance between class centroids.

    Lower means tighter classes relative to their separation.
    """
    x = as_feature_matrix(features)
    y = np.asarray(labels, dtype=np.int64)
    classes = np.unique(y)
    if classes.size < 2:
        raise DegenerateError("compactness needs at least two classes")
    counts = np.array([np.sum(y == c) for c in classes])
    if counts.min() < 2:
        raise DegenerateError("compactness needs at least two samples per class")
    cents = np.stack([x[y == c].mean(axis=0) for c in classes])
    lookup = {c: i for i, c in enumerate(classes)}
    own = cents[[lookup[c] for c in y]]
    within = float(np.mean(np.linalg.norm(x - own, axis=1)))
    i, j = np.triu_indices(classes.size, k=1)
    pair = np.linalg.norm(cents[i] - cents[j], axis=1)
    if np.any(pair == 0.0):
        raise DegenerateError("two class centroids coincide")
    return within / float(np.mean(pair))


# ---------------------------------------------------------------- loss expectation check

@dataclass(frozen=True)
class Theorem1Config:
    """Grid of teacher stds for checking E[(T - S)^2] = sigma^2 + sigma_s^2."""

    sigma_list: tuple = (0.5, 1.0, 2.0, 4.0)
    sigma_s: float = 1.0
    samples: int = 1_000_000
    seed: int = 0

    def validate(self):
        if any(not s > 0 for s in self.sigma_list) or not self.sigma_s > 0:
            raise ConfigError("all sigmas must be positive")
        if self.samples < 10_000:
            raise ConfigError("need at least 10^4 samples")


@dataclass(frozen=True)
class Theorem1Row:
    sigma: float
    estimate: float
    analytic: float
    stderr: float
    passed: bool


@dataclass
class Theorem1Table:
    rows: list
    increasing: bool

    @property
    def passed(self):
        return self.increasing and all(r.passed for r in self.rows)

    def to_csv(self):
        buf = io.StringIO()
        out = csv.writer(buf, lineterminator="\n")
        out.writerow(["sigma", "estimate", "analytic", "stderr", "pass"])
        for r in self.rows:
            out.writerow([repr(r.sigma), repr(r.estimate), repr(r.analytic), repr(r.stderr),
                          int(r.passed and self.increasing)])
        return buf.getvalue()


def verify_theorem1(cfg=Theorem1Config()):
    """Monte-Carlo estimate of E[(T - S)^2] for T ~ N(0, sigma^2), S ~ N(0, sigma_s^2).

    Each grid point draws from its own stream. A point passes when the
    estimate lies within 4 standard errors of the closed form; the table
    also checks that estimates strictly increase with sigma.
    """
    cfg.validate()
    rows = []
    for i, sigma in enumerate(cfg.sigma_list):
        stream = SplitMix64(derive_seed(cfg.seed, "theorem1", i))
        t = stream.normal(cfg.samples, sigma)
        s = stream.normal(cfg.samples, cfg.sigma_s)
        sq = (t - s) ** 2
        estimate = float(sq.mean())
        stderr = float(sq.std(ddof=1) / np.sqrt(cfg.samples))
        analytic = sigma ** 2 + cfg.sigma_s ** 2
        rows.append(Theorem1Row(float(sigma), estimate, analytic, stderr,
                                abs(estimate - analytic) <= 4 * stderr))
    order = np.argsort(cfg.sigma_list, kind="stable")
    ests = [rows[k].estimate for k in order]
    increasing = all(b > a for a, b in zip(ests, ests[1:]))
    return Theorem1Table(rows, increasing)

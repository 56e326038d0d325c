"""Distillation training: target caching, losses, and the SGD loop.

In ``kdep`` mode the student's pre-ReLU penultimate features regress
directly onto teacher features that were aligned to the student width and
transformed offline. The other modes are baselines sharing the same loop:
supervised cross-entropy, logits distillation, and feature distillation
through a learnable projection head trained jointly with the student.
"""

import hashlib
import os
import time
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import align as align_mod
from . import transform as transform_mod
from .container import content_hash, read_container, write_container
from .errors import ConfigError, DimensionError, KindError, NumericError, ParamError, ShapeError
from .nn import backward, forward
from .rng import SplitMix64, derive_seed

KDEP = "kdep"
SUPERVISED = "supervised"
LOGITS_KD = "logits_kd"
PARAMETRIC_KDEP = "parametric_kdep"
MODES = (KDEP, SUPERVISED, LOGITS_KD, PARAMETRIC_KDEP)


# ---------------------------------------------------------------- losses

def kdep_loss(student_feats, targets, w=1.0):
    """``w * mean_i ||f_i - t_i||^2`` and its gradient w.r.t. the student features."""
    f = np.asarray(student_feats, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if f.shape != t.shape:
        raise ShapeError(f"student features {f.shape} vs targets {t.shape}")
    b = f.shape[0]
    diff = f - t
    return w * float(np.sum(diff * diff)) / b, (2.0 * w / b) * diff


def log_softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=1, keepdims=True))


def logits_kd_loss(student_logits, teacher_logits, tau=4.0):
    """``tau^2 * mean_i KL(softmax(t_i / tau) || softmax(s_i / tau))`` and d/d(student logits)."""
    if not tau > 0:
        raise ParamError(f"temperature must be positive, got {tau}")
    s = np.asarray(student_logits, dtype=np.float64)
    t = np.asarray(teacher_logits, dtype=np.float64)
    if s.shape != t.shape:
        raise ShapeError(f"student logits {s.shape} vs teacher logits {t.shape}")
    b = s.shape[0]
    log_ps = log_softmax(s / tau)
    log_pt = log_softmax(t / tau)
    pt = np.exp(log_pt)
    kl = np.sum(pt * (log_pt - log_ps))
    grad = (tau / b) * (np.exp(log_ps) - pt)
    return tau * tau * float(kl) / b, grad


def cross_entropy(logits, labels):
    z = np.asarray(logits, dtype=np.float64)
    b = z.shape[0]
    logp = log_softmax(z)
    loss = -float(np.sum(logp[np.arange(b), labels])) / b
    grad = np.exp(logp)
    grad[np.arange(b), labels] -= 1.0
    return loss, grad / b


# ---------------------------------------------------------------- config / optimiser

@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs: int = 30
    batch_size: int = 64
    loss_weight: float = 1.0
    seed: int = 0
    schedule: str = "step"
    mode: str = KDEP
    temperature: float = 4.0

    def validate(self):
        if not self.lr0 > 0:
            raise ConfigError(f"lr0 must be positive, got {self.lr0}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if not self.loss_weight > 0:
            raise ConfigError(f"loss_weight must be positive, got {self.loss_weight}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be >= 1")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be nonnegative")
        if self.schedule not in ("step", "constant"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.mode == LOGITS_KD and not self.temperature > 0:
            raise ConfigError("temperature must be positive")


def learning_rate(config, epoch):
    """Step decay: divide by 10 at 1/3 and 2/3 of the epochs."""
    if config.schedule == "constant":
        return config.lr0
    drops = min((3 * epoch) // config.epochs, 2)
    return config.lr0 * 10.0 ** (-drops)


class SGD:
    """Momentum SGD: ``v = m v + g + wd * mask * theta``; ``theta -= lr v``.

    Operates in place on a list of flat parameter arrays.
    """

    def __init__(self, params, momentum, weight_decay, decay_masks=None):
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.masks = decay_masks or [None] * len(params)
        self.buffers = [np.zeros_like(p) for p in params]

    def step(self, grads, lr):
        for p, g, v, mask in zip(self.params, grads, self.buffers, self.masks):
            decay = self.weight_decay * (p if mask is None else mask * p)
            v *= self.momentum
            v += g + decay
            p -= lr * v


# ---------------------------------------------------------------- targets

def extract_features(net, samples, chunk=4096):
    """Pre-ReLU tap features of ``net`` over ``samples``."""
    out = []
    for start in range(0, samples.shape[0], chunk):
        f, _, _ = forward(net, samples[start:start + chunk])
        out.append(f)
    return np.concatenate(out, axis=0)


def extract_logits(net, samples, chunk=4096):
    out = []
    for start in range(0, samples.shape[0], chunk):
        _, logits, _ = forward(net, samples[start:start + chunk])
        if logits is None:
            raise ShapeError("network has no classifier head")
        out.append(logits)
    return np.concatenate(out, axis=0)


def target_key(teacher, samples, artifact, transform):
    h = hashlib.sha256()
    for part in (teacher.digest(), content_hash({"x": np.asarray(samples)}),
                 content_hash(artifact.to_sections()), content_hash(transform.to_sections())):
        h.update(part.encode())
    return h.hexdigest()


def precompute_targets(teacher, samples, artifact, transform, cache_dir=None):
    """Aligned and transformed teacher features for every sample.

    With ``cache_dir`` set, targets are stored as ``targets-<key>.kten``
    keyed by the hash of all inputs and reloaded on later calls.
    Returns ``(targets, key)``.
    """
    if artifact.kind not in align_mod.NON_PARAMETRIC:
        raise KindError("targets are only precomputed for non-parametric aligners")
    if teacher.feature_dim != artifact.d_teacher:
        raise DimensionError(f"teacher tap width {teacher.feature_dim} != aligner input {artifact.d_teacher}")
    key = target_key(teacher, samples, artifact, transform)
    path = os.path.join(cache_dir, f"targets-{key[:16]}.kten") if cache_dir else None
    if path and os.path.exists(path):
        return read_container(path)["targets"], key
    feats = extract_features(teacher, samples)
    targets = transform_mod.apply_transform(transform, align_mod.apply_alignment(artifact, feats))
    if path:
        write_container(path, {"targets": targets})
    return targets, key


# ---------------------------------------------------------------- training loop

@dataclass
class TrainData:
    """Everything a training mode may need; unused fields stay ``None``."""

    inputs: np.ndarray
    targets: Optional[np.ndarray] = None
    labels: Optional[np.ndarray] = None
    teacher_logits: Optional[np.ndarray] = None
    teacher_feats: Optional[np.ndarray] = None
    head: Optional[object] = None
    input_hashes: dict = field(default_factory=dict)


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    mean_loss: float


@dataclass
class RunManifest:
    config: dict
    epochs: list
    hashes: dict
    student_hash: str
    wall_seconds: float = 0.0

    def metric_block(self):
        """Deterministic part of the manifest: hashes and per-epoch metrics."""
        lines = [f"{k}={v}" for k, v in sorted(self.hashes.items())]
        lines.append(f"student={self.student_hash}")
        lines.append("epoch,lr,mean_loss")
        lines += [f"{r.epoch},{r.lr!r},{r.mean_loss!r}" for r in self.epochs]
        return "\n".join(lines) + "\n"

    def to_text(self):
        config = "".join(f"{k}={v}\n" for k, v in sorted(self.config.items()))
        return (f"[config]\n{config}[metrics]\n{self.metric_block()}"
                f"[timing]\nwall_seconds={self.wall_seconds:.3f}\n")

    @classmethod
    def from_text(cls, text):
        section, config, hashes, epochs, wall = None, {}, {}, [], 0.0
        for line in text.splitlines():
            if line.startswith("[") and line.endswith("]"):
                section = line[1:-1]
                continue
            if not line:
                continue
            if section == "config":
                k, _, v = line.partition("=")
                config[k] = v
            elif section == "metrics":
                if line.startswith("epoch,"):
                    continue
                if "=" in line:
                    k, _, v = line.partition("=")
                    hashes[k] = v
                else:
                    e, lr, loss = line.split(",")
                    epochs.append(EpochRecord(int(e), float(lr), float(loss)))
            elif section == "timing":
                wall = float(line.partition("=")[2])
        student = hashes.pop("student", "")
        return cls(config, epochs, hashes, student, wall)


def _check_inputs(config, student, data):
    if config.mode == KDEP:
        if data.targets is None:
            raise ConfigError("kdep mode needs precomputed targets")
        if data.targets.shape != (data.inputs.shape[0], student.feature_dim):
            raise ShapeError(f"targets {data.targets.shape} do not match student width {student.feature_dim}")
    elif config.mode == SUPERVISED:
        if data.labels is None or not student.has_head:
            raise ConfigError("supervised mode needs labels and a student with a classifier head")
    elif config.mode == LOGITS_KD:
        if data.teacher_logits is None or not student.has_head:
            raise ConfigError("logits_kd mode needs teacher logits and a student with a classifier head")
        if data.teacher_logits.shape[1] != student.spec[-1].n_out:
            raise ShapeError("teacher and student class counts differ")
    elif config.mode == PARAMETRIC_KDEP:
        if data.teacher_feats is None or data.head is None:
            raise ConfigError("parametric_kdep mode needs raw teacher features and a projection head")
        if data.head.d_student != student.feature_dim or data.head.d_teacher != data.teacher_feats.shape[1]:
            raise ShapeError("projection head widths do not match student and teacher")


def _batch_step(config, student, data, idx):
    x = data.inputs[idx]
    feats, logits, cache = forward(student, x)
    if config.mode == KDEP:
        loss, fg = kdep_loss(feats, data.targets[idx], config.loss_weight)
        return loss, [backward(student, cache, feature_grad=fg)]
    if config.mode == SUPERVISED:
        loss, lg = cross_entropy(logits, data.labels[idx])
        return loss, [backward(student, cache, logit_grad=lg)]
    if config.mode == LOGITS_KD:
        loss, lg = logits_kd_loss(logits, data.teacher_logits[idx], config.temperature)
        return loss, [backward(student, cache, logit_grad=lg)]
    head = data.head
    out, head_cache = head.forward(feats, train=True)
    loss, og = kdep_loss(out, data.teacher_feats[idx], config.loss_weight)
    head_grads, fg = head.backward(head_cache, og)
    return loss, [backward(student, cache, feature_grad=fg), head_grads]


def train(config, student, data, extra_config=None):
    """Train ``student`` in place under ``config``; returns ``(student, manifest)``.

    Batches come from a seeded shuffle each epoch; the last partial batch is
    kept. In ``parametric_kdep`` mode ``data.head`` is updated jointly.
    """
    config.validate()
    _check_inputs(config, student, data)
    started = time.perf_counter()

    params = [student.params]
    masks = [None]
    if config.mode == PARAMETRIC_KDEP:
        params.append(data.head.params)
        masks.append(data.head.decay_mask())
    opt = SGD(params, config.momentum, config.weight_decay, masks)
    shuffle = SplitMix64(derive_seed(config.seed, "shuffle"))
    n = data.inputs.shape[0]

    records = []
    for epoch in range(config.epochs):
        lr = learning_rate(config, epoch)
        order = shuffle.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            loss, grads = _batch_step(config, student, data, idx)
            if not np.isfinite(loss):
                raise NumericError(f"loss diverged at epoch {epoch}")
            opt.step(grads, lr)
            total += loss * idx.size
        records.append(EpochRecord(epoch, lr, total / n))

    snapshot = {f"train.{k}": v for k, v in asdict(config).items()}
    snapshot.update(extra_config or {})
    manifest = RunManifest(
        config=snapshot,
        epochs=records,
        hashes=dict(data.input_hashes),
        student_hash=student.digest(),
        wall_seconds=time.perf_counter() - started,
    )
    return student, manifest

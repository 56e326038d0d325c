"""Namespaced ``key=value`` configuration with typed defaults.

Config files hold one ``key=value`` per line (``#`` starts a comment).
Command-line ``--key value`` overrides win over the file. Unknown keys are
errors.
"""

import hashlib
from dataclasses import dataclass

from .errors import ConfigError


@dataclass(frozen=True)
class Key:
    default: object
    kind: str  # int | float | str | ints | floats | strs
    help: str


KEYS = {
    "data.seed": Key(0, "int", "seed for centroids and all sample noise"),
    "data.classes": Key(10, "int", "pretraining classes"),
    "data.dim": Key(32, "int", "input dimension"),
    "data.pretrain_per_class": Key(500, "int", "pretraining samples per class"),
    "data.pretrain_spread": Key(0.25, "float", "within-class std of the pretraining corpus"),
    "data.fraction": Key(0.2, "float", "stratified fraction of the corpus used for distillation"),
    "data.downstream_tasks": Key(2, "int", "number of downstream tasks"),
    "data.downstream_classes": Key(10, "int", "classes per downstream task"),
    "data.downstream_train_per_class": Key(10, "int", "downstream training samples per class"),
    "data.downstream_test_per_class": Key(100, "int", "downstream test samples per class"),
    "data.downstream_spread": Key(0.2, "float", "within-class std of downstream tasks"),
    "data.downstream_shift": Key(0.5, "float", "centroid displacement of downstream classes"),
    "teacher.hidden": Key(128, "int", "teacher hidden width"),
    "teacher.dim": Key(64, "int", "teacher feature width D_t"),
    "teacher.seed": Key(1000, "int", "teacher initialisation and shuffle seed"),
    "teacher.epochs": Key(30, "int", "teacher training epochs"),
    "teacher.lr0": Key(0.05, "float", "teacher initial learning rate"),
    "teacher.batch_size": Key(64, "int", "teacher batch size"),
    "teacher.weight_decay": Key(5e-4, "float", "teacher weight decay"),
    "student.hidden": Key(64, "int", "student hidden width"),
    "student.dim": Key(16, "int", "student feature width D_s"),
    "align.kind": Key("svd", "str", "aligner fitted by fit-align: svd|cs_var|cs_rand|interp"),
    "align.seed": Key(0, "int", "seed for random channel selection"),
    "transform.kind": Key("pts", "str", "target transform fitted by fit-align: identity|sn|sm|pts"),
    "transform.T": Key(0.1, "float", "PTS temperature"),
    "transform.n": Key(3.0, "float", "PTS exponent"),
    "train.lr0": Key(0.05, "float", "student initial learning rate"),
    "train.momentum": Key(0.9, "float", "SGD momentum"),
    "train.weight_decay": Key(5e-4, "float", "student weight decay"),
    "train.epochs": Key(30, "int", "student pretraining epochs"),
    "train.batch_size": Key(64, "int", "student batch size"),
    "train.loss_weight": Key(1.0, "float", "feature loss weight w"),
    "train.temperature": Key(4.0, "float", "logits-KD temperature"),
    "distill.methods": Key(("random_init", "sp", "parametric", "svd", "svd_sn", "svd_sm", "svd_pts", "logits_kd"),
                           "strs", "methods to train and probe"),
    "distill.seeds": Key((0, 1, 2), "ints", "student seeds"),
    "distill.head_position": Key("pre_relu", "str", "parametric head input: pre_relu|post_relu"),
    "probe.mode": Key("linear", "str", "linear|finetune"),
    "probe.epochs": Key(50, "int", "probe epochs"),
    "probe.lrs": Key((0.01, 0.001), "floats", "probe learning-rate grid (best reported)"),
    "probe.batch_size": Key(64, "int", "probe batch size"),
    "probe.weight_decay": Key(5e-4, "float", "probe weight decay"),
    "theorem.sigmas": Key((0.5, 1.0, 2.0, 4.0), "floats", "teacher std grid"),
    "theorem.sigma_s": Key(1.0, "float", "student std"),
    "theorem.samples": Key(1_000_000, "int", "Monte-Carlo samples per grid point"),
    "theorem.seed": Key(0, "int", "Monte-Carlo seed"),
}


def parse_value(key, raw):
    spec = KEYS[key]
    raw = raw.strip()
    try:
        if spec.kind == "int":
            return int(raw)
        if spec.kind == "float":
            return float(raw)
        if spec.kind == "str":
            return raw
        items = [p.strip() for p in raw.split(",") if p.strip()]
        if spec.kind == "ints":
            return tuple(int(p) for p in items)
        if spec.kind == "floats":
            return tuple(float(p) for p in items)
        return tuple(items)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {spec.kind}") from None


def format_value(value):
    if isinstance(value, tuple):
        return ",".join(format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config_text(text, source="<config>"):
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {line!r}")
        if key not in KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
        values[key] = parse_value(key, raw)
    return values


def resolve(file_values=None, overrides=None):
    """Defaults, then file values, then overrides (raw strings or typed values)."""
    cfg = {k: spec.default for k, spec in KEYS.items()}
    for layer in (file_values or {}, overrides or {}):
        for key, value in layer.items():
            if key not in KEYS:
                raise ConfigError(f"unknown config key {key!r}")
            cfg[key] = parse_value(key, value) if isinstance(value, str) else value
    return cfg


def config_lines(cfg):
    return [f"{k}={format_value(cfg[k])}" for k in sorted(cfg)]


def config_hash(cfg):
    return hashlib.sha256("\n".join(config_lines(cfg)).encode()).hexdigest()[:16]

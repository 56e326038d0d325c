"""End-to-end experiment stages operating on one run directory.

Each stage reads what earlier stages wrote, writes its own outputs
atomically, and skips work whose outputs already exist ("cache hit").
A run directory is named by the hash of the fully resolved config.
"""

import csv
import io
import logging
import os
from dataclasses import dataclass

import numpy as np

from . import align as al
from . import transform as tf
from .config import config_hash, config_lines, format_value
from .container import atomic_write_bytes, content_hash, read_container, write_container
from .data import DOWNSTREAM_TEST, DOWNSTREAM_TRAIN, PRETRAIN, Dataset, DatasetSpec, generate, subsample
from .distill import (KDEP, LOGITS_KD, PARAMETRIC_KDEP, SUPERVISED, RunManifest, TrainConfig, TrainData,
                      extract_features, extract_logits, precompute_targets, train)
from .errors import ConfigError, IoError
from .evaluate import ProbeConfig, compactness, linear_probe
from .linalg import channel_stats, std_ratio
from .nn import Network, init_network, mlp_spec
from .rng import derive_seed

log = logging.getLogger("kdep")

REPORT_COLUMNS = ["method", "data_fraction", "epochs", "seed", "probe_top1",
                  "std_ratio_before", "std_ratio_after", "compactness_teacher"]
ALIGN_NAMES = (al.CS_VAR, al.CS_RAND, al.SVD, al.INTERP)
TRANSFORM_NAMES = (tf.SN, tf.SM, tf.PTS, tf.IDENTITY)


@dataclass(frozen=True)
class MethodPlan:
    name: str
    mode: str = None  # None: untrained random initialisation
    align: str = None
    transform: str = tf.IDENTITY
    head_position: str = "pre_relu"


def method_plan(name, cfg):
    """Translate a method name into a training mode plus aligner/transform."""
    if name == "random_init":
        return MethodPlan(name)
    if name == "sp":
        return MethodPlan(name, SUPERVISED)
    if name == "logits_kd":
        return MethodPlan(name, LOGITS_KD)
    if name == "parametric":
        return MethodPlan(name, PARAMETRIC_KDEP, head_position=cfg["distill.head_position"])
    if name in ("parametric_pre", "parametric_post"):
        return MethodPlan(name, PARAMETRIC_KDEP, head_position=name.split("_", 1)[1] + "_relu")
    for a in ALIGN_NAMES:
        if name == a:
            return MethodPlan(name, KDEP, a)
        if name.startswith(a + "_") and name[len(a) + 1:] in TRANSFORM_NAMES:
            return MethodPlan(name, KDEP, a, name[len(a) + 1:])
    raise ConfigError(f"unknown method {name!r}")


def run_dir_for(cfg, root=None):
    root = root or os.environ.get("KDEP_RUN_ROOT", "runs")
    return os.path.join(root, config_hash(cfg))


class Run:
    def __init__(self, cfg, directory=None):
        self.cfg = cfg
        self.dir = directory or run_dir_for(cfg)
        os.makedirs(self.dir, exist_ok=True)
        config_path = self.path("config.txt")
        if not os.path.exists(config_path):
            atomic_write_bytes(config_path, ("\n".join(config_lines(cfg)) + "\n").encode())

    def path(self, *parts):
        return os.path.join(self.dir, *parts)

    def cached(self, *paths):
        if all(os.path.exists(p) for p in paths):
            for p in paths:
                log.info("cache hit: %s", os.path.relpath(p, self.dir))
            return True
        return False

    def require(self, path, stage):
        if not os.path.exists(path):
            raise IoError(f"missing {os.path.relpath(path, self.dir)} in {self.dir}; run `{stage}` first")
        return read_container(path)


# ---------------------------------------------------------------- data

def dataset_specs(cfg):
    c = cfg
    pre = DatasetSpec(c["data.classes"], c["data.pretrain_per_class"], c["data.pretrain_spread"],
                      c["data.seed"], PRETRAIN, c["data.dim"])
    tasks = []
    for t in range(c["data.downstream_tasks"]):
        common = dict(classes=c["data.downstream_classes"], spread=c["data.downstream_spread"],
                      seed=c["data.seed"], dim=c["data.dim"], shift=c["data.downstream_shift"], task=t)
        tasks.append((DatasetSpec(per_class=c["data.downstream_train_per_class"], role=DOWNSTREAM_TRAIN, **common),
                      DatasetSpec(per_class=c["data.downstream_test_per_class"], role=DOWNSTREAM_TEST, **common)))
    return pre, tasks


def _save_dataset(run, name, ds):
    write_container(run.path("data", name + ".kten"), ds.to_sections())
    atomic_write_bytes(run.path("data", name + ".manifest"), ds.manifest().encode())


def _load_dataset(run, name, spec):
    s = run.require(run.path("data", name + ".kten"), "gen-data")
    return Dataset(s["samples"], s["classes"], spec)


def gen_data(run):
    pre, tasks = dataset_specs(run.cfg)
    names = ["pretrain"] + [f"task{t}_{split}" for t in range(len(tasks)) for split in ("train", "test")]
    paths = [run.path("data", n + ".kten") for n in names]
    if run.cached(*paths):
        return
    _save_dataset(run, "pretrain", generate(pre))
    for t, (tr, te) in enumerate(tasks):
        _save_dataset(run, f"task{t}_train", generate(tr))
        _save_dataset(run, f"task{t}_test", generate(te))
    log.info("generated %d datasets", len(names))


def load_data(run):
    pre, tasks = dataset_specs(run.cfg)
    pretrain = _load_dataset(run, "pretrain", pre)
    down = [(_load_dataset(run, f"task{t}_train", tr), _load_dataset(run, f"task{t}_test", te))
            for t, (tr, te) in enumerate(tasks)]
    return pretrain, down


def distillation_set(run, pretrain):
    return subsample(pretrain, run.cfg["data.fraction"], derive_seed(run.cfg["data.seed"], "distill-subset"))


# ---------------------------------------------------------------- teacher

def _accuracy(net, x, y):
    return float(np.mean(np.argmax(extract_logits(net, x), axis=1) == y))


def train_teacher(run):
    """Supervised teacher on the full corpus, using the generating class ids as labels."""
    path, manifest_path = run.path("teacher.kten"), run.path("teacher.manifest")
    if run.cached(path, manifest_path):
        return load_teacher(run)
    c = run.cfg
    pretrain, _ = load_data(run)
    spec = mlp_spec(c["data.dim"], c["teacher.hidden"], c["teacher.dim"], c["data.classes"])
    teacher = init_network(spec, c["teacher.seed"])
    tc = TrainConfig(lr0=c["teacher.lr0"], epochs=c["teacher.epochs"], batch_size=c["teacher.batch_size"],
                     weight_decay=c["teacher.weight_decay"], seed=c["teacher.seed"], mode=SUPERVISED)
    data = TrainData(pretrain.samples, labels=pretrain.classes, input_hashes={"data": pretrain.digest()})
    teacher, manifest = train(tc, teacher, data, {"role": "teacher"})
    acc = _accuracy(teacher, pretrain.samples, pretrain.classes)
    manifest.config["teacher.train_accuracy"] = repr(acc)
    log.info("teacher pretraining-set accuracy %.4f", acc)
    write_container(path, teacher.to_sections())
    atomic_write_bytes(manifest_path, manifest.to_text().encode())
    return teacher


def load_teacher(run):
    return Network.from_sections(run.require(run.path("teacher.kten"), "train-teacher"))


def teacher_accuracy(run):
    text = open(run.path("teacher.manifest")).read()
    return float(RunManifest.from_text(text).config["teacher.train_accuracy"])


# ---------------------------------------------------------------- extraction and alignment

def extract(run):
    """Teacher pre-ReLU features and logits on the distillation subset."""
    path = run.path("teacher_outputs.kten")
    if run.cached(path):
        return read_container(path)
    teacher = load_teacher(run)
    pretrain, _ = load_data(run)
    subset = distillation_set(run, pretrain)
    sections = {
        "samples": subset.samples,
        "classes": subset.classes,
        "features": extract_features(teacher, subset.samples),
        "logits": extract_logits(teacher, subset.samples),
    }
    write_container(path, sections)
    return sections


def load_outputs(run):
    return run.require(run.path("teacher_outputs.kten"), "extract")


def fit_align(run, kind=None, transform_kind=None):
    """Fit (or load) an aligner and a target transform on the teacher features."""
    c = run.cfg
    kind = kind or c["align.kind"]
    transform_kind = transform_kind or c["transform.kind"]
    a_path = run.path("align", f"{kind}.kten")
    t_path = run.path("align", f"{kind}-{transform_kind}.kten")
    outputs = load_outputs(run)
    feats = outputs["features"]
    if run.cached(a_path):
        artifact = al.AlignmentArtifact.from_sections(read_container(a_path))
    else:
        artifact = al.fit_alignment(kind, feats, c["student.dim"], seed=c["align.seed"])
        write_container(a_path, artifact.to_sections())
    if run.cached(t_path):
        transform = tf.TargetTransform.from_sections(read_container(t_path))
    else:
        aligned = al.apply_alignment(artifact, feats)
        transform = tf.fit_transform(aligned, transform_kind, channel_stats(feats), c["transform.T"], c["transform.n"])
        write_container(t_path, transform.to_sections())
    return artifact, transform


def std_ratios(run, kind=None, transform_kind=None):
    """Std Ratio of raw teacher features, aligned targets, and transformed targets."""
    artifact, transform = fit_align(run, kind, transform_kind)
    feats = load_outputs(run)["features"]
    aligned = al.apply_alignment(artifact, feats)
    return {
        "teacher": std_ratio(channel_stats(feats)),
        "aligned": std_ratio(channel_stats(aligned)),
        "transformed": std_ratio(channel_stats(tf.apply_transform(transform, aligned))),
    }


# ---------------------------------------------------------------- students

def student_path(run, method, seed, ext="kten"):
    return run.path("students", f"{method}-s{seed}.{ext}")


def _student_spec(cfg, with_head):
    return mlp_spec(cfg["data.dim"], cfg["student.hidden"], cfg["student.dim"],
                    cfg["data.classes"] if with_head else None)


def distill_one(run, method, seed):
    """Pretrain one student; returns its manifest (``None`` for random_init)."""
    c = run.cfg
    plan = method_plan(method, c)
    net_path, man_path = student_path(run, method, seed), student_path(run, method, seed, "manifest")
    if plan.mode is None:
        if not run.cached(net_path):
            write_container(net_path, init_network(_student_spec(c, False), derive_seed(seed, "student")).to_sections())
        return None
    if run.cached(net_path, man_path):
        return RunManifest.from_text(open(man_path).read())

    outputs = load_outputs(run)
    teacher = load_teacher(run)
    x = outputs["samples"]
    student = init_network(_student_spec(c, plan.mode in (SUPERVISED, LOGITS_KD)), derive_seed(seed, "student"))
    hashes = {"teacher": teacher.digest(), "data": content_hash({"x": x})}
    extra = {k: format_value(v) for k, v in c.items()}
    extra.update({"method": method, "method.mode": plan.mode, "student.seed": str(seed)})
    data = TrainData(x)
    if plan.mode == KDEP:
        artifact, transform = fit_align(run, plan.align, plan.transform)
        data.targets, hashes["targets"] = precompute_targets(teacher, x, artifact, transform, run.path("cache"))
        hashes["alignment"] = content_hash(artifact.to_sections())
        hashes["transform"] = content_hash(transform.to_sections())
        extra.update({"align.kind": plan.align, "transform.kind": plan.transform})
    elif plan.mode == SUPERVISED:
        data.labels = outputs["classes"]
    elif plan.mode == LOGITS_KD:
        data.teacher_logits = outputs["logits"]
    else:
        data.teacher_feats = outputs["features"]
        data.head = al.make_parametric_head(c["student.dim"], c["teacher.dim"], plan.head_position,
                                            seed=derive_seed(seed, "head")).head
        extra.update({"align.kind": "parametric", "distill.head_position": plan.head_position})
    data.input_hashes = hashes

    tc = TrainConfig(lr0=c["train.lr0"], momentum=c["train.momentum"], weight_decay=c["train.weight_decay"],
                     epochs=c["train.epochs"], batch_size=c["train.batch_size"], loss_weight=c["train.loss_weight"],
                     seed=seed, mode=plan.mode, temperature=c["train.temperature"])
    student, manifest = train(tc, student, data, extra)
    write_container(net_path, student.to_sections())
    atomic_write_bytes(man_path, manifest.to_text().encode())
    log.info("trained %s seed %d: final loss %.4g", method, seed, manifest.epochs[-1].mean_loss)
    return manifest


def distill_all(run):
    return {(m, s): distill_one(run, m, s) for m in run.cfg["distill.methods"] for s in run.cfg["distill.seeds"]}


def load_student(run, method, seed):
    return Network.from_sections(run.require(student_path(run, method, seed), "distill"))


# ---------------------------------------------------------------- probing and reporting

def probe_config(cfg, seed):
    return ProbeConfig(mode=cfg["probe.mode"], epochs=cfg["probe.epochs"], lrs=tuple(cfg["probe.lrs"]),
                       batch_size=cfg["probe.batch_size"], weight_decay=cfg["probe.weight_decay"], seed=seed)


def probe_all(run):
    """Probe every student on every downstream task; returns rows (method, seed, task, lr, top1)."""
    path = run.path("probes.csv")
    if run.cached(path):
        return _read_csv(path)
    _, down = load_data(run)
    rows = []
    for method in run.cfg["distill.methods"]:
        for seed in run.cfg["distill.seeds"]:
            net = load_student(run, method, seed)
            for t, (tr, te) in enumerate(down):
                res = linear_probe(net, (tr.samples, tr.classes), (te.samples, te.classes), probe_config(run.cfg, seed))
                rows.append({"method": method, "seed": seed, "task": t, "lr": res.lr, "top1": res.top1})
    _write_csv(path, ["method", "seed", "task", "lr", "top1"], rows)
    return _read_csv(path)


def report(run):
    """Aggregate probes into per-seed rows plus per-method means; returns (rows, means)."""
    c = run.cfg
    probes = probe_all(run) if not os.path.exists(run.path("probes.csv")) else _read_csv(run.path("probes.csv"))
    outputs = load_outputs(run)
    compact = compactness(outputs["features"], outputs["classes"])
    rows = []
    for method in c["distill.methods"]:
        plan = method_plan(method, c)
        before = after = ""
        if plan.mode == KDEP:
            r = std_ratios(run, plan.align, plan.transform)
            before, after = repr(r["aligned"]), repr(r["transformed"])
        elif plan.mode == PARAMETRIC_KDEP:
            before = after = repr(std_ratio(channel_stats(outputs["features"])))
        for seed in c["distill.seeds"]:
            tops = [float(p["top1"]) for p in probes if p["method"] == method and int(p["seed"]) == seed]
            rows.append({"method": method, "data_fraction": repr(c["data.fraction"]),
                         "epochs": 0 if plan.mode is None else c["train.epochs"], "seed": seed,
                         "probe_top1": repr(float(np.mean(tops))), "std_ratio_before": before,
                         "std_ratio_after": after, "compactness_teacher": repr(compact)})
    means = []
    for method in c["distill.methods"]:
        mine = [r for r in rows if r["method"] == method]
        mean = dict(mine[0])
        mean["seed"] = "mean"
        mean["probe_top1"] = repr(float(np.mean([float(r["probe_top1"]) for r in mine])))
        means.append(mean)
    _write_csv(run.path("report.csv"), REPORT_COLUMNS, rows)
    _write_csv(run.path("report_mean.csv"), REPORT_COLUMNS, means)
    plot = "# method_index probe_top1_mean method\n" + "".join(
        f"{i} {m['probe_top1']} {m['method']}\n" for i, m in enumerate(means))
    atomic_write_bytes(run.path("report_plot.dat"), plot.encode())
    return rows, means


def run_all(run):
    gen_data(run)
    train_teacher(run)
    extract(run)
    fit_align(run)
    distill_all(run)
    probe_all(run)
    return report(run)


def _write_csv(path, columns, rows):
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    atomic_write_bytes(path, buf.getvalue().encode())


def _read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))

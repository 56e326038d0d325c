"""End-to-end acceptance criteria, one test per criterion.

Each test records a ``criterion N: PASS|FAIL ...`` line, printed in the
terminal summary, before asserting.
"""

import os
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from kdep import align as al
from kdep import nn, pipeline
from kdep.config import resolve
from kdep.container import decode, encode
from kdep.distill import RunManifest, kdep_loss, logits_kd_loss
from kdep.errors import FormatError
from kdep.evaluate import verify_theorem1
from kdep.linalg import channel_stats, std_ratio, svd_topk
from kdep.transform import pts, scale_normalize, std_match

GOLDEN = os.path.join(os.path.dirname(__file__), "golden")


def record(n, ok, detail):
    ACCEPTANCE_LINES.append(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
    print(ACCEPTANCE_LINES[-1])
    assert ok, detail


@pytest.fixture(scope="module")
def default_runs(tmp_path_factory):
    """Two independent end-to-end runs of the default config."""
    runs = []
    for name in ("first", "second"):
        run = pipeline.Run(resolve(), str(tmp_path_factory.mktemp(name)))
        start = time.perf_counter()
        _, means = pipeline.run_all(run)
        runs.append((run, means, time.perf_counter() - start))
    return runs


def test_criterion_1_sn_sm_worked_example():
    sn = scale_normalize([[10.0, 2.0, 2.0]], [50.0, 5.0, 1.0])
    sm = std_match([[10.0, 2.0, 2.0]], [50.0, 5.0, 1.0], [4.0, 3.0, 2.0])
    err = max(np.max(np.abs(sn - [0.2, 0.4, 2.0])), np.max(np.abs(sm - [0.8, 1.2, 4.0])))
    record(1, err <= 1e-12, f"SN={sn.ravel().tolist()} SM={sm.ravel().tolist()} max err {err:.1e}")


def test_criterion_2_theorem_monte_carlo():
    start = time.perf_counter()
    table = verify_theorem1()
    elapsed = time.perf_counter() - start
    within = all(abs(r.estimate - r.analytic) <= 4 * r.stderr for r in table.rows)
    ok = within and table.increasing and elapsed < 5.0
    est = ", ".join(f"{r.sigma:g}:{r.estimate:.4f}/{r.analytic:g}" for r in table.rows)
    record(2, ok, f"[{est}] increasing={table.increasing} runtime {elapsed:.2f}s")


def test_criterion_3_svd_optimality():
    worst_rel, ordered = 0.0, True
    for seed in range(20):
        x = np.random.default_rng(seed).normal(size=(50, 16))
        centred = x - x.mean(axis=0)
        full = np.linalg.svd(centred, full_matrices=False)
        for k in (1, 4, 8):
            mine = svd_topk(centred, k).right_vectors
            ref = full.Vh[:k].T
            e_mine = np.sum((centred - centred @ mine @ mine.T) ** 2)
            e_ref = np.sum((centred - centred @ ref @ ref.T) ** 2)
            worst_rel = max(worst_rel, abs(e_mine - e_ref) / e_ref)
            e_svd = al.reconstruction_error(al.fit_svd_projector(x, k), x)
            e_var = al.reconstruction_error(al.fit_channel_select(x, k, "var"), x)
            e_rand = np.mean([al.reconstruction_error(al.fit_channel_select(x, k, "rand", s), x) for s in range(20)])
            ordered &= bool(e_svd <= e_var <= e_rand)
    record(3, worst_rel <= 1e-8 and ordered, f"max rel err vs full decomposition {worst_rel:.1e}, ordering held={ordered}")


def test_criterion_4_gradient_checks():
    rng = np.random.default_rng(0)

    def feature_loss(target):
        return lambda f, l: (*kdep_loss(f, target), None)

    def logit_loss(teacher):
        def fn(f, l):
            loss, g = logits_kd_loss(l, teacher, 4.0)
            return loss, None, g
        return fn

    cases = {
        "dense+relu / kdep": ([nn.dense(5, 6), nn.relu(), nn.dense(6, 3)], (4, 5), "feat"),
        "conv3x3+relu+gap+dense / kdep": ([nn.conv3x3(2, 3), nn.relu(), nn.conv3x3(3, 3), nn.gap(), nn.dense(3, 3)],
                                          (2, 4, 4, 2), "feat"),
        "dense+relu+linear_head / logits_kd": ([nn.dense(5, 6), nn.relu(), nn.dense(6, 3), nn.relu(),
                                                nn.linear_head(3, 4)], (4, 5), "logit"),
        "conv+gap+linear_head / logits_kd": ([nn.conv3x3(2, 3), nn.relu(), nn.gap(), nn.dense(3, 3),
                                              nn.linear_head(3, 4)], (2, 3, 3, 2), "logit"),
    }
    worst, lines = 0.0, []
    for name, (spec, shape, kind) in cases.items():
        net = nn.init_network(spec, 1)
        net.params += 0.05 * rng.normal(size=net.params.shape)
        batch = rng.normal(size=shape)
        loss = feature_loss(rng.normal(size=(shape[0], 3))) if kind == "feat" else logit_loss(rng.normal(size=(shape[0], 4)))
        rep = nn.grad_check(net, loss, batch, tol=1e-4)
        worst = max(worst, rep.max_rel_error)
        lines.append(f"{name} {rep.max_rel_error:.1e}")
    record(4, worst < 1e-4, "; ".join(lines))


def test_criterion_5_pts_statistics():
    base = np.random.default_rng(0).normal(size=1000)
    base -= base.mean()
    x = np.stack([50 * base, 5 * base, base], axis=1)
    y = pts(x, 0.1, 3)
    before, after = std_ratio(channel_stats(x)), std_ratio(channel_stats(y))
    stds = channel_stats(y).stds
    order_kept = bool(np.all(np.diff(stds) < 0))
    flat_x, flat_y = x.ravel(), y.ravel()
    idx = np.argsort(flat_x, kind="stable")
    global_order = bool(np.all(np.diff(flat_y[idx]) >= 0))
    ok = after < before and order_kept and global_order
    record(5, ok, f"std ratio {before:.2f} -> {after:.3f}, std order kept={order_kept}, value order kept={global_order}")


def test_criterion_6_directional_trend(default_runs):
    run, means, elapsed = default_runs[0]
    acc = pipeline.teacher_accuracy(run)
    top = {m["method"]: float(m["probe_top1"]) for m in means}
    distilled = [m for m in top if m != "random_init"]
    beats_random = all(top[m] > top["random_init"] for m in distilled)
    chain = top["svd_pts"] >= top["svd"] >= top["parametric"]
    margin = top["svd_pts"] - top["parametric"]
    ok = acc >= 0.95 and beats_random and chain and margin >= 0.01 and elapsed < 600
    table = " ".join(f"{m}={v:.4f}" for m, v in top.items())
    record(6, ok, f"teacher acc {acc:.4f}; {table}; all>random={beats_random} svd_pts>=svd>=parametric={chain} "
                  f"margin={100 * margin:+.2f}pt; pipeline {elapsed:.1f}s")


def test_criterion_7_determinism(default_runs):
    (a, _, _), (b, _, _) = default_runs
    mismatches, compared = [], 0
    for method in a.cfg["distill.methods"]:
        for seed in a.cfg["distill.seeds"]:
            pa, pb = pipeline.student_path(a, method, seed), pipeline.student_path(b, method, seed)
            if open(pa, "rb").read() != open(pb, "rb").read():
                mismatches.append(f"{method}-s{seed} params")
            ma, mb = (pipeline.student_path(r, method, seed, "manifest") for r in (a, b))
            if os.path.exists(ma):
                compared += 1
                block_a = RunManifest.from_text(open(ma).read()).metric_block()
                block_b = RunManifest.from_text(open(mb).read()).metric_block()
                if block_a.encode() != block_b.encode():
                    mismatches.append(f"{method}-s{seed} metrics")
    same_report = open(a.path("report.csv"), "rb").read() == open(b.path("report.csv"), "rb").read()
    ok = not mismatches and compared > 0 and same_report
    record(7, ok, f"{compared} manifests compared, mismatches={mismatches or 'none'}, reports identical={same_report}")


def test_criterion_8_container_round_trip():
    names = sorted(os.listdir(GOLDEN))
    identical = all(encode(decode(open(os.path.join(GOLDEN, n), "rb").read())) ==
                    open(os.path.join(GOLDEN, n), "rb").read() for n in names)
    raw = open(os.path.join(GOLDEN, "matrix.kten"), "rb").read()
    rejected = []
    for label, bad in (("magic", b"XDEPTNSR" + raw[8:]), ("truncated", raw[:-3])):
        try:
            decode(bad)
        except FormatError as exc:
            rejected.append(f"{label}@{exc.offset}")
    ok = identical and len(rejected) == 2 and rejected[0] == "magic@0"
    record(8, ok, f"{len(names)} golden files byte-identical={identical}; rejected {rejected}")

"""Acceptance suite: one PASS/FAIL line per top-level criterion.

Lines are printed as each test runs and repeated in the pytest terminal
summary under "acceptance criteria".
"""
import json
import math
import re
import time
from dataclasses import replace

import numpy as np

from mrkd import gradcheck
from mrkd.cli import main
from mrkd.data import gen_gaussian_mixture
from mrkd.losses import (
    LossConfig,
    kl_div,
    kl_grad_uniform,
    high_temperature_gradient,
    loss_lsr,
    loss_lsrkd,
    one_hot,
    softmax_t,
    teacher_correct_output,
    teacher_correct_uniform,
)
from mrkd.snapshots import SnapshotConfig
from mrkd.trainer import TrainConfig, lr_at, steps_per_epoch, train_protocol, train_run
from test_snapshots import history_oracle, simulate


def test_gradient_suite(criterion):
    rows, seconds = gradcheck.run_gradcheck(sizes=(2, 10, 100), cases=100, seed=0)
    worst = max(rows, key=lambda r: r.max_rel_error)
    covered = {(r.variant, r.classes) for r in rows}
    ok = (worst.max_rel_error < 1e-6 and seconds < 60
          and covered == {(v, m) for v in gradcheck.VARIANTS for m in (2, 10, 100)})
    criterion("gradient suite",
              ok, f"{len(rows)} cells x 100 cases, worst {worst.max_rel_error:.2e} "
                  f"({worst.variant}, M={worst.classes}) < 1e-6, {seconds:.1f} s < 60 s")


def test_lsr_equivalence(criterion):
    rng = np.random.default_rng(11)
    worst_grad = worst_gap = 0.0
    for _ in range(100):
        m = int(rng.integers(2, 101))
        alpha = float(rng.uniform(0.0, 1.0))
        p = one_hot(int(rng.integers(m)), m)
        z = rng.normal(0.0, 3.0, m)
        a = loss_lsrkd(p, z, LossConfig("LsrKD", alpha, 1.0))
        b = loss_lsr(p, z, alpha)
        worst_grad = max(worst_grad, float(np.abs(a.grad_logits - b.grad_logits).max()))
        worst_gap = max(worst_gap, abs((b.value - a.value) - alpha * math.log(m)))
    criterion("LSR equivalence", worst_grad < 1e-10 and worst_gap < 1e-10,
              f"100 cases, max grad diff {worst_grad:.1e}, max gap error {worst_gap:.1e} (< 1e-10)")


def test_high_temperature_limit(criterion):
    taus = (10, 30, 100, 300)
    rng = np.random.default_rng(5)
    worst = dict.fromkeys(taus, 0.0)
    monotone = True
    for _ in range(1000):
        z = rng.uniform(-1.0, 1.0, 10)
        z -= z.mean()
        z /= max(1.0, np.abs(z).max())
        dev = []
        for tau in taus:
            approx = high_temperature_gradient(z, tau)
            dev.append(np.abs(kl_grad_uniform(z, tau) - approx).max() / np.abs(approx).max())
        monotone &= all(a > b for a, b in zip(dev, dev[1:]))
        for tau, d in zip(taus, dev):
            worst[tau] = max(worst[tau], d)
    ok = monotone and worst[100] < 0.02
    detail = ", ".join(f"tau={t}: {100 * worst[t]:.3f}%" for t in taus)
    criterion("high-temperature limit", ok, f"1000 cases, monotone={monotone}, worst {detail} (< 2% at 100)")


def test_snapshot_ring_oracle(criterion):
    rng = np.random.default_rng(2024)
    mismatches = 0
    for _ in range(200):
        n, kappa, steps = int(rng.integers(1, 6)), int(rng.integers(1, 8)), int(rng.integers(0, 101))
        ring, history, states = simulate(n, kappa, steps)
        for t, state in enumerate(states, start=1):
            if state != [c.to_bytes() for c in history_oracle(history, n, kappa, t)]:
                mismatches += 1
        if ring.shift_count != steps // kappa:
            mismatches += 1
    criterion("snapshot ring oracle", mismatches == 0,
              f"200 configurations (n<=5, kappa<=7, T<=100), {mismatches} mismatching steps")


def test_distribution_invariants(criterion):
    rng = np.random.default_rng(9)
    failures = []
    worst = 0.0
    for _ in range(1000):
        m = int(rng.integers(2, 50))
        z = rng.normal(0.0, 4.0, m)
        taus = np.sort(rng.uniform(0.2, 20.0, 3))
        q = [softmax_t(z, t) for t in taus]
        if any(abs(qq.sum() - 1) > 1e-12 or qq.argmax() != z.argmax() for qq in q):
            failures.append("softmax sum/argmax")
        ent = [float(-(qq * np.log(qq)).sum()) for qq in q]
        if not all(a <= b + 1e-12 for a, b in zip(ent, ent[1:])):
            failures.append("entropy monotone")

        c = int(rng.integers(m))
        gamma = float(rng.uniform(1.0 / m, 0.99))
        u = teacher_correct_uniform(c, gamma, m)
        others = np.delete(u, c)
        worst = max(worst, abs(u.sum() - 1), abs(u[c] - gamma), float(np.ptp(others)))

        qhat = softmax_t(rng.normal(0.0, 3.0, m), float(rng.uniform(0.5, 5.0)))
        t = teacher_correct_output(qhat, c, gamma)
        ratio = np.delete(t, c) / np.delete(qhat, c)
        worst = max(worst, abs(t.sum() - 1), abs(t[c] - gamma), float(np.ptp(ratio) / ratio.max()))

        if kl_div(qhat, q[0]) < 0 or kl_div(u, q[-1]) < 0:
            failures.append("kl negative")
    ok = not failures and worst < 1e-10
    criterion("distribution invariants", ok,
              f"1000 cases, {len(failures)} failures, worst teacher-correction error {worst:.1e} (< 1e-10)")


def test_reduction_identities(criterion):
    started = time.perf_counter()
    data = gen_gaussian_mixture(10, 32, 2000, 500, 4.0, seed=3)
    base = TrainConfig(epochs=10, batch_size=64, hidden=(32, 32), seed=4)

    def fingerprint(cfg):
        run = train_run(data, cfg)
        return run.to_csv(), run.params.to_bytes()

    ce = fingerprint(base)
    lsrkd = fingerprint(replace(base, loss=LossConfig("LsrKD", 0.3, 3.0)))
    checks = {
        "LsrKD(alpha=0)": fingerprint(replace(base, loss=LossConfig("LsrKD", 0.0, 3.0))) == ce,
        "LsrKD-TC(gamma=1/M, alpha=0)": fingerprint(replace(base, loss=LossConfig("LsrKD-TC", 0.0, 3.0, 0.1))) == ce,
        "LsrKD-TC(gamma=1/M) == LsrKD": fingerprint(replace(base, loss=LossConfig("LsrKD-TC", 0.3, 3.0, 0.1))) == lsrkd,
        "MrKD(alpha=0)": fingerprint(replace(base, loss=LossConfig("MrKD", 0.0, 3.0),
                                             snapshot=SnapshotConfig(2.0, 3))) == ce,
    }
    seconds = time.perf_counter() - started
    ok = all(checks.values()) and seconds < 120
    detail = ", ".join(f"{k} {'identical' if v else 'DIFFERS'}" for k, v in checks.items())
    criterion("reduction identities", ok, f"{detail}; {seconds:.1f} s < 120 s")


def test_end_to_end_smoke(criterion):
    started = time.perf_counter()
    data = gen_gaussian_mixture(10, 32, 5000, 1000, 4.0, seed=0)
    common = dict(epochs=40, batch_size=128, hidden=(64, 64), lr_max=0.1, lr_min=1e-4, seed=0)
    base = train_protocol(data, TrainConfig(**common), runs=4)
    mrkd = train_protocol(data, TrainConfig(**common, loss=LossConfig("MrKD", 0.25, 3.0),
                                            snapshot=SnapshotConfig(10.0, 3)), runs=4)
    seconds = time.perf_counter() - started
    base_train = float(np.mean([r.final_train_error for r in base.run_metrics]))
    finite = all(math.isfinite(rec.train_loss) for r in mrkd.run_metrics for rec in r.records)
    ok = base_train < 5.0 and finite and mrkd.mean <= base.mean + 0.5 and seconds < 600
    criterion("end-to-end smoke", ok,
              f"baseline train err {base_train:.2f}% < 5%; test err baseline {base.format()}, "
              f"MrKD-3 {mrkd.format()} (gate <= {base.mean + 0.5:.2f}, "
              f"difference {mrkd.mean - base.mean:+.2f} points); {seconds:.0f} s < 600 s")


def test_protocol_fidelity(criterion):
    spe = steps_per_epoch(50000, 128)
    cfg = TrainConfig()
    total = 200 * spe
    first, last = lr_at(0, cfg, total), lr_at(total, cfg, total)
    text = train_protocol(gen_gaussian_mixture(3, 4, 60, 30, 3.0, seed=0),
                          TrainConfig(epochs=1, batch_size=16, hidden=(4,)), runs=4).format()
    fmt_ok = re.fullmatch(r"\d+\.\d{2} \(±\d+\.\d{2}\)", text) is not None
    ok = spe == 391 and first == 0.1 and last == 0.0001 and fmt_ok
    criterion("protocol fidelity", ok,
              f"{spe} steps/epoch, lr_at(0)={first!r}, lr_at(T)={last!r}, format {text!r}")


def test_determinism(criterion, tmp_path):
    spec = {"schema": 1,
            "dataset": {"kind": "gaussian_mixture", "classes": 5, "dims": 8, "n_train": 400, "n_test": 100,
                        "separation": 3.0, "seed": 1},
            "train": {"epochs": 3, "batch_size": 32, "hidden": [16, 16], "seed": 3},
            "loss": {"method": "MrKD", "alpha": 0.25, "tau": 3.0},
            "snapshot": {"n": 3, "kappa_epochs": 0.5},
            "runs": 2}
    path = tmp_path / "spec.json"
    path.write_text(json.dumps(spec))
    outputs = []
    for name in ("first", "second"):
        assert main(["train", "--spec", str(path), "--out", str(tmp_path / name)]) == 0
        (run_dir,) = (tmp_path / name / "runs").iterdir()
        outputs.append({p.name: p.read_bytes() for p in sorted(run_dir.glob("run*.csv"))})
    ok = len(outputs[0]) == 2 and outputs[0] == outputs[1]
    criterion("determinism", ok, f"{len(outputs[0])} CSVs from two invocations byte-identical: {ok}")

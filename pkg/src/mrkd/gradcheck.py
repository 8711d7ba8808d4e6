"""Central finite-difference verification of every loss gradient."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import losses

VARIANTS = ("CE", "KD", "LSR", "LsrKD", "LsrKD-TC", "MrKD", "MrKD-TC")


def numeric_grad(f, z: np.ndarray, h: float = 1e-6) -> np.ndarray:
    z = np.array(z, dtype=np.float64)
    g = np.empty_like(z)
    for i in range(z.size):
        orig = z.flat[i]
        z.flat[i] = orig + h
        up = f(z)
        z.flat[i] = orig - h
        down = f(z)
        z.flat[i] = orig
        g.flat[i] = (up - down) / (2.0 * h)
    return g


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``max|a - n| / max(max|a|, max|n|)``, zero when both vanish."""
    scale = max(np.abs(analytic).max(), np.abs(numeric).max())
    if scale == 0.0:
        return 0.0
    return float(np.abs(analytic - numeric).max() / scale)


def random_case(variant: str, m: int, rng):
    """A loss closure ``z -> LossResult`` with random labels, teachers and hyperparameters."""
    c = int(rng.integers(m))
    p = losses.one_hot(c, m)
    z = rng.normal(0.0, 2.0, m)
    alpha = float(rng.uniform(0.05, 0.95))
    tau = float(rng.uniform(1.0, 8.0))
    gamma = float(rng.uniform(1.0 / m, 0.95))
    n = int(rng.integers(1, 4))
    zhats = [rng.normal(0.0, 2.0, m) for _ in range(n)]

    if variant == "CE":
        return z, lambda zz: losses.loss_ce(p, zz)
    if variant == "LSR":
        return z, lambda zz: losses.loss_lsr(p, zz, alpha)
    if variant == "KD":
        cfg = losses.LossConfig("KD", alpha, tau, num_classes=m)
        return z, lambda zz: losses.loss_kd(p, zz, zhats[0], cfg)
    if variant == "LsrKD":
        cfg = losses.LossConfig("LsrKD", alpha, tau, num_classes=m)
        return z, lambda zz: losses.loss_lsrkd(p, zz, cfg)
    if variant == "LsrKD-TC":
        cfg = losses.LossConfig("LsrKD-TC", alpha, tau, gamma, num_classes=m)
        return z, lambda zz: losses.loss_lsrkd_tc(p, zz, cfg)
    if variant == "MrKD":
        cfg = losses.LossConfig("MrKD", alpha, tau, num_classes=m)
        return z, lambda zz: losses.loss_mrkd(p, zz, zhats, cfg)
    if variant == "MrKD-TC":
        cfg = losses.LossConfig("MrKD-TC", alpha, tau, gamma, num_classes=m)
        return z, lambda zz: losses.loss_mrkd_tc(p, zz, zhats, cfg)
    raise ValueError(f"unknown variant {variant!r}")


@dataclass
class GradcheckRow:
    variant: str
    classes: int
    cases: int
    max_rel_error: float
    max_grad_sum: float

    def passed(self, tolerance: float) -> bool:
        return self.max_rel_error < tolerance


def run_gradcheck(sizes=(2, 10, 100), cases: int = 100, seed: int = 0, h: float = 1e-6,
                  variants=VARIANTS) -> tuple[list[GradcheckRow], float]:
    """Check every variant on ``cases`` random instances per class count.

    Returns the per-(variant, M) rows and the elapsed seconds.
    """
    started = time.perf_counter()
    rows = []
    for variant in variants:
        for m in sizes:
            rng = np.random.default_rng([seed, m, VARIANTS.index(variant)])
            worst = 0.0
            worst_sum = 0.0
            for _ in range(cases):
                z, f = random_case(variant, m, rng)
                analytic = f(z).grad_logits
                numeric = numeric_grad(lambda zz: f(zz).value, z, h)
                worst = max(worst, relative_error(analytic, numeric))
                worst_sum = max(worst_sum, abs(float(analytic.sum())))
            rows.append(GradcheckRow(variant, m, cases, worst, worst_sum))
    return rows, time.perf_counter() - started


def format_table(rows: list[GradcheckRow], tolerance: float) -> str:
    lines = [f"{'variant':<10} {'M':>4} {'cases':>6} {'max rel err':>12} {'|sum grad|':>11}  status"]
    for r in rows:
        status = "ok" if r.passed(tolerance) else "FAIL"
        lines.append(f"{r.variant:<10} {r.classes:>4} {r.cases:>6} {r.max_rel_error:>12.3e} "
                     f"{r.max_grad_sum:>11.1e}  {status}")
    return "\n".join(lines)

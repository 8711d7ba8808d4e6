#!/usr/bin/env python3
# A short tour of the distillation losses on a single example.

# %%
import numpy as np

from mrkd.losses import (LossConfig, compute_loss, kl_grad_uniform, high_temperature_gradient,
                         softmax_t, teacher_correct_output, teacher_correct_uniform)

np.set_printoptions(precision=4, suppress=True)

# %% Temperature flattens the softmax but keeps its argmax.
z = np.array([2.0, 0.5, -1.0, 0.0])
for tau in (1, 3, 10):
    print(f"tau={tau:>2}", softmax_t(z, tau))

# %% Every method on the same logits, label 0, with a second set of logits as teacher.
label = 0
teacher = np.array([1.5, 1.0, -0.5, 0.2])
for method in ("CE", "LSR", "KD", "LsrKD", "LsrKD-TC", "MrKD", "MrKD-TC"):
    cfg = LossConfig.defaults(method, gamma=0.6 if method.endswith("-TC") else None)
    t = [teacher] if method.startswith("MrKD") else teacher
    res = compute_loss(cfg, label, z, t)
    print(f"{method:<9} alpha={cfg.alpha:<5} tau={cfg.tau:<4} loss={res.value:.4f}  grad={res.grad_logits}")

# %% Corrected teachers put gamma on the true class.
print("uniform teacher, gamma=0.6:", teacher_correct_uniform(label, 0.6, 4))
qhat = softmax_t(teacher, 3.0)
print("teacher output:           ", qhat)
print("corrected, gamma=0.6:     ", teacher_correct_output(qhat, label, 0.6))

# %% At high temperature the uniform-teacher gradient approaches z / (M tau^2).
zc = z - z.mean()
for tau in (10, 30, 100, 300):
    exact, approx = kl_grad_uniform(zc, tau), high_temperature_gradient(zc, tau)
    print(f"tau={tau:>3}  relative deviation {np.abs(exact - approx).max() / np.abs(approx).max():.2e}")

"""Label-smoothing and memory-replay knowledge distillation on a small numpy MLP."""
from .data import AugmentPolicy, DatasetSplit, augment_batch, gen_gaussian_mixture, load_cifar_bin, load_idx
from .losses import (
    LossConfig,
    LossResult,
    compute_loss,
    cross_entropy,
    kl_div,
    kl_grad_uniform,
    loss_ce,
    loss_kd,
    loss_lsr,
    loss_lsrkd,
    loss_lsrkd_tc,
    loss_mrkd,
    loss_mrkd_tc,
    softmax_t,
    teacher_correct_output,
    teacher_correct_uniform,
)
from .nn import ParamSet, backward, forward, init_params
from .snapshots import SnapshotConfig, SnapshotRing, ring_init, ring_teachers, ring_tick
from .trainer import AggregateMetrics, RunMetrics, TrainConfig, lr_at, sgd_step, train_protocol, train_run

__version__ = "0.1.0"

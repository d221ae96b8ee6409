"""Training phases over synthetic tasks: first-order meta-learning, the
pretraining ablation variant, and fine-tuning on the real offline data.

The meta-gradient is first-order: the outer loss is evaluated at the fast
weights phi' = phi - alpha * grad l_i(phi) and its gradient (taken at phi') is
applied to phi directly, ignoring the Jacobian of the inner step.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import surrogate as sg
from .dataio import OfflineDataset
from .matchloss import DEFAULT_MODE, IntegralMode, PairBatch, TooFewPoints, match_loss, offline_pairs
from .numerics import RngState
from .sim4opt import EmptyTask, SyntheticTask, build_pairs


@dataclass(frozen=True)
class MetaConfig:
    epochs: int = 50
    tasks_per_batch: int = 8
    inner_lr: float = 0.1
    outer_lr: float = 0.001
    context_pairs: int = 16
    target_pairs: int = 64
    integral_mode: IntegralMode = DEFAULT_MODE

    def __post_init__(self):
        if min(self.epochs, self.tasks_per_batch, self.context_pairs, self.target_pairs) < 1:
            raise ValueError("all counts must be >= 1")
        if self.inner_lr < 0 or self.outer_lr <= 0:
            raise ValueError("learning rates must be positive (inner may be 0 in tests)")


@dataclass
class TrainStats:
    epoch: list[int] = field(default_factory=list)
    pre_loss: list[float] = field(default_factory=list)
    post_loss: list[float] = field(default_factory=list)
    outer_loss: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)

    def append(self, epoch, pre, post, outer, secs):
        self.epoch.append(epoch)
        self.pre_loss.append(pre)
        self.post_loss.append(post)
        self.outer_loss.append(outer)
        self.seconds.append(secs)

    def write_csv(self, path):
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write("epoch,mean_pre_loss,mean_post_loss,outer_loss,seconds\n")
            for row in zip(self.epoch, self.pre_loss, self.post_loss, self.outer_loss, self.seconds):
                fh.write(",".join(repr(v) if isinstance(v, float) else str(v) for v in row) + "\n")


def _task_batch(t: SyntheticTask, rng: RngState, count: int) -> PairBatch:
    starts, ends, dz = build_pairs(t, rng, count)
    return PairBatch(starts, ends, dz)


def inner_adapt(net, task: SyntheticTask, cfg: MetaConfig, rng: RngState):
    """One fast-weight SGD step on a context batch; never mutates the net.

    Returns (fast_params, pre_loss, post_loss) where post_loss is evaluated at
    the fast weights on a fresh target batch.
    """
    if not task.trajectories:
        raise EmptyTask(f"task {task.task_id} is empty")
    context = _task_batch(task, rng, cfg.context_pairs)
    pre_loss, grad = match_loss(net, context, cfg.integral_mode)
    fast = net.params - cfg.inner_lr * grad
    target = _task_batch(task, rng, cfg.target_pairs)
    post_loss, _ = match_loss(net, target, cfg.integral_mode, params=fast)
    return fast, pre_loss, post_loss


def _refresh_norm_stats(net, batch: PairBatch):
    # Track activation statistics from the pair endpoints; loss gradients flow
    # through the frozen eval-mode statistics, keeping second derivatives
    # well-posed.
    if net.arch.norm != sg.NORM_BATCH:
        return
    was = net.mode
    net.train()
    sg.forward(net, np.concatenate([batch.starts, batch.ends], axis=0))
    net.mode = was


def _sample_task_indices(n_tasks: int, k: int, rng: RngState) -> np.ndarray:
    if k >= n_tasks:
        return np.arange(n_tasks)
    return np.sort(rng.choice(n_tasks, k))


def meta_epoch(net, tasks, cfg: MetaConfig, rng: RngState, opt: sg.AdamState, epoch=0,
               stats: TrainStats | None = None, update_stats: bool = True):
    """One pass: per sampled task, inner-adapt then accumulate the outer
    (first-order) gradient at the fast weights; one Adam step at the outer lr."""
    if not tasks:
        raise EmptyTask("no tasks")
    t0 = time.perf_counter()
    idx = _sample_task_indices(len(tasks), cfg.tasks_per_batch, rng)
    total_grad = np.zeros_like(net.params)
    pres, posts, outers = [], [], []
    for i in idx:
        task = tasks[i]
        context = _task_batch(task, rng, cfg.context_pairs)
        if update_stats:
            _refresh_norm_stats(net, context)
        pre_loss, grad = match_loss(net, context, cfg.integral_mode)
        fast = net.params - cfg.inner_lr * grad
        target = _task_batch(task, rng, cfg.target_pairs)
        outer_loss, outer_grad = match_loss(net, target, cfg.integral_mode, params=fast)
        total_grad += outer_grad
        pres.append(pre_loss)
        posts.append(outer_loss)
        outers.append(outer_loss)
    sg.apply_update(net, total_grad / len(idx), cfg.outer_lr, opt)
    if stats is not None:
        stats.append(epoch, float(np.mean(pres)), float(np.mean(posts)),
                     float(np.mean(outers)), time.perf_counter() - t0)
    return float(np.mean(outers))


def pretrain_epoch(net, tasks, cfg: MetaConfig, rng: RngState, opt: sg.AdamState, epoch=0,
                   stats: TrainStats | None = None, update_stats: bool = True):
    """Ablation variant: pooled mini-batch gradient matching, no inner loop.

    Draws the same per-task context/target batches as meta_epoch so that with
    inner_lr = 0 both produce identical updates for identical rng streams.
    """
    if not tasks:
        raise EmptyTask("no tasks")
    t0 = time.perf_counter()
    idx = _sample_task_indices(len(tasks), cfg.tasks_per_batch, rng)
    total_grad = np.zeros_like(net.params)
    losses = []
    for i in idx:
        task = tasks[i]
        context = _task_batch(task, rng, cfg.context_pairs)
        if update_stats:
            _refresh_norm_stats(net, context)
        target = _task_batch(task, rng, cfg.target_pairs)
        loss, grad = match_loss(net, target, cfg.integral_mode)
        total_grad += grad
        losses.append(loss)
    sg.apply_update(net, total_grad / len(idx), cfg.outer_lr, opt)
    mean_loss = float(np.mean(losses))
    if stats is not None:
        stats.append(epoch, mean_loss, mean_loss, mean_loss, time.perf_counter() - t0)
    return mean_loss


def meta_train(net, tasks, cfg: MetaConfig, rng: RngState, variant: str = "meta") -> TrainStats:
    """Run cfg.epochs of meta_epoch (variant='meta') or pretrain_epoch."""
    step = meta_epoch if variant == "meta" else pretrain_epoch
    opt = sg.AdamState.for_net(net)
    stats = TrainStats()
    for epoch in range(1, cfg.epochs + 1):
        step(net, tasks, cfg, rng, opt, epoch=epoch, stats=stats)
    return stats


def finetune(net, ds: OfflineDataset, epochs: int, rng: RngState,
             lr: float = 0.01, batch_size: int = 128,
             mode: IntegralMode = DEFAULT_MODE):
    """Adam-driven gradient matching on real offline pairs.

    Norm running statistics are frozen so the subsequent search field is
    stationary.
    """
    if ds.n < 2:
        raise TooFewPoints(f"need at least 2 offline points, got {ds.n}")
    if epochs == 0:
        return net
    net.eval()
    opt = sg.AdamState.for_net(net)
    for _ in range(epochs):
        batch = offline_pairs(ds, batch_size, rng)
        _, grad = match_loss(net, batch, mode)
        sg.apply_update(net, grad, lr, opt)
    return net

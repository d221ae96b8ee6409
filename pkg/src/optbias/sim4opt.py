"""Synthetic task generation: sample perturbed kernel parameters, fit a GP
posterior on the standardized offline data, walk every offline input down and
up the posterior-mean (or UCB) field, and pseudo-label all visited states.

Each offline start point yields one trajectory assembled as
[reversed descent states | start | ascent states] (length 2M+1), then sorted
ascending by pseudo-label so consecutive pairs always have dz >= 0. Each task
also exposes the flat per-function dataset sorted the same way.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import gp
from .dataio import OfflineDataset
from .errors import NumericalError
from .numerics import RngState

DIVERGENCE_LIMIT = 1e6
MAX_TASK_RETRIES = 3


class InvalidDelta(NumericalError):
    pass


class NonFiniteState(NumericalError):
    pass


class TaskGenerationFailed(NumericalError):
    pass


class EmptyTask(NumericalError):
    pass


MODE_MEAN = "posterior_mean"
MODE_UCB = "ucb"


@dataclass(frozen=True)
class Sim4OptConfig:
    n_functions: int = 128
    evolve_steps: int = 100
    step_size: float = 0.05
    delta_frac: float = 0.5
    evolution_mode: str = MODE_MEAN
    ucb_beta: float = 2.0
    base_params: gp.KernelParams = field(default_factory=gp.KernelParams)
    start_subsample: int | None = None  # cap on start points; None = all

    def __post_init__(self):
        if self.n_functions < 1 or self.evolve_steps < 1:
            raise ValueError("n_functions and evolve_steps must be >= 1")
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if not (0.0 <= self.delta_frac < 1.0):
            raise InvalidDelta(f"delta_frac must be in [0, 1), got {self.delta_frac}")
        if self.evolution_mode not in (MODE_MEAN, MODE_UCB):
            raise ValueError(f"unknown evolution mode {self.evolution_mode!r}")


@dataclass(frozen=True)
class Trajectory:
    states: np.ndarray  # kappa x d
    labels: np.ndarray  # kappa, nondecreasing


@dataclass(frozen=True)
class SyntheticTask:
    task_id: int
    params: gp.KernelParams
    trajectories: tuple[Trajectory, ...]
    flat_X: np.ndarray  # all states sorted ascending by label
    flat_z: np.ndarray

    @property
    def kappa(self) -> int:
        return self.trajectories[0].states.shape[0]


def sample_task_params(
    base: gp.KernelParams, delta_frac: float, rng: RngState
) -> gp.KernelParams:
    """Lengthscale and signal variance drawn uniformly from base*(1 +/- delta)."""
    if not (0.0 <= delta_frac < 1.0):
        raise InvalidDelta(f"delta_frac must be in [0, 1), got {delta_frac}")
    ell = rng.uniform(base.lengthscale * (1 - delta_frac), base.lengthscale * (1 + delta_frac))
    var = rng.uniform(
        base.signal_variance * (1 - delta_frac), base.signal_variance * (1 + delta_frac)
    )
    return replace(base, lengthscale=float(ell), signal_variance=float(var))


def _field_value(g: gp.GpModel, X: np.ndarray, mode: str, beta: float) -> np.ndarray:
    if mode == MODE_UCB:
        return gp.ucb_batch(g, X, beta)
    return gp.posterior_mean_batch(g, X)


def _field_grad(g: gp.GpModel, X: np.ndarray, mode: str, beta: float) -> np.ndarray:
    if mode == MODE_UCB:
        return gp.ucb_grad_batch(g, X, beta)
    return gp.posterior_mean_grad_batch(g, X)


def evolve(
    g: gp.GpModel,
    X0: np.ndarray,
    sign: int,
    steps: int,
    step_size: float,
    mode: str = MODE_MEAN,
    beta: float = 0.0,
) -> list[np.ndarray]:
    """Fixed-step gradient evolution; returns the M intermediate batches in order."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    X = np.atleast_2d(np.asarray(X0, dtype=np.float64))
    if X.shape[0] == 0:
        raise ValueError("X0 is empty")
    out = []
    for _ in range(steps):
        X = X + sign * step_size * _field_grad(g, X, mode, beta)
        if not np.isfinite(X).all() or np.abs(X).max() > DIVERGENCE_LIMIT:
            raise NonFiniteState("evolution diverged beyond the guard radius")
        out.append(X)
    return out


def _generate_one(ds: OfflineDataset, cfg: Sim4OptConfig, params: gp.KernelParams, task_id: int):
    model = gp.posterior(ds, params)
    starts = ds.X
    desc = evolve(model, starts, -1, cfg.evolve_steps, cfg.step_size, cfg.evolution_mode, cfg.ucb_beta)
    asc = evolve(model, starts, +1, cfg.evolve_steps, cfg.step_size, cfg.evolution_mode, cfg.ucb_beta)
    # states per start: [descent reversed | start | ascent], length 2M+1
    stacks = desc[::-1] + [starts] + asc
    all_states = np.stack(stacks, axis=1)  # n_starts x kappa x d
    n_starts, kappa, d = all_states.shape
    labels = _field_value(
        model, all_states.reshape(-1, d), cfg.evolution_mode, cfg.ucb_beta
    ).reshape(n_starts, kappa)
    trajectories = []
    for i in range(n_starts):
        order = np.argsort(labels[i], kind="stable")
        trajectories.append(Trajectory(all_states[i][order], labels[i][order]))
    flat_z = labels.ravel()
    flat_order = np.argsort(flat_z, kind="stable")
    flat_X = all_states.reshape(-1, d)[flat_order]
    return SyntheticTask(task_id, params, tuple(trajectories), flat_X, flat_z[flat_order])


def generate_tasks(
    ds: OfflineDataset, cfg: Sim4OptConfig, rng: RngState
) -> list[SyntheticTask]:
    """Run the full generator: one task per sampled parameter draw.

    A diverged task is regenerated with a fresh parameter draw (same per-task
    stream), at most MAX_TASK_RETRIES times.
    """
    if ds.n < 2:
        raise EmptyTask(f"need at least 2 offline points, got {ds.n}")
    tasks = []
    for i in range(cfg.n_functions):
        task_rng = rng.split(i)
        if cfg.start_subsample is not None and cfg.start_subsample < ds.n:
            idx = np.sort(task_rng.choice(ds.n, cfg.start_subsample))
            sub = OfflineDataset(ds.X[idx], ds.z[idx], ds.names)
        else:
            sub = ds
        last_err = None
        for _attempt in range(1 + MAX_TASK_RETRIES):
            params = sample_task_params(cfg.base_params, cfg.delta_frac, task_rng)
            try:
                tasks.append(_generate_one(sub, cfg, params, i))
                break
            except (NonFiniteState, NumericalError) as exc:
                last_err = exc
        else:
            raise TaskGenerationFailed(
                f"task {i} failed after {MAX_TASK_RETRIES} retries: {last_err}"
            )
    return tasks


def build_pairs(t: SyntheticTask, rng: RngState, count: int):
    """Uniformly sampled consecutive pairs from sorted trajectories; dz >= 0.

    Returns (starts, ends, dz) arrays suitable for a PairBatch.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    if not t.trajectories:
        raise EmptyTask(f"task {t.task_id} has no trajectories")
    kappa = t.kappa
    if kappa < 2:
        # degenerate length-1 trajectories: pair over the flat sorted set
        n = t.flat_z.shape[0]
        if n < 2:
            raise EmptyTask(f"task {t.task_id} has fewer than 2 states")
        r = rng.integers(n - 1, size=count)
        return t.flat_X[r], t.flat_X[r + 1], t.flat_z[r + 1] - t.flat_z[r]
    ti = rng.integers(len(t.trajectories), size=count)
    r = rng.integers(kappa - 1, size=count)
    starts = np.empty((count, t.flat_X.shape[1]))
    ends = np.empty_like(starts)
    dz = np.empty(count)
    for b in range(count):
        traj = t.trajectories[ti[b]]
        starts[b] = traj.states[r[b]]
        ends[b] = traj.states[r[b] + 1]
        dz[b] = traj.labels[r[b] + 1] - traj.labels[r[b]]
    return starts, ends, dz


BUNDLE_VERSION = 1


def save_bundle(tasks: list[SyntheticTask], path, config: dict | None = None) -> None:
    """Versioned JSON container with per-task params and trajectory blocks."""
    payload = {
        "version": BUNDLE_VERSION,
        "config": config or {},
        "tasks": [
            {
                "task_id": t.task_id,
                "params": {
                    "family": t.params.family,
                    "lengthscale": t.params.lengthscale,
                    "signal_variance": t.params.signal_variance,
                    "noise_variance": t.params.noise_variance,
                    "mean": t.params.mean,
                },
                "trajectories": [
                    {
                        "states": traj.states.tolist(),
                        "labels": traj.labels.tolist(),
                    }
                    for traj in t.trajectories
                ],
            }
            for t in tasks
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True)
        fh.write("\n")


def load_bundle(path) -> list[SyntheticTask]:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("version") != BUNDLE_VERSION:
        raise TaskGenerationFailed(f"unsupported bundle version in {path}")
    tasks = []
    for entry in payload["tasks"]:
        params = gp.KernelParams(**entry["params"])
        trajs = tuple(
            Trajectory(np.array(tr["states"], dtype=np.float64),
                       np.array(tr["labels"], dtype=np.float64))
            for tr in entry["trajectories"]
        )
        flat_X = np.concatenate([tr.states for tr in trajs], axis=0)
        flat_z = np.concatenate([tr.labels for tr in trajs])
        order = np.argsort(flat_z, kind="stable")
        tasks.append(
            SyntheticTask(entry["task_id"], params, trajs, flat_X[order], flat_z[order])
        )
    return tasks

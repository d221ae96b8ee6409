"""Analytic oracles, offline benchmark construction, method runners, and the
diagnostics (gradient-error-vs-data-fraction curve, pseudo-value distribution,
score aggregation).

All oracles are oriented for maximization: textbook minimization functions
(sphere, ackley, rastrigin) are negated so higher is always better. The oracle
is touched only to score final candidates (and in explicitly invoked
diagnostics); a per-oracle call counter makes that auditable.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import gp, surrogate as sg
from .dataio import (
    DataError,
    InvalidFraction,
    OfflineDataset,
    Scaler,
    normalized_score,
    select_bottom_fraction,
    standardize,
)
from .errors import ConfigError
from .matchloss import DEFAULT_MODE, IntegralMode, match_loss, mse_loss, offline_pairs
from .metatrain import MetaConfig, finetune, meta_train
from .numerics import RngState
from .search import gradient_search, init_candidates
from .sim4opt import Sim4OptConfig, SyntheticTask, Trajectory, generate_tasks

METHODS = ("ga", "matchopt", "optbias", "optbias_pretrain", "optbias_random_gen")
ORACLES = ("sphere", "ackley", "rastrigin", "shekel4")


class IncompleteGrid(DataError):
    pass


# canonical Shekel m=10 tables
_SHEKEL_A = np.array(
    [
        [4.0, 4.0, 4.0, 4.0],
        [1.0, 1.0, 1.0, 1.0],
        [8.0, 8.0, 8.0, 8.0],
        [6.0, 6.0, 6.0, 6.0],
        [3.0, 7.0, 3.0, 7.0],
        [2.0, 9.0, 2.0, 9.0],
        [5.0, 5.0, 3.0, 3.0],
        [8.0, 1.0, 8.0, 1.0],
        [6.0, 2.0, 6.0, 2.0],
        [7.0, 3.6, 7.0, 3.6],
    ]
)
_SHEKEL_C = np.array([0.1, 0.2, 0.2, 0.4, 0.4, 0.6, 0.3, 0.7, 0.5, 0.5])


class Oracle:
    """Analytic maximization objective with a call counter."""

    def __init__(self, name: str, dim: int):
        if name not in ORACLES:
            raise ConfigError(f"unknown oracle {name!r}")
        if name == "shekel4" and dim != 4:
            raise ConfigError("shekel4 is defined in 4 dimensions")
        self.name = name
        self.dim = dim
        self.calls = 0
        if name == "sphere":
            self.domain = np.tile([-5.12, 5.12], (dim, 1))
            self.known_max = (np.zeros(dim), 0.0)
        elif name == "rastrigin":
            self.domain = np.tile([-5.12, 5.12], (dim, 1))
            self.known_max = (np.zeros(dim), 0.0)
        elif name == "ackley":
            self.domain = np.tile([-32.768, 32.768], (dim, 1))
            self.known_max = (np.zeros(dim), 0.0)
        else:  # shekel4
            self.domain = np.tile([0.0, 10.0], (4, 1))
            self.known_max = (np.array([4.0, 4.0, 4.0, 4.0]), None)

    def eval_batch(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.dim:
            raise gp.DimensionMismatch(f"query dim {X.shape[1]} != {self.dim}")
        self.calls += X.shape[0]
        return self._value(X)

    def grad_batch(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.dim:
            raise gp.DimensionMismatch(f"query dim {X.shape[1]} != {self.dim}")
        return self._grad(X)

    def _value(self, X):
        if self.name == "sphere":
            return -np.sum(X * X, axis=1)
        if self.name == "rastrigin":
            return -(
                10.0 * self.dim
                + np.sum(X * X - 10.0 * np.cos(2.0 * np.pi * X), axis=1)
            )
        if self.name == "ackley":
            a, b, c = 20.0, 0.2, 2.0 * np.pi
            s = np.sqrt(np.mean(X * X, axis=1))
            m = np.mean(np.cos(c * X), axis=1)
            return a * np.exp(-b * s) + np.exp(m) - a - np.e
        # shekel4 (already a maximization problem in this orientation)
        diff = X[:, None, :] - _SHEKEL_A[None, :, :]
        denom = _SHEKEL_C[None, :] + np.sum(diff * diff, axis=2)
        return np.sum(1.0 / denom, axis=1)

    def _grad(self, X):
        if self.name == "sphere":
            return -2.0 * X
        if self.name == "rastrigin":
            return -(2.0 * X + 20.0 * np.pi * np.sin(2.0 * np.pi * X))
        if self.name == "ackley":
            a, b, c = 20.0, 0.2, 2.0 * np.pi
            s = np.sqrt(np.mean(X * X, axis=1))
            m = np.mean(np.cos(c * X), axis=1)
            safe = np.where(s > 0.0, s, 1.0)
            term1 = np.where(
                s > 0.0, a * b * np.exp(-b * s) / (self.dim * safe), 0.0
            )[:, None] * X
            term2 = (np.exp(m) * c / self.dim)[:, None] * np.sin(c * X)
            return -term1 - term2
        diff = X[:, None, :] - _SHEKEL_A[None, :, :]
        denom = _SHEKEL_C[None, :] + np.sum(diff * diff, axis=2)
        return np.sum(-2.0 * diff / (denom**2)[:, :, None], axis=1)


def oracle_eval(o: Oracle, x: np.ndarray):
    x = np.asarray(x, dtype=np.float64).ravel()
    return float(o.eval_batch(x[None, :])[0]), o.grad_batch(x[None, :])[0]


@dataclass(frozen=True)
class BenchmarkInstance:
    oracle: Oracle
    full_data: OfflineDataset
    offline_subset: OfflineDataset
    y_bounds: tuple[float, float]


def make_benchmark(
    o: Oracle, rng: RngState, n_full: int = 8000, frac: float = 0.01
) -> BenchmarkInstance:
    """Uniform domain samples labeled by the oracle; subset = bottom fraction."""
    if n_full * frac < 2:
        raise InvalidFraction(f"n_full*frac = {n_full * frac} < 2")
    lo, hi = o.domain[:, 0], o.domain[:, 1]
    X = rng.uniform(0.0, 1.0, size=(n_full, o.dim)) * (hi - lo) + lo
    z = o.eval_batch(X)
    full = OfflineDataset(X, z)
    subset = select_bottom_fraction(full, frac)
    return BenchmarkInstance(o, full, subset, (float(z.min()), float(z.max())))


@dataclass(frozen=True)
class PipelineConfig:
    """One place for every knob a method run needs; defaults are the
    continuous-task settings."""

    sim: Sim4OptConfig = field(default_factory=Sim4OptConfig)
    meta: MetaConfig = field(default_factory=MetaConfig)
    hidden: tuple[int, ...] = (512, 128, 32)
    slope: float = 0.01
    norm: str = sg.NORM_BATCH
    fit_gp: bool = True
    finetune_epochs: int = 20
    finetune_lr: float = 0.01
    finetune_batch: int = 128
    search_steps: int = 300
    search_gamma: float = 0.001
    top_k: int = 256
    n_candidates: int = 128
    supervised_epochs: int = 200  # GA baseline and diagnostics
    matchopt_epochs: int = 200
    batch_size: int = 128
    expt_param_range: tuple[float, float] = (0.1, 10.0)


@dataclass(frozen=True)
class ScoreReport:
    method: str
    benchmark: str
    seed: int
    percentile100: float
    best_raw: float
    candidate_scores: np.ndarray
    runtime_s: float


def _search_bounds(b: BenchmarkInstance, scaler: Scaler) -> np.ndarray:
    """Standardized bounding box of the full benchmark domain, expanded 10%."""
    lo = scaler.transform_x(b.oracle.domain[:, 0])
    hi = scaler.transform_x(b.oracle.domain[:, 1])
    lo, hi = np.minimum(lo, hi), np.maximum(lo, hi)
    pad = 0.1 * (hi - lo)
    return np.stack([lo - pad, hi + pad], axis=1)


def _make_net(dim: int, cfg: PipelineConfig, rng: RngState) -> sg.SurrogateNet:
    arch = sg.Architecture(dim, cfg.hidden, cfg.slope, cfg.norm)
    return sg.init_net(arch, rng)


def _fit_base_params(ds: OfflineDataset, cfg: PipelineConfig) -> gp.KernelParams:
    base = cfg.sim.base_params.with_mean(float(ds.z.mean()))
    if not cfg.fit_gp:
        return base
    return gp.fit_hyperparams(ds, gp.default_grid(base))


def _train_supervised(net, ds: OfflineDataset, epochs: int, batch: int, rng: RngState,
                      lr: float = 0.001):
    net.train()
    opt = sg.AdamState.for_net(net)
    for _ in range(epochs):
        idx = rng.choice(ds.n, min(batch, ds.n))
        _, grad = mse_loss(net, ds, idx)
        sg.apply_update(net, grad, lr, opt)
    net.eval()
    return net


def _train_matchopt(net, ds: OfflineDataset, epochs: int, batch: int, rng: RngState,
                    lr: float = 0.001, mode: IntegralMode = DEFAULT_MODE):
    # warm the norm statistics once on the offline inputs, then train eval-mode
    net.train()
    sg.forward(net, ds.X)
    net.eval()
    opt = sg.AdamState.for_net(net)
    for _ in range(epochs):
        pairs = offline_pairs(ds, batch, rng)
        _, grad = match_loss(net, pairs, mode)
        sg.apply_update(net, grad, lr, opt)
    return net


def expt_style_generate(
    ds: OfflineDataset, cfg: PipelineConfig, rng: RngState
) -> list[SyntheticTask]:
    """Comparison generator: kernel params drawn log-uniform from a wide fixed
    range, pseudo-labels taken at the offline inputs themselves, no trajectory
    evolution (degenerate length-1 trajectories over the flat sorted set)."""
    lo, hi = cfg.expt_param_range
    tasks = []
    mean = float(ds.z.mean())
    for i in range(cfg.sim.n_functions):
        task_rng = rng.split(i)
        ell = float(np.exp(task_rng.uniform(np.log(lo), np.log(hi))))
        var = float(np.exp(task_rng.uniform(np.log(lo), np.log(hi))))
        params = gp.KernelParams(
            cfg.sim.base_params.family, ell, var, cfg.sim.base_params.noise_variance, mean
        )
        model = gp.posterior(ds, params)
        labels = gp.posterior_mean_batch(model, ds.X)
        order = np.argsort(labels, kind="stable")
        trajs = tuple(
            Trajectory(ds.X[j][None, :].copy(), labels[j : j + 1].copy()) for j in order
        )
        tasks.append(SyntheticTask(i, params, trajs, ds.X[order].copy(), labels[order]))
    return tasks


def run_method(
    method: str, b: BenchmarkInstance, cfg: PipelineConfig, seed: int
) -> ScoreReport:
    """Execute a full pipeline for one method on the offline subset only; the
    oracle is queried solely to score the final candidates."""
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}")
    t0 = time.perf_counter()
    rng = RngState(seed)
    std_ds, scaler = standardize(b.offline_subset)
    net = _make_net(std_ds.dim, cfg, rng.split(1))
    bounds = _search_bounds(b, scaler)

    if method == "ga":
        _train_supervised(net, std_ds, cfg.supervised_epochs, cfg.batch_size, rng.split(2))
    elif method == "matchopt":
        _train_matchopt(net, std_ds, cfg.matchopt_epochs, cfg.batch_size, rng.split(2))
    else:
        base = _fit_base_params(std_ds, cfg)
        sim_cfg = replace(cfg.sim, base_params=base)
        if method == "optbias_random_gen":
            tasks = expt_style_generate(std_ds, cfg, rng.split(3))
        else:
            tasks = generate_tasks(std_ds, sim_cfg, rng.split(3))
        variant = "pretrain" if method == "optbias_pretrain" else "meta"
        meta_train(net, tasks, cfg.meta, rng.split(4), variant=variant)
        finetune(
            net,
            std_ds,
            cfg.finetune_epochs,
            rng.split(5),
            lr=cfg.finetune_lr,
            batch_size=cfg.finetune_batch,
            mode=cfg.meta.integral_mode,
        )

    net.eval()
    cands = init_candidates(net, std_ds, rng.split(6), cfg.top_k, cfg.n_candidates)
    final = gradient_search(net, cands, cfg.search_gamma, cfg.search_steps, bounds)
    raw = scaler.inverse_x(final.designs)
    values = b.oracle.eval_batch(raw)
    y_min, y_max = b.y_bounds
    scores = np.array([normalized_score(v, y_min, y_max) for v in values])
    return ScoreReport(
        method=method,
        benchmark=b.oracle.name,
        seed=seed,
        percentile100=float(scores.max()),
        best_raw=float(values.max()),
        candidate_scores=scores,
        runtime_s=time.perf_counter() - t0,
    )


def grad_error_curve(
    o: Oracle, fractions: list[float], cfg: PipelineConfig, seeds: list[int],
    n_train: int = 8000, n_test: int = 2000
):
    """Mean L2 gradient-estimation error of a supervised surrogate vs training
    fraction. Rows: (fraction, mean_grad_error, std) aggregated over seeds."""
    if not fractions:
        raise ConfigError("fraction list is empty")
    if any(not (0.0 < f <= 1.0) for f in fractions):
        raise ConfigError(f"fractions must be in (0, 1]: {fractions}")
    errs = {f: [] for f in fractions}
    for seed in seeds:
        rng = RngState(seed)
        lo, hi = o.domain[:, 0], o.domain[:, 1]
        X_train = rng.uniform(0.0, 1.0, size=(n_train, o.dim)) * (hi - lo) + lo
        z_train = o.eval_batch(X_train)
        X_test = rng.uniform(0.0, 1.0, size=(n_test, o.dim)) * (hi - lo) + lo
        g_true = o.grad_batch(X_test)
        for fi, f in enumerate(fractions):
            k = max(2, int(round(f * n_train)))
            idx = np.sort(rng.choice(n_train, k))
            sub = OfflineDataset(X_train[idx], z_train[idx])
            std_ds, scaler = standardize(sub)
            net = _make_net(o.dim, cfg, rng.split(1000 + fi))
            _train_supervised(
                net, std_ds, cfg.supervised_epochs, cfg.batch_size, rng
            )
            g_hat = sg.input_grad_batch(net, scaler.transform_x(X_test))
            # map the gradient back to raw input/output units
            g_hat = g_hat * (scaler.z_std / scaler.std)[None, :]
            errs[f].append(float(np.mean(np.linalg.norm(g_hat - g_true, axis=1))))
    return [
        (f, float(np.mean(errs[f])), float(np.std(errs[f]))) for f in fractions
    ]


def pseudo_value_distribution(
    tasks: list[SyntheticTask],
    o: Oracle,
    scaler: Scaler,
    subset_max_raw: float,
    y_bounds: tuple[float, float],
    bins: int = 30,
):
    """Oracle-value histogram of each trajectory's top pseudo-label design.

    Returns (bin_edges, counts, exceed_fraction) where exceed_fraction is the
    share of designs whose true value beats the offline subset's best.
    """
    if not tasks:
        raise ConfigError("no tasks")
    top = []
    for t in tasks:
        for traj in t.trajectories:
            top.append(traj.states[-1])  # sorted ascending: last = top label
    raw = scaler.inverse_x(np.array(top))
    values = o.eval_batch(raw)
    y_min, y_max = y_bounds
    hi = y_max + 0.1 * (y_max - y_min)
    edges = np.linspace(y_min, hi, bins + 1)
    clipped = np.clip(values, y_min, hi)
    counts, _ = np.histogram(clipped, bins=edges)
    exceed = float(np.mean(values > subset_max_raw))
    return edges, counts, exceed


def summarize(reports: list[ScoreReport]):
    """Per method x benchmark mean +/- population std, per-benchmark average
    ranks (ties share the mean rank), and mean rank per method."""
    methods = sorted({r.method for r in reports})
    benchmarks = sorted({r.benchmark for r in reports})
    seeds = sorted({r.seed for r in reports})
    cells: dict[tuple[str, str], list[float]] = {}
    for r in reports:
        cells.setdefault((r.method, r.benchmark), []).append(r.percentile100)
    for m in methods:
        for b in benchmarks:
            got = cells.get((m, b), [])
            if len(got) != len(seeds):
                raise IncompleteGrid(
                    f"cell ({m}, {b}) has {len(got)} seeds, expected {len(seeds)}"
                )
    means = {(m, b): float(np.mean(cells[(m, b)])) for m in methods for b in benchmarks}
    stds = {(m, b): float(np.std(cells[(m, b)])) for m in methods for b in benchmarks}
    ranks: dict[tuple[str, str], float] = {}
    for b in benchmarks:
        vals = np.array([means[(m, b)] for m in methods])
        order = np.argsort(-vals, kind="stable")
        rank = np.empty(len(methods))
        pos = 0
        while pos < len(methods):
            end = pos
            while end + 1 < len(methods) and vals[order[end + 1]] == vals[order[pos]]:
                end += 1
            shared = (pos + end) / 2.0 + 1.0
            for k in range(pos, end + 1):
                rank[order[k]] = shared
            pos = end + 1
        for mi, m in enumerate(methods):
            ranks[(m, b)] = float(rank[mi])
    mean_rank = {
        m: float(np.mean([ranks[(m, b)] for b in benchmarks])) for m in methods
    }
    return {
        "methods": methods,
        "benchmarks": benchmarks,
        "mean": means,
        "std": stds,
        "rank": ranks,
        "mean_rank": mean_rank,
    }

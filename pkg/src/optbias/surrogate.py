"""Feed-forward surrogate g_phi with hand-rolled autodiff.

Architecture: per hidden layer Linear -> Norm -> LeakyReLU, then a linear head
to one scalar. Parameters (weights, biases, norm scale/shift) live in a single
flat float64 vector so fast-weight vectors for meta-learning are just arrays.

Norm layers use batch statistics in train mode (running stats updated with
momentum 0.9) and frozen running statistics in eval mode. Input gradients and
the forward-over-reverse pass (`backward_params_jvp`) are defined only in eval
mode, where the norm layer is a fixed affine map and second derivatives are
well-posed.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError
from .numerics import RngState

EPS = 1e-5
RUNNING_MOMENTUM = 0.9

NORM_BATCH = "batch_stat"
NORM_NONE = "none"


class InvalidArchitecture(NumericalError):
    pass


class DimensionMismatch(NumericalError):
    pass


class TrainModeInputGrad(NumericalError):
    pass


class ShapeMismatch(NumericalError):
    pass


@dataclass(frozen=True)
class Architecture:
    input_dim: int
    hidden: tuple[int, ...] = (512, 128, 32)
    slope: float = 0.01
    norm: str = NORM_BATCH

    def __post_init__(self):
        if not self.hidden or any(w < 1 for w in self.hidden):
            raise InvalidArchitecture(f"bad hidden widths: {self.hidden}")
        if self.input_dim < 1:
            raise InvalidArchitecture(f"bad input dim: {self.input_dim}")
        if not (0.0 < self.slope < 1.0):
            raise InvalidArchitecture(f"slope must be in (0, 1): {self.slope}")
        if self.norm not in (NORM_BATCH, NORM_NONE):
            raise InvalidArchitecture(f"unknown norm: {self.norm}")
        object.__setattr__(self, "hidden", tuple(int(w) for w in self.hidden))

    def layout(self) -> list[tuple[str, tuple[int, ...], int]]:
        """(name, shape, flat offset) for every parameter block."""
        out, off = [], 0
        prev = self.input_dim
        for i, w in enumerate(self.hidden):
            for name, shape in (
                (f"W{i}", (prev, w)),
                (f"b{i}", (w,)),
            ):
                out.append((name, shape, off))
                off += int(np.prod(shape))
            if self.norm == NORM_BATCH:
                for name in (f"g{i}", f"s{i}"):
                    out.append((name, (w,), off))
                    off += w
            prev = w
        out.append(("Wh", (prev, 1), off))
        off += prev
        out.append(("bh", (1,), off))
        return out

    def n_params(self) -> int:
        name, shape, off = self.layout()[-1]
        return off + int(np.prod(shape))


class SurrogateNet:
    """Mutable parameter/statistics container; all math is in module functions."""

    def __init__(self, arch: Architecture, params: np.ndarray, norm_stats, mode="train"):
        if params.shape != (arch.n_params(),):
            raise ShapeMismatch(
                f"params length {params.shape} != {arch.n_params()} for {arch}"
            )
        self.arch = arch
        self.params = params
        self.norm_stats = norm_stats  # list of (running_mean, running_var) per layer
        self.mode = mode
        self._offsets = {name: (shape, off) for name, shape, off in arch.layout()}

    def view(self, name: str, params: np.ndarray | None = None):
        shape, off = self._offsets[name]
        src = self.params if params is None else params
        return src[off : off + int(np.prod(shape))].reshape(shape)

    def train(self):
        self.mode = "train"
        return self

    def eval(self):
        self.mode = "eval"
        return self

    def copy(self) -> "SurrogateNet":
        stats = [(m.copy(), v.copy()) for m, v in self.norm_stats]
        return SurrogateNet(self.arch, self.params.copy(), stats, self.mode)


def init_net(arch: Architecture, rng: RngState) -> SurrogateNet:
    """Fan-in-scaled uniform weights, zero biases, unit norm scale, stats (0, 1)."""
    params = np.zeros(arch.n_params())
    net = SurrogateNet(arch, params, None, mode="train")
    prev = arch.input_dim
    for i, w in enumerate(arch.hidden):
        bound = 1.0 / np.sqrt(prev)
        net.view(f"W{i}")[:] = rng.uniform(-bound, bound, size=(prev, w))
        if arch.norm == NORM_BATCH:
            net.view(f"g{i}")[:] = 1.0
        prev = w
    bound = 1.0 / np.sqrt(prev)
    net.view("Wh")[:] = rng.uniform(-bound, bound, size=(prev, 1))
    net.norm_stats = [
        (np.zeros(w), np.ones(w)) for w in (arch.hidden if arch.norm == NORM_BATCH else ())
    ]
    return net


def _check_override(net: SurrogateNet, params_override):
    if params_override is None:
        return net.params
    p = np.asarray(params_override, dtype=np.float64)
    if p.shape != net.params.shape:
        raise ShapeMismatch(f"override length {p.shape} != {net.params.shape}")
    return p


def forward(net: SurrogateNet, X: np.ndarray, params_override=None):
    """Predictions (b,) plus the activation cache for backward_params.

    Train mode normalizes with batch statistics and updates running stats;
    eval mode uses frozen running stats and never mutates the net.
    """
    p = _check_override(net, params_override)
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[0] == 0:
        raise DimensionMismatch("empty batch")
    if X.shape[1] != net.arch.input_dim:
        raise DimensionMismatch(f"input dim {X.shape[1]} != {net.arch.input_dim}")
    h = X
    layers = []
    for i in range(len(net.arch.hidden)):
        a = h
        s = a @ net.view(f"W{i}", p) + net.view(f"b{i}", p)
        if net.arch.norm == NORM_BATCH:
            if net.mode == "train":
                mu = s.mean(axis=0)
                var = s.var(axis=0)
                rm, rv = net.norm_stats[i]
                rm *= RUNNING_MOMENTUM
                rm += (1.0 - RUNNING_MOMENTUM) * mu
                rv *= RUNNING_MOMENTUM
                rv += (1.0 - RUNNING_MOMENTUM) * var
            else:
                mu, var = net.norm_stats[i]
            std = np.sqrt(var + EPS)
            xhat = (s - mu) / std
            u = net.view(f"g{i}", p) * xhat + net.view(f"s{i}", p)
        else:
            std, xhat, u = None, None, s
        mask = np.where(u > 0.0, 1.0, net.arch.slope)
        h = u * mask
        layers.append({"a": a, "s": s, "std": std, "xhat": xhat, "mask": mask})
    pred = (h @ net.view("Wh", p) + net.view("bh", p)).ravel()
    cache = {"params": p, "mode": net.mode, "layers": layers, "h_last": h, "X": X}
    return pred, cache


def backward_params(net: SurrogateNet, cache, dL_dpred: np.ndarray) -> np.ndarray:
    """Exact reverse-mode gradient of sum_b dL_dpred[b] * pred[b] w.r.t. flat params."""
    p = cache["params"]
    dL = np.asarray(dL_dpred, dtype=np.float64).ravel()
    if dL.shape[0] != cache["X"].shape[0]:
        raise ShapeMismatch("dL_dpred length does not match the cached batch")
    grad = np.zeros_like(p)
    g = SurrogateNet(net.arch, grad, net.norm_stats, net.mode)

    h = cache["h_last"]
    g.view("Wh")[:] = h.T @ dL[:, None]
    g.view("bh")[:] = dL.sum()
    dh = dL[:, None] * net.view("Wh", p).ravel()[None, :]

    for i in reversed(range(len(net.arch.hidden))):
        lay = cache["layers"][i]
        du = dh * lay["mask"]
        if net.arch.norm == NORM_BATCH:
            xhat, std = lay["xhat"], lay["std"]
            g.view(f"g{i}")[:] = (du * xhat).sum(axis=0)
            g.view(f"s{i}")[:] = du.sum(axis=0)
            gam = net.view(f"g{i}", p)
            if cache["mode"] == "train":
                B = du.shape[0]
                dxhat = du * gam
                ds = (
                    dxhat
                    - dxhat.mean(axis=0)
                    - xhat * (dxhat * xhat).mean(axis=0)
                ) / std
                del B
            else:
                ds = du * gam / std
        else:
            ds = du
        a = lay["a"]
        g.view(f"W{i}")[:] = a.T @ ds
        g.view(f"b{i}")[:] = ds.sum(axis=0)
        dh = ds @ net.view(f"W{i}", p).T
    return grad


def input_grad(net: SurrogateNet, x: np.ndarray, params_override=None) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64).ravel()
    return input_grad_batch(net, x[None, :], params_override)[0]


def input_grad_batch(net: SurrogateNet, X: np.ndarray, params_override=None) -> np.ndarray:
    """Per-row grad_x g(x), eval mode only (frozen norm statistics)."""
    if net.mode != "eval":
        raise TrainModeInputGrad("input gradients require eval mode")
    p = _check_override(net, params_override)
    _, cache = forward(net, X, params_override=p)
    dh = np.broadcast_to(net.view("Wh", p).ravel()[None, :], cache["h_last"].shape)
    for i in reversed(range(len(net.arch.hidden))):
        lay = cache["layers"][i]
        du = dh * lay["mask"]
        if net.arch.norm == NORM_BATCH:
            ds = du * net.view(f"g{i}", p) / lay["std"]
        else:
            ds = du
        dh = ds @ net.view(f"W{i}", p).T
    return dh


def forward_jvp(net: SurrogateNet, X: np.ndarray, V: np.ndarray, params_override=None):
    """Eval-mode forward that also propagates input tangents V (rows).

    Returns (pred, jvp, cache); jvp[b] = V[b] . grad_x g(X[b]).
    """
    if net.mode != "eval":
        raise TrainModeInputGrad("forward_jvp requires eval mode")
    p = _check_override(net, params_override)
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    V = np.atleast_2d(np.asarray(V, dtype=np.float64))
    if V.shape != X.shape:
        raise ShapeMismatch(f"tangent shape {V.shape} != input shape {X.shape}")
    h, th = X, V
    layers = []
    for i in range(len(net.arch.hidden)):
        a, ta = h, th
        W = net.view(f"W{i}", p)
        s = a @ W + net.view(f"b{i}", p)
        ts = ta @ W
        if net.arch.norm == NORM_BATCH:
            mu, var = net.norm_stats[i]
            std = np.sqrt(var + EPS)
            xhat = (s - mu) / std
            gam = net.view(f"g{i}", p)
            u = gam * xhat + net.view(f"s{i}", p)
            tu = gam * ts / std
        else:
            std, xhat, u, tu = None, None, s, ts
        mask = np.where(u > 0.0, 1.0, net.arch.slope)
        h, th = u * mask, tu * mask
        layers.append(
            {"a": a, "ta": ta, "s": s, "ts": ts, "std": std, "xhat": xhat, "mask": mask}
        )
    Wh = net.view("Wh", p)
    pred = (h @ Wh + net.view("bh", p)).ravel()
    jvp = (th @ Wh).ravel()
    cache = {"params": p, "layers": layers, "h_last": h, "th_last": th, "X": X}
    return pred, jvp, cache


def backward_params_jvp(net: SurrogateNet, cache, dpred, djvp) -> np.ndarray:
    """Flat-parameter gradient of sum_b (dpred[b]*pred[b] + djvp[b]*jvp[b]).

    Reverse pass over the augmented (primal, tangent) computation from
    forward_jvp; exact almost everywhere (LeakyReLU masks treated as locally
    constant).
    """
    p = cache["params"]
    dpred = np.asarray(dpred, dtype=np.float64).ravel()
    djvp = np.asarray(djvp, dtype=np.float64).ravel()
    grad = np.zeros_like(p)
    g = SurrogateNet(net.arch, grad, net.norm_stats, net.mode)

    h, th = cache["h_last"], cache["th_last"]
    g.view("Wh")[:] = h.T @ dpred[:, None] + th.T @ djvp[:, None]
    g.view("bh")[:] = dpred.sum()
    wh = net.view("Wh", p).ravel()
    dh = dpred[:, None] * wh[None, :]
    dth = djvp[:, None] * wh[None, :]

    for i in reversed(range(len(net.arch.hidden))):
        lay = cache["layers"][i]
        mask = lay["mask"]
        du = dh * mask
        dtu = dth * mask
        if net.arch.norm == NORM_BATCH:
            std = lay["std"]
            gam = net.view(f"g{i}", p)
            g.view(f"g{i}")[:] = (du * lay["xhat"]).sum(axis=0) + (
                dtu * lay["ts"] / std
            ).sum(axis=0)
            g.view(f"s{i}")[:] = du.sum(axis=0)
            ds = du * gam / std
            dts = dtu * gam / std
        else:
            ds, dts = du, dtu
        W = net.view(f"W{i}", p)
        g.view(f"W{i}")[:] = lay["a"].T @ ds + lay["ta"].T @ dts
        g.view(f"b{i}")[:] = ds.sum(axis=0)
        dh = ds @ W.T
        dth = dts @ W.T
    return grad


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_net(cls, net: SurrogateNet) -> "AdamState":
        n = net.params.shape[0]
        return cls(np.zeros(n), np.zeros(n))


def sgd_step(params: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
    if params.shape != grad.shape:
        raise ShapeMismatch(f"{params.shape} vs {grad.shape}")
    return params - lr * grad


def adam_step(params: np.ndarray, grad: np.ndarray, lr: float, state: AdamState) -> np.ndarray:
    if params.shape != grad.shape:
        raise ShapeMismatch(f"{params.shape} vs {grad.shape}")
    state.t += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    mhat = state.m / (1.0 - state.beta1**state.t)
    vhat = state.v / (1.0 - state.beta2**state.t)
    return params - lr * mhat / (np.sqrt(vhat) + state.eps)


def apply_update(net: SurrogateNet, grad: np.ndarray, lr: float, optimizer_state=None):
    """In-place parameter update: SGD when no state is given, Adam otherwise."""
    if optimizer_state is None:
        net.params = sgd_step(net.params, grad, lr)
    else:
        net.params = adam_step(net.params, grad, lr, optimizer_state)
    return net


CHECKPOINT_MAGIC = b"OBSN"
CHECKPOINT_VERSION = 1


def save_checkpoint(net: SurrogateNet, path) -> None:
    """Binary checkpoint: magic, version byte, JSON header, raw little-endian f64."""
    header = json.dumps(
        {
            "input_dim": net.arch.input_dim,
            "hidden": list(net.arch.hidden),
            "slope": net.arch.slope,
            "norm": net.arch.norm,
            "mode": net.mode,
            "n_stats": len(net.norm_stats),
        },
        sort_keys=True,
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<B", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(net.params.astype("<f8").tobytes())
        for rm, rv in net.norm_stats:
            fh.write(rm.astype("<f8").tobytes())
            fh.write(rv.astype("<f8").tobytes())


def load_checkpoint(path) -> SurrogateNet:
    with open(path, "rb") as fh:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise NumericalError(f"{path}: not a surrogate checkpoint")
        (version,) = struct.unpack("<B", fh.read(1))
        if version != CHECKPOINT_VERSION:
            raise NumericalError(f"{path}: unsupported checkpoint version {version}")
        (hlen,) = struct.unpack("<I", fh.read(4))
        meta = json.loads(fh.read(hlen).decode("utf-8"))
        arch = Architecture(
            meta["input_dim"], tuple(meta["hidden"]), meta["slope"], meta["norm"]
        )
        params = np.frombuffer(fh.read(8 * arch.n_params()), dtype="<f8").copy()
        stats = []
        for w in arch.hidden if arch.norm == NORM_BATCH else ():
            rm = np.frombuffer(fh.read(8 * w), dtype="<f8").copy()
            rv = np.frombuffer(fh.read(8 * w), dtype="<f8").copy()
            stats.append((rm, rv))
        return SurrogateNet(arch, params, stats, meta["mode"])

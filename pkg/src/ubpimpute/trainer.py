"""Three-phase training of latent inputs and network weights by per-element SGD."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
from numba import njit

from .dataset import EncodedMatrix
from .mlp import (
    MlpModel,
    Topology,
    forward_kernel,
    init_model,
    scale_output_column_kernel,
)

# Independent RNG streams derived from one seed.
STREAM_V, STREAM_T, STREAM_W, STREAM_PERM, STREAM_HOLDOUT = range(5)


@dataclass
class TrainConfig:
    latent_t: int = 2
    hidden: tuple[int, ...] = ()
    eta_start: float = 0.01
    eta_floor: float = 0.0001
    gamma: float = 0.00001
    lam: float = 0.0001
    seed: int = 0
    max_epochs_per_phase: int = 10000
    holdout_fraction: float = 0.0
    h_before_w: bool = False
    latent_init_scale: float = 0.01
    # std of T and W entries, or "fan_in" for 1/sqrt(fan_in) per layer
    weight_init_scale: float | str = "fan_in"

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if not 0 < self.eta_floor < self.eta_start:
            raise ValueError("need 0 < eta_floor < eta_start")
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        if self.lam < 0:
            raise ValueError("lam must be non-negative")
        if self.latent_t < 1:
            raise ValueError("latent_t must be >= 1")
        if self.max_epochs_per_phase < 1:
            raise ValueError("max_epochs_per_phase must be >= 1")
        if not 0 <= self.holdout_fraction < 1:
            raise ValueError("holdout_fraction must lie in [0, 1)")
        if isinstance(self.weight_init_scale, str):
            if self.weight_init_scale != "fan_in":
                raise ValueError(f"weight_init_scale must be a number or 'fan_in', got {self.weight_init_scale!r}")
        elif not self.weight_init_scale > 0:
            raise ValueError("weight_init_scale must be positive")
        if not self.latent_init_scale > 0:
            raise ValueError("latent_init_scale must be positive")


@dataclass
class TrainedModel:
    V: np.ndarray
    model: MlpModel
    history: dict = field(default_factory=dict)  # phase -> [(epoch, rmse, eta), ...]
    config: TrainConfig | None = None

    def to_json(self) -> str:
        cfg = asdict(self.config) if self.config is not None else None
        if cfg is not None:
            cfg["hidden"] = list(cfg["hidden"])
        return json.dumps({
            "config": cfg,
            "V": self.V.tolist(),
            "model": self.model.to_dict(),
            "history": {str(k): [list(h) for h in v] for k, v in self.history.items()},
        })

    @classmethod
    def from_json(cls, text: str) -> "TrainedModel":
        obj = json.loads(text)
        cfg = TrainConfig(**obj["config"]) if obj.get("config") else None
        history = {int(k): [tuple(h) for h in v] for k, v in obj.get("history", {}).items()}
        V = np.array(obj["V"], dtype=float).reshape(len(obj["V"]), -1)
        return cls(V=V, model=MlpModel.from_dict(obj["model"]), history=history, config=cfg)


@dataclass(frozen=True)
class KnownCells:
    rows: np.ndarray
    cols: np.ndarray
    vals: np.ndarray

    def __len__(self):
        return self.rows.size

    def subset(self, idx) -> "KnownCells":
        idx = np.sort(idx)
        return KnownCells(self.rows[idx], self.cols[idx], self.vals[idx])


def known_cells(X: EncodedMatrix) -> KnownCells:
    """Known entries in row-major order. Unknown entries are never copied."""
    rows, cols = np.nonzero(X.known)
    vals = np.ascontiguousarray(X.values[rows, cols], dtype=float)
    return KnownCells(rows.astype(np.int64), cols.astype(np.int64), vals)


# --------------------------------------------------------------------------
# Kernels
# --------------------------------------------------------------------------

@njit(cache=True)
def _input_gradient(params, sizes, w_off, u_off, delta, c, h):
    if sizes.shape[0] == 2:
        nout = sizes[1]
        dc = delta[u_off[1] + c]
        for i in range(sizes[0]):
            h[i] = -params[w_off[0] + i * nout + c] * dc
    else:
        nout = sizes[1]
        for i in range(sizes[0]):
            s = 0.0
            row = w_off[0] + i * nout
            for j in range(nout):
                s += params[row + j] * delta[u_off[1] + j]
            h[i] = -s


@njit(cache=True)
def _epoch_kernel(params, sizes, w_off, b_off, u_off, V, rows, cols, vals, order,
                  eta, lam, update_inputs, h_before_w, net, act, delta, h):
    """One pass of single-element updates, fused into a single loop for speed.

    Arithmetic matches forward_single_kernel, backprop_kernel and
    input_gradient_kernel from the mlp module, followed by the descent
    p <- p - eta * (grad + lam * p) on every parameter. Output columns other
    than the presented one have zero gradient, so their update is a pure decay
    by 1 - eta * lam; it is applied lazily, when the column is next presented
    or at the end of the pass.
    """
    L = sizes.shape[0] - 1
    t = V.shape[1]
    n_out = sizes[L]
    o_out = u_off[L]
    keep = 1.0 - eta * lam
    last = np.zeros(n_out, dtype=np.int64)
    for q in range(order.shape[0]):
        e = order[q]
        r = rows[e]
        c = cols[e]
        if lam != 0.0 and q > last[c]:
            scale_output_column_kernel(params, sizes, w_off, b_off, c, keep ** (q - last[c]))
        last[c] = q + 1

        # forward through every hidden unit and output c only
        for i in range(t):
            act[i] = V[r, i]
        for k in range(L):
            nin = sizes[k]
            nout = sizes[k + 1]
            lo, hi = (c, c + 1) if k == L - 1 else (0, nout)
            for j in range(lo, hi):
                s = params[b_off[k] + j]
                base = w_off[k] + j
                for i in range(nin):
                    s += params[base + i * nout] * act[u_off[k] + i]
                net[u_off[k + 1] + j] = s
                act[u_off[k + 1] + j] = 1.0 / (1.0 + np.exp(-s))

        # error terms; only output c carries error
        for u in range(o_out, o_out + n_out):
            delta[u] = 0.0
        a = act[o_out + c]
        delta[o_out + c] = (vals[e] - a) * a * (1.0 - a)
        if L >= 2:
            k = L - 1
            for i in range(sizes[k]):
                u = u_off[k] + i
                delta[u] = params[w_off[k] + i * n_out + c] * delta[o_out + c] * act[u] * (1.0 - act[u])
        for k in range(L - 2, 0, -1):
            nout = sizes[k + 1]
            for i in range(sizes[k]):
                s = 0.0
                row = w_off[k] + i * nout
                for j in range(nout):
                    s += params[row + j] * delta[u_off[k + 1] + j]
                u = u_off[k] + i
                delta[u] = s * act[u] * (1.0 - act[u])

        if update_inputs and h_before_w:
            _input_gradient(params, sizes, w_off, u_off, delta, c, h)

        # descent on every hidden unit and output c
        for k in range(L):
            nin = sizes[k]
            nout = sizes[k + 1]
            lo, hi = (c, c + 1) if k == L - 1 else (0, nout)
            for j in range(lo, hi):
                dj = delta[u_off[k + 1] + j]
                if lam == 0.0 and dj == 0.0:
                    continue
                for i in range(nin):
                    p = w_off[k] + i * nout + j
                    params[p] = params[p] - eta * (-dj * act[u_off[k] + i] + lam * params[p])
                p = b_off[k] + j
                params[p] = params[p] - eta * (-dj + lam * params[p])

        if update_inputs:
            if not h_before_w:
                _input_gradient(params, sizes, w_off, u_off, delta, c, h)
            for i in range(t):
                V[r, i] = V[r, i] - eta * (h[i] + lam * V[r, i])
    if lam != 0.0:
        n = order.shape[0]
        for c in range(n_out):
            if n > last[c]:
                scale_output_column_kernel(params, sizes, w_off, b_off, c, keep ** (n - last[c]))


@njit(cache=True)
def _rmse_kernel(params, sizes, w_off, b_off, u_off, V, rows, cols, vals, net, act):
    L = sizes.shape[0] - 1
    out0 = u_off[L]
    sse = 0.0
    last = -1
    for e in range(rows.shape[0]):
        r = rows[e]
        if r != last:
            forward_kernel(params, sizes, w_off, b_off, u_off, V[r], net, act)
            last = r
        diff = vals[e] - act[out0 + cols[e]]
        sse += diff * diff
    return np.sqrt(sse / rows.shape[0])


@njit(cache=True)
def _predict_kernel(params, sizes, w_off, b_off, u_off, V, net, act, out):
    L = sizes.shape[0] - 1
    out0 = u_off[L]
    for r in range(V.shape[0]):
        forward_kernel(params, sizes, w_off, b_off, u_off, V[r], net, act)
        for c in range(sizes[L]):
            out[r, c] = act[out0 + c]


def _as_known(X) -> KnownCells:
    return X if isinstance(X, KnownCells) else known_cells(X)


def rmse(model: MlpModel, V: np.ndarray, X) -> float:
    cells = _as_known(X)
    if len(cells) == 0:
        raise ValueError("no known elements to score")
    return float(_rmse_kernel(model.params, model.sizes, model.w_off, model.b_off, model.u_off,
                              V, cells.rows, cells.cols, cells.vals, model.net, model.act))


def train_epoch(X, model: MlpModel, V: np.ndarray, eta: float, lam: float, update_inputs: bool,
                rng: np.random.Generator, h_before_w: bool = False, score=None) -> float:
    """Present every known element once in random order; return the RMSE afterwards.

    ``score`` (defaults to the training cells) selects the cells the RMSE is
    measured on. ``model`` and ``V`` are updated in place.
    """
    cells = _as_known(X)
    if len(cells) == 0:
        raise ValueError("no known elements to train on")
    if V.shape[1] != model.topology.inputs:
        raise ValueError("latent width does not match network inputs")
    if cells.cols.max() >= model.topology.outputs:
        raise ValueError("data width exceeds network outputs")
    order = rng.permutation(len(cells)).astype(np.int64)
    h = np.zeros(V.shape[1])
    _epoch_kernel(model.params, model.sizes, model.w_off, model.b_off, model.u_off, V,
                  cells.rows, cells.cols, cells.vals, order, float(eta), float(lam),
                  bool(update_inputs), bool(h_before_w), model.net, model.act, model.delta, h)
    model._presented = None
    return rmse(model, V, cells if score is None else score)


def decay_schedule(epoch_fn: Callable[[float], float], eta_start: float, eta_floor: float,
                   gamma: float, max_epochs: int, on_epoch=None):
    """Run epochs, halving eta whenever relative improvement falls below gamma.

    Stops once eta <= eta_floor or after ``max_epochs``. Returns the last
    score and the (epoch, score, eta) history, where eta is the rate the
    epoch ran with.
    """
    eta = eta_start
    s_prev = math.inf
    s = math.inf
    history = []
    epoch = 0
    while eta > eta_floor and epoch < max_epochs:
        epoch += 1
        s = float(epoch_fn(eta))
        history.append((epoch, s, eta))
        if on_epoch is not None:
            on_epoch(epoch, s, eta)
        # a zero previous score admits no further improvement
        improvement = 1.0 - s / s_prev if s_prev > 0 else 0.0
        if improvement < gamma:
            eta /= 2.0
        s_prev = s
    return s, history


def run_phase(X, model: MlpModel, V: np.ndarray, config: TrainConfig, update_inputs: bool,
              regularized: bool, rng: np.random.Generator, score=None, phase: int = 0,
              progress=None):
    """One convergence loop of training. Returns (final rmse, history)."""
    cells = _as_known(X)
    lam = config.lam if regularized else 0.0

    def epoch_fn(eta):
        return train_epoch(cells, model, V, eta, lam, update_inputs, rng,
                           h_before_w=config.h_before_w, score=score)

    on_epoch = None
    if progress is not None:
        def on_epoch(epoch, s, eta):
            progress(phase, epoch, s, eta)

    return decay_schedule(epoch_fn, config.eta_start, config.eta_floor, config.gamma,
                          config.max_epochs_per_phase, on_epoch)


# --------------------------------------------------------------------------
# Drivers
# --------------------------------------------------------------------------

def _streams(seed: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(5)]


def _prepare(X: EncodedMatrix, config: TrainConfig):
    n, width = X.values.shape
    if config.latent_t >= width:
        raise ValueError(f"latent size t={config.latent_t} must be smaller than data width {width}")
    cells = known_cells(X)
    if len(cells) == 0:
        raise ValueError("no known elements")
    rngs = _streams(config.seed)
    train, score = cells, None
    if config.holdout_fraction > 0:
        m = len(cells)
        n_hold = int(round(config.holdout_fraction * m))
        if not 0 < n_hold < m:
            raise ValueError("holdout leaves no training or no validation cells")
        perm = rngs[STREAM_HOLDOUT].permutation(m)
        score = cells.subset(perm[:n_hold])
        train = cells.subset(perm[n_hold:])
    V = rngs[STREAM_V].normal(0.0, config.latent_init_scale, size=(n, config.latent_t))
    return train, score, V, rngs, width


def ubp_train(X: EncodedMatrix, config: TrainConfig, progress=None, pretrain: bool = True) -> TrainedModel:
    """Fit latent rows V and an MLP W to the known cells of X.

    Phase 1 trains V against a throwaway single-layer perceptron, phase 2
    trains the real network with V frozen, phase 3 refines both without
    regularization. ``pretrain=False`` skips phases 1 and 2.
    """
    train, score, V, rngs, width = _prepare(X, config)
    perm_rng = rngs[STREAM_PERM]
    history = {}
    if pretrain:
        T = init_model(Topology(config.latent_t, (), width), rngs[STREAM_T], config.weight_init_scale)
        _, history[1] = run_phase(train, T, V, config, update_inputs=True, regularized=True,
                                  rng=perm_rng, score=score, phase=1, progress=progress)
    W = init_model(Topology(config.latent_t, config.hidden, width), rngs[STREAM_W], config.weight_init_scale)
    if pretrain:
        _, history[2] = run_phase(train, W, V, config, update_inputs=False, regularized=True,
                                  rng=perm_rng, score=score, phase=2, progress=progress)
    _, history[3] = run_phase(train, W, V, config, update_inputs=True, regularized=False,
                              rng=perm_rng, score=score, phase=3, progress=progress)
    return TrainedModel(V=V, model=W, history=history, config=config)


def nlpca_train(X: EncodedMatrix, config: TrainConfig, progress=None) -> TrainedModel:
    """Random V and W refined together in a single unregularized phase."""
    train, score, V, rngs, width = _prepare(X, config)
    W = init_model(Topology(config.latent_t, config.hidden, width), rngs[STREAM_W], config.weight_init_scale)
    _, hist = run_phase(train, W, V, config, update_inputs=True, regularized=False,
                        rng=rngs[STREAM_PERM], score=score, phase=3, progress=progress)
    return TrainedModel(V=V, model=W, history={3: hist}, config=config)


def decode_row(tm: TrainedModel, r: int) -> np.ndarray:
    if not 0 <= r < tm.V.shape[0]:
        raise IndexError(f"row {r} out of range")
    return tm.model.forward(tm.V[r])


def predict_all(tm: TrainedModel) -> np.ndarray:
    m = tm.model
    out = np.empty((tm.V.shape[0], m.topology.outputs))
    _predict_kernel(m.params, m.sizes, m.w_off, m.b_off, m.u_off, np.ascontiguousarray(tm.V),
                    m.net, m.act, out)
    return out


def sample_latent_grid(tm: TrainedModel, dims=(0, 1), steps: int = 10, bounds=None):
    """Decode a uniform steps x steps grid over two latent coordinates.

    The remaining coordinates sit at their column means. ``bounds`` gives
    (lo, hi) per grid dimension and defaults to the observed range of V.
    Returns (axis_i, axis_j, outputs) with outputs of shape
    (steps, steps, n_outputs); outputs[a, b] decodes (axis_i[a], axis_j[b]).
    """
    t = tm.V.shape[1]
    i, j = dims
    if t < 2:
        raise ValueError("grid sampling needs at least two latent dimensions")
    if not (0 <= i < t and 0 <= j < t) or i == j:
        raise ValueError(f"dims {dims} must be two distinct indices below {t}")
    if steps < 2:
        raise ValueError("steps must be >= 2")
    if bounds is None:
        bounds = [(tm.V[:, i].min(), tm.V[:, i].max()), (tm.V[:, j].min(), tm.V[:, j].max())]
    axis_i = np.linspace(bounds[0][0], bounds[0][1], steps)
    axis_j = np.linspace(bounds[1][0], bounds[1][1], steps)
    base = tm.V.mean(axis=0)
    pts = np.tile(base, (steps * steps, 1))
    pts[:, i] = np.repeat(axis_i, steps)
    pts[:, j] = np.tile(axis_j, steps)
    out = predict_all(TrainedModel(V=pts, model=tm.model))
    return axis_i, axis_j, out.reshape(steps, steps, -1)

"""Logistic multilayer perceptron with single-element backpropagation.

All weights and biases of a network live in one flat vector. Layer ``k``
(feeding units of layer ``k`` into layer ``k + 1``) stores its weight block
row-major at ``w_off[k]``, so ``w[i, j]`` (unit i feeds unit j) sits at
``w_off[k] + i * sizes[k + 1] + j``, followed by its biases at ``b_off[k]``.
Per-unit scratch (net input, activation, error term) is laid out by layer
at ``u_off``; layer 0 holds the input vector.

Gradients follow the sign convention of the error term
``delta_c = (x - a_c) f'(net_c)``: ``g = -delta_j * a_i`` and
``h_i = -sum_j w[i, j] * delta_j``, which is half the derivative of
``(x - a_c)**2``. The trainer descends with ``p <- p - eta * (grad + lam * p)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit


class StateError(RuntimeError):
    pass


@dataclass(frozen=True)
class Topology:
    inputs: int
    hidden: tuple[int, ...]
    outputs: int

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.inputs < 1 or self.outputs < 1 or any(h < 1 for h in self.hidden):
            raise ValueError(f"invalid topology {self}")

    @property
    def sizes(self) -> tuple[int, ...]:
        return (self.inputs, *self.hidden, self.outputs)

    @property
    def n_hidden_layers(self) -> int:
        return len(self.hidden)


def layout(sizes):
    """Offsets (w_off, b_off, u_off) and total parameter count for ``sizes``."""
    sizes = np.asarray(sizes, dtype=np.int64)
    L = len(sizes) - 1
    w_off = np.zeros(L, dtype=np.int64)
    b_off = np.zeros(L, dtype=np.int64)
    pos = 0
    for k in range(L):
        w_off[k] = pos
        pos += sizes[k] * sizes[k + 1]
        b_off[k] = pos
        pos += sizes[k + 1]
    u_off = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
    return w_off, b_off, u_off, pos


# --------------------------------------------------------------------------
# Kernels
# --------------------------------------------------------------------------

@njit(cache=True, inline="always")
def _propagate_layer(params, sizes, w_off, b_off, u_off, k, lo, hi, net, act):
    # units lo..hi-1 of layer k+1; written out in full because a nested
    # helper call per unit stops numba from optimizing the loop
    nin = sizes[k]
    nout = sizes[k + 1]
    a0 = u_off[k]
    for j in range(lo, hi):
        s = params[b_off[k] + j]
        base = w_off[k] + j
        for i in range(nin):
            s += params[base + i * nout] * act[a0 + i]
        net[u_off[k + 1] + j] = s
        act[u_off[k + 1] + j] = 1.0 / (1.0 + np.exp(-s))


@njit(cache=True)
def forward_kernel(params, sizes, w_off, b_off, u_off, v, net, act):
    L = sizes.shape[0] - 1
    for i in range(sizes[0]):
        act[i] = v[i]
    for k in range(L):
        _propagate_layer(params, sizes, w_off, b_off, u_off, k, 0, sizes[k + 1], net, act)


@njit(cache=True)
def forward_single_kernel(params, sizes, w_off, b_off, u_off, v, c, net, act):
    L = sizes.shape[0] - 1
    for i in range(sizes[0]):
        act[i] = v[i]
    for k in range(L):
        lo, hi = (c, c + 1) if k == L - 1 else (0, sizes[k + 1])
        _propagate_layer(params, sizes, w_off, b_off, u_off, k, lo, hi, net, act)
    return act[u_off[L] + c]


@njit(cache=True)
def backprop_kernel(params, sizes, w_off, u_off, act, delta, c, target):
    L = sizes.shape[0] - 1
    delta[:] = 0.0
    o = u_off[L] + c
    a = act[o]
    delta[o] = (target - a) * a * (1.0 - a)
    if L >= 2:
        # last hidden layer: only output c carries error
        k = L - 1
        nout = sizes[L]
        for i in range(sizes[k]):
            u = u_off[k] + i
            delta[u] = params[w_off[k] + i * nout + c] * delta[o] * act[u] * (1.0 - act[u])
    for k in range(L - 2, 0, -1):
        nout = sizes[k + 1]
        for i in range(sizes[k]):
            s = 0.0
            row = w_off[k] + i * nout
            for j in range(nout):
                s += params[row + j] * delta[u_off[k + 1] + j]
            u = u_off[k] + i
            delta[u] = s * act[u] * (1.0 - act[u])


@njit(cache=True)
def weight_gradient_kernel(sizes, w_off, b_off, u_off, act, delta, g):
    L = sizes.shape[0] - 1
    for k in range(L):
        nin = sizes[k]
        nout = sizes[k + 1]
        for j in range(nout):
            dj = delta[u_off[k + 1] + j]
            for i in range(nin):
                g[w_off[k] + i * nout + j] = -dj * act[u_off[k] + i]
            g[b_off[k] + j] = -dj


@njit(cache=True)
def input_gradient_single_kernel(params, sizes, w_off, u_off, delta, c, h):
    # no hidden layers: only the weight into output c participates
    nout = sizes[1]
    dc = delta[u_off[1] + c]
    for i in range(sizes[0]):
        h[i] = -params[w_off[0] + i * nout + c] * dc


@njit(cache=True)
def input_gradient_sum_kernel(params, sizes, w_off, u_off, delta, h):
    nout = sizes[1]
    for i in range(sizes[0]):
        s = 0.0
        row = w_off[0] + i * nout
        for j in range(nout):
            s += params[row + j] * delta[u_off[1] + j]
        h[i] = -s


@njit(cache=True)
def input_gradient_kernel(params, sizes, w_off, u_off, delta, c, h):
    if sizes.shape[0] == 2:
        input_gradient_single_kernel(params, sizes, w_off, u_off, delta, c, h)
    else:
        input_gradient_sum_kernel(params, sizes, w_off, u_off, delta, h)


@njit(cache=True, inline="always")
def scale_output_column_kernel(params, sizes, w_off, b_off, c, factor):
    k = sizes.shape[0] - 2
    nout = sizes[k + 1]
    for i in range(sizes[k]):
        p = w_off[k] + i * nout + c
        params[p] *= factor
    params[b_off[k] + c] *= factor


class MlpModel:
    """Feed-forward logistic network over flat parameter storage.

    ``forward`` / ``forward_single_output`` then ``backprop_deltas`` then the
    gradient accessors form one non-reentrant sequence per instance.
    """

    def __init__(self, topology: Topology, params=None):
        self.topology = topology
        self.sizes = np.array(topology.sizes, dtype=np.int64)
        self.w_off, self.b_off, self.u_off, n_params = layout(self.sizes)
        if params is None:
            params = np.zeros(n_params)
        params = np.array(params, dtype=float)
        if params.shape != (n_params,):
            raise ValueError(f"expected {n_params} parameters, got {params.shape}")
        self.params = params
        n_units = int(self.u_off[-1])
        self.net = np.zeros(n_units)
        self.act = np.zeros(n_units)
        self.delta = np.zeros(n_units)
        self._presented = None  # output index forwarded (-1 = all), None = no state
        self._has_deltas = False
        self._c = -1

    @property
    def n_layers(self) -> int:
        return len(self.sizes) - 1

    @property
    def weights(self) -> list[np.ndarray]:
        """Per-layer weight grids (views), shape (fan_in, fan_out)."""
        return [self.params[o:o + a * b].reshape(a, b)
                for o, a, b in zip(self.w_off, self.sizes[:-1], self.sizes[1:])]

    @property
    def biases(self) -> list[np.ndarray]:
        return [self.params[o:o + b] for o, b in zip(self.b_off, self.sizes[1:])]

    def split(self, flat) -> list[tuple[np.ndarray, np.ndarray]]:
        """Reshape a parameter-layout vector (e.g. g) into per-layer (W, b)."""
        flat = np.asarray(flat)
        return [(flat[wo:wo + a * b].reshape(a, b), flat[bo:bo + b])
                for wo, bo, a, b in zip(self.w_off, self.b_off, self.sizes[:-1], self.sizes[1:])]

    def layer_slice(self, k: int) -> slice:
        return slice(int(self.u_off[k]), int(self.u_off[k + 1]))

    def copy(self) -> "MlpModel":
        return MlpModel(self.topology, self.params.copy())

    def _check_input(self, v):
        v = np.ascontiguousarray(v, dtype=float)
        if v.shape != (self.topology.inputs,):
            raise ValueError(f"input must have length {self.topology.inputs}")
        return v

    def _check_output(self, c):
        if not 0 <= c < self.topology.outputs:
            raise ValueError(f"output index {c} out of range [0, {self.topology.outputs})")

    def forward(self, v) -> np.ndarray:
        v = self._check_input(v)
        forward_kernel(self.params, self.sizes, self.w_off, self.b_off, self.u_off, v, self.net, self.act)
        self._presented, self._has_deltas = -1, False
        return self.act[self.layer_slice(self.n_layers)].copy()

    def forward_single_output(self, v, c: int) -> float:
        v = self._check_input(v)
        self._check_output(c)
        out = forward_single_kernel(self.params, self.sizes, self.w_off, self.b_off, self.u_off,
                                    v, c, self.net, self.act)
        self._presented, self._has_deltas = c, False
        return float(out)

    def backprop_deltas(self, c: int, target: float) -> np.ndarray:
        self._check_output(c)
        if self._presented is None or self._presented not in (-1, c):
            raise StateError("forward state does not cover output %d" % c)
        backprop_kernel(self.params, self.sizes, self.w_off, self.u_off, self.act, self.delta,
                        c, float(target))
        self._has_deltas, self._c = True, c
        return self.delta

    def _require_deltas(self):
        if not self._has_deltas:
            raise StateError("error terms not computed; call backprop_deltas first")

    def weight_gradient(self) -> np.ndarray:
        self._require_deltas()
        g = np.zeros_like(self.params)
        weight_gradient_kernel(self.sizes, self.w_off, self.b_off, self.u_off, self.act, self.delta, g)
        return g

    def input_gradient(self, rule: str | None = None) -> np.ndarray:
        """Gradient with respect to the input vector.

        ``rule`` forces ``"single"`` (weights into the presented output only,
        valid without hidden layers) or ``"sum"`` (over every first-layer
        unit); by default the rule follows the topology.
        """
        self._require_deltas()
        h = np.zeros(self.topology.inputs)
        if rule is None:
            input_gradient_kernel(self.params, self.sizes, self.w_off, self.u_off, self.delta, self._c, h)
        elif rule == "single":
            if self.n_layers != 1:
                raise ValueError("single-output rule applies only without hidden layers")
            input_gradient_single_kernel(self.params, self.sizes, self.w_off, self.u_off, self.delta,
                                         self._c, h)
        elif rule == "sum":
            input_gradient_sum_kernel(self.params, self.sizes, self.w_off, self.u_off, self.delta, h)
        else:
            raise ValueError(f"unknown rule {rule!r}")
        return h

    def to_dict(self) -> dict:
        return {
            "topology": {"inputs": self.topology.inputs, "hidden": list(self.topology.hidden),
                         "outputs": self.topology.outputs},
            "weights": [w.ravel().tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "MlpModel":
        t = obj["topology"]
        model = cls(Topology(t["inputs"], tuple(t["hidden"]), t["outputs"]))
        for w, src in zip(model.weights, obj["weights"]):
            w[...] = np.asarray(src, dtype=float).reshape(w.shape)
        for b, src in zip(model.biases, obj["biases"]):
            b[...] = src
        return model


def as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def init_model(topology: Topology, seed=0, scale=0.01) -> MlpModel:
    """Network with every weight and bias drawn from Normal(0, scale).

    ``scale="fan_in"`` draws layer k from Normal(0, 1/sqrt(fan_in_k)) instead.
    """
    model = MlpModel(topology)
    rng = as_rng(seed)
    if scale == "fan_in":
        for k, (a, b) in enumerate(zip(model.sizes[:-1], model.sizes[1:])):
            lo, hi = model.w_off[k], model.b_off[k] + b
            model.params[lo:hi] = rng.normal(0.0, 1.0 / np.sqrt(a), size=hi - lo)
    else:
        model.params[:] = rng.normal(0.0, float(scale), size=model.params.shape)
    return model

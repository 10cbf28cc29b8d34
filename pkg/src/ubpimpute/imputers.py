"""Imputation methods: mean/mode baseline, instance-based (kNN), fuzzy k-means,
matrix factorization, NLPCA and UBP, all behind :func:`impute`.

Method specs read ``name(:key=value(,key=value)*)?``, e.g. ``ubp:t=8,hidden=16``,
``fkm:k=8,p=1,m=1.3`` or ``mf:t=8,lambda=0.01``.
"""

from __future__ import annotations

import itertools
import re
from dataclasses import dataclass, field, replace

import numpy as np
from numba import njit

from .dataset import Dataset, EncodedMatrix, decode, denormalize_continuous, normalize_encode
from .trainer import (
    TrainConfig,
    TrainedModel,
    decay_schedule,
    known_cells,
    nlpca_train,
    predict_all,
    ubp_train,
)

GRAMMAR = "name(:key=value(,key=value)*)?  e.g. ubp:t=8,hidden=16  fkm:k=8,p=1,m=1.3  mf:t=8,lambda=0.01"

# name -> {key: (type, default)}
METHODS = {
    "baseline": {},
    "ibi": {"k": (int, 5), "weighting": (str, "similarity")},
    "fkm": {"k": (int, 4), "p": (float, 1.0), "m": (float, 1.3)},
    "mf": {"t": (int, 2), "lambda": (float, 0.01)},
    "nlpca": {"t": (int, 2), "hidden": ("layers", ())},
    "ubp": {"t": (int, 2), "hidden": ("layers", ())},
}
ALIASES = {"bl": "baseline", "mean": "baseline", "knn": "ibi"}
KEY_ALIASES = {"p_norm": "p", "fuzzifier": "m", "lambda_mf": "lambda", "lam": "lambda"}

DEFAULT_GRIDS = {
    "baseline": {},
    "fkm": {"k": [4, 8, 16], "p": [1.0, 1.5, 2.0], "m": [1.3, 1.5]},
    "ibi": {"k": [1, 5, 21]},
    "mf": {"t": [2, 8, 16], "lambda": [0.001, 0.01, 0.1]},
    "nlpca": {"hidden": [(), (8,), (16,)], "t": [2, 8, 16, 32]},
    "ubp": {"hidden": [(), (8,), (16,)], "t": [2, 8, 16, 32]},
}


class SpecError(ValueError):
    pass


def _parse_layers(text: str) -> tuple[int, ...]:
    # "0" means no hidden layer, "8/8" two layers of 8
    sizes = tuple(int(x) for x in text.split("/"))
    if any(s < 0 for s in sizes):
        raise ValueError(text)
    return tuple(s for s in sizes if s > 0)


@dataclass(frozen=True)
class ImputerSpec:
    method: str
    params: tuple = ()  # sorted (key, value) pairs
    seed: int = 0

    @property
    def kw(self) -> dict:
        return dict(self.params)

    def with_seed(self, seed: int) -> "ImputerSpec":
        return replace(self, seed=seed)

    def __str__(self):
        if not self.params:
            return self.method
        parts = []
        for key, val in self.params:
            if isinstance(val, tuple):
                val = "/".join(str(v) for v in val) if val else "0"
            parts.append(f"{key}={val}")
        return f"{self.method}:{','.join(parts)}"


def make_spec(method: str, seed: int = 0, **params) -> ImputerSpec:
    method = ALIASES.get(method.lower(), method.lower())
    if method not in METHODS:
        raise SpecError(f"unknown method {method!r}; expected one of {sorted(METHODS)}")
    schema = METHODS[method]
    values = {key: default for key, (_, default) in schema.items()}
    for key, val in params.items():
        key = KEY_ALIASES.get(key, key)
        if key not in schema:
            raise SpecError(f"method {method!r} takes no parameter {key!r}; grammar: {GRAMMAR}")
        kind = schema[key][0]
        try:
            if kind == "layers":
                val = _parse_layers(val) if isinstance(val, str) else (
                    () if val in (0, None) else tuple(int(v) for v in np.atleast_1d(val) if int(v) > 0))
            else:
                val = kind(val)
        except (TypeError, ValueError):
            raise SpecError(f"bad value {val!r} for {method}.{key}; grammar: {GRAMMAR}") from None
        values[key] = val
    return ImputerSpec(method, tuple(sorted(values.items())), seed)


_SPEC_RE = re.compile(r"^([A-Za-z_]\w*)(?::(.*))?$")
_PAIR_RE = re.compile(r"^([A-Za-z_]\w*)=([^=,]+)$")


def parse_spec(text: str, seed: int = 0) -> ImputerSpec:
    m = _SPEC_RE.match(text.strip())
    if not m:
        raise SpecError(f"malformed method spec {text!r}; grammar: {GRAMMAR}")
    name, rest = m.groups()
    params = {}
    if rest is not None:
        for pair in rest.split(","):
            pm = _PAIR_RE.match(pair.strip())
            if not pm:
                raise SpecError(f"malformed parameter {pair!r} in {text!r}; grammar: {GRAMMAR}")
            params[pm.group(1)] = pm.group(2)
    return make_spec(name, seed=seed, **params)


def default_grid(method: str, width: int | None = None) -> list[ImputerSpec]:
    """All parameter combinations swept for ``method``; latent sizes must stay below ``width``."""
    grid = DEFAULT_GRIDS[method]
    keys = list(grid)
    specs = []
    for combo in itertools.product(*(grid[k] for k in keys)):
        params = dict(zip(keys, combo))
        if width is not None and "t" in params and params["t"] >= width:
            continue
        specs.append(make_spec(method, **params))
    return specs


@dataclass
class ImputationResult:
    completed: Dataset
    spec: ImputerSpec
    diagnostics: dict = field(default_factory=dict)
    trained: TrainedModel | None = None


# --------------------------------------------------------------------------
# Baseline
# --------------------------------------------------------------------------

def baseline_fill(ds: Dataset) -> np.ndarray:
    """Per-attribute fill value: mean (continuous) or mode (nominal).

    An attribute with no known cells gets its range midpoint, or category 0.
    """
    fill = np.empty(ds.d)
    for j, a in enumerate(ds.attrs):
        col = ds.cells[:, j]
        col = col[~np.isnan(col)]
        if a.is_nominal:
            counts = np.bincount(col.astype(np.int64), minlength=len(a.categories))
            fill[j] = float(np.argmax(counts)) if col.size else 0.0
        else:
            fill[j] = col.mean() if col.size else 0.5 * (a.observed_min + a.observed_max)
    return fill


def impute_baseline(ds: Dataset) -> Dataset:
    cells = np.array(ds.cells)
    miss = np.isnan(cells)
    cells[miss] = np.broadcast_to(baseline_fill(ds), cells.shape)[miss]
    return ds.with_cells(cells)


# --------------------------------------------------------------------------
# Instance-based imputation
# --------------------------------------------------------------------------

def cosine_similarity(X: EncodedMatrix) -> np.ndarray:
    """Row cosine similarity over the columns known in both rows (0 without overlap)."""
    K = X.known.astype(float)
    E = np.where(X.known, X.values, 0.0)
    E2 = E * E
    dot = E @ E.T
    norm_a = E2 @ K.T  # |row a| over columns also known in row b
    denom = np.sqrt(norm_a * norm_a.T)
    with np.errstate(invalid="ignore", divide="ignore"):
        sim = np.where(denom > 0, dot / denom, 0.0)
    np.fill_diagonal(sim, 0.0)
    return sim


def impute_ibi(ds: Dataset, k: int, weighting: str = "similarity") -> Dataset:
    """k-nearest-neighbour imputation with cosine similarity.

    For each missing cell the k most similar rows having that attribute vote
    (nominal) or average (continuous), weighted by similarity unless
    ``weighting="uniform"``. Cells whose neighbours all have similarity 0
    fall back to the baseline.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if weighting not in ("similarity", "uniform"):
        raise ValueError(f"unknown weighting {weighting!r}")
    X = normalize_encode(ds)
    sim = cosine_similarity(X)
    fallback = baseline_fill(ds)
    pred = np.where(X.known, X.values, 0.0)
    missing = ds.missing
    out = np.array(ds.cells)
    for j, a in enumerate(ds.attrs):
        targets = np.flatnonzero(missing[:, j])
        cand = np.flatnonzero(~missing[:, j])
        if targets.size == 0:
            continue
        cols = X.attr_columns(j)
        if cand.size == 0:
            out[targets, j] = fallback[j]
            continue
        S = sim[np.ix_(targets, cand)]
        order = np.argsort(-S, axis=1, kind="stable")[:, :k]
        for q, (row, nb) in enumerate(zip(targets, order)):
            s = S[q, nb]
            if not np.any(s > 0):
                out[row, j] = fallback[j]
                continue
            w = np.ones_like(s) if weighting == "uniform" else s
            vals = pred[cand[nb]][:, cols]
            est = w @ vals / w.sum()
            if a.is_nominal:
                out[row, j] = float(np.argmax(est))
            else:
                out[row, j] = float(denormalize_continuous(est[0], a.observed_min, a.observed_max))
    return ds.with_cells(out)


# --------------------------------------------------------------------------
# Fuzzy k-means
# --------------------------------------------------------------------------

def fuzzy_memberships(dist: np.ndarray, m: float) -> np.ndarray:
    """u_ik = 1 / sum_j (d_ik / d_ij)^(2/(m-1)); a zero distance takes full membership."""
    n, k = dist.shape
    u = np.empty_like(dist)
    zero = dist <= 0
    has_zero = zero.any(axis=1)
    if has_zero.any():
        first = np.argmax(zero[has_zero], axis=1)
        u[has_zero] = 0.0
        u[np.flatnonzero(has_zero), first] = 1.0
    rest = ~has_zero
    if rest.any():
        logits = -(2.0 / (m - 1.0)) * np.log(dist[rest])
        logits -= logits.max(axis=1, keepdims=True)
        w = np.exp(logits)
        u[rest] = w / w.sum(axis=1, keepdims=True)
    return u


def partial_distances(E: np.ndarray, K: np.ndarray, C: np.ndarray, p: float) -> np.ndarray:
    """L_p distance over known columns, rescaled by (total / known) columns.

    Rows with no known column get NaN.
    """
    width = E.shape[1]
    diff = np.abs(E[:, None, :] - C[None, :, :]) ** p
    acc = (diff * K[:, None, :]).sum(axis=2)
    n_known = K.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        scaled = acc * (width / n_known)[:, None]
    return scaled ** (1.0 / p)


def fuzzy_kmeans(X: EncodedMatrix, k: int, p: float, m: float, rng, tol: float = 1e-4,
                 max_iter: int = 300):
    """Fuzzy k-means over incomplete rows. Returns (memberships, centroids, iterations)."""
    n, width = X.values.shape
    if k < 1 or k > n:
        raise ValueError(f"k={k} must lie in [1, {n}]")
    if p < 1:
        raise ValueError("p must be >= 1")
    if m <= 1:
        raise ValueError("fuzzifier m must be > 1")
    K = X.known.astype(float)
    E = np.where(X.known, X.values, 0.0)
    counts = K.sum(axis=0)
    col_mean = np.where(counts > 0, E.sum(axis=0) / np.maximum(counts, 1), 0.5)
    C = np.where(X.known, X.values, col_mean)[rng.choice(n, size=k, replace=False)]
    u = np.full((n, k), 1.0 / k)
    no_info = K.sum(axis=1) == 0
    it = 0
    for it in range(1, max_iter + 1):
        dist = partial_distances(E, K, C, p)
        u_new = np.full((n, k), 1.0 / k)
        if (~no_info).any():
            u_new[~no_info] = fuzzy_memberships(dist[~no_info], m)
        wts = u_new ** m
        num = wts.T @ E
        den = wts.T @ K
        C = np.where(den > 0, num / np.where(den > 0, den, 1.0), C)
        change = np.abs(u_new - u).max()
        u = u_new
        if change < tol:
            break
    return u, C, it


def impute_fkm(ds: Dataset, k: int, p: float = 1.0, m: float = 1.3, seed: int = 0) -> tuple[Dataset, dict]:
    """Fill each missing cell with the membership-weighted centroid value."""
    X = normalize_encode(ds)
    u, C, iters = fuzzy_kmeans(X, k, p, m, np.random.default_rng(seed))
    return decode(u @ C, ds), {"iterations": iters}


# --------------------------------------------------------------------------
# Matrix factorization
# --------------------------------------------------------------------------

@njit(cache=True)
def _mf_epoch(U, Wc, rows, cols, vals, order, eta, lam):
    t = U.shape[1]
    for q in range(order.shape[0]):
        e = order[q]
        r = rows[e]
        c = cols[e]
        pred = 0.0
        for i in range(t):
            pred += U[r, i] * Wc[c, i]
        err = vals[e] - pred
        for i in range(t):
            u = U[r, i]
            w = Wc[c, i]
            U[r, i] = u + eta * (err * w - lam * u)
            Wc[c, i] = w + eta * (err * u - lam * w)


@njit(cache=True)
def _mf_rmse(U, Wc, rows, cols, vals):
    t = U.shape[1]
    sse = 0.0
    for e in range(rows.shape[0]):
        pred = 0.0
        for i in range(t):
            pred += U[rows[e], i] * Wc[cols[e], i]
        d = vals[e] - pred
        sse += d * d
    return np.sqrt(sse / rows.shape[0])


@dataclass
class MfModel:
    U: np.ndarray
    W: np.ndarray
    history: list

    def predict(self) -> np.ndarray:
        return self.U @ self.W.T


def mf_train(X: EncodedMatrix, t: int, lam: float, seed: int = 0, config: TrainConfig | None = None,
             init_scale: float = 0.1) -> MfModel:
    """Two-factor model x ~ u_r . w_c fit by per-element SGD on the known cells.

    The learning rate follows the same halving schedule as the network trainer.
    """
    n, width = X.values.shape
    if not 1 <= t < width:
        raise ValueError(f"t={t} must lie in [1, {width})")
    config = config or TrainConfig()
    cells = known_cells(X)
    if len(cells) == 0:
        raise ValueError("no known elements")
    rng_init, rng_perm = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
    U = rng_init.normal(0.0, init_scale, size=(n, t))
    W = rng_init.normal(0.0, init_scale, size=(width, t))

    def epoch(eta):
        order = rng_perm.permutation(len(cells)).astype(np.int64)
        _mf_epoch(U, W, cells.rows, cells.cols, cells.vals, order, eta, lam)
        return _mf_rmse(U, W, cells.rows, cells.cols, cells.vals)

    _, hist = decay_schedule(epoch, config.eta_start, config.eta_floor, config.gamma,
                             config.max_epochs_per_phase)
    return MfModel(U, W, hist)


def impute_mf(ds: Dataset, t: int, lambda_mf: float, seed: int = 0, config=None) -> tuple[Dataset, dict]:
    X = normalize_encode(ds)
    model = mf_train(X, t, lambda_mf, seed=seed, config=config)
    pred = np.clip(model.predict(), 0.0, 1.0)
    return decode(pred, ds), {"rmse": model.history[-1][1], "epochs": len(model.history)}


# --------------------------------------------------------------------------
# Network imputers
# --------------------------------------------------------------------------

def _network_impute(ds, t, hidden, seed, overrides, progress, train_fn):
    X = normalize_encode(ds)
    if not 1 <= t < X.values.shape[1]:
        raise ValueError(f"t={t} must lie in [1, {X.values.shape[1]})")
    config = TrainConfig(latent_t=t, hidden=tuple(hidden), seed=seed, **(overrides or {}))
    tm = train_fn(X, config, progress=progress)
    diag = {"rmse": tm.history[3][-1][1], "epochs": {p: len(h) for p, h in tm.history.items()}}
    return decode(predict_all(tm), ds), diag, tm


def impute_ubp(ds: Dataset, t: int, hidden=(), seed: int = 0, overrides=None, progress=None):
    return _network_impute(ds, t, hidden, seed, overrides, progress, ubp_train)


def impute_nlpca(ds: Dataset, t: int, hidden=(), seed: int = 0, overrides=None, progress=None):
    return _network_impute(ds, t, hidden, seed, overrides, progress, nlpca_train)


def impute(ds: Dataset, spec: ImputerSpec | str, overrides: dict | None = None,
           progress=None) -> ImputationResult:
    """Complete ``ds`` with the method described by ``spec``.

    ``overrides`` adjusts :class:`TrainConfig` fields for the SGD methods.
    """
    if isinstance(spec, str):
        spec = parse_spec(spec)
    if ds.missing.all():
        raise ValueError("dataset has no known cells")
    if not ds.missing.any():
        return ImputationResult(ds, spec, {"note": "nothing to impute"})
    kw = spec.kw
    trained = None
    diag = {}
    if spec.method == "baseline":
        completed = impute_baseline(ds)
    elif spec.method == "ibi":
        completed = impute_ibi(ds, kw["k"], kw["weighting"])
    elif spec.method == "fkm":
        completed, diag = impute_fkm(ds, kw["k"], kw["p"], kw["m"], seed=spec.seed)
    elif spec.method == "mf":
        config = TrainConfig(**overrides) if overrides else None
        completed, diag = impute_mf(ds, kw["t"], kw["lambda"], seed=spec.seed, config=config)
    elif spec.method == "nlpca":
        completed, diag, trained = impute_nlpca(ds, kw["t"], kw["hidden"], spec.seed, overrides, progress)
    elif spec.method == "ubp":
        completed, diag, trained = impute_ubp(ds, kw["t"], kw["hidden"], spec.seed, overrides, progress)
    else:
        raise SpecError(f"unknown method {spec.method!r}")
    return ImputationResult(completed, spec, diag, trained)

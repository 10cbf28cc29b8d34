"""Scoring imputations, grid sweeps, and paired win/tie/loss comparisons."""

from __future__ import annotations

import csv
import io
import json
import math
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .dataset import CorruptionPlan, Dataset, corrupt_mcar, normalize_continuous
from .imputers import ImputerSpec, impute, parse_spec


@dataclass
class ErrorReport:
    per_pattern_error: np.ndarray
    per_attribute_error: np.ndarray
    cells_scored: int
    raw_per_pattern_error: np.ndarray = None

    @property
    def average_error(self) -> float:
        return float(self.per_pattern_error.mean())

    def to_dict(self) -> dict:
        return {
            "average_error": self.average_error,
            "cells_scored": self.cells_scored,
            "per_attribute_error": self.per_attribute_error.tolist(),
            "per_pattern_error": self.per_pattern_error.tolist(),
            "raw_average_error": float(self.raw_per_pattern_error.mean()),
        }


def score(original: Dataset, imputed: Dataset, plan: CorruptionPlan) -> ErrorReport:
    """Error of the imputed values at the cells removed by ``plan``.

    Continuous cells cost the squared difference of normalized values,
    nominal cells 0 or 1. A pattern's error sums its scored cells and the
    average runs over all n patterns.
    """
    if original.attrs != imputed.attrs or original.cells.shape != imputed.cells.shape:
        raise ValueError("original and imputed datasets differ in schema or shape")
    per_pattern = np.zeros(original.n)
    raw = np.zeros(original.n)
    per_attr = np.zeros(original.d)
    removed = np.asarray(plan.removed, dtype=np.int64).reshape(-1, 2)
    if len({(int(r), int(c)) for r, c in removed}) != len(removed):
        raise ValueError("plan lists a cell twice")
    for r, j in removed:
        truth = original.cells[r, j]
        guess = imputed.cells[r, j]
        if np.isnan(truth):
            raise ValueError(f"cell ({r}, {j}) was not known in the original")
        if np.isnan(guess):
            raise ValueError(f"cell ({r}, {j}) was not imputed")
        a = original.attrs[j]
        if a.is_nominal:
            err = raw_err = float(truth != guess)
        else:
            zt, zg = normalize_continuous(np.array([truth, guess]), a.observed_min, a.observed_max)
            err = float((zt - zg) ** 2)
            raw_err = float((truth - guess) ** 2)
        per_pattern[r] += err
        raw[r] += raw_err
        per_attr[j] += err
    return ErrorReport(per_pattern, per_attr, len(removed), raw)


# --------------------------------------------------------------------------
# Wilcoxon signed-ranks
# --------------------------------------------------------------------------

def _ranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks, averaged over ties."""
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(len(x))
    sx = x[order]
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def signed_rank_statistic(diff) -> tuple[float, np.ndarray]:
    """W+ (sum of ranks of positive differences) and the ranks of the nonzero |diff|."""
    diff = np.asarray(diff, dtype=float)
    diff = diff[diff != 0]
    ranks = _ranks(np.abs(diff))
    return float(ranks[diff > 0].sum()), ranks


def _exact_upper_tail(ranks: np.ndarray, w_plus: float) -> float:
    # null distribution of W+ over all 2^n sign patterns; doubled ranks are integers
    doubled = np.rint(2 * ranks).astype(np.int64)
    total = int(doubled.sum())
    counts = np.zeros(total + 1)
    counts[0] = 1.0
    for r in doubled:
        counts[r:] = counts[r:] + counts[:total + 1 - r].copy()
    k = int(np.rint(2 * w_plus))
    return float(counts[k:].sum() / 2.0 ** len(doubled))


def wilcoxon_greater(diff, exact_max_n: int = 12) -> tuple[float, float]:
    """One-sided signed-ranks test that the differences tend to be positive.

    Zero differences are dropped and tied magnitudes share average ranks.
    Up to ``exact_max_n`` nonzero pairs the p-value is exact; beyond that it
    uses the normal approximation with tie and continuity corrections.
    Returns (W+, p). With no nonzero difference p is 1.
    """
    w_plus, ranks = signed_rank_statistic(diff)
    n = len(ranks)
    if n == 0:
        return 0.0, 1.0
    if n <= exact_max_n:
        return w_plus, _exact_upper_tail(ranks, w_plus)
    mean = n * (n + 1) / 4.0
    _, tie_counts = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - float(((tie_counts ** 3) - tie_counts).sum()) / 48.0
    if var <= 0:
        return w_plus, 1.0
    z = (w_plus - mean - 0.5) / math.sqrt(var)
    return w_plus, 0.5 * math.erfc(z / math.sqrt(2.0))


@dataclass(frozen=True)
class Comparison:
    wins: int
    ties: int
    losses: int
    p_value: float
    statistic: float

    def to_dict(self) -> dict:
        return {"wins": self.wins, "ties": self.ties, "losses": self.losses,
                "p": self.p_value, "w_plus": self.statistic}


def compare_pairwise(a, b, ndigits: int = 9) -> Comparison:
    """Paired comparison of per-dataset errors, lower is better for ``a``.

    Scores are rounded to ``ndigits`` decimals before comparing; the p-value
    tests the alternative that ``a`` is lower.
    """
    a = np.round(np.asarray(a, dtype=float), ndigits)
    b = np.round(np.asarray(b, dtype=float), ndigits)
    if a.shape != b.shape:
        raise ValueError("score lists differ in length")
    w, p = wilcoxon_greater(b - a)
    return Comparison(int((a < b).sum()), int((a == b).sum()), int((a > b).sum()), p, w)


# --------------------------------------------------------------------------
# Sweeps
# --------------------------------------------------------------------------

@dataclass
class RunRecord:
    dataset: str
    u: float
    seed: int
    method: str
    spec: str
    avg_error: float
    cells_scored: int
    error: str = ""


@dataclass
class SweepResult:
    records: list
    best_of_grid: dict = field(default_factory=dict)  # (dataset, u, method) -> (spec, mean error)

    def seed_averages(self) -> dict:
        acc = defaultdict(list)
        for rec in self.records:
            acc[(rec.dataset, rec.u, rec.method, rec.spec)].append(rec.avg_error)
        return {k: float(np.mean(v)) for k, v in acc.items()}

    def best_errors(self, method: str, u: float, datasets: list[str]) -> list[float]:
        return [self.best_of_grid.get((d, u, method), (None, math.nan))[1] for d in datasets]

    def to_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["dataset", "u", "seed", "method", "spec", "avg_error", "cells_scored"])
        for rec in self.records:
            err = "" if math.isnan(rec.avg_error) else repr(rec.avg_error)
            w.writerow([rec.dataset, rec.u, rec.seed, rec.method, rec.spec, err, rec.cells_scored])
        return out.getvalue()

    def summary(self, reference: str = "ubp") -> dict:
        datasets = sorted({r.dataset for r in self.records})
        us = sorted({r.u for r in self.records})
        methods = sorted({r.method for r in self.records})
        best = [{"dataset": d, "u": u, "method": m, "spec": s, "avg_error": e}
                for (d, u, m), (s, e) in sorted(self.best_of_grid.items())]
        pairwise = {}
        if reference in methods:
            for u in us:
                ref = self.best_errors(reference, u, datasets)
                for m in methods:
                    if m == reference:
                        continue
                    other = self.best_errors(m, u, datasets)
                    keep = [i for i in range(len(datasets))
                            if not (math.isnan(ref[i]) or math.isnan(other[i]))]
                    cmp = compare_pairwise([ref[i] for i in keep], [other[i] for i in keep])
                    pairwise[f"{u}:{m}"] = {"u": u, "method": m, **cmp.to_dict()}
        failures = [vars(r) for r in self.records if r.error]
        return {"best_of_grid": best, "pairwise": pairwise, "reference": reference, "failures": failures}

    def to_tsv(self) -> str:
        """Best-of-grid error against sparsity, one block per dataset, one column per method."""
        methods = sorted({r.method for r in self.records})
        lines = []
        for d in sorted({r.dataset for r in self.records}):
            lines.append(f"# {d}")
            lines.append("\t".join(["u", *methods]))
            for u in sorted({r.u for r in self.records if r.dataset == d}):
                row = [str(u)] + [repr(self.best_of_grid.get((d, u, m), ("", math.nan))[1]) for m in methods]
                lines.append("\t".join(row))
            lines.append("")
            lines.append("")
        return "\n".join(lines)


def best_of_grid(records) -> dict:
    """Per (dataset, u, method): the spec with the lowest seed-averaged error.

    Specs with any failed run are skipped; ties keep the first spec in grid order.
    """
    groups = defaultdict(lambda: defaultdict(list))
    order = {}
    for rec in records:
        key = (rec.dataset, rec.u, rec.method)
        groups[key][rec.spec].append(rec.avg_error)
        order.setdefault((key, rec.spec), len(order))
    best = {}
    for key, specs in groups.items():
        cands = sorted(specs.items(), key=lambda kv: order[(key, kv[0])])
        chosen = None
        for spec, errs in cands:
            if any(math.isnan(e) for e in errs):
                continue
            mean = float(np.mean(errs))
            if chosen is None or mean < chosen[1]:
                chosen = (spec, mean)
        if chosen is not None:
            best[key] = chosen
    return best


def run_cell(name: str, ds: Dataset, u: float, seed: int, spec: ImputerSpec, overrides=None) -> RunRecord:
    """Corrupt with ``seed``, impute with the same seed, score. Failures are recorded, not raised."""
    spec = spec.with_seed(seed)
    try:
        corrupted, plan = corrupt_mcar(ds, u, seed)
        result = impute(corrupted, spec, overrides=overrides)
        rep = score(ds, result.completed, plan)
        return RunRecord(name, u, seed, spec.method, str(spec), rep.average_error, rep.cells_scored)
    except Exception as exc:  # noqa: BLE001 - a failed cell must not abort the sweep
        return RunRecord(name, u, seed, spec.method, str(spec), math.nan, 0, f"{type(exc).__name__}: {exc}")


def _run_cell_args(args):
    return run_cell(*args)


def sweep(datasets, u_levels, seeds, specs, workers: int = 1, overrides=None, progress=None) -> SweepResult:
    """Every (dataset, u, seed, spec) combination: corrupt, impute, score.

    ``datasets`` is a list of (name, Dataset); ``specs`` a flat list of
    ImputerSpec or spec strings grouped later by method. Results come back
    in combination order whatever the worker count.
    """
    if not datasets or not u_levels or not seeds or not specs:
        raise ValueError("sweep needs non-empty datasets, u levels, seeds and specs")
    specs = [parse_spec(s) if isinstance(s, str) else s for s in specs]
    jobs = [(name, ds, u, seed, spec, overrides)
            for name, ds in datasets for u in u_levels for seed in seeds for spec in specs]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(_run_cell_args, jobs))
    else:
        records = []
        for job in jobs:
            rec = run_cell(*job)
            records.append(rec)
            if progress is not None:
                progress(rec)
    return SweepResult(records, best_of_grid(records))


def load_sweep_config(path) -> dict:
    with open(path) as fh:
        cfg = json.load(fh)
    for key in ("datasets", "u_levels", "seeds", "grids"):
        if key not in cfg:
            raise ValueError(f"sweep config missing {key!r}")
    return cfg

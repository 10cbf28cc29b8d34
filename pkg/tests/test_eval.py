import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from ubpimpute.dataset import AttributeSpec, CorruptionPlan, Dataset, corrupt_mcar
from ubpimpute.eval import (
    RunRecord,
    best_of_grid,
    compare_pairwise,
    load_sweep_config,
    score,
    signed_rank_statistic,
    sweep,
    wilcoxon_greater,
)

from oracles import wilcoxon_enumerate

nan = np.nan


def plan_of(cells):
    return CorruptionPlan(u=10, seed=0, removed=np.array(cells, dtype=np.int64).reshape(-1, 2))


def small_ds(grid, lo=0.0, hi=1.0):
    grid = np.asarray(grid, dtype=float)
    return Dataset(tuple(AttributeSpec(f"x{j}", "continuous", lo, hi) for j in range(grid.shape[1])), grid)


# ---------------------------------------------------------------- score

def test_perfect_imputation_scores_zero():
    ds = small_ds([[0.1, 0.2], [0.3, 0.4]])
    rep = score(ds, ds, plan_of([[0, 1], [1, 0]]))
    assert rep.average_error == 0 and rep.cells_scored == 2


def test_wrong_category_costs_one():
    attrs = (AttributeSpec("k", "nominal", categories=("a", "b")),)
    orig = Dataset(attrs, [[0], [1], [0], [0]])
    imp = Dataset(attrs, [[1], [1], [0], [0]])
    rep = score(orig, imp, plan_of([[0, 0]]))
    assert rep.per_pattern_error.tolist() == [1, 0, 0, 0]
    assert rep.average_error == 0.25


def test_continuous_cost_is_normalized_squared_difference():
    orig = small_ds([[8.0], [2.0]], lo=0.0, hi=10.0)
    imp = small_ds([[5.0], [2.0]], lo=0.0, hi=10.0)
    rep = score(orig, imp, plan_of([[0, 0]]))
    assert rep.per_pattern_error[0] == pytest.approx(0.09)
    assert rep.average_error == pytest.approx(0.045)
    assert rep.raw_per_pattern_error[0] == pytest.approx(9.0)


def test_score_sums_cells_in_a_row():
    orig = small_ds([[0.0, 1.0, 0.5]])
    imp = small_ds([[0.5, 0.5, 0.5]])
    rep = score(orig, imp, plan_of([[0, 0], [0, 1], [0, 2]]))
    assert rep.per_pattern_error[0] == pytest.approx(0.5)
    assert rep.per_attribute_error.tolist() == pytest.approx([0.25, 0.25, 0.0])


def test_score_rejects_mismatch():
    a = small_ds([[0.1]])
    b = small_ds([[0.1, 0.2]])
    with pytest.raises(ValueError):
        score(a, b, plan_of([[0, 0]]))
    with pytest.raises(ValueError):
        score(a, a.with_cells([[nan]]), plan_of([[0, 0]]))
    with pytest.raises(ValueError):
        score(a, a, plan_of([[0, 0], [0, 0]]))


def test_score_invariant_to_row_permutation():
    rng = np.random.default_rng(0)
    orig = small_ds(rng.uniform(size=(10, 3)))
    imp = small_ds(rng.uniform(size=(10, 3)))
    _, plan = corrupt_mcar(orig, 40, 1)
    perm = rng.permutation(10)
    inv = np.argsort(perm)
    plan_p = plan_of(np.column_stack([inv[plan.removed[:, 0]], plan.removed[:, 1]]))
    a = score(orig, imp, plan).average_error
    b = score(orig.with_cells(orig.cells[perm]), imp.with_cells(imp.cells[perm]), plan_p).average_error
    assert a == pytest.approx(b, rel=1e-12)


# ---------------------------------------------------------------- wilcoxon

def test_textbook_example():
    diff = [15, -7, 5, 20, 0, -9, 17, -12, 5, -10]
    w, ranks = signed_rank_statistic(diff)
    assert len(ranks) == 9
    assert w == 27.0 and ranks.sum() - w == 18.0
    w2, p = wilcoxon_greater(diff)
    ref_w, ref_p = wilcoxon_enumerate(diff)
    assert w2 == ref_w and p == pytest.approx(ref_p, abs=1e-12)


def test_exact_matches_enumeration_on_random_cases():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = int(rng.integers(1, 11))
        diff = rng.integers(-4, 5, size=n).astype(float)
        w, p = wilcoxon_greater(diff)
        ref_w, ref_p = wilcoxon_enumerate(diff)
        assert w == ref_w and p == pytest.approx(ref_p, abs=1e-12)


def test_exact_matches_scipy_without_ties():
    rng = np.random.default_rng(1)
    for _ in range(30):
        diff = rng.normal(size=int(rng.integers(3, 13)))
        _, p = wilcoxon_greater(diff)
        ref = stats.wilcoxon(diff, alternative="greater", method="exact").pvalue
        assert p == pytest.approx(ref, rel=1e-9)


def test_normal_approximation_matches_scipy():
    rng = np.random.default_rng(2)
    for _ in range(20):
        diff = np.round(rng.normal(0.3, 1, size=int(rng.integers(13, 40))), 1)
        w, p = wilcoxon_greater(diff)
        res = stats.wilcoxon(diff, alternative="greater", method="approx", correction=True,
                             zero_method="wilcox")
        assert w == pytest.approx(res.statistic)
        assert p == pytest.approx(res.pvalue, rel=1e-9)


def test_all_zero_differences_give_p_one():
    assert wilcoxon_greater([0, 0, 0]) == (0.0, 1.0)


def test_all_positive_at_24():
    w, p = wilcoxon_greater(np.arange(1, 25))
    assert w == 300 and p < 0.001


def test_compare_pairwise_counts():
    cmp = compare_pairwise([0.1, 0.2, 0.3, 0.4], [0.2, 0.2, 0.1, 0.5])
    assert (cmp.wins, cmp.ties, cmp.losses) == (2, 1, 1)
    same = compare_pairwise([0.1, 0.2], [0.1, 0.2])
    assert (same.wins, same.ties, same.losses, same.p_value) == (0, 2, 0, 1.0)
    assert compare_pairwise([0.1 + 1e-12], [0.1]).ties == 1
    with pytest.raises(ValueError):
        compare_pairwise([1, 2], [1])


def test_compare_pairwise_all_better_at_24():
    a = np.linspace(0.1, 0.2, 24)
    cmp = compare_pairwise(a, a + 0.05)
    assert cmp.wins == 24 and cmp.p_value < 0.001


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(-6, 6), min_size=1, max_size=12))
def test_wilcoxon_property_against_enumeration(diff):
    w, p = wilcoxon_greater(diff)
    ref_w, ref_p = wilcoxon_enumerate(diff)
    assert w == ref_w and p == pytest.approx(ref_p, abs=1e-12)


# ---------------------------------------------------------------- sweeps

def grid_ds(seed=0, n=20, d=4):
    return small_ds(np.random.default_rng(seed).uniform(size=(n, d)))


def test_baseline_sweep_averages_seeds():
    res = sweep([("toy", grid_ds())], [30], [0, 1], ["baseline"])
    assert len(res.records) == 2
    errs = [r.avg_error for r in res.records]
    spec, mean = res.best_of_grid[("toy", 30, "baseline")]
    assert spec == "baseline" and mean == pytest.approx(np.mean(errs))


def test_best_of_grid_breaks_ties_by_order():
    recs = [RunRecord("d", 30, s, "mf", spec, err, 1)
            for spec, err in [("mf:a", 0.2), ("mf:b", 0.1), ("mf:c", 0.1)] for s in (0, 1)]
    assert best_of_grid(recs)[("d", 30, "mf")] == ("mf:b", pytest.approx(0.1))


def test_best_of_grid_skips_failed_specs():
    recs = [RunRecord("d", 30, 0, "ubp", "ubp:a", nan, 0, "boom"),
            RunRecord("d", 30, 0, "ubp", "ubp:b", 0.3, 1)]
    assert best_of_grid(recs)[("d", 30, "ubp")][0] == "ubp:b"


def test_sweep_records_failures_and_continues():
    res = sweep([("toy", grid_ds())], [30], [0], ["ubp:t=8", "baseline"])
    assert res.records[0].error and np.isnan(res.records[0].avg_error)
    assert not res.records[1].error
    assert res.summary()["failures"][0]["spec"] == "ubp:hidden=0,t=8"


def test_sweep_is_deterministic_and_worker_invariant():
    args = ([("a", grid_ds(0)), ("b", grid_ds(1))], [30, 50], [0, 1],
            ["baseline", "fkm:k=2", "mf:t=2", "ubp:t=2"])
    kw = dict(overrides={"max_epochs_per_phase": 20})
    one = sweep(*args, workers=1, **kw)
    again = sweep(*args, workers=1, **kw)
    many = sweep(*args, workers=3, **kw)
    assert one.to_csv() == again.to_csv() == many.to_csv()


def test_summary_and_tables():
    res = sweep([("a", grid_ds(0)), ("b", grid_ds(1))], [30], [0], ["baseline", "fkm:k=2"])
    summ = res.summary(reference="fkm")
    assert summ["pairwise"]["30:baseline"]["wins"] + summ["pairwise"]["30:baseline"]["ties"] \
        + summ["pairwise"]["30:baseline"]["losses"] == 2
    json.dumps(summ)
    tsv = res.to_tsv()
    assert "# a" in tsv and "u\tbaseline\tfkm" in tsv
    assert res.to_csv().splitlines()[0] == "dataset,u,seed,method,spec,avg_error,cells_scored"


def test_sweep_rejects_empty_axes():
    with pytest.raises(ValueError):
        sweep([], [30], [0], ["baseline"])


def test_sweep_config_requires_keys(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"datasets": [], "u_levels": [30], "seeds": [0]}))
    with pytest.raises(ValueError, match="grids"):
        load_sweep_config(path)

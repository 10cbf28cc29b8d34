import math

import numpy as np
import pytest

from ubpimpute.dataset import EncodedMatrix
from ubpimpute.mlp import MlpModel, Topology, init_model
from ubpimpute.trainer import (
    TrainConfig,
    TrainedModel,
    decay_schedule,
    known_cells,
    nlpca_train,
    predict_all,
    rmse,
    run_phase,
    sample_latent_grid,
    train_epoch,
    ubp_train,
    _streams,
)

from oracles import rank2_matrix, reference_epoch, svd_rank_rmse


def encoded(values, known=None):
    values = np.asarray(values, dtype=float)
    if known is None:
        known = np.ones(values.shape, dtype=bool)
    values = np.where(known, values, 0.0)
    d = values.shape[1]
    return EncodedMatrix(values, known, np.arange(d), np.full(d, -1), [(0.0, 1.0)] * d)


def sparse_problem(seed, n=12, d=5, frac=0.3):
    rng = np.random.default_rng(seed)
    known = rng.uniform(size=(n, d)) > frac
    known[:, 0] = True
    return encoded(rng.uniform(size=(n, d)), known)


def quick(**kw):
    base = dict(max_epochs_per_phase=40, seed=0)
    base.update(kw)
    return TrainConfig(**base)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(eta_floor=0.1, eta_start=0.01)
    with pytest.raises(ValueError):
        TrainConfig(holdout_fraction=1.0)
    with pytest.raises(ValueError):
        TrainConfig(latent_t=0)
    with pytest.raises(ValueError):
        TrainConfig(weight_init_scale="xavier")
    with pytest.raises(ValueError):
        TrainConfig(weight_init_scale=0.0)
    assert TrainConfig(hidden=[3, 2]).hidden == (3, 2)


def test_default_constants():
    cfg = TrainConfig()
    assert (cfg.eta_start, cfg.eta_floor, cfg.gamma, cfg.lam) == (0.01, 0.0001, 0.00001, 0.0001)
    assert cfg.latent_init_scale == 0.01


def test_known_cells_skip_unknown_entries():
    X = encoded([[0.1, 0.2], [0.3, 0.4]], np.array([[True, False], [False, True]]))
    cells = known_cells(X)
    assert cells.rows.tolist() == [0, 1] and cells.cols.tolist() == [0, 1]
    assert cells.vals.tolist() == [0.1, 0.4]


def test_schedule_halves_seven_times_on_flat_scores():
    s, hist = decay_schedule(lambda eta: 0.3, 0.01, 0.0001, 1e-5, 10 ** 6)
    etas = [h[2] for h in hist]
    assert len(hist) == 8
    assert etas[0] == etas[1] == 0.01
    # the seventh halving (to 0.01 / 128) ends the loop
    assert etas[-1] == 0.01 / 2 ** 6 and etas[-1] / 2 < 0.0001


def test_schedule_first_epoch_never_decays():
    _, hist = decay_schedule(lambda eta: 0.5, 0.01, 0.0001, 1e-5, 2)
    assert hist[1][2] == 0.01


def test_schedule_keeps_rate_while_improving():
    scores = iter([1.0, 0.5, 0.25, 0.25, 0.25])
    _, hist = decay_schedule(lambda eta: next(scores), 0.01, 0.004, 1e-5, 5)
    assert [h[2] for h in hist] == [0.01, 0.01, 0.01, 0.01, 0.005]


def test_schedule_handles_exact_fit():
    _, hist = decay_schedule(lambda eta: 0.0, 0.01, 0.0001, 1e-5, 100)
    assert len(hist) == 8 and all(h[1] == 0.0 for h in hist)


def test_schedule_respects_epoch_cap():
    _, hist = decay_schedule(lambda eta: 1.0 / (1 + eta), 0.01, 0.0001, 0.0, 3)
    assert len(hist) == 3


def test_run_phase_uses_config_schedule():
    X = sparse_problem(0)
    model = init_model(Topology(2, (), 5), 0, 0.1)
    V = np.zeros((12, 2))
    cfg = TrainConfig(eta_start=0.01, eta_floor=0.005, max_epochs_per_phase=50)
    seen = []
    s, hist = run_phase(X, model, V, cfg, update_inputs=False, regularized=True,
                        rng=np.random.default_rng(0), progress=lambda *a: seen.append(a))
    assert hist[-1][2] == 0.01 and len(hist) >= 2
    assert [a[1] for a in seen] == [h[0] for h in hist]
    assert s == pytest.approx(rmse(model, V, X))


def test_epoch_is_deterministic_for_a_seed():
    X = sparse_problem(1)
    outs = []
    for _ in range(2):
        model = init_model(Topology(2, (3,), 5), 0, 0.5)
        V = np.random.default_rng(0).normal(size=(12, 2))
        s = train_epoch(X, model, V, 0.05, 1e-4, True, np.random.default_rng(9))
        outs.append((s, model.params.copy(), V.copy()))
    assert outs[0][0] == outs[1][0]
    assert np.array_equal(outs[0][1], outs[1][1]) and np.array_equal(outs[0][2], outs[1][2])


def test_frozen_inputs_stay_put():
    X = sparse_problem(2)
    model = init_model(Topology(2, (4,), 5), 0, 0.5)
    V = np.random.default_rng(1).normal(size=(12, 2))
    before = V.copy()
    train_epoch(X, model, V, 0.05, 1e-4, False, np.random.default_rng(0))
    assert np.array_equal(V, before)


def test_exact_fit_without_decay_is_a_fixed_point():
    model = init_model(Topology(2, (3,), 4), 0, 1.0)
    V = np.random.default_rng(2).normal(size=(6, 2))
    X = encoded(np.array([model.forward(v) for v in V]))
    p0, V0 = model.params.copy(), V.copy()
    s = train_epoch(X, model, V, 0.1, 0.0, True, np.random.default_rng(0))
    assert s < 1e-15
    np.testing.assert_allclose(model.params, p0, atol=1e-15)
    np.testing.assert_allclose(V, V0, atol=1e-15)


def test_weight_decay_shrinks_when_fit_is_exact():
    model = init_model(Topology(2, (), 3), 0, 1.0)
    V = np.random.default_rng(3).normal(size=(4, 2))
    X = encoded(np.array([model.forward(v) for v in V]))
    before = np.abs(model.params).sum()
    train_epoch(X, model, V, 0.1, 0.01, False, np.random.default_rng(0))
    assert np.abs(model.params).sum() < before


def test_h_order_options_differ_but_both_learn():
    X = sparse_problem(4)
    res = {}
    for flag in (False, True):
        model = init_model(Topology(2, (), 5), 0, 0.5)
        V = np.random.default_rng(0).normal(size=(12, 2))
        start = rmse(model, V, X)
        for _ in range(30):
            s = train_epoch(X, model, V, 0.1, 0.0, True, np.random.default_rng(1), h_before_w=flag)
        assert s < start
        res[flag] = V.copy()
    assert not np.array_equal(res[False], res[True])


def test_training_rejects_bad_shapes():
    X = sparse_problem(5)
    with pytest.raises(ValueError):
        train_epoch(X, init_model(Topology(3, (), 5)), np.zeros((12, 2)), 0.1, 0, True,
                    np.random.default_rng(0))
    with pytest.raises(ValueError):
        ubp_train(X, TrainConfig(latent_t=5))


def test_ubp_train_is_deterministic():
    X = sparse_problem(6)
    a = ubp_train(X, quick(latent_t=2, hidden=(3,)))
    b = ubp_train(X, quick(latent_t=2, hidden=(3,)))
    assert np.array_equal(a.V, b.V) and np.array_equal(a.model.params, b.model.params)
    assert sorted(a.history) == [1, 2, 3]
    c = ubp_train(X, quick(latent_t=2, hidden=(3,), seed=1))
    assert not np.array_equal(a.V, c.V)


def test_phase_two_leaves_latents_unchanged():
    X = sparse_problem(7)
    cfg = quick(latent_t=2, hidden=(3,), max_epochs_per_phase=15)
    # reproduce phases 1-2 by hand with the same streams
    from ubpimpute.trainer import _prepare, STREAM_T, STREAM_PERM
    train, score, V, rngs, width = _prepare(X, cfg)
    T = init_model(Topology(2, (), width), rngs[STREAM_T], cfg.weight_init_scale)
    run_phase(train, T, V, cfg, True, True, rngs[STREAM_PERM])
    after_one = V.copy()
    W = init_model(Topology(2, (3,), width), rngs[2], cfg.weight_init_scale)
    run_phase(train, W, V, cfg, False, True, rngs[STREAM_PERM])
    assert np.array_equal(V, after_one)


def test_pretraining_disabled_equals_nlpca():
    for seed in range(3):
        X = sparse_problem(10 + seed)
        cfg = quick(latent_t=2, hidden=(4,), seed=seed)
        a = ubp_train(X, cfg, pretrain=False)
        b = nlpca_train(X, cfg)
        assert np.array_equal(a.V, b.V) and np.array_equal(a.model.params, b.model.params)
        assert np.array_equal(predict_all(a), predict_all(b))


def test_holdout_drives_schedule_from_unseen_cells():
    X = sparse_problem(8, n=20)
    cfg = quick(latent_t=2, holdout_fraction=0.25)
    tm = ubp_train(X, cfg)
    assert all(len(h) > 0 for h in tm.history.values())
    with pytest.raises(ValueError):
        ubp_train(encoded([[0.1, 0.2, 0.3]]), quick(latent_t=1, holdout_fraction=0.1))


def test_streams_are_independent_of_each_other():
    a, b = _streams(0)[:2]
    assert not np.array_equal(a.normal(size=5), b.normal(size=5))


def test_recovers_rank_one_structure():
    rng = np.random.default_rng(0)
    M = np.outer(rng.uniform(0.2, 0.8, 20), rng.uniform(0.3, 1.0, 5))
    X = encoded(M)
    tm = ubp_train(X, TrainConfig(latent_t=1, weight_init_scale="fan_in", max_epochs_per_phase=3000))
    assert rmse(tm.model, tm.V, X) < 0.05


def test_rank_two_fit_beats_rank_one_svd():
    M = rank2_matrix(30, 6, seed=1)
    X = encoded(M)
    tm = ubp_train(X, TrainConfig(latent_t=2, weight_init_scale="fan_in", max_epochs_per_phase=3000))
    assert rmse(tm.model, tm.V, X) < svd_rank_rmse(M, 1)


def test_model_json_round_trip():
    X = sparse_problem(9)
    tm = ubp_train(X, quick(latent_t=2, hidden=(2,)))
    back = TrainedModel.from_json(tm.to_json())
    assert np.array_equal(back.V, tm.V) and np.array_equal(back.model.params, tm.model.params)
    assert back.config == tm.config
    assert back.history == tm.history


def test_latent_grid_shape_and_corners():
    model = init_model(Topology(3, (), 4), 0, 1.0)
    V = np.random.default_rng(0).normal(size=(10, 3))
    tm = TrainedModel(V=V, model=model)
    ai, aj, out = sample_latent_grid(tm, dims=(0, 2), steps=3)
    assert out.shape == (3, 3, 4)
    assert ai[0] == V[:, 0].min() and aj[-1] == V[:, 2].max()
    v = V.mean(axis=0)
    v[0], v[2] = ai[2], aj[1]
    np.testing.assert_allclose(out[2, 1], model.forward(v), rtol=1e-14)
    with pytest.raises(ValueError):
        sample_latent_grid(tm, dims=(1, 1))
    with pytest.raises(ValueError):
        sample_latent_grid(TrainedModel(V=V[:, :1], model=MlpModel(Topology(1, (), 4))))


def test_latent_grid_with_explicit_bounds():
    tm = TrainedModel(V=np.zeros((2, 2)), model=MlpModel(Topology(2, (), 2)))
    ai, aj, out = sample_latent_grid(tm, steps=5, bounds=[(-1, 1), (0, 2)])
    assert ai.tolist() == [-1, -0.5, 0, 0.5, 1] and aj[-1] == 2
    assert np.all(out == 0.5)


def test_rmse_matches_dense_computation():
    X = sparse_problem(3)
    model = init_model(Topology(2, (3,), 5), 0, 1.0)
    V = np.random.default_rng(0).normal(size=(12, 2))
    pred = np.array([model.forward(v) for v in V])
    ref = math.sqrt(np.mean((pred[X.known] - X.values[X.known]) ** 2))
    assert rmse(model, V, X) == pytest.approx(ref, rel=1e-12)


@pytest.mark.parametrize("hidden", [(), (3,), (2, 3)])
def test_epoch_matches_reference_implementation(hidden):
    X = sparse_problem(20, n=6, d=4)
    model = init_model(Topology(2, hidden, 4), 0, 0.8)
    V = np.random.default_rng(1).normal(size=(6, 2))
    cells = known_cells(X)
    ref_w = [w.tolist() for w in model.weights]
    ref_b = [b.tolist() for b in model.biases]
    ref_V = V.tolist()
    order = np.random.default_rng(5).permutation(len(cells))
    reference_epoch(ref_w, ref_b, ref_V, list(zip(cells.rows, cells.cols, cells.vals)), order,
                    0.2, 0.01, True)
    train_epoch(X, model, V, 0.2, 0.01, True, np.random.default_rng(5))
    for w, rw in zip(model.weights, ref_w):
        np.testing.assert_allclose(w, rw, rtol=1e-12, atol=1e-14)
    for b, rb in zip(model.biases, ref_b):
        np.testing.assert_allclose(b, rb, rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(V, ref_V, rtol=1e-12, atol=1e-14)


def test_toy_epochs_improve_steadily():
    X = encoded([[0.2, 0.7], [0.5, 0.4], [0.9, 0.1]])
    model = init_model(Topology(1, (), 2), 0, 0.01)
    V = np.random.default_rng(0).normal(0, 0.01, size=(3, 1))
    rng = np.random.default_rng(0)
    scores = [train_epoch(X, model, V, 0.5, 0.0, True, rng) for _ in range(5)]
    assert all(b < a for a, b in zip(scores, scores[1:]))


def test_rank_one_with_two_latent_dims():
    rng = np.random.default_rng(0)
    M = np.outer(rng.uniform(0.2, 0.8, 20), rng.uniform(0.3, 1.0, 5))
    X = encoded(M)
    tm = ubp_train(X, TrainConfig(latent_t=2, max_epochs_per_phase=3000))
    assert rmse(tm.model, tm.V, X) < 0.05
    from ubpimpute.trainer import decode_row
    pred = np.array([decode_row(tm, r) for r in range(20)])
    assert np.abs(pred - M).max() < 0.05
    assert np.array_equal(pred, predict_all(tm))
    with pytest.raises(IndexError):
        decode_row(tm, 20)

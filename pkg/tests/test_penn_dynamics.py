"""Tests for the probabilistic ensemble dynamics model."""

import json
import math
from dataclasses import replace

import numpy as np
import pytest

from pennmpc.core.nn import LayerParams, MlpParams
from pennmpc.errors import CheckpointError, ModelError, ShapeError
from pennmpc.models.domain import HistoryWindow, NormStats, SampleBatch, flatten_windows
from pennmpc.models.schemas import EvalReport, ModelConfig, PlantParams, TrackSpec, TrainConfig
from pennmpc.services.dataset_store import split, stack_samples, window_episodes
from pennmpc.services.penn_dynamics import (
    DETERMINISTIC,
    PennModel,
    batch_jrd,
    bounded_variance,
    build_input,
    build_input_batch,
    cosine_lr,
    evaluate_rmse,
    init_model,
    load_checkpoint,
    member_loss_and_grads,
    nll_loss,
    predict_ensemble,
    predict_member,
    predict_members,
    save_checkpoint,
    train,
    window_jrd,
)
from pennmpc.sim.maneuvers import scripted_maneuver
from pennmpc.sim.track import build_track


def _linear_batch(n: int, H: int = 1, seed: int = 0) -> SampleBatch:
    rng = np.random.default_rng(seed)
    states = rng.normal(size=(n, H, 3))
    actions = rng.uniform(-1.0, 1.0, size=(n, H, 2))
    targets = 0.5 * states[:, -1] @ np.array([[0.2, 0.0, 0.1], [0.0, -0.3, 0.2], [0.1, 0.1, -0.4]])
    targets = targets + actions[:, -1] @ np.array([[0.0, 0.4, 0.3], [0.5, 0.0, 0.0]])
    return SampleBatch(states, actions, targets)


def _small_cfg(**kw) -> ModelConfig:
    base = dict(H=2, B=3, hidden=[8])
    base.update(kw)
    return ModelConfig(**base)


def test_init_model_members_differ():
    model = init_model(_small_cfg(), seed=1)
    assert model.B == 3
    assert model.layer_sizes == [10, 8, 6]
    w0 = model.members[0].layers[0].weights
    assert not np.array_equal(w0, model.members[1].layers[0].weights)


def test_deterministic_mode_has_one_member_and_three_outputs():
    model = init_model(_small_cfg(mode="deterministic"), seed=1)
    assert model.B == 1
    assert model.layer_sizes[-1] == 3
    window = HistoryWindow.steady(np.array([3.0, 0.0, 0.0]), 2)
    with pytest.raises(ModelError):
        predict_ensemble(model, window)
    assert window_jrd(model, window) == 0.0


def test_bounded_variance_hits_bounds_exactly():
    var, grad = bounded_variance(np.array([-1000.0, 0.0, 1000.0]), 1e-6, 10.0)
    assert var[0] == 1e-6
    assert var[2] == 10.0
    assert var[1] == pytest.approx(0.5 * (1e-6 + 10.0))
    assert np.all(np.isfinite(grad))


def test_predicted_variance_is_within_bounds():
    model = init_model(_small_cfg(var_min=0.01, var_max=2.0), seed=3)
    features = np.random.default_rng(0).normal(scale=50.0, size=(200, 10))
    _, variances = predict_members(model, features)
    assert variances.min() >= 0.01 and variances.max() <= 2.0


def test_predict_member_matches_batch():
    model = init_model(_small_cfg(), seed=2)
    features = np.random.default_rng(1).normal(size=(4, 10))
    means, variances = predict_members(model, features)
    assert means.shape == (3, 4, 3)
    one = predict_member(model, 1, features[2])
    assert np.allclose(one.mean, means[1, 2])
    assert np.allclose(one.variance, variances[1, 2])
    with pytest.raises(ModelError):
        predict_member(model, 3, features[0])
    with pytest.raises(ShapeError):
        predict_member(model, 0, features[0, :7])


def test_ensemble_prediction_adds_current_state():
    model = init_model(_small_cfg(), seed=2)
    window = HistoryWindow.steady(np.array([4.0, 0.1, -0.2]), 2)
    pred = predict_ensemble(model, window)
    delta = predict_member(model, 0, build_input(window, model.stats)).mean
    assert np.allclose(pred.members[0].mean, window.current_state + delta)
    assert len(pred.members) == 3


def test_raw_predictions_are_denormalised_network_outputs():
    rng = np.random.default_rng(7)
    stats = NormStats(rng.normal(size=10), rng.uniform(0.5, 2.0, size=10), rng.normal(size=3), rng.uniform(0.1, 3.0, size=3))
    model = replace(init_model(_small_cfg(), seed=6), stats=stats)
    states, actions = rng.normal(size=(5, 2, 3)), rng.uniform(-1.0, 1.0, size=(5, 2, 2))
    means, variances = predict_members(model, build_input_batch(states, actions, stats))

    normalised = (flatten_windows(states, actions) - stats.input_mean) / stats.input_std
    plain = replace(model, stats=NormStats.identity(2))
    means_n, variances_n = predict_members(plain, normalised)
    assert np.allclose(means, means_n * stats.target_std + stats.target_mean, rtol=0.0, atol=1e-9)
    assert np.allclose(variances, variances_n * stats.target_std**2, rtol=0.0, atol=1e-9)


def test_member_order_only_permutes_the_prediction():
    model = init_model(_small_cfg(), seed=8)
    order = (2, 0, 1)
    shuffled = replace(model, members=tuple(model.members[i] for i in order))
    window = HistoryWindow.steady(np.array([3.0, 0.2, -0.1]), 2)
    pred, pred_shuffled = predict_ensemble(model, window), predict_ensemble(shuffled, window)
    for k, i in enumerate(order):
        assert np.array_equal(pred_shuffled.members[k].mean, pred.members[i].mean)
        assert np.array_equal(pred_shuffled.members[k].variance, pred.members[i].variance)
    assert pred_shuffled.jrd() == pytest.approx(pred.jrd(), abs=1e-12)


def test_identical_members_do_not_disagree():
    base = init_model(_small_cfg(B=1), seed=4).members[0]
    model = PennModel((base, base.copy(), base.copy()), NormStats.identity(2), H=2)
    window = HistoryWindow.steady(np.array([2.0, 0.0, 0.3]), 2)
    assert abs(window_jrd(model, window)) < 1e-12


def test_model_rejects_inconsistent_members():
    a = init_model(_small_cfg(B=1), seed=0).members[0]
    b = init_model(_small_cfg(B=1, hidden=[4]), seed=0).members[0]
    with pytest.raises(ModelError):
        PennModel((a, b), NormStats.identity(2), H=2)
    with pytest.raises(ShapeError):
        PennModel((a,), NormStats.identity(3), H=2)


def test_nll_value_and_shape_errors():
    loss, g_mean, g_var = nll_loss(np.zeros((2, 3)), np.ones((2, 3)), np.zeros((2, 3)))
    assert loss == pytest.approx(1.5 * math.log(2 * math.pi), abs=1e-12)
    assert np.all(g_mean == 0.0)
    assert np.allclose(g_var, 0.5 / 2)
    with pytest.raises(ShapeError):
        nll_loss(np.zeros((2, 3)), np.ones((2, 3)), np.zeros((3, 3)))
    with pytest.raises(ModelError):
        nll_loss(np.zeros(3), np.zeros(3), np.zeros(3))


def _flat(layers) -> np.ndarray:
    return np.concatenate([np.concatenate([l.weights.ravel(), l.biases.ravel()]) for l in layers])


def _unflat(params: MlpParams, vec: np.ndarray) -> MlpParams:
    layers, k = [], 0
    for l in params.layers:
        nw, nb = l.weights.size, l.biases.size
        layers.append(LayerParams(vec[k : k + nw].reshape(l.weights.shape), vec[k + nw : k + nw + nb].copy()))
        k += nw + nb
    return MlpParams(tuple(layers), params.activations, params.seed)


@pytest.mark.parametrize("mode", ["probabilistic", "deterministic"])
def test_loss_gradients_match_finite_differences(mode):
    """NLL through the bounded variance head, and L2, on 10 random configurations each."""
    rng = np.random.default_rng(17)
    eps = 1e-6
    for trial in range(10):
        cfg = ModelConfig(H=int(rng.integers(1, 3)), B=1, hidden=[int(rng.integers(2, 6))], mode=mode, var_min=0.05, var_max=5.0)
        params = init_model(cfg, seed=trial).members[0]
        features = rng.normal(size=(5, cfg.H * 5))
        targets = rng.normal(size=(5, 3))

        def loss(p: MlpParams) -> float:
            return member_loss_and_grads(p, features, targets, mode, cfg.var_min, cfg.var_max)[0]

        _, grads = member_loss_and_grads(params, features, targets, mode, cfg.var_min, cfg.var_max)
        theta = _flat(params.layers)
        numeric = np.empty_like(theta)
        for i in range(theta.size):
            up, down = theta.copy(), theta.copy()
            up[i] += eps
            down[i] -= eps
            numeric[i] = (loss(_unflat(params, up)) - loss(_unflat(params, down))) / (2 * eps)
        analytic = _flat(grads)
        err = np.linalg.norm(analytic - numeric) / max(np.linalg.norm(analytic) + np.linalg.norm(numeric), 1e-12)
        assert err < 1e-4


def test_pooled_rmse_reproduces_published_totals():
    assert EvalReport.from_per_dim(0.0990, 0.0651, 0.0707).rmse_total == pytest.approx(0.0797, abs=1e-4)
    assert EvalReport.from_per_dim(0.0548, 0.0373, 0.0319).rmse_total == pytest.approx(0.0425, abs=1e-4)


def test_evaluate_rmse_pooling_identity():
    model = init_model(_small_cfg(), seed=0)
    batch = _linear_batch(50, H=2)
    report = evaluate_rmse(model, batch)
    assert report.n_samples == 50
    pooled = (report.rmse_vx**2 + report.rmse_vy**2 + report.rmse_r**2) / 3.0
    assert report.rmse_total**2 == pytest.approx(pooled, abs=1e-12)
    with pytest.raises(ShapeError):
        evaluate_rmse(model, _linear_batch(10, H=3))


def test_deterministic_training_learns_linear_system():
    train_set = _linear_batch(400, seed=1)
    test_set = _linear_batch(100, seed=2)
    cfg = ModelConfig(H=1, hidden=[16], activation="identity", mode="deterministic")
    result = train(init_model(cfg, seed=0), train_set, test_set, TrainConfig(epochs=150, batch_size=32, lr=1e-2, seed=0))
    assert len(result.history) == 150
    report = evaluate_rmse(result.best_model, test_set)
    assert report.rmse_total < 0.05 * test_set.targets.std()


def test_training_keeps_best_epoch_and_is_reproducible():
    train_set = _linear_batch(120, H=2, seed=3)
    test_set = _linear_batch(40, H=2, seed=4)
    cfg = TrainConfig(epochs=6, batch_size=16, seed=5)
    a = train(init_model(_small_cfg(), seed=1), train_set, test_set, cfg)
    b = train(init_model(_small_cfg(), seed=1), train_set, test_set, cfg)
    best = min(a.history, key=lambda m: m.rmse_total)
    assert a.best_epoch == best.epoch
    assert evaluate_rmse(a.best_model, test_set).rmse_total == best.rmse_total
    for pa, pb in zip(a.best_model.members, b.best_model.members):
        assert np.array_equal(_flat(pa.layers), _flat(pb.layers))
    assert np.allclose(a.best_model.stats.target_mean, train_set.targets.mean(axis=0))


def test_cosine_schedule_runs_from_lr_to_floor():
    assert cosine_lr(1, 11, 1e-2, 1e-3) == pytest.approx(1e-2)
    assert cosine_lr(6, 11, 1e-2, 1e-3) == pytest.approx(5.5e-3)
    assert cosine_lr(11, 11, 1e-2, 1e-3) == pytest.approx(1e-3)
    assert cosine_lr(1, 1, 1e-2, 1e-3) == 1e-2


def test_variance_weighting_scales_nll_gradients():
    var_min, var_max, var = 1e-6, 10.0, 0.04
    s = (var - var_min) / (var_max - var_min)
    raw = math.log(s / (1.0 - s))
    params = MlpParams((LayerParams(np.zeros((6, 10)), np.array([0.0, 0.0, 0.0, raw, raw, raw])),), ())
    rng = np.random.default_rng(11)
    features, targets = rng.normal(size=(4, 10)), rng.normal(size=(4, 3))
    scale = float(bounded_variance(np.array(raw), var_min, var_max)[0])
    loss0, plain = member_loss_and_grads(params, features, targets, "probabilistic", var_min, var_max)
    loss1, weighted = member_loss_and_grads(params, features, targets, "probabilistic", var_min, var_max, nll_beta=1.0)
    assert loss1 == loss0
    assert np.allclose(_flat(weighted), scale * _flat(plain), rtol=1e-12, atol=0.0)


def test_ensemble_fits_plant_data_well_below_the_zero_increment_baseline():
    track = build_track(TrackSpec())
    p = PlantParams()
    episodes = [scripted_maneuver("zigzag_low_speed", 40.0, d, seed, track, p) for d, seed in (("ccw", 0), ("cw", 1))]
    parts = split(window_episodes(episodes, 2), 0.7, seed=0)
    train_set, test_set = stack_samples(parts.train), stack_samples(parts.test)
    model = init_model(ModelConfig(H=2, B=2, hidden=[32, 32]), seed=0)
    result = train(model, train_set, test_set, TrainConfig(epochs=60, batch_size=32, lr=3e-3, seed=0))
    baseline = math.sqrt(float(np.mean(test_set.targets**2)))
    assert evaluate_rmse(result.best_model, test_set).rmse_total < 0.2 * baseline


def test_batch_jrd_is_nonzero_for_distinct_members():
    model = init_model(_small_cfg(), seed=0)
    values = batch_jrd(model, _linear_batch(20, H=2))
    assert values.shape == (20,)
    assert np.all(np.isfinite(values))
    assert np.any(values != 0.0)


def test_checkpoint_round_trip_is_exact(tmp_path):
    model = init_model(_small_cfg(var_min=1e-4), seed=9, dt=0.05)
    path = tmp_path / "model.ckpt.json"
    save_checkpoint(model, path)
    loaded = load_checkpoint(path)
    assert (loaded.H, loaded.B, loaded.mode, loaded.dt, loaded.var_min) == (2, 3, "probabilistic", 0.05, 1e-4)
    features = np.random.default_rng(0).normal(size=(7, 10))
    for x, y in zip(predict_members(model, features), predict_members(loaded, features)):
        assert np.array_equal(x, y)


def test_checkpoint_errors(tmp_path):
    path = tmp_path / "model.ckpt.json"
    save_checkpoint(init_model(_small_cfg(mode=DETERMINISTIC), seed=0), path)
    text = path.read_text()

    (tmp_path / "truncated.json").write_text(text[: len(text) // 2])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "truncated.json")

    doc = json.loads(text)
    doc["header"]["format_version"] = 99
    (tmp_path / "future.json").write_text(json.dumps(doc))
    with pytest.raises(CheckpointError, match="99"):
        load_checkpoint(tmp_path / "future.json")

    doc = json.loads(text)
    doc["members"][0]["layers"][0]["biases"] = doc["members"][0]["layers"][0]["biases"][:-1]
    (tmp_path / "short.json").write_text(json.dumps(doc))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "short.json")

    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.json")

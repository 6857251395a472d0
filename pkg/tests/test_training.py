import math

import numpy as np
import pytest

from conftest import gaussian_data, random_model
from red_density.model import ModelConfig, init_model
from red_density.numerics import make_rng
from red_density.training import (
    AdamState,
    TrainConfig,
    adam_step,
    clip_gradients,
    expand_grid,
    gradient_check,
    grid_search,
    loss_and_gradients,
    lr_schedule,
    train,
)


def test_loss_and_gradients_match_finite_differences():
    m = random_model(d=5, hidden=8, K=3, seed=0)
    batch = make_rng(1).standard_normal((4, 5))
    rep = gradient_check(m, batch, eps=1e-5, tol=1e-4)
    assert rep.ok, rep.violations[:5]
    assert rep.n_checked == m.n_parameters()


def test_loss_is_mean_nll():
    m = random_model(d=3, seed=2)
    batch = make_rng(3).standard_normal((6, 3))
    loss, _ = loss_and_gradients(m, batch)
    assert loss == pytest.approx(m.nll(batch), abs=1e-14)


def test_identical_rows_give_single_row_gradients():
    m = random_model(d=3, seed=4)
    row = make_rng(5).standard_normal((1, 3))
    _, g1 = loss_and_gradients(m, row)
    _, g5 = loss_and_gradients(m, np.repeat(row, 5, axis=0))
    for k in g1:
        np.testing.assert_allclose(g5[k], g1[k], rtol=1e-12, atol=1e-15)


def test_offset_gradient_nonzero():
    m = random_model(d=3, seed=6)
    _, g = loss_and_gradients(m, make_rng(7).standard_normal((4, 3)))
    assert np.all(np.abs(g["linear.offset"]) > 1e-8)


def test_gradient_check_flags_corrupted_parameter():
    m = random_model(d=3, hidden=4, K=2, seed=8)
    batch = make_rng(9).standard_normal((3, 3))

    def corrupted(model, b):
        loss, g = loss_and_gradients(model, b)
        g["fwd.out_weights"] = -g["fwd.out_weights"]
        return loss, g

    rep = gradient_check(m, batch, grad_fn=corrupted)
    assert {v[0] for v in rep.violations} == {"fwd.out_weights"}


def test_gradient_check_saturated_update_gate():
    m = random_model(d=3, hidden=4, K=2, seed=10)
    m.cond.gru.params["update_bias"][:] = 1e3  # u == 1: candidate weights get exactly zero gradient
    rep = gradient_check(m, make_rng(11).standard_normal((3, 3)))
    assert rep.ok
    assert rep.per_parameter["gru.cand_in"] == 0.0


# -- optimizer -------------------------------------------------------------------


def test_adam_zero_gradient():
    p = {"a": np.array([1.0, -2.0])}
    s = AdamState()
    adam_step(s, p, {"a": np.zeros(2)}, 0.1)
    np.testing.assert_array_equal(p["a"], [1.0, -2.0])
    assert s.step == 1


def test_adam_first_step_hand_trace():
    # m = 0.1 g, v = 0.001 g^2; bias-corrected m_hat = g, v_hat = g^2
    g = 0.5
    p = {"a": np.array([1.0])}
    adam_step(AdamState(), p, {"a": np.array([g])}, 0.01)
    assert p["a"][0] == pytest.approx(1.0 - 0.01 * g / (abs(g) + 1e-8), abs=1e-16)


def test_adam_projection_floors_diagonal():
    m = random_model(d=2, seed=12)
    params = m.named_parameters()
    m.stack.linear.diag[:] = [1e-12 + 1e-3, 2.0]
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    grads["linear.diag"] = np.array([1.0, 0.0])
    state = AdamState()
    adam_step(state, params, grads, 1e-3 * (1 - 1e-9), m.project)
    assert m.stack.linear.diag[0] == 1e-8


def test_lr_schedule():
    cfg = TrainConfig(init_lr=0.01, decay_factor=0.5, min_lr=0.0)
    assert lr_schedule(cfg, 0) == 0.01
    assert lr_schedule(cfg, 3) == pytest.approx(0.00125, abs=1e-18)
    cfg = TrainConfig(init_lr=0.01, decay_factor=0.5, min_lr=0.004)
    assert lr_schedule(cfg, 5) == 0.004


def test_clip_gradients():
    rng = make_rng(13)
    grads = {"a": 10 * rng.standard_normal(5), "b": 10 * rng.standard_normal((3, 3))}
    clip_gradients(grads, 5.0)
    assert math.sqrt(sum(float(np.sum(g * g)) for g in grads.values())) <= 5.0 + 1e-12


# -- training loop ----------------------------------------------------------------


def _small_run(seed=0, epochs=4):
    X = gaussian_data(1200, seed=3)
    m = init_model(ModelConfig(d=2, num_units=8, transform_hidden=4, num_components=3, seed=seed))
    cfg = TrainConfig(init_lr=1e-2, max_epochs=epochs, batch_size=64, seed=seed)
    return train(m, X[:1000], X[1000:], cfg)


def test_training_is_deterministic():
    m1, h1 = _small_run()
    m2, h2 = _small_run()
    assert h1.train_nll == h2.train_nll
    assert h1.val_nll == h2.val_nll
    assert h1.lr == h2.lr
    for k, v in m1.named_parameters().items():
        np.testing.assert_array_equal(v, m2.named_parameters()[k])


def test_training_descends_and_returns_best():
    m, h = _small_run(epochs=6)
    assert h.train_nll[1] < h.train_nll[0]
    assert len(h.epoch) == len(h.val_nll) == len(h.lr) == len(h.seconds)
    X = gaussian_data(1200, seed=3)
    assert m.nll(X[1000:]) == min(h.val_nll)


def test_train_standard_normal_d3():
    X = make_rng(14).standard_normal((10_000, 3))
    m = init_model(ModelConfig(d=3, num_units=16, transform_hidden=4, num_components=3))
    m, h = train(m, X[:9000], X[9000:], TrainConfig(init_lr=3e-3, max_epochs=15, batch_size=256))
    test = make_rng(15).standard_normal((5000, 3))
    assert m.nll(test) == pytest.approx(3 * 1.4189385332046727, abs=0.05)


# -- grid search ------------------------------------------------------------------


def test_expand_grid_rejects_bad_space():
    with pytest.raises(ValueError):
        list(expand_grid({}))
    with pytest.raises(ValueError):
        list(expand_grid({"num_units": []}))
    with pytest.raises(ValueError):
        list(expand_grid({"bogus": [1]}))


def test_grid_singleton_equals_train():
    X = gaussian_data(800, seed=4)
    mc = ModelConfig(d=2, num_units=8, transform_hidden=4, num_components=2)
    tc = TrainConfig(max_epochs=3, batch_size=64)
    best, board = grid_search({"init_lr": [1e-2]}, X[:600], X[600:], mc, tc)
    _, hist = train(init_model(mc), X[:600], X[600:], TrainConfig(max_epochs=3, batch_size=64, init_lr=1e-2))
    assert best.history.val_nll == hist.val_nll
    assert len(board) == 1


def test_grid_broken_lr_loses():
    X = gaussian_data(800, seed=5)
    mc = ModelConfig(d=2, num_units=8, transform_hidden=4, num_components=2)
    tc = TrainConfig(max_epochs=4, batch_size=64, min_lr=0.0)
    best, board = grid_search({"init_lr": [1e3, 1e-2], "num_components": [2, 3]}, X[:600], X[600:], mc, tc)
    assert best.config["init_lr"] == 1e-2
    vals = [r.val_nll for r in board]
    assert vals == sorted(vals)

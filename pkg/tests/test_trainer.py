import json

import numpy as np
import pytest
from helpers import random_items, toy_config, toy_model
from hypothesis import given, settings
from hypothesis import strategies as st

from mhred import trainer
from mhred.tensor import Tensor
from mhred.trainer import AdamState, TrainConfig, TrainingError, adam_step, clip_gradients, fit, global_norm


def _with_grad(*grads):
    out = []
    for g in grads:
        t = Tensor(np.zeros(len(g)), requires_grad=True)
        t.grad = np.array(g, dtype=float)
        out.append(t)
    return out


def test_clip_below_at_and_above_threshold():
    small = _with_grad([1.5, 2.0])
    assert clip_gradients(small, 5.0) == 1.0 and small[0].grad.tolist() == [1.5, 2.0]
    edge = _with_grad([3.0, 4.0])
    assert clip_gradients(edge, 5.0) == 1.0 and edge[0].grad.tolist() == [3.0, 4.0]
    big = _with_grad([6.0], [8.0])
    assert clip_gradients(big, 5.0) == 0.5
    assert big[0].grad.tolist() == [3.0] and big[1].grad.tolist() == [4.0]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=8), st.floats(0.01, 100))
def test_clip_never_increases_norm_and_keeps_direction(g, clip):
    (t,) = _with_grad(g)
    before = global_norm([t])
    original = t.grad.copy()
    factor = clip_gradients([t], clip)
    assert abs(global_norm([t]) - min(before, clip)) <= 1e-9 * max(1.0, before)
    np.testing.assert_allclose(t.grad, original * factor, rtol=0, atol=0)


def test_adam_zero_gradient_leaves_params():
    (p,) = _with_grad([0.0, 0.0])
    p.data[:] = [1.0, -2.0]
    adam_step([p], AdamState.for_params([p]), TrainConfig(learning_rate=0.1))
    assert p.data.tolist() == [1.0, -2.0]


def test_adam_first_step_has_size_lr():
    (p,) = _with_grad([0.3, -20.0])
    adam_step([p], AdamState.for_params([p]), TrainConfig(learning_rate=0.01))
    np.testing.assert_allclose(p.data, [-0.01, 0.01], rtol=1e-6)
    assert np.all(p.grad == 0.0)


def test_adam_converges_on_quadratic():
    p = Tensor(np.zeros(1), requires_grad=True)
    state, cfg = AdamState.for_params([p]), TrainConfig(learning_rate=0.01)
    for _ in range(2000):
        p.grad = 2.0 * (p.data - 3.0)
        adam_step([p], state, cfg)
    assert abs(p.data[0] - 3.0) < 1e-3


def _split(seed=0, n=12, config=None):
    config = config or toy_config()
    rng = np.random.default_rng(seed)
    return random_items(rng, n, config), random_items(rng, 4, config)


def test_fit_is_deterministic():
    train, valid = _split()
    runs = []
    for _ in range(2):
        config, params = toy_model(scale=0.1)
        res = fit(params, config, train, valid, TrainConfig(learning_rate=0.01, batch_size=5, max_epochs=3, seed=4))
        runs.append((res.history, [t.data.copy() for t in res.params]))
    assert runs[0][0] == runs[1][0]
    assert all(np.array_equal(a, b) for a, b in zip(runs[0][1], runs[1][1]))


def test_zero_learning_rate_leaves_params_unchanged():
    train, valid = _split(1)
    config, params = toy_model()
    before = [t.data.copy() for t in params]
    res = fit(params, config, train, valid, TrainConfig(learning_rate=0.0, max_epochs=2, patience=5))
    assert all(np.array_equal(a, t.data) for a, t in zip(before, params))
    assert all(np.array_equal(a, t.data) for a, t in zip(before, res.params))


def test_patience_one_stops_after_first_worse_epoch(monkeypatch):
    train, valid = _split(2)
    values = iter([1.0, 2.0, 0.5, 0.1])
    monkeypatch.setattr(trainer, "mean_loss", lambda *a, **k: next(values))
    config, params = toy_model()
    res = fit(params, config, train, valid, TrainConfig(learning_rate=0.01, max_epochs=10, patience=1))
    assert len(res.history) == 2 and res.best_epoch == 1 and res.best_valid_loss == 1.0


def test_best_snapshot_is_validation_argmin(tmp_path):
    train, valid = _split(3)
    config, params = toy_model(scale=0.1)
    snapshots = []
    res = fit(
        params, config, train, valid, TrainConfig(learning_rate=0.02, batch_size=4, max_epochs=6, patience=6),
        on_epoch=lambda rec: snapshots.append([t.data.copy() for t in params]),
    )
    losses = [h.valid_loss for h in res.history]
    assert res.best_epoch == int(np.argmin(losses)) + 1 and res.best_valid_loss == min(losses)
    assert all(np.array_equal(a, t.data) for a, t in zip(snapshots[res.best_epoch - 1], res.params))
    res.write_history(tmp_path / "h.jsonl")
    rows = [json.loads(x) for x in (tmp_path / "h.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in rows] == list(range(1, len(losses) + 1))
    assert rows[-1]["steps"] == res.steps == 3 * len(losses)


def test_max_steps_caps_updates():
    train, valid = _split(4)
    config, params = toy_model()
    res = fit(params, config, train, valid, TrainConfig(batch_size=4, max_epochs=10, patience=10, max_steps=5))
    assert res.steps == 5 and res.history[-1].steps == 5


def test_non_finite_loss_raises():
    train, valid = _split(5)
    config, params = toy_model()
    params["out.b"].data[0] = np.nan
    with pytest.raises(TrainingError, match="epoch 1, batch 0"):
        fit(params, config, train, valid, TrainConfig())


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(clip_norm=0)
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=-1)
    assert TrainConfig().learning_rate == 0.0004 and TrainConfig().clip_norm == 5.0

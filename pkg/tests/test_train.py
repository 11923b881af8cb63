import math
import os

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mlpmixer.checkpoint import to_bytes
from mlpmixer.data import load_cifar10, make_synthetic
from mlpmixer.model import NAMED_CONFIGS, init_params
from mlpmixer.train import (METRICS_HEADER, AdamState, MetricsCSV, Schedule, SgdState, TrainPlan,
                            adam_step, clip_global_norm, desk_plan, global_norm, lr_at, mixup,
                            one_hot, sgd_momentum_step, train_loop)

TOY = NAMED_CONFIGS["toy"]


# --- Adam -----------------------------------------------------------------

def test_adam_zero_grads_no_decay_keeps_params():
    p = {"w": np.array([1.5, -2.0])}
    q, _ = adam_step(p, {"w": np.zeros(2)}, AdamState.zeros(p), lr=0.1, wd=0.0)
    assert np.array_equal(q["w"], p["w"])


def test_adam_first_step_hand_value():
    p = {"w": np.array([0.0])}
    q, state = adam_step(p, {"w": np.array([1.0])}, AdamState.zeros(p), lr=0.1)
    # m_hat = v_hat = 1 -> update = -0.1 * 1 / (1 + 1e-8)
    assert abs(q["w"][0] - (-0.1 / (1.0 + 1e-8))) < 1e-15
    assert state.count == 1


def test_adam_two_steps_scalar_recurrence():
    lr, wd, b1, b2, eps, g = 0.05, 0.1, 0.9, 0.999, 1e-8, 0.3
    w, m, v = 2.0, 0.0, 0.0
    for t in (1, 2):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w = w - lr * wd * w
        w = w - lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    p, state = {"w": np.array([2.0])}, AdamState.zeros({"w": np.zeros(1)})
    for _ in range(2):
        p, state = adam_step(p, {"w": np.array([g])}, state, lr, wd, b1, b2, eps)
    assert abs(p["w"][0] - w) < 1e-12


@settings(max_examples=50)
@given(st.integers(0, 2**31))
def test_adam_update_direction_is_loss_scale_covariant(seed):
    rng = np.random.default_rng(seed)
    g = rng.choice([-1, 1], 8) * rng.uniform(1e-2, 1.0, 8)
    p = {"w": rng.standard_normal(8)}
    steps = []
    for k in (1.0, 10.0):
        q, _ = adam_step(p, {"w": g * k}, AdamState.zeros(p), lr=0.01)
        steps.append(np.sign(q["w"] - p["w"]))
    assert np.array_equal(steps[0], steps[1])


# --- SGD ------------------------------------------------------------------

def test_sgd_mu_zero_is_plain_sgd():
    p = {"w": np.array([1.0, 2.0])}
    q, _ = sgd_momentum_step(p, {"w": np.array([0.5, -1.0])}, SgdState.zeros(p), lr=0.1, mu=0.0)
    np.testing.assert_allclose(q["w"], [0.95, 2.1], atol=1e-15)


def test_sgd_zero_grad_zero_velocity():
    p = {"w": np.array([3.0])}
    q, _ = sgd_momentum_step(p, {"w": np.zeros(1)}, SgdState.zeros(p), lr=1.0)
    assert q["w"][0] == 3.0


def test_sgd_three_step_recurrence():
    grads = [0.2, -0.4, 0.7]
    w, vel = 1.0, 0.0
    for g in grads:
        vel = 0.9 * vel + g
        w -= 0.05 * vel
    p, state = {"w": np.array([1.0])}, SgdState.zeros({"w": np.zeros(1)})
    for g in grads:
        p, state = sgd_momentum_step(p, {"w": np.array([g])}, state, 0.05)
    assert abs(p["w"][0] - w) < 1e-12


# --- schedules ------------------------------------------------------------

@pytest.mark.parametrize("kind", ["linear_warmup_linear_decay", "linear_warmup_cosine"])
def test_schedule_endpoints(kind):
    s = Schedule(kind, 10, 110, 2e-3)
    assert lr_at(s, 0) == 0.0
    assert lr_at(s, 10) == 2e-3
    assert abs(lr_at(s, 110)) < 1e-18
    assert abs(lr_at(s, 60) - 1e-3) < 1e-15


@pytest.mark.parametrize("kind", ["linear_warmup_linear_decay", "linear_warmup_cosine"])
def test_schedule_continuous_at_warmup(kind):
    s = Schedule(kind, 1000, 100_000, 1e-3)
    left = s.peak_lr * (s.warmup_steps - 1e-9) / s.warmup_steps  # warmup branch just below the boundary
    assert abs(left - lr_at(s, 1000)) < 1e-12
    # one step on either side moves by at most one step's slope
    assert s.peak_lr - lr_at(s, 999) <= s.peak_lr / 1000 + 1e-18
    assert s.peak_lr - lr_at(s, 1001) <= s.peak_lr / 99_000 + 1e-18


def test_schedule_out_of_range():
    with pytest.raises(ValueError):
        lr_at(Schedule("linear_warmup_cosine", 1, 5, 1.0), 6)
    with pytest.raises(ValueError):
        lr_at(Schedule("linear_warmup_cosine", 1, 5, 1.0), -1)


def test_schedule_rejects_warmup_past_total():
    with pytest.raises(ValueError):
        Schedule("linear_warmup_cosine", 6, 5, 1.0)


def test_desk_plan_uses_five_percent_warmup():
    plan = desk_plan(400)
    assert plan.schedule.warmup_steps == 20 and plan.schedule.peak_lr == 1e-3 and plan.weight_decay == 0.1


# --- clipping -------------------------------------------------------------

def test_clip_below_threshold_unchanged():
    g = {"a": np.array([0.3, 0.4])}
    assert clip_global_norm(g, 1.0)["a"] is g["a"]


def test_clip_three_four_five():
    np.testing.assert_allclose(clip_global_norm({"a": np.array([3.0, 4.0])}, 1.0)["a"], [0.6, 0.8], atol=1e-15)


@settings(max_examples=50)
@given(st.integers(0, 2**31), st.floats(0.1, 10.0))
def test_clip_norm_and_idempotence(seed, c):
    rng = np.random.default_rng(seed)
    g = {"a": rng.standard_normal((3, 4)) * rng.uniform(0.01, 5), "b": rng.standard_normal(7)}
    once = clip_global_norm(g, c)
    assert abs(global_norm(once) - min(global_norm(g), c)) < 1e-7
    twice = clip_global_norm(once, c)
    assert all(np.array_equal(twice[k], once[k]) for k in g)


# --- mixup ----------------------------------------------------------------

def test_mixup_p0_is_identity():
    x, y = np.ones((4, 2)), one_hot(np.array([0, 1, 2, 3]), 4)
    x2, y2 = mixup(x, y, 0.0, np.random.default_rng(0))
    assert x2 is x and y2 is y


def test_mixup_identical_images_half():
    x = np.repeat(np.random.default_rng(1).random((1, 8, 8, 3)), 2, axis=0)
    y = one_hot(np.array([3, 3]), 10)
    x2, _ = mixup(x, y, 0.2, np.random.default_rng(1), lam=0.5)
    assert np.allclose(x2, x, atol=1e-15)


def test_mixup_rows_sum_to_one():
    rng = np.random.default_rng(2)
    for _ in range(1000):
        y = one_hot(rng.integers(0, 10, 8), 10)
        _, y2 = mixup(np.zeros((8, 1)), y, 0.2, rng)
        assert np.max(np.abs(y2.sum(axis=1) - 1)) < 1e-6


# --- loop -----------------------------------------------------------------

def small_run(seed, steps=6, **plan_kw):
    data = make_synthetic(64, TOY.image, seed=seed)
    plan = TrainPlan(schedule=Schedule("linear_warmup_linear_decay", 1, steps, 1e-2), batch=16,
                     seed=seed, **plan_kw)
    return train_loop(TOY, plan, data)


def test_zero_steps_returns_initial_checkpoint():
    rows = []
    data = make_synthetic(32, TOY.image)
    ck = train_loop(TOY, TrainPlan(schedule=Schedule(total_steps=0), batch=8, seed=3), data, sink=rows.append)
    assert rows == []
    init = init_params(TOY, 3)
    assert all(np.array_equal(ck.params[k], init[k]) for k in init)


def test_runs_are_bit_identical_without_regularizers():
    assert to_bytes(small_run(5)) == to_bytes(small_run(5))


def test_seed_changes_run():
    assert to_bytes(small_run(5)) != to_bytes(small_run(6))


def test_regularized_run_is_still_deterministic():
    kw = dict(mixup_p=0.2, drop_rate=0.1, stoch_depth=0.1)
    assert to_bytes(small_run(7, **kw)) == to_bytes(small_run(7, **kw))


def test_sgd_runs():
    ck = small_run(8, optimizer="sgd_momentum", weight_decay=0.0)
    assert all(np.all(np.isfinite(v)) for v in ck.params.values())


def test_metrics_csv(tmp_path):
    path = tmp_path / "m.csv"
    data = make_synthetic(64, TOY.image)
    val = make_synthetic(32, TOY.image, seed=1, split="test")
    plan = TrainPlan(schedule=Schedule(total_steps=8), batch=16, log_every=0)
    with MetricsCSV(str(path)) as sink:
        train_loop(TOY, plan, data, sink=sink, val=val)
    raw = path.read_bytes()
    assert b"\r" not in raw
    lines = raw.decode("utf-8").splitlines()
    assert lines[0] == ",".join(METRICS_HEADER)
    assert [line.split(",")[0] for line in lines[1:]] == ["4", "8"]  # one row per epoch of 4 steps
    assert all(line.split(",")[6] != "" for line in lines[1:])


def test_geometry_mismatch_rejected():
    with pytest.raises(ValueError):
        train_loop(TOY, TrainPlan(), make_synthetic(8, (32, 32, 3)))


def _loss_trend_data(seed):
    cifar = os.environ.get("MIXER_CIFAR10_DIR")
    if cifar:
        train, _ = load_cifar10(cifar)
        return train.subset(np.random.default_rng(seed).permutation(len(train))[:512]), "cifar10"
    return make_synthetic(512, seed=seed), "synthetic"


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_fifty_steps_lower_the_loss(seed):
    data, _ = _loss_trend_data(seed)
    cfg = NAMED_CONFIGS["tiny-cifar"]
    rows = []
    plan = TrainPlan(schedule=Schedule("linear_warmup_linear_decay", 5, 50, 1e-3), batch=32,
                     seed=seed, log_every=5)
    train_loop(cfg, plan, data, sink=rows.append)
    assert rows[-1]["train_loss"] < rows[0]["train_loss"]

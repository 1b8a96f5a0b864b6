import csv
import math
from pathlib import Path

import mpmath
import numpy as np
import pytest

from viewset import numerics as nx
from viewset.data import SyntheticConfig, generate_synthetic, split
from viewset.errors import ConfigError, InputError
from viewset.head import smoothed_cross_entropy
from viewset.initializer import Initializer, InitializerConfig
from viewset.numerics import Parameter, Tensor
from viewset.training import (SGD, AdamW, ScheduleConfig, StageOneHead, TrainConfig, cosine_anneal, format_log,
                              lr_at, train_stage1, train_stage2)

from conftest import tiny_model

GOLDEN = Path(__file__).parent / "golden" / "lr_schedule.csv"


def schedule_oracle(epoch):
    """Closed form evaluated in 40-digit arithmetic."""
    mpmath.mp.dps = 40
    e = mpmath.mpf(epoch)
    i = int(mpmath.floor(e / 100))
    t = e - 100 * i
    peak = mpmath.mpf("1e-3") * mpmath.mpf("0.6") ** i
    if t < 5:
        return peak * t / 5
    return peak * (1 + mpmath.cos(mpmath.pi * (t - 5) / 95)) / 2


def read_golden():
    with GOLDEN.open() as fh:
        return [(float(r["epoch"]), float(r["lr"])) for r in csv.DictReader(fh)]


def test_golden_file_agrees_with_extended_precision_oracle():
    rows = read_golden()
    assert [e for e, _ in rows] == [k / 2 for k in range(601)]
    for e, lr in rows:
        assert abs(lr - float(schedule_oracle(e))) <= 1e-12 * 1e-3


def test_schedule_matches_golden_exactly():
    cfg = ScheduleConfig()
    for e, lr in read_golden():
        assert lr_at(e, cfg) == lr


def test_schedule_spot_values():
    cfg = ScheduleConfig()
    assert lr_at(5.0, cfg) == 1e-3
    assert math.isclose(lr_at(105.0, cfg), 6e-4, rel_tol=1e-15)
    assert math.isclose(lr_at(205.0, cfg), 3.6e-4, rel_tol=1e-15)
    for start in (0.0, 100.0, 200.0):
        assert lr_at(start, cfg) == 0.0


def test_schedule_peak_is_interval_maximum():
    cfg = ScheduleConfig()
    for i in range(3):
        grid = [lr_at(100 * i + k / 100, cfg) for k in range(10000)]
        assert max(grid) == lr_at(100 * i + 5, cfg)
        assert math.isclose(max(grid), 1e-3 * 0.6 ** i, rel_tol=1e-15)


def test_schedule_out_of_range():
    with pytest.raises(InputError):
        lr_at(-0.5, ScheduleConfig())
    with pytest.raises(InputError):
        lr_at(300.5, ScheduleConfig())


def test_schedule_validation():
    with pytest.raises(ConfigError):
        ScheduleConfig(warmup_epochs=100).validate()
    with pytest.raises(ConfigError):
        ScheduleConfig(peak_decay=1.0).validate()


def test_cosine_anneal_endpoints():
    assert cosine_anneal(0, 0.01, 30) == 0.01
    assert math.isclose(cosine_anneal(15, 0.01, 30), 0.005, rel_tol=1e-15)
    assert abs(cosine_anneal(30, 0.01, 30)) < 1e-18


def test_sgd_plain_and_zero_grad():
    p = Parameter(np.array([1.0, -2.0]), "p")
    opt = SGD([p], momentum=0.0)
    p.grad[...] = [0.5, 1.0]
    opt.step(0.1)
    np.testing.assert_allclose(p.data, [0.95, -2.1], rtol=1e-15)
    p.zero_grad()
    before = p.data.copy()
    opt.step(0.1)
    assert np.array_equal(p.data, before)


def test_sgd_momentum_two_steps():
    p = Parameter(np.array([1.0]), "p")
    opt = SGD([p], momentum=0.9)
    for _ in range(2):
        p.grad[...] = 2.0
        opt.step(0.01)
    # v1 = g, v2 = 0.9 g + g
    assert math.isclose(p.data[0], 1.0 - 0.01 * 2.0 - 0.01 * 1.9 * 2.0, rel_tol=1e-15)


def test_adamw_first_step_is_sign_like():
    p = Parameter(np.array([0.3, -0.7, 2.0]), "p")
    opt = AdamW([p], weight_decay=0.0)
    p.grad[...] = [1e-3, -50.0, 4.0]
    opt.step(0.01)
    np.testing.assert_allclose(p.data, [0.3 - 0.01, -0.7 + 0.01, 2.0 - 0.01], rtol=1e-6)


def test_adamw_pure_weight_decay_shrink():
    p = Parameter(np.array([2.0, -4.0]), "p")
    AdamW([p], weight_decay=0.05).step(0.1)
    np.testing.assert_allclose(p.data, np.array([2.0, -4.0]) * (1 - 0.1 * 0.05), rtol=1e-15)


def test_adamw_zero_grad_no_decay_is_identity():
    p = Parameter(np.array([2.0, -4.0]), "p")
    AdamW([p], weight_decay=0.0).step(0.1)
    assert np.array_equal(p.data, [2.0, -4.0])


def test_adamw_three_steps_on_quadratic():
    a, lr, b1, b2, eps, wd = 3.0, 0.1, 0.9, 0.999, 1e-8, 0.05
    p = Parameter(np.array([1.5]), "p")
    opt = AdamW([p], (b1, b2), eps, wd)
    x, m, v = 1.5, 0.0, 0.0
    for t in range(1, 4):
        p.grad[...] = a * p.data
        opt.step(lr)
        g = a * x
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x = x - lr * ((m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps) + wd * x)
    assert math.isclose(p.data[0], x, rel_tol=1e-14)


def test_adamw_state_round_trip():
    p = Parameter(np.array([1.0, 2.0]), "p")
    opt = AdamW([p])
    p.grad[...] = [0.1, -0.2]
    opt.step(0.01)
    clone = AdamW([Parameter(p.data.copy(), "p")])
    clone.load_state(opt.state())
    assert clone.steps == 1 and np.array_equal(clone.m[0], opt.m[0]) and np.array_equal(clone.v[0], opt.v[0])


def test_single_sample_step_decreases_loss(small_data):
    ds, _ = small_data
    model = tiny_model()
    shape = ds.shapes[0]
    x = Tensor(shape.views[None])
    params = model.parameters()
    opt = AdamW(params)
    nx.zero_grad(params)
    loss = smoothed_cross_entropy(model(x), [shape.label])
    nx.backward(loss)
    opt.step(1e-6)
    assert smoothed_cross_entropy(model(x), [shape.label]).item() < loss.item()


def test_stage_one_single_step_descent(small_data):
    ds, _ = small_data
    init = Initializer(InitializerConfig("precomputed", 8, 6), np.random.default_rng(0))
    head = StageOneHead(8, 3, np.random.default_rng(1))
    params = init.parameters() + head.parameters()
    x = Tensor(ds.shapes[0].views[None])
    loss = smoothed_cross_entropy(head(init(x)), [ds.shapes[0].label])
    nx.zero_grad(params)
    nx.backward(loss)
    SGD(params).step(1e-4)
    assert smoothed_cross_entropy(head(init(x)), [ds.shapes[0].label]).item() < loss.item()


def stage1_run(ds, seed):
    init = Initializer(InitializerConfig("precomputed", 8, 6), np.random.default_rng(0))
    _, acc = train_stage1(ds.shapes, init, 3, TrainConfig(stage1_epochs=5, batch_size=4), seed=seed)
    return init, acc


def test_stage1_is_deterministic_and_learns(small_data):
    ds, _ = small_data
    a, acc_a = stage1_run(ds, 3)
    b, acc_b = stage1_run(ds, 3)
    assert acc_a == acc_b and acc_a > 0.5
    for p, q in zip(a.parameters(), b.parameters()):
        assert p.data.tobytes() == q.data.tobytes()
    fresh = Initializer(InitializerConfig("precomputed", 8, 6), np.random.default_rng(0))
    assert not np.array_equal(fresh.parameters()[0].data, a.parameters()[0].data)


def test_stage1_rejects_empty():
    init = Initializer(InitializerConfig("precomputed", 4, 3), np.random.default_rng(0))
    with pytest.raises(InputError):
        train_stage1([], init, 2, TrainConfig())


def short_cfg(epochs=6, **kw):
    return TrainConfig(batch_size=4, schedule=ScheduleConfig(1e-2, 3, 1, 0.4, epochs), **kw)


def test_stage2_log_follows_schedule(small_data):
    ds, sp = small_data
    cfg = short_cfg()
    model, logs = train_stage2(tiny_model(), sp.select(ds, "train"), cfg, 0, sp.select(ds, "val"))
    assert model.trained
    assert [r.epoch for r in logs] == list(range(6))
    assert [r.lr for r in logs] == [lr_at(e, cfg.schedule) for e in range(6)]
    assert all(0 <= r.val_inst_acc <= 1 for r in logs)
    assert logs[-1].train_loss < logs[0].train_loss
    assert format_log(logs).splitlines()[0] == "epoch,lr,train_loss,train_acc,val_class_acc,val_inst_acc"


def test_stage2_rejects_bad_schedule(small_data):
    ds, sp = small_data
    cfg = TrainConfig(schedule=ScheduleConfig(warmup_epochs=0))
    with pytest.raises(ConfigError):
        train_stage2(tiny_model(), sp.select(ds, "train"), cfg)


def test_stage2_resume_matches_uninterrupted_run(small_data):
    ds, sp = small_data
    train = sp.select(ds, "train")
    cfg = short_cfg()
    full, full_logs = train_stage2(tiny_model(dropout=0.1), train, cfg, 5)

    class Stop(Exception):
        pass

    saved = {}

    def halt(epoch, opt, rows):
        if epoch == 2:
            saved["state"] = {k: v.copy() for k, v in model.state_dict().items()}
            saved["opt"] = {k: np.copy(v) for k, v in opt.state().items()}
            raise Stop

    model = tiny_model(dropout=0.1)
    with pytest.raises(Stop):
        train_stage2(model, train, cfg, 5, on_epoch=halt)
    resumed = tiny_model(dropout=0.1, seed=9)
    resumed.load_state_dict(saved["state"])
    opt = AdamW(resumed.parameters(), weight_decay=cfg.weight_decay)
    opt.load_state(saved["opt"])
    resumed, tail = train_stage2(resumed, train, cfg, 5, start_epoch=3, optimizer=opt)
    assert [r.epoch for r in tail] == [3, 4, 5]
    assert format_log(tail) == format_log(full_logs[3:])
    for k, v in full.state_dict().items():
        assert v.tobytes() == resumed.state_dict()[k].tobytes()


def test_frozen_initializer_keeps_weights(small_data):
    ds, sp = small_data
    model = tiny_model()
    before = [p.data.copy() for p in model.initializer.parameters()]
    train_stage2(model, sp.select(ds, "train"), short_cfg(3, freeze_initializer=True))
    for b, p in zip(before, model.initializer.parameters()):
        assert np.array_equal(b, p.data)


def test_frozen_initializer_learning_curve_rises_early():
    ds = generate_synthetic(SyntheticConfig(seed=0))
    sp = split(ds, (0.6, 0.2, 0.2), seed=0)
    train, val = sp.select(ds, "train"), sp.select(ds, "val")
    model = tiny_model(feature_dim=32, dim=32, heads=4, blocks=2, classes=8, dropout=0.1, hidden=32)
    tc = TrainConfig(stage1_epochs=5, batch_size=8, freeze_initializer=True,
                     schedule=ScheduleConfig(1e-3, 20, 2, 0.4, 20))
    train_stage1(train, model.initializer, 8, tc, seed=0)
    _, logs = train_stage2(model, train, tc, 0, val)
    final = logs[-1].val_inst_acc
    # first 20% of the epochs
    early = max(r.val_inst_acc for r in logs[:4])
    assert final > 0.9
    assert early >= 0.95 * final

import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedpoison import fedsim as fs
from fedpoison import model as fm
from fedpoison.attacks import AttackSpec
from fedpoison.config import (
    AttackSection,
    DatasetSection,
    PartitionSection,
    RunConfig,
    ScheduleSection,
    TrainSection,
)
from fedpoison.errors import ConfigurationError, RoundError
from fedpoison.grad_core import ParamSet


def P(*vals):
    return ParamSet({"w": np.array(vals, dtype=np.float64)})


def test_aggregate_examples():
    np.testing.assert_array_equal(fs.aggregate([P(2), P(4)], [5, 5], [1, 1])["w"], [3])
    np.testing.assert_array_equal(fs.aggregate([P(0), P(4)], [1, 3], [1, 1])["w"], [3])
    np.testing.assert_array_equal(fs.aggregate([P(1), P(1)], [2, 2], [2, 1])["w"], [1.5])


def test_aggregate_three_devices():
    locals_ = [P(1, 0), P(2, 4), P(4, 8)]
    out = fs.aggregate(locals_, [1, 1, 2])
    np.testing.assert_allclose(out["w"], [(1 + 2 + 8) / 4, (0 + 4 + 16) / 4])


def test_aggregate_alpha_linear():
    base = fs.aggregate([P(3), P(5)], [1, 3], [1, 1])["w"][0]
    for a in (0.5, 2.0, 3.0):
        scaled = fs.aggregate([P(3), P(5)], [1, 3], [a, 1])["w"][0]
        assert scaled - base == pytest.approx((a - 1) * 0.25 * 3)


def test_aggregate_errors():
    with pytest.raises(ConfigurationError):
        fs.aggregate([P(1), P(1, 2)], [1, 1])
    with pytest.raises(ConfigurationError):
        fs.aggregate([P(1), P(2)], [1, 0])
    with pytest.raises(ConfigurationError):
        fs.aggregate([P(1), P(2)], [1])


@settings(max_examples=50)
@given(
    st.lists(
        st.tuples(st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=3), st.integers(1, 1000)),
        min_size=1,
        max_size=6,
    )
)
def test_aggregate_convex_hull(devs):
    locals_ = [P(*v) for v, _ in devs]
    sizes = [s for _, s in devs]
    out = fs.aggregate(locals_, sizes)["w"]
    stack = np.stack([p["w"] for p in locals_])
    tol = 1e-9 * (1 + np.abs(stack).max())
    assert np.all(out >= stack.min(axis=0) - tol) and np.all(out <= stack.max(axis=0) + tol)
    perm = list(reversed(range(len(locals_))))
    other = fs.aggregate([locals_[i] for i in perm], [sizes[i] for i in perm])["w"]
    np.testing.assert_allclose(other, out, rtol=1e-12, atol=tol)
    assert fs.aggregate(locals_, sizes).equal(fs.aggregate(locals_, sizes))


def test_accuracy_penalty():
    a = [0.5, 0.6, 0.7, 0.8, 0.8, 0.8, 0.8, 0.8]
    assert fs.accuracy_penalty(a, a) == 0
    assert fs.accuracy_penalty([0.49] * 6, [0.80] * 6) == pytest.approx(31.0)
    b = [0.3, 0.2, 0.4, 0.1, 0.5, 0.2, 0.3, 0.3]
    assert fs.accuracy_penalty(a, b) == pytest.approx(-fs.accuracy_penalty(b, a))
    with pytest.raises(ConfigurationError):
        fs.accuracy_penalty([0.1], [0.1, 0.2])


def test_final_accuracy_window():
    assert fs.final_accuracy([0, 0, 1, 1, 1, 1, 1]) == 1.0
    assert fs.final_accuracy([0.5]) == 0.5


def test_schedule_validation():
    with pytest.raises(ConfigurationError):
        fs.ScheduleConfig(total_rounds=5, attack_start=6, K=2, A=0)
    with pytest.raises(ConfigurationError):
        fs.ScheduleConfig(total_rounds=5, attack_start=1, K=2, A=3)
    s = fs.ScheduleConfig(10, 3, 10, 3)
    assert s.Q == 7
    assert not s.attack_active(3) and s.attack_active(4)


# --------------------------------------------------------------- rounds


@pytest.fixture(scope="module")
def setup(toy4):
    from fedpoison.datakit import partition_iid, split_train_test

    train, test = split_train_test(toy4, 0.75, 0)
    plan = partition_iid(train, 3, 0)
    shards = [train.subset(ix) for ix in plan.device_index_lists]
    params = fm.build(fm.ModelConfig(num_classes=4, seed=0))
    return shards, test, params


def _devices(shards, adversarial=(), kind="fgsm"):
    spec = AttackSpec(kind, 8.1)
    return [
        fs.DeviceState(i, "adversarial" if i in adversarial else "benign", s, spec if i in adversarial else None)
        for i, s in enumerate(shards)
    ]


TC = fm.TrainConfig(lr=0.05, batch_size=16)


def test_clean_round_is_fedavg(setup):
    shards, test, params = setup
    sched = fs.ScheduleConfig(5, 2, 3, 0, seed=4)
    nxt, m = fs.run_round(params, _devices(shards), 1, sched, TC, test, 10.0)
    locals_ = [
        fm.local_train_round(params, s, dataclasses.replace(TC, shuffle_seed=fs.derive_seed(4, fs.STREAM_SHUFFLE, i, 1)))
        for i, s in enumerate(shards)
    ]
    assert nxt.equal(fs.aggregate(locals_, [len(s) for s in shards]))
    assert not m.attack_active and m.mean_delta_norm == 0.0
    assert 0 <= m.global_accuracy <= 1


def test_single_device_round_returns_local_weights(setup):
    shards, test, params = setup
    sched = fs.ScheduleConfig(5, 2, 1, 0, seed=1)
    nxt, _ = fs.run_round(params, _devices(shards[:1]), 1, sched, TC, test, 10.0)
    local = fm.local_train_round(params, shards[0], dataclasses.replace(TC, shuffle_seed=fs.derive_seed(1, fs.STREAM_SHUFFLE, 0, 1)))
    assert nxt.equal(local)


def test_attack_gated_before_t0(setup):
    shards, test, params = setup
    clean, _ = fs.run_round(params, _devices(shards), 2, fs.ScheduleConfig(5, 2, 3, 0), TC, test, 10.0)
    gated, m = fs.run_round(params, _devices(shards, (1,)), 2, fs.ScheduleConfig(5, 2, 3, 1), TC, test, 10.0)
    assert gated.equal(clean)
    assert not m.attack_active
    hit, m3 = fs.run_round(params, _devices(shards, (1,)), 3, fs.ScheduleConfig(5, 2, 3, 1), TC, test, 10.0)
    assert m3.attack_active and list(m3.device_stats) == [1]
    assert m3.device_stats[1].round == 3
    assert abs(m3.mean_delta_norm - np.sqrt(10 ** -0.19)) <= 1e-6


def test_round_error_names_device(setup):
    shards, test, params = setup
    bad = params.map(lambda a: np.full_like(a, np.nan))
    with pytest.raises(RoundError) as e:
        fs.run_round(bad, _devices(shards), 1, fs.ScheduleConfig(5, 2, 3, 0), TC, test, 10.0)
    assert e.value.device_id == 0


def test_run_round_requires_devices(setup):
    _, test, params = setup
    with pytest.raises(ConfigurationError):
        fs.run_round(params, [], 1, fs.ScheduleConfig(5, 2, 0, 0), TC, test, 10.0)


# ---------------------------------------------------------- experiments


def tiny(kind="none", frac=0.0, rounds=3, t0=1, K=4, mode="iid", seed=0, fpc=40):
    return RunConfig(
        dataset=DatasetSection(frames_per_class=fpc, length=32),
        partition=PartitionSection(mode=mode, K=K, quantity_mean=20, quantity_std=2, labels_per_device=3),
        schedule=ScheduleSection(rounds=rounds, attack_start=t0, adversary_fraction=frac),
        attack=AttackSection(kind=kind, pnr_db=8.1),
        train=TrainSection(lr=0.05, batch_size=16),
        seed=seed,
    )


def test_experiment_deterministic():
    a = fs.run_experiment(tiny("awgn", 0.5))
    b = fs.run_experiment(tiny("awgn", 0.5))
    assert [m.param_digest for m in a.metrics] == [m.param_digest for m in b.metrics]
    assert a.accuracies() == b.accuracies()


def test_exactly_a_devices_report_attack_stats():
    res = fs.run_experiment(tiny("fgsm", 0.3, rounds=3, t0=1, K=10, fpc=60))
    assert len(res.adversaries) == 3
    for m in res.metrics:
        if m.round <= 1:
            assert m.device_stats == {}
        else:
            assert sorted(m.device_stats) == res.adversaries
            assert all(st.round == m.round for st in m.device_stats.values())


def test_gating_matches_clean_run():
    clean = fs.run_experiment(tiny("none", 0.0, rounds=3, t0=2))
    attacked = fs.run_experiment(tiny("fgsm", 0.5, rounds=3, t0=2))
    assert [m.param_digest for m in attacked.metrics[:2]] == [m.param_digest for m in clean.metrics[:2]]
    assert attacked.metrics[2].param_digest != clean.metrics[2].param_digest


def test_adversary_sets_are_nested():
    small = fs.choose_adversaries(10, 1, 5)
    big = fs.choose_adversaries(10, 3, 5)
    assert set(small) <= set(big) and len(big) == 3


def test_test_set_disjoint_from_shards():
    rc = tiny()
    train, test = fs.prepare_data(rc)
    plan = fs.make_partition(rc, train)
    test_rows = {f.tobytes() for f in test.frames}
    for ix in plan.device_index_lists:
        assert not any(train.frames[i].tobytes() in test_rows for i in ix)


def test_noniid_experiment_runs():
    res = fs.run_experiment(tiny("flip", 0.25, rounds=2, t0=1, mode="noniid"))
    assert res.plan.mode == "noniid"
    assert len(res.metrics) == 2


def test_clean_training_beats_chance():
    rc = RunConfig(
        dataset=DatasetSection(frames_per_class=200),
        partition=PartitionSection(K=2),
        schedule=ScheduleSection(rounds=30, attack_start=30, adversary_fraction=0.0),
        attack=AttackSection(kind="none"),
        train=TrainSection(lr=0.05, batch_size=16),
        seed=1,
    )
    res = fs.run_experiment(rc)
    assert fs.final_accuracy(res.metrics) >= 0.25 + 0.30

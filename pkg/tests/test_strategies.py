from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from survpad.strategies import (
    DfqState,
    LrSchedule,
    PtsState,
    dfq_init,
    dfq_logits,
    dfq_scaled_logits,
    dfq_update,
    early_stop,
    ema_update,
    lr_at,
    pts_init,
    pts_quota,
    pts_step,
)

from oracles import brute_early_stop, ema_closed_form


def _population(n_pos, n_neg):
    d = {f"p{i:03d}": 1 for i in range(n_pos)}
    d.update({f"n{i:03d}": 0 for i in range(n_neg)})
    return d


# --- PTS -------------------------------------------------------------------


def test_pts_init_counts():
    s = pts_init(_population(100, 100), 0.1, seed=0)
    assert sum(s.labels[i] for i in s.train_ids) == 10
    assert len(s.train_ids) == 20
    assert pts_init(_population(5, 7), 1.0, seed=0).pending_ids == frozenset()


def test_pts_init_is_seeded():
    pop = _population(30, 40)
    assert pts_init(pop, 0.3, 4) == pts_init(pop, 0.3, 4)
    assert pts_init(pop, 0.3, 4).train_ids != pts_init(pop, 0.3, 5).train_ids


def test_pts_init_errors():
    with pytest.raises(ValueError):
        pts_init({"a": 1}, 0.5, 0)
    with pytest.raises(ValueError):
        pts_init(_population(2, 2), 0.0, 0)


def test_pts_moves_lowest_positives():
    state = PtsState(frozenset({"n0"}), frozenset({"a", "b", "c", "d"}),
                     {"a": 1, "b": 1, "c": 1, "d": 1, "n0": 0}, 0.5, 1.0)
    nxt = pts_step(state, {"a": 0.9, "b": 0.2, "c": 0.8, "d": 0.1})
    assert set(nxt.last_moved) == {"b", "d"}
    assert nxt.rate == 0.5


def test_pts_moves_highest_negatives():
    state = PtsState(frozenset({"p0"}), frozenset({"a", "b", "c"}),
                     {"a": 0, "b": 0, "c": 0, "p0": 1}, 0.3, 0.9)
    nxt = pts_step(state, {"a": 0.1, "b": 0.7, "c": 0.4})
    assert nxt.last_moved == ("b",)
    assert nxt.rate == pytest.approx(0.27)


def test_pts_score_mismatch():
    s = pts_init(_population(4, 4), 0.5, 0)
    with pytest.raises(ValueError):
        pts_step(s, {})


def test_pts_drains_and_keeps_partition():
    pop = _population(13, 9)
    s = pts_init(pop, 0.2, seed=1, decay=0.8)
    rng = np.random.default_rng(0)
    for _ in range(200):
        assert s.train_ids.isdisjoint(s.pending_ids)
        assert s.train_ids | s.pending_ids == frozenset(pop)
        if not s.pending_ids:
            break
        s = pts_step(s, {i: float(rng.random()) for i in s.pending_ids})
    assert not s.pending_ids


def test_pts_quota_is_ceiling():
    assert pts_quota(0.5, 4) == 2
    assert pts_quota(0.3, 10) == 3
    assert pts_quota(0.01, 3) == 1
    assert pts_quota(0.9, 0) == 0
    assert pts_quota(1e-15, 5) == 1


def test_pts_state_json_round_trip():
    s = pts_init(_population(6, 6), 0.5, 2, decay=0.9)
    s = pts_step(s, {i: 0.5 for i in s.pending_ids})
    assert PtsState.from_dict(s.to_dict()) == s


# --- DFQ -------------------------------------------------------------------


def test_dfq_logits_cases():
    st_ = dfq_init([1.0, 0.0, 0.0])
    assert dfq_logits([2.0, 0, 0], st_) == (1.0, -1.0)
    assert np.allclose(dfq_scaled_logits([2.0, 0, 0], st_), [16.0, -16.0])
    with pytest.raises(ValueError):
        dfq_logits([0.0, 0, 0], st_)


def test_dfq_log1_matches_scan():
    rng = np.random.default_rng(1)
    s = dfq_init(rng.normal(size=5), capacity=32, alpha=1.0)
    vecs = rng.normal(size=(16, 5))
    for v in vecs:
        dfq_update(s, v, -1.0)
    f = rng.normal(size=5)
    fu = f / np.linalg.norm(f)
    scan = max(float(fu @ (v / np.linalg.norm(v))) for v in vecs)
    assert dfq_logits(f, s)[1] == pytest.approx(scan, abs=1e-12)


def test_dfq_above_threshold_leaves_queue():
    s = dfq_init([0.0, 1.0], alpha=0.5)
    dfq_update(s, [1.0, 1.0], 0.5)
    assert len(s.queue) == 0


def test_dfq_evicts_oldest():
    s = dfq_init([1.0, 0.0], capacity=3, alpha=0.9)
    vecs = [np.array([math.cos(a), math.sin(a)]) for a in (0.1, 0.2, 0.3, 0.4)]
    for v in vecs:
        dfq_update(s, v, 0.0)
    assert len(s.queue) == 3
    assert np.allclose(np.stack(s.queue), np.stack(vecs[1:]))


def test_dfq_center_is_renormalized_running_mean():
    s = dfq_init([1.0, 0.0], alpha=-1.0)
    dfq_update(s, [0.0, 3.0], 0.0)
    assert np.allclose(s.center, np.array([1.0, 1.0]) / math.sqrt(2))


def test_dfq_state_json_round_trip():
    s = dfq_init([1.0, 2.0], capacity=4)
    dfq_update(s, [0.0, -1.0], -0.5)
    back = DfqState.from_dict(s.to_dict())
    assert back.to_dict() == s.to_dict()


# --- schedules -------------------------------------------------------------


def test_cosine_warmup_reaches_one_percent():
    s = LrSchedule("cosine_warmup", lr0=0.01, total_epochs=100, warmup_epochs=1)
    assert lr_at(s, 99) == pytest.approx(1e-4, rel=1e-12)
    assert lr_at(s, 500) == lr_at(s, 99)
    assert lr_at(s, 0) < lr_at(s, 1) == pytest.approx(0.01)


def test_step_decay_values():
    s = LrSchedule("step_decay", lr0=1e-4, step_epochs=20, step_gamma=0.8)
    assert lr_at(s, 0) == 1e-4
    assert lr_at(s, 19) == 1e-4
    assert lr_at(s, 20) == pytest.approx(8e-5)


def test_cyclic_extremes():
    s = LrSchedule("cyclic", base_lr=1e-5, max_lr=2e-3, step_size=4)
    vals = [lr_at(s, e / 4) for e in range(0, 33)]
    assert min(vals) == pytest.approx(1e-5)
    assert max(vals) == pytest.approx(2e-3)


def test_cosine_annealing_to_zero_and_restart_decay():
    s = LrSchedule("cosine_annealing", lr0=1e-3, total_epochs=100, min_lr=0.0)
    assert lr_at(s, 0) == 1e-3
    assert lr_at(s, 100) == pytest.approx(0.0, abs=1e-18)
    r = LrSchedule("cosine_annealing", lr0=1e-3, total_epochs=100, cycle_epochs=25, cycle_decay=0.5)
    assert lr_at(r, 25) == pytest.approx(5e-4)
    assert lr_at(r, 50) == pytest.approx(2.5e-4)


@pytest.mark.parametrize("kind", ["cosine_warmup", "cyclic", "step_decay", "cosine_annealing", "constant"])
def test_schedules_are_pure_and_positive(kind):
    s = LrSchedule(kind, lr0=0.01, total_epochs=50)
    a = [lr_at(s, e) for e in range(60)]
    assert a == [lr_at(s, e) for e in range(60)]
    if kind != "cosine_annealing":
        assert min(a) > 0


def test_schedule_rejects_unknown_kind():
    with pytest.raises(ValueError):
        LrSchedule("linear")


# --- EMA / early stopping --------------------------------------------------


def test_ema_basics():
    p = np.array([1.0, 2.0])
    assert np.array_equal(ema_update(np.zeros(2), p, 0.0), p)
    e = np.zeros(2)
    for _ in range(200):
        e = ema_update(e, p, 0.9)
    assert np.allclose(e, p, atol=1e-8)
    with pytest.raises(ValueError):
        ema_update(np.zeros(2), np.zeros(3), 0.5)
    with pytest.raises(ValueError):
        ema_update({"a": np.zeros(1)}, {"b": np.zeros(1)}, 0.5)


def test_ema_closed_form():
    rng = np.random.default_rng(2)
    e0 = rng.normal(size=4)
    vals = rng.normal(size=(30, 4))
    e = e0.copy()
    for v in vals:
        e = ema_update(e, v, 0.93)
    assert np.max(np.abs(e - ema_closed_form(e0, vals, 0.93))) < 1e-12


def test_early_stop_examples():
    assert not any(early_stop(list(range(10, 0, -1))[: k + 1], 3) for k in range(10))
    assert early_stop([1.0] * 4, 3)
    assert not early_stop([1.0] * 3, 3)


@settings(max_examples=500, deadline=None)
@given(st.lists(st.integers(0, 6), min_size=1, max_size=30), st.integers(1, 8))
def test_early_stop_matches_window_scan(history, patience):
    assert early_stop(history, patience) == brute_early_stop(history, patience)

import doctest
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from rasda import schedulers
from rasda.core import TrialResult, compute_ladder, new_resources
from rasda.schedulers import (
    Action,
    DuplicateReport,
    MetricMode,
    Scheduler,
    SchedulerConfig,
    ShapeMismatch,
    TrialNotActive,
    UnknownTrial,
    simulate_synchronous_sh,
)

LADDER = compute_ladder(5, 40, 2)


def make(policy="rasda", ladder=LADDER, base=2, mode="min", n=0):
    s = Scheduler(SchedulerConfig(policy, ladder, base, mode))
    for i in range(n):
        s.add_trial(i)
    return s


def res(tid, it, metric, bs=256):
    return TrialResult(tid, it, metric, 0.0, bs)


def test_doctests():
    assert doctest.testmod(schedulers).failed == 0


def test_first_reporter_promoted():
    s = make(n=1)
    d = s.on_result(res(0, 5, 0.9))
    assert d.action is Action.CONTINUE_WITH_RESOURCES


def test_second_worse_reporter_stopped():
    s = make("asha", n=2)
    assert s.on_result(res(0, 5, 0.5)).action is Action.CONTINUE
    d = s.on_result(res(1, 5, 0.7))
    assert d.action is Action.STOP and not d.completed
    assert s.stopped_at == {1: 0}


def test_promotion_at_milestone_10_grants_next_rung():
    s = make(n=1)
    s.on_result(res(0, 5, 0.3))
    d = s.on_result(res(0, 10, 0.2))
    assert d.action is Action.CONTINUE_WITH_RESOURCES and d.workers == 8 and d.rung == 1


def test_max_t_completes():
    s = make(n=1)
    for it in (5, 10, 20):
        s.on_result(res(0, it, 0.1))
    d = s.on_result(res(0, 40, 0.1))
    assert d.action is Action.STOP and d.completed
    assert 0 not in s.stopped_at


def test_off_milestone_continues():
    s = make(n=1)
    d = s.on_result(res(0, 3, 0.1))
    assert d.action is Action.CONTINUE and d.workers is None


def test_final_rung_keeps_top_level_when_max_t_off_ladder():
    ladder = compute_ladder(5, 37, 2)
    s = make(ladder=ladder, n=1)
    s.on_result(res(0, 5, 0.1))
    s.on_result(res(0, 10, 0.1))
    d = s.on_result(res(0, 20, 0.1))
    assert d.workers == new_resources(2, 2, 2)
    assert s.on_result(res(0, 30, 0.1)).action is Action.CONTINUE
    assert s.on_result(res(0, 37, 0.1)).completed


def test_errors():
    s = make(n=1)
    with pytest.raises(UnknownTrial):
        s.on_result(res(5, 5, 0.1))
    s.on_result(res(0, 5, 0.1))
    with pytest.raises(DuplicateReport):
        s.on_result(res(0, 5, 0.1))
    with pytest.raises(ValueError):
        s.on_result(res(0, 41, 0.1))
    s2 = make("asha", n=2)
    s2.on_result(res(0, 5, 0.1))
    s2.on_result(res(1, 5, 0.9))
    with pytest.raises(TrialNotActive):
        s2.on_result(res(1, 10, 0.1))


def test_ties_go_to_earlier_report():
    s = make("asha", n=2)
    s.on_result(res(1, 5, 0.5))
    assert s.on_result(res(0, 5, 0.5)).stops


def test_maximize_mode():
    s = make("asha", mode="max", n=2)
    s.on_result(res(0, 5, 0.5))
    assert not s.on_result(res(1, 5, 0.7)).stops
    s = make("asha", mode="max", n=2)
    s.on_result(res(0, 5, 0.7))
    assert s.on_result(res(1, 5, 0.5)).stops


def test_nan_metric_ranks_last():
    s = make("asha", n=2)
    s.on_result(res(0, 5, 0.5))
    assert s.on_result(res(1, 5, float("nan"))).stops


def test_on_error_stops():
    s = make(n=1)
    d = s.on_error(0)
    assert d.stops and not d.completed


# -- synchronous oracle --------------------------------------------------------


def _counts(n, ladder):
    rng = np.random.default_rng(n)
    metrics = [list(rng.random(len(ladder.milestones))) for _ in range(n)]
    return [len(s) for s in simulate_synchronous_sh(metrics, ladder)]


def test_sync_sh_examples():
    ladder3 = compute_ladder(1, 8, 2)  # milestones 1,2,4,8
    assert _counts(8, ladder3) == [8, 4, 2, 1]
    assert _counts(5, ladder3) == [5, 3, 2, 1]
    assert _counts(1, ladder3) == [1, 1, 1, 1]


def test_sync_sh_off_ladder_max_t_adds_final_set():
    ladder = compute_ladder(5, 37, 2)
    out = simulate_synchronous_sh([[0.1, 0.2, 0.3]] * 4, ladder)
    assert [len(s) for s in out] == [4, 2, 1, 1]


def test_sync_sh_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        simulate_synchronous_sh([[0.1, 0.2]], LADDER)


# -- properties ----------------------------------------------------------------

reports = st.lists(
    st.tuples(st.integers(0, 15), st.floats(0, 1, allow_nan=False)), min_size=1, max_size=80
)


def _drive(policy, seq, ladder=LADDER, base=2):
    """Feed a sequence of (trial, metric) pairs; each trial advances to its next milestone."""
    s = make(policy, ladder=ladder, base=base, n=16)
    nxt = {i: 0 for i in range(16)}
    out = []
    for tid, metric in seq:
        if tid not in s.active:
            continue
        it = ladder.milestones[nxt[tid]]
        out.append((tid, it, s.on_result(res(tid, it, metric))))
        nxt[tid] += 1
    return s, out


@given(reports)
def test_asha_and_rasda_stop_the_same_trials(seq):
    sa, da = _drive("asha", seq)
    sr, dr = _drive("rasda", seq)
    assert sa.stopped_at == sr.stopped_at
    assert [(t, i, d.stops) for t, i, d in da] == [(t, i, d.stops) for t, i, d in dr]
    for (_, _, a), (_, _, r) in zip(da, dr):
        if not a.stops:
            assert a.action is Action.CONTINUE
            assert r.action in (Action.CONTINUE_WITH_RESOURCES, Action.CONTINUE)


@given(reports)
def test_replay_determinism(seq):
    _, a = _drive("rasda", seq)
    _, b = _drive("rasda", seq)
    assert [(t, i, d) for t, i, d in a] == [(t, i, d) for t, i, d in b]


@given(reports)
def test_every_stop_is_justified_when_it_happens(seq):
    """A stop at rung r is issued only if the reporter ranks below the top
    ceil(k/rf) of the k entries recorded so far; the first reporter always
    survives."""
    s = make("asha", n=16)
    nxt = {i: 0 for i in range(16)}
    for tid, metric in seq:
        if tid not in s.active:
            continue
        it = LADDER.milestones[nxt[tid]]
        rung = LADDER.rung_of(it)
        d = s.on_result(res(tid, it, metric))
        nxt[tid] += 1
        k = len(s.rungs[rung])
        if it == LADDER.max_t:
            assert d.completed
        elif k == 1:
            assert not d.stops
        else:
            rank = s.rungs[rung].rank_of(tid, MetricMode.MIN)
            assert d.stops == (rank > math.ceil(k / LADDER.rf))


def test_under_termination_happens():
    """Improving metrics in arrival order promote everyone at the rung."""
    s = make("asha", n=6)
    decisions = [s.on_result(res(i, 5, 1.0 - 0.1 * i)) for i in range(6)]
    assert not any(d.stops for d in decisions)


def test_rolling_rule_can_exceed_the_synchronous_stop_share():
    """Worsening metrics in arrival order stop every reporter after the first."""
    s = make("asha", n=3)
    decisions = [s.on_result(res(i, 5, 0.1 * i)) for i in range(3)]
    assert [d.stops for d in decisions] == [False, True, True]
    n = 3
    assert sum(d.stops for d in decisions) > n - math.ceil(n / 2)


@given(reports)
def test_resource_monotonicity(seq):
    _, out = _drive("rasda", seq)
    held = {}
    for tid, it, d in out:
        if d.action is Action.CONTINUE_WITH_RESOURCES:
            r = LADDER.rung_of(it)
            assert d.workers == 2 * 2 ** min(r + 1, LADDER.num_rungs)
            assert d.workers >= held.get(tid, 2)
            held[tid] = d.workers


def _round_robin_survivors(metrics, ladder, rf_ladder=None):
    """Deliver every rung in trial-id order; collect who reaches each milestone."""
    n = len(metrics)
    s = Scheduler(SchedulerConfig("asha", ladder, 1))
    for i in range(n):
        s.add_trial(i)
    reached = []
    alive = list(range(n))
    for k, m in enumerate(ladder.milestones):
        reached.append(frozenset(alive))
        nxt = []
        for i in alive:
            if not s.on_result(res(i, m, metrics[i][k])).stops:
                nxt.append(i)
        alive = nxt
    if ladder.milestones[-1] < ladder.max_t:
        reached.append(frozenset(alive))
    return reached


def test_round_robin_two_trial_counterexample():
    """A better trial that reports second cannot evict an earlier promotion."""
    ladder = compute_ladder(1, 2, 2)
    metrics = [[0.5, 0.0], [0.7, 0.0], [0.6, 0.0], [0.1, 0.0]]
    sync = simulate_synchronous_sh(metrics, ladder)
    rolling = _round_robin_survivors(metrics, ladder)
    assert sync[1] == {0, 3}
    assert rolling[1] == {0, 2, 3}

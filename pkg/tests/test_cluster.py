import math

import pytest
from hypothesis import given, strategies as st

from rasda.cluster import (
    CheckpointModel,
    Cluster,
    ConservationError,
    GrantRequest,
    InfeasibleAllocation,
    RuntimeModel,
    epoch_time,
    grant_resources,
)


def test_epoch_time_examples():
    m = RuntimeModel(100, 1.0, fixed_overhead=1.0, comm_coeff=0.0)
    assert epoch_time(m, 4) == 26.0
    m = RuntimeModel(100, 1.0, fixed_overhead=3.0, comm_coeff=7.5)
    assert epoch_time(m, 1) == 103.0
    with pytest.raises(ValueError):
        epoch_time(m, 0)


@given(
    d=st.floats(1, 1e7),
    r=st.floats(1e-6, 1),
    c0=st.floats(0, 1000),
    c1=st.floats(0, 100),
    k=st.integers(0, 12),
)
def test_doubling_workers_halves_compute(d, r, c0, c1, k):
    m = RuntimeModel(d, r, c0, c1)
    n = 2**k
    lhs = m.epoch_time(2 * n) - c0 - c1 * math.log2(2 * n)
    rhs = (m.epoch_time(n) - c0 - c1 * math.log2(n)) / 2
    assert math.isclose(lhs, rhs, rel_tol=1e-9, abs_tol=1e-9 * (c0 + c1 * 13 + d * r))
    assert m.epoch_time(n) > 0


def test_runtime_validation():
    with pytest.raises(ValueError):
        RuntimeModel(-1, 1.0)
    with pytest.raises(ValueError):
        RuntimeModel(0, 1.0, 0.0)
    with pytest.raises(ValueError):
        RuntimeModel(1, 1.0, trial_spread=2.0)
    with pytest.raises(ValueError):
        CheckpointModel(every=0)
    with pytest.raises(ValueError):
        CheckpointModel(cost=-1)


def test_trial_scale():
    flat = RuntimeModel(10, 1.0)
    assert flat.trial_scale('{"lr":0.1}') == 1.0
    spread = RuntimeModel(10, 1.0, trial_spread=0.5)
    scales = [spread.trial_scale(f'{{"lr":{i}}}') for i in range(200)]
    assert all(0.75 <= s <= 1.25 for s in scales)
    assert len(set(scales)) == 200
    assert spread.trial_scale('{"lr":3}') == scales[3]
    assert spread.epoch_time(2, 1.2) == 10 * 1.0 * 1.2 / 2


def test_immediate_grant():
    c = Cluster(4)
    assert grant_resources(c, GrantRequest(0, 4))
    assert c.free_workers == 0


def test_priority_fills_deeper_rung_first():
    c = Cluster(6)
    c.allocate(9, 4)  # leaves 2 free
    assert not grant_resources(c, GrantRequest(1, 4, rung=2, seq=1))
    assert grant_resources(c, GrantRequest(2, 2, rung=1, seq=2))  # fits now
    c = Cluster(6)
    c.allocate(9, 2)
    c.allocate(8, 2)
    c.allocate(7, 2)
    c.enqueue(GrantRequest(2, 2, rung=1, seq=1))
    c.enqueue(GrantRequest(1, 4, rung=2, seq=2))
    c.release(9)
    assert c.drain() == []  # head (rung 2, needs 4) blocks
    c.release(8)
    filled = c.drain()
    assert [r.trial_id for r in filled] == [1]
    assert c.free_workers == 0


def test_queue_order_metric_then_fifo():
    reqs = [
        GrantRequest(0, 1, rung=1, metric_key=0.5, seq=1),
        GrantRequest(1, 1, rung=1, metric_key=0.2, seq=2),
        GrantRequest(2, 1, rung=1, metric_key=0.2, seq=3),
        GrantRequest(3, 1, rung=3, metric_key=0.9, seq=4),
        GrantRequest(4, 1, rung=-1, seq=0),
    ]
    c = Cluster(1)
    c.allocate(99, 1)
    for r in reqs:
        c.enqueue(r)
    assert [r.trial_id for r in c.pending_grants] == [3, 1, 2, 0, 4]


def test_all_released_means_all_free():
    c = Cluster(8)
    for i in range(4):
        grant_resources(c, GrantRequest(i, 2))
    for i in range(4):
        c.release(i)
    assert c.free_workers == c.total_workers


def test_conservation_errors():
    c = Cluster(2)
    with pytest.raises(ConservationError):
        c.allocate(0, 3)
    c.allocate(0, 1)
    with pytest.raises(ConservationError):
        c.allocate(0, 1)
    c.free_workers = 5
    with pytest.raises(ConservationError):
        c.check()
    with pytest.raises(InfeasibleAllocation):
        grant_resources(Cluster(2), GrantRequest(0, 3))


@given(st.lists(st.tuples(st.integers(0, 9), st.integers(1, 8), st.booleans()), max_size=60))
def test_random_grant_release_conserves(ops):
    c = Cluster(16)
    for tid, w, release in ops:
        if release or tid in c.allocations or any(r.trial_id == tid for r in c.pending_grants):
            c.release(tid)
            c.drain()
        else:
            grant_resources(c, GrantRequest(tid, w, seq=len(ops)))
        assert sum(c.allocations.values()) + c.free_workers == 16
        assert 0 <= c.free_workers <= 16

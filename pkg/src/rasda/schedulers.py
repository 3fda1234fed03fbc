"""Asynchronous successive halving (ASHA) and its resource-doubling variant.

Both policies share one promotion rule; RASDA additionally attaches the
worker count of the next rung to every promotion. Schedulers are plain state
machines: feed them results in delivery order and they return verdicts,
without knowing anything about the backend that produced the results.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Set, Tuple

from rasda.core import RungLadder, TrialResult, new_resources


class SchedulerError(RuntimeError):
    pass


class UnknownTrial(SchedulerError):
    pass


class DuplicateReport(SchedulerError):
    pass


class TrialNotActive(SchedulerError):
    pass


class ShapeMismatch(ValueError):
    pass


class Policy(str, enum.Enum):
    ASHA = "asha"
    RASDA = "rasda"


class MetricMode(str, enum.Enum):
    MIN = "min"
    MAX = "max"

    def key(self, metric: float) -> float:
        """Sort key where smaller is better; NaN is worst."""
        if math.isnan(metric):
            return math.inf
        return metric if self is MetricMode.MIN else -metric

    def better(self, a: float, b: float) -> bool:
        return self.key(a) < self.key(b)


class Action(str, enum.Enum):
    CONTINUE = "continue"
    STOP = "stop"
    CONTINUE_WITH_RESOURCES = "continue_with_resources"


@dataclass(frozen=True)
class SchedulerDecision:
    action: Action
    workers: Optional[int] = None
    completed: bool = False
    rung: Optional[int] = None

    @classmethod
    def cont(cls, rung: Optional[int] = None) -> "SchedulerDecision":
        return cls(Action.CONTINUE, rung=rung)

    @classmethod
    def stop(cls, completed: bool = False, rung: Optional[int] = None) -> "SchedulerDecision":
        return cls(Action.STOP, completed=completed, rung=rung)

    @classmethod
    def grow(cls, workers: int, rung: int) -> "SchedulerDecision":
        return cls(Action.CONTINUE_WITH_RESOURCES, workers=workers, rung=rung)

    @property
    def stops(self) -> bool:
        return self.action is Action.STOP

    def to_dict(self) -> dict:
        d = {"action": self.action.value, "completed": self.completed, "rung": self.rung}
        if self.workers is not None:
            d["workers"] = self.workers
        return d


@dataclass(frozen=True)
class SchedulerConfig:
    policy: Policy
    ladder: RungLadder
    base_resources: int = 1
    metric_mode: MetricMode = MetricMode.MIN

    def __post_init__(self):
        object.__setattr__(self, "policy", Policy(self.policy))
        object.__setattr__(self, "metric_mode", MetricMode(self.metric_mode))
        if self.base_resources < 1:
            raise ValueError(f"base_resources must be >= 1, got {self.base_resources}")

    def workers_after_rung(self, rung: int) -> int:
        """Allocation granted to a trial promoted out of ``rung``.

        Promotion at rung r funds the stretch up to milestone r+1; survivors
        of the final milestone keep the last level until max_t.
        """
        level = min(rung + 1, self.ladder.num_rungs)
        return new_resources(self.base_resources, self.ladder.sf, level)


@dataclass
class RungRecord:
    rung_index: int
    entries: List[Tuple[int, float, int]] = field(default_factory=list)

    def add(self, trial_id: int, metric: float, report_order: int) -> None:
        if self.entries and report_order <= self.entries[-1][2]:
            raise SchedulerError("report_order must be strictly increasing")
        if any(tid == trial_id for tid, _, _ in self.entries):
            raise DuplicateReport(f"trial {trial_id} already recorded at rung {self.rung_index}")
        self.entries.append((trial_id, metric, report_order))

    def rank_of(self, trial_id: int, mode: MetricMode) -> int:
        """1-based rank with ties going to the earlier report, then lower id."""
        ordered = sorted(self.entries, key=lambda e: (mode.key(e[1]), e[2], e[0]))
        for i, (tid, _, _) in enumerate(ordered):
            if tid == trial_id:
                return i + 1
        raise UnknownTrial(trial_id)

    def __len__(self) -> int:
        return len(self.entries)


class Scheduler:
    """Single-threaded ASHA/RASDA decision state machine.

    Example:
        >>> from rasda.core import compute_ladder
        >>> s = Scheduler(SchedulerConfig("rasda", compute_ladder(5, 40, 2), 2))
        >>> s.add_trial(0)
        >>> s.on_result(TrialResult(0, 5, 0.3, 10.0, 256)).workers
        4
    """

    def __init__(self, config: SchedulerConfig):
        self.config = config
        self.ladder = config.ladder
        self.rungs = [RungRecord(i) for i in range(len(self.ladder.milestones))]
        self._order = 0
        self._active: Set[int] = set()
        self._finished: Set[int] = set()
        self._reported: Set[Tuple[int, int]] = set()
        self.workers: Dict[int, int] = {}
        self.stopped_at: Dict[int, int] = {}

    def add_trial(self, trial_id: int) -> None:
        if trial_id in self._active or trial_id in self._finished:
            raise SchedulerError(f"trial {trial_id} already registered")
        self._active.add(trial_id)
        self.workers[trial_id] = self.config.base_resources

    @property
    def active(self) -> Set[int]:
        return set(self._active)

    def on_result(self, result: TrialResult) -> SchedulerDecision:
        tid = result.trial_id
        if tid in self._finished:
            raise TrialNotActive(f"trial {tid} already stopped")
        if tid not in self._active:
            raise UnknownTrial(f"trial {tid} was never added")
        it = result.training_iteration
        if it > self.ladder.max_t:
            raise ValueError(f"iteration {it} beyond max_t={self.ladder.max_t}")

        rung = self.ladder.rung_of(it)
        if rung is not None:
            if (tid, it) in self._reported:
                raise DuplicateReport(f"trial {tid} reported milestone {it} twice")
            self._reported.add((tid, it))
            self._order += 1
            self.rungs[rung].add(tid, result.metric, self._order)

        if it == self.ladder.max_t:
            return self._finish(tid, SchedulerDecision.stop(completed=True, rung=rung))
        if rung is None:
            return SchedulerDecision.cont()

        record = self.rungs[rung]
        cutoff = math.ceil(len(record) / self.ladder.rf)
        if record.rank_of(tid, self.config.metric_mode) > cutoff:
            return self._finish(tid, SchedulerDecision.stop(rung=rung))
        if self.config.policy is Policy.ASHA:
            return SchedulerDecision.cont(rung=rung)
        workers = self.config.workers_after_rung(rung)
        self.workers[tid] = max(self.workers[tid], workers)
        return SchedulerDecision.grow(workers, rung)

    def on_error(self, trial_id: int) -> SchedulerDecision:
        """A trial whose training failed (e.g. diverged) is stopped at once."""
        if trial_id not in self._active:
            raise UnknownTrial(f"trial {trial_id} is not active")
        return self._finish(trial_id, SchedulerDecision.stop())

    def _finish(self, tid: int, decision: SchedulerDecision) -> SchedulerDecision:
        self._active.discard(tid)
        self._finished.add(tid)
        if not decision.completed:
            self.stopped_at[tid] = decision.rung
        return decision


def simulate_synchronous_sh(
    metrics_per_trial: Sequence[Sequence[Optional[float]]],
    ladder: RungLadder,
    metric_mode: MetricMode = MetricMode.MIN,
) -> List[frozenset]:
    """Classical barrier-synchronised successive halving, used as a reference.

    ``metrics_per_trial[i][k]`` is trial i's metric at milestone k (``None``
    where the trial never gets that far). Returns the set of trial indices
    reaching each milestone; if max_t lies beyond the last milestone, one
    more set lists the trials that train on to max_t.
    """
    mode = MetricMode(metric_mode)
    n_ms = len(ladder.milestones)
    for i, row in enumerate(metrics_per_trial):
        if len(row) != n_ms:
            raise ShapeMismatch(f"trial {i}: {len(row)} metrics for {n_ms} milestones")
    alive = list(range(len(metrics_per_trial)))
    survivors = []
    halving_points = n_ms if ladder.milestones[-1] < ladder.max_t else n_ms - 1
    for k in range(n_ms):
        survivors.append(frozenset(alive))
        if k >= halving_points:
            break
        scored = []
        for i in alive:
            m = metrics_per_trial[i][k]
            if m is None:
                raise ShapeMismatch(f"trial {i} reaches milestone {k} without a metric")
            scored.append((mode.key(float(m)), i))
        scored.sort()
        keep = math.ceil(len(scored) / ladder.rf)
        alive = sorted(i for _, i in scored[:keep])
    if halving_points == n_ms:
        survivors.append(frozenset(alive))
    return survivors

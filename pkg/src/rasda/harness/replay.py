"""Offline re-validation of a simulator event log.

The log is replayed event by event against independent bookkeeping: a fresh
scheduler re-derives every decision from the recorded metrics, worker
holdings are re-accumulated from allocation events, and epoch timestamps are
recomputed from the runtime and checkpoint models found in ``RunStarted``.
The first mismatch is reported by invariant name.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional

from rasda.cluster import CheckpointModel, RuntimeModel
from rasda.core import RungLadder, TrialResult, compute_ladder, new_resources
from rasda.schedulers import Action, MetricMode, Policy, Scheduler, SchedulerConfig, SchedulerError

# Invariant names, in the order a reader would check them.
SCHEMA = "schema"
TIME_ORDER = "time-order"
CAUSALITY = "causality"
CONSERVATION = "conservation"
DECISION = "decision"
RESOURCE_ARITHMETIC = "resource-arithmetic"
TIMING = "timing"


class ReplayViolation(Exception):
    def __init__(self, invariant: str, line: int, message: str):
        super().__init__(f"{invariant} violated at line {line}: {message}")
        self.invariant = invariant
        self.line = line
        self.message = message


@dataclass
class ReplayVerdict:
    ok: bool
    events: int
    invariant: Optional[str] = None
    line: Optional[int] = None
    message: str = ""

    def __str__(self) -> str:
        if self.ok:
            return f"OK: {self.events} events, all invariants hold"
        return f"FAIL [{self.invariant}] line {self.line}: {self.message}"


@dataclass
class _TrialView:
    phase: str = "running"
    workers: int = 0
    epoch: int = 0
    epoch_start: float = 0.0
    last_epoch_t: float = 0.0
    pending_result: Optional[tuple] = None
    last_decision: Optional[dict] = None
    granted: int = 0
    cost_scale: float = 1.0


def _close(a: float, b: float) -> bool:
    return math.isclose(a, b, rel_tol=1e-9, abs_tol=1e-9)


class _Replayer:
    def __init__(self):
        self.line = 0
        self.last_t = -math.inf
        self.started = False
        self.finished = False
        self.trials: Dict[int, _TrialView] = {}
        self.done: set = set()
        self.total = 0
        self.base = 1
        self.lbs = 1
        self.ladder: Optional[RungLadder] = None
        self.scheduler: Optional[Scheduler] = None
        self.runtime: Optional[RuntimeModel] = None
        self.ckpt: Optional[CheckpointModel] = None
        self.num_trials = 0

    def fail(self, invariant: str, message: str):
        raise ReplayViolation(invariant, self.line, message)

    def require(self, cond: bool, invariant: str, message: str) -> None:
        if not cond:
            self.fail(invariant, message)

    # -- helpers -----------------------------------------------------------

    def held(self) -> int:
        return sum(v.workers for v in self.trials.values())

    def check_free(self, data: dict) -> None:
        free = data.get("free")
        self.require(isinstance(free, int), SCHEMA, "missing integer 'free'")
        held = self.held()
        self.require(
            0 <= free <= self.total and held + free == self.total,
            CONSERVATION,
            f"{held} held + {free} free != {self.total} total",
        )

    def view(self, tid, kind: str) -> _TrialView:
        self.require(isinstance(tid, int), SCHEMA, f"{kind} needs an integer trial id")
        self.require(tid not in self.done, CAUSALITY, f"{kind} for trial {tid} after it finished")
        self.require(tid in self.trials, CAUSALITY, f"{kind} for trial {tid} before TrialStarted")
        return self.trials[tid]

    def expect_phase(self, v: _TrialView, tid: int, kind: str, *phases: str) -> None:
        self.require(v.phase in phases, CAUSALITY, f"{kind} for trial {tid} while {v.phase}")

    def capped(self, workers: int) -> int:
        return min(workers, self.total)

    def epoch_time(self, v: _TrialView, workers: int) -> float:
        return self.runtime.epoch_time(workers, v.cost_scale)

    # -- event handlers ----------------------------------------------------

    def feed(self, raw: str) -> None:
        self.line += 1
        try:
            ev = json.loads(raw)
        except json.JSONDecodeError as exc:
            self.fail(SCHEMA, f"not valid JSON ({exc})")
        self.require(
            isinstance(ev, dict) and set(ev) == {"t", "kind", "trial", "data"},
            SCHEMA,
            "event must have exactly t, kind, trial, data",
        )
        t, kind, tid, data = ev["t"], ev["kind"], ev["trial"], ev["data"]
        self.require(isinstance(t, (int, float)) and not isinstance(t, bool) and math.isfinite(t),
                     SCHEMA, "t must be a finite number")
        self.require(isinstance(data, dict), SCHEMA, "data must be an object")
        self.require(t >= self.last_t, TIME_ORDER, f"t={t} after t={self.last_t}")
        self.last_t = t
        self.require(not self.finished, CAUSALITY, f"{kind} after RunFinished")
        handler = getattr(self, "on_" + str(kind), None)
        self.require(handler is not None, SCHEMA, f"unknown event kind {kind!r}")
        if kind != "RunStarted":
            self.require(self.started, CAUSALITY, f"{kind} before RunStarted")
        try:
            handler(float(t), tid, data)
        except ReplayViolation:
            raise
        except SchedulerError as exc:
            self.fail(DECISION, f"scheduler rejects {kind}: {exc}")
        except (KeyError, TypeError, ValueError, AttributeError) as exc:
            self.fail(SCHEMA, f"bad {kind} payload: {exc!r}")

    def on_RunStarted(self, t, tid, d):
        self.require(not self.started, CAUSALITY, "second RunStarted")
        self.started = True
        lad = d["ladder"]
        self.ladder = compute_ladder(lad["min_t"], lad["max_t"], lad["sf"], lad["rf"])
        self.require(list(lad["milestones"]) == list(self.ladder.milestones), CAUSALITY,
                     "recorded milestones disagree with the ladder parameters")
        self.total = int(d["total_workers"])
        self.base = int(d["base_resources"])
        self.lbs = int(d["local_batch_size"])
        self.num_trials = int(d["num_trials"])
        self.runtime = RuntimeModel(**d["runtime"])
        self.ckpt = CheckpointModel(**d["checkpoint"])
        self.scheduler = Scheduler(
            SchedulerConfig(Policy(d["policy"]), self.ladder, self.base, MetricMode(d["metric_mode"]))
        )

    def on_TrialStarted(self, t, tid, d):
        self.require(isinstance(tid, int), SCHEMA, "TrialStarted needs an integer trial id")
        self.require(tid not in self.trials and tid not in self.done, CAUSALITY,
                     f"trial {tid} started twice")
        workers = int(d["workers"])
        self.require(workers == self.base, RESOURCE_ARITHMETIC,
                     f"trial {tid} started on {workers} workers, base is {self.base}")
        v = _TrialView(workers=workers, epoch_start=t, cost_scale=float(d.get("cost_scale", 1.0)))
        self.require(
            _close(v.cost_scale, self.runtime.trial_scale(_canonical(d["config"]))),
            TIMING, f"trial {tid} cost_scale does not match its configuration",
        )
        self.trials[tid] = v
        self.scheduler.add_trial(tid)
        self.check_free(d)

    def on_EpochCompleted(self, t, tid, d):
        v = self.view(tid, "EpochCompleted")
        self.expect_phase(v, tid, "EpochCompleted", "running")
        epoch, workers, bs = int(d["epoch"]), int(d["workers"]), int(d["global_batch_size"])
        self.require(epoch == v.epoch + 1, CAUSALITY, f"trial {tid} epoch {epoch} follows {v.epoch}")
        self.require(workers == v.workers, CONSERVATION,
                     f"trial {tid} trained on {workers} workers while holding {v.workers}")
        self.require(bs == self.lbs * workers, RESOURCE_ARITHMETIC,
                     f"global batch {bs} != {self.lbs} x {workers}")
        expected = v.epoch_start + self.epoch_time(v, workers)
        self.require(_close(t, expected), TIMING, f"trial {tid} epoch {epoch} ended at {t}, model says {expected}")
        v.epoch = epoch
        v.last_epoch_t = t
        checkpoint = epoch % self.ckpt.every == 0 or epoch in self.ladder.milestones
        v.phase = "checkpointing" if checkpoint else "reporting"

    def on_CheckpointSaved(self, t, tid, d):
        v = self.view(tid, "CheckpointSaved")
        self.expect_phase(v, tid, "CheckpointSaved", "checkpointing")
        self.require(int(d["epoch"]) == v.epoch, CAUSALITY, "checkpoint for the wrong epoch")
        expected = v.last_epoch_t + self.ckpt.cost
        self.require(_close(t, expected), TIMING, f"checkpoint at {t}, model says {expected}")
        v.phase = "reporting"

    def on_ResultReported(self, t, tid, d):
        v = self.view(tid, "ResultReported")
        self.expect_phase(v, tid, "ResultReported", "reporting")
        epoch = int(d["epoch"])
        self.require(epoch == v.epoch, CAUSALITY, f"result for epoch {epoch}, last epoch was {v.epoch}")
        self.require(int(d["global_batch_size"]) == self.lbs * v.workers, RESOURCE_ARITHMETIC,
                     "reported global batch does not match the allocation")
        checkpoint = epoch % self.ckpt.every == 0 or epoch in self.ladder.milestones
        expected = v.last_epoch_t + (self.ckpt.cost if checkpoint else 0.0)
        self.require(_close(t, expected), TIMING, f"result at {t}, expected {expected}")
        metric = d["metric"]
        diverged = bool(d["diverged"])
        self.require(diverged == (metric is None), SCHEMA, "diverged flag disagrees with metric")
        if diverged:
            expected_decision = self.scheduler.on_error(tid)
        else:
            expected_decision = self.scheduler.on_result(
                TrialResult(tid, epoch, float(metric), t, self.lbs * v.workers)
            )
        v.pending_result = (epoch, expected_decision)
        v.phase = "deciding"

    def on_Decision(self, t, tid, d):
        v = self.view(tid, "Decision")
        self.expect_phase(v, tid, "Decision", "deciding")
        epoch, expected = v.pending_result
        self.require(int(d["epoch"]) == epoch, CAUSALITY, "decision for the wrong epoch")
        action = Action(d["action"])
        if action is Action.CONTINUE_WITH_RESOURCES:
            rung = d["rung"]
            self.require(isinstance(rung, int) and 0 <= rung < len(self.ladder.milestones),
                         RESOURCE_ARITHMETIC, f"grow decision with rung {rung!r}")
            want = new_resources(self.base, self.ladder.sf, min(rung + 1, self.ladder.num_rungs))
            self.require(d.get("workers") == want, RESOURCE_ARITHMETIC,
                         f"rung {rung} promotion grants {d.get('workers')}, formula gives {want}")
        self.require(d == {"epoch": epoch, **expected.to_dict()}, DECISION,
                     f"recorded {d}, re-derived {expected.to_dict()}")
        v.last_decision = d
        if action is Action.STOP:
            v.phase = "stopping"
        elif action is Action.CONTINUE_WITH_RESOURCES and self.capped(d["workers"]) != v.workers:
            v.phase = "queueing"
        else:
            v.phase = "running"
            v.epoch_start = t

    def on_GrantQueued(self, t, tid, d):
        v = self.view(tid, "GrantQueued")
        self.expect_phase(v, tid, "GrantQueued", "queueing")
        want = self.capped(v.last_decision["workers"])
        self.require(int(d["requested"]) == want, RESOURCE_ARITHMETIC,
                     f"queued {d['requested']} workers, decision implies {want}")
        self.require(int(d["released"]) == v.workers, CONSERVATION,
                     f"released {d['released']} while holding {v.workers}")
        v.workers = 0
        v.granted = want
        v.phase = "waiting"
        self.check_free(d)

    def on_GrantFilled(self, t, tid, d):
        v = self.view(tid, "GrantFilled")
        self.expect_phase(v, tid, "GrantFilled", "waiting")
        workers = int(d["workers"])
        self.require(workers == v.granted, RESOURCE_ARITHMETIC,
                     f"filled {workers} workers, request was {v.granted}")
        v.workers = workers
        v.phase = "resizing"
        self.check_free(d)

    def on_ResourcesChanged(self, t, tid, d):
        v = self.view(tid, "ResourcesChanged")
        self.expect_phase(v, tid, "ResourcesChanged", "resizing")
        want = self.capped(v.last_decision["workers"])
        self.require(int(d["new"]) == want and int(d["new"]) == v.workers, RESOURCE_ARITHMETIC,
                     f"new={d['new']}, decision implies min({v.last_decision['workers']}, {self.total}) = {want}")
        v.phase = "running"
        v.epoch_start = t + self.ckpt.relaunch_cost

    def _finish(self, t, tid, d, kind, completed):
        v = self.view(tid, kind)
        self.expect_phase(v, tid, kind, "stopping")
        self.require(bool(v.last_decision["completed"]) == completed, CAUSALITY,
                     f"{kind} after a decision with completed={v.last_decision['completed']}")
        self.require(int(d["released"]) == v.workers, CONSERVATION,
                     f"released {d['released']} while holding {v.workers}")
        v.workers = 0
        del self.trials[tid]
        self.done.add(tid)
        self.check_free(d)

    def on_TrialTerminated(self, t, tid, d):
        self._finish(t, tid, d, "TrialTerminated", False)

    def on_TrialCompleted(self, t, tid, d):
        self._finish(t, tid, d, "TrialCompleted", True)

    def on_RunFinished(self, t, tid, d):
        self.require(not self.trials, CAUSALITY, f"run finished with live trials {sorted(self.trials)}")
        self.require(len(self.done) == self.num_trials, CAUSALITY,
                     f"{len(self.done)} of {self.num_trials} trials finished")
        self.require(_close(float(d["makespan"]), t), TIMING, "makespan differs from the final timestamp")
        self.finished = True


def _canonical(config: dict) -> str:
    return json.dumps(config, sort_keys=True, separators=(",", ":"))


def replay_lines(lines: Iterable[str]) -> ReplayVerdict:
    r = _Replayer()
    n = 0
    try:
        for raw in lines:
            if not raw.strip():
                r.line += 1
                continue
            r.feed(raw)
            n += 1
    except ReplayViolation as v:
        return ReplayVerdict(False, n, v.invariant, v.line, v.message)
    return ReplayVerdict(True, n)


def replay_text(text: str) -> ReplayVerdict:
    return replay_lines(text.splitlines())


def replay_file(path) -> ReplayVerdict:
    with open(path, encoding="utf-8") as fh:
        return replay_lines(fh)

"""Discrete-event simulation of an HPO run on a fixed-size worker pool.

Time only moves through the event heap, so a run is a pure function of its
config and seed. Every state change is appended to a :class:`SimEventLog`;
the JSONL dump of that log is what ``rasda replay`` re-validates.
"""

from __future__ import annotations

import dataclasses
import heapq
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from rasda.cluster import (
    Cluster,
    ConservationError,
    GrantRequest,
    InfeasibleAllocation,
    grant_resources,
)
from rasda.core import Configuration, Trial, TrialResult, TrialState, sample_configuration
from rasda.dynamics import CurveParams, advance_curve, curve_params, stable_hash64
from rasda.harness.config import ExperimentConfig
from rasda.schedulers import Action, Policy, Scheduler, SchedulerConfig, SchedulerDecision
from rasda import toy
from rasda.toy import DivergedNaN

logger = logging.getLogger(__name__)

EVENT_KINDS = (
    "RunStarted",
    "TrialStarted",
    "EpochCompleted",
    "CheckpointSaved",
    "ResultReported",
    "Decision",
    "GrantQueued",
    "GrantFilled",
    "ResourcesChanged",
    "TrialTerminated",
    "TrialCompleted",
    "RunFinished",
)


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True)
class Event:
    t: float
    kind: str
    trial: Optional[int]
    data: dict

    def to_json(self) -> str:
        return json.dumps(
            {"t": self.t, "kind": self.kind, "trial": self.trial, "data": self.data},
            sort_keys=True,
            separators=(",", ":"),
            allow_nan=False,
        )


@dataclass
class SimEventLog:
    events: List[Event] = field(default_factory=list)

    def append(self, event: Event) -> None:
        if self.events and event.t < self.events[-1].t:
            raise SimulationError(f"event at t={event.t} after t={self.events[-1].t}")
        self.events.append(event)

    def to_jsonl(self) -> str:
        return "".join(e.to_json() + "\n" for e in self.events)

    def __iter__(self):
        return iter(self.events)

    def __len__(self) -> int:
        return len(self.events)

    def of_kind(self, kind: str) -> List[Event]:
        return [e for e in self.events if e.kind == kind]


@dataclass
class Summary:
    policy: str
    seed: int
    trials: int
    workers: int
    makespan_s: float
    best_metric: float
    total_worker_seconds: float
    best_trial: Optional[int] = None
    completed: List[int] = field(default_factory=list)
    stopped: Dict[int, int] = field(default_factory=dict)
    # trial -> [(epoch, workers, global_batch_size), ...]
    trajectories: Dict[int, List[Tuple[int, int, int]]] = field(default_factory=dict)

    CSV_COLUMNS = ("policy", "seed", "trials", "workers", "makespan_s", "best_metric", "total_worker_seconds")

    def csv_row(self) -> List[str]:
        return [
            self.policy,
            str(self.seed),
            str(self.trials),
            str(self.workers),
            repr(self.makespan_s),
            repr(self.best_metric),
            repr(self.total_worker_seconds),
        ]

    def workers_per_rung(self, trial_id: int, milestones) -> List[int]:
        """Worker count used for the epoch ending at each milestone."""
        by_epoch = {e: w for e, w, _ in self.trajectories[trial_id]}
        return [by_epoch[m] for m in milestones if m in by_epoch]

    def batch_per_rung(self, trial_id: int, milestones) -> List[int]:
        by_epoch = {e: b for e, _, b in self.trajectories[trial_id]}
        return [by_epoch[m] for m in milestones if m in by_epoch]


# --------------------------------------------------------------------------
# Metric backends
# --------------------------------------------------------------------------


class DynamicsBackend:
    """Synthetic learning curves whose progress depends on the global batch."""

    def __init__(self, cfg: ExperimentConfig, seed: int, curves: Optional[Dict[int, CurveParams]] = None):
        self.cfg = cfg
        self.seed = seed
        self.bs_ref = cfg.reference_batch
        self.overrides = curves or {}
        self.curves: Dict[int, CurveParams] = {}
        self.progress: Dict[int, float] = {}
        self.rngs: Dict[int, np.random.Generator] = {}

    def start(self, trial_id: int, config: Configuration, workers: int) -> None:
        curve = self.overrides.get(trial_id)
        if curve is None:
            curve = curve_params(config, self.cfg.space, self.seed, self.cfg.curve)
        self.curves[trial_id] = curve
        self.progress[trial_id] = 0.0
        self.rngs[trial_id] = np.random.default_rng(stable_hash64(self.seed, "noise", trial_id))

    def train_epoch(self, trial_id: int, workers: int, global_batch: int) -> float:
        e, loss = advance_curve(
            self.curves[trial_id],
            self.progress[trial_id],
            global_batch,
            self.cfg.noise,
            self.bs_ref,
            self.rngs[trial_id],
        )
        self.progress[trial_id] = e
        return loss

    def relaunch(self, trial_id: int, workers: int) -> None:
        pass


class ToyBackend:
    """Real data-parallel training of the toy regression problem per trial."""

    def __init__(self, cfg: ExperimentConfig, seed: int):
        self.cfg = cfg
        self.seed = seed
        self.problem = toy.make_problem(cfg.toy, seed)
        self.trainers: Dict[int, "toy.ToyTrainer"] = {}

    def _trainer(self, trial_id: int, config, workers: int):
        return toy.ToyTrainer(
            config,
            self.problem,
            workers=workers,
            local_batch_size=self.cfg.local_batch_size,
            seed=stable_hash64(self.seed, "toy", trial_id) % (2**32),
            momentum=self.cfg.toy.momentum,
        )

    def start(self, trial_id: int, config: Configuration, workers: int) -> None:
        self.trainers[trial_id] = self._trainer(trial_id, config, workers)

    def train_epoch(self, trial_id: int, workers: int, global_batch: int) -> float:
        return self.trainers[trial_id].run_epoch()

    def relaunch(self, trial_id: int, workers: int) -> None:
        old = self.trainers[trial_id]
        fresh = self._trainer(trial_id, old.config, old.workers)
        fresh.restore(old.checkpoint())
        fresh.set_workers(workers)
        self.trainers[trial_id] = fresh


# --------------------------------------------------------------------------
# Simulation
# --------------------------------------------------------------------------


def _metric_or_none(x: float) -> Optional[float]:
    return x if math.isfinite(x) else None


class Simulation:
    def __init__(
        self,
        cfg: ExperimentConfig,
        seed: int,
        policy: Optional[Policy] = None,
        curves: Optional[Dict[int, CurveParams]] = None,
        configs: Optional[List[Configuration]] = None,
    ):
        if policy is None:
            if cfg.policy == "both":
                raise ValueError("config runs both policies; pass one explicitly")
            policy = Policy(cfg.policy)
        self.cfg = cfg
        self.seed = seed
        self.policy = Policy(policy)
        if cfg.base_resources > cfg.total_workers:
            raise InfeasibleAllocation(
                f"base_resources={cfg.base_resources} exceeds total_workers={cfg.total_workers}"
            )
        self.ladder = cfg.ladder
        self.milestones = set(self.ladder.milestones)
        self.scheduler = Scheduler(
            SchedulerConfig(self.policy, cfg.ladder, cfg.base_resources, cfg.metric_mode)
        )
        self.mode = cfg.metric_mode
        self.cluster = Cluster(cfg.total_workers)
        if cfg.backend == "toy":
            self.backend = ToyBackend(cfg, seed)
        else:
            self.backend = DynamicsBackend(cfg, seed, curves)
        if configs is None:
            rng = np.random.default_rng(seed)
            configs = [sample_configuration(cfg.space, rng) for _ in range(cfg.num_trials)]
        if len(configs) != cfg.num_trials:
            raise ValueError(f"{len(configs)} configurations for {cfg.num_trials} trials")
        self.trials: Dict[int, Trial] = {i: Trial(i, c) for i, c in enumerate(configs)}
        self.cost_scale = {i: cfg.runtime.trial_scale(c.canonical()) for i, c in enumerate(configs)}
        self.log = SimEventLog()
        self._heap: List[tuple] = []
        self._seq = 0
        self._req_seq = 0
        self._alloc_since: Dict[int, float] = {}
        self.worker_seconds = 0.0
        self.trajectories: Dict[int, List[Tuple[int, int, int]]] = {i: [] for i in self.trials}
        self.final_metric: Dict[int, float] = {}

    # -- bookkeeping -------------------------------------------------------

    def _emit(self, t: float, kind: str, trial: Optional[int], **data) -> None:
        self.log.append(Event(t, kind, trial, data))
        self._check_conservation()

    def _check_conservation(self) -> None:
        self.cluster.check()
        for tid, trial in self.trials.items():
            held = self.cluster.allocations.get(tid, 0)
            if trial.allocated_workers != held:
                raise ConservationError(
                    f"trial {tid} thinks it holds {trial.allocated_workers}, cluster says {held}"
                )
            if held > self.cluster.total_workers:
                raise ConservationError(f"trial {tid} oversubscribed with {held} workers")

    def _push(self, t: float, action: str, tid: int, payload=None) -> None:
        self._seq += 1
        heapq.heappush(self._heap, (t, self._seq, action, tid, payload))

    def _epoch_time(self, tid: int, workers: int) -> float:
        return self.cfg.runtime.epoch_time(workers, self.cost_scale[tid])

    def _release(self, t: float, tid: int) -> int:
        workers = self.cluster.release(tid)
        self.worker_seconds += workers * (t - self._alloc_since.pop(tid, t))
        return workers

    def _request(self, t: float, tid: int, workers: int, rung: int, metric_key: float) -> None:
        self._req_seq += 1
        req = GrantRequest(tid, workers, rung=rung, metric_key=metric_key, seq=self._req_seq)
        if grant_resources(self.cluster, req):
            self._granted(t, req)

    def _drain(self, t: float) -> None:
        while (req := self.cluster.pop_ready()) is not None:
            self._granted(t, req)

    def _granted(self, t: float, req: GrantRequest) -> None:
        self._alloc_since[req.trial_id] = t
        if req.rung < 0:
            self._start(t, req.trial_id, req.workers)
        else:
            self._resume(t, req.trial_id, req.workers)

    # -- trial lifecycle ---------------------------------------------------

    def _start(self, t: float, tid: int, workers: int) -> None:
        trial = self.trials[tid].transition(TrialState.RUNNING, allocated_workers=workers)
        self.trials[tid] = trial
        self.scheduler.add_trial(tid)
        self.backend.start(tid, trial.config, workers)
        self._emit(t, "TrialStarted", tid, workers=workers, config=trial.config.to_dict(),
                   cost_scale=self.cost_scale[tid], free=self.cluster.free_workers)
        self._push(t + self._epoch_time(tid, workers), "epoch_end", tid)

    def _resume(self, t: float, tid: int, workers: int) -> None:
        trial = self.trials[tid]
        old = self.trajectories[tid][-1][1]
        self.trials[tid] = trial.transition(TrialState.RUNNING, allocated_workers=workers)
        self._emit(t, "GrantFilled", tid, workers=workers, free=self.cluster.free_workers)
        self._emit(t, "ResourcesChanged", tid, old=old, new=workers)
        self.backend.relaunch(tid, workers)
        start = t + self.cfg.checkpoint.relaunch_cost
        self._push(start + self._epoch_time(tid, workers), "epoch_end", tid)

    def _epoch_end(self, t: float, tid: int) -> None:
        trial = self.trials[tid]
        epoch = trial.completed_epochs + 1
        workers = trial.allocated_workers
        bs = self.cfg.local_batch_size * workers
        self.trajectories[tid].append((epoch, workers, bs))
        self._emit(t, "EpochCompleted", tid, epoch=epoch, workers=workers, global_batch_size=bs)
        try:
            metric = self.backend.train_epoch(tid, workers, bs)
        except DivergedNaN as exc:
            logger.info("trial %d diverged at epoch %d: %s", tid, epoch, exc)
            metric = float("nan")
        if not math.isfinite(metric):
            metric = float("nan")
        if epoch % self.cfg.checkpoint.every == 0 or epoch in self.milestones:
            done = t + self.cfg.checkpoint.cost
            self._push(done, "report", tid, (epoch, metric, bs, True))
        else:
            self._report(t, tid, epoch, metric, bs)

    def _report(self, t: float, tid: int, epoch: int, metric: float, bs: int, checkpointed=False) -> None:
        if checkpointed:
            self._emit(t, "CheckpointSaved", tid, epoch=epoch)
        diverged = math.isnan(metric)
        self._emit(t, "ResultReported", tid, epoch=epoch, metric=_metric_or_none(metric),
                   global_batch_size=bs, diverged=diverged)
        result = TrialResult(tid, epoch, metric, t, bs)
        self.trials[tid] = self.trials[tid].record(result)
        if diverged:
            decision = self.scheduler.on_error(tid)
        else:
            decision = self.scheduler.on_result(result)
        self._emit(t, "Decision", tid, epoch=epoch, **decision.to_dict())
        self._apply(t, tid, decision, metric)

    def _apply(self, t: float, tid: int, decision: SchedulerDecision, metric: float) -> None:
        trial = self.trials[tid]
        if decision.stops:
            released = self._release(t, tid)
            state = TrialState.COMPLETED if decision.completed else TrialState.TERMINATED
            self.trials[tid] = trial.transition(state, allocated_workers=0)
            if decision.completed:
                self.final_metric[tid] = metric
            kind = "TrialCompleted" if decision.completed else "TrialTerminated"
            self._emit(t, kind, tid, released=released, free=self.cluster.free_workers)
            self._drain(t)
            return

        next_rung = trial.current_rung
        if decision.rung is not None:
            next_rung = min(decision.rung + 1, self.ladder.num_rungs)
        if decision.action is Action.CONTINUE_WITH_RESOURCES:
            target = decision.workers
            if target > self.cluster.total_workers:
                logger.warning(
                    "trial %d: requested %d workers capped at cluster size %d",
                    tid, target, self.cluster.total_workers,
                )
                target = self.cluster.total_workers
            if target != trial.allocated_workers:
                released = self._release(t, tid)
                self.trials[tid] = trial.transition(
                    TrialState.WAITING, allocated_workers=0, current_rung=next_rung
                )
                self._emit(t, "GrantQueued", tid, requested=target, rung=decision.rung,
                           released=released, free=self.cluster.free_workers)
                self._drain(t)
                self._request(t, tid, target, decision.rung, self.mode.key(metric))
                return
        self.trials[tid] = dataclasses.replace(trial, current_rung=next_rung)
        self._push(t + self._epoch_time(tid, trial.allocated_workers), "epoch_end", tid)

    # -- main loop ---------------------------------------------------------

    def run(self) -> Tuple[SimEventLog, Summary]:
        cfg = self.cfg
        self._emit(
            0.0,
            "RunStarted",
            None,
            policy=self.policy.value,
            seed=self.seed,
            backend=cfg.backend,
            num_trials=cfg.num_trials,
            total_workers=cfg.total_workers,
            base_resources=cfg.base_resources,
            local_batch_size=cfg.local_batch_size,
            metric_mode=cfg.metric_mode.value,
            ladder=cfg.ladder.to_dict(),
            runtime=cfg.runtime.to_dict(),
            checkpoint={
                "every": cfg.checkpoint.every,
                "cost": cfg.checkpoint.cost,
                "relaunch_cost": cfg.checkpoint.relaunch_cost,
            },
        )
        for tid in sorted(self.trials):
            self._request(0.0, tid, cfg.base_resources, -1, 0.0)

        t = 0.0
        while self._heap:
            t, _, action, tid, payload = heapq.heappop(self._heap)
            if action == "epoch_end":
                self._epoch_end(t, tid)
            else:
                epoch, metric, bs, checkpointed = payload
                self._report(t, tid, epoch, metric, bs, checkpointed)

        unfinished = [tid for tid, tr in self.trials.items() if not tr.finished]
        if unfinished:
            raise SimulationError(f"simulation stalled with unfinished trials {unfinished}")
        makespan = self.log.events[-1].t
        self._emit(makespan, "RunFinished", None, makespan=makespan)
        return self.log, self._summary(makespan)

    def _summary(self, makespan: float) -> Summary:
        best_trial, best = None, float("nan")
        for tid in sorted(self.final_metric):
            m = self.final_metric[tid]
            if best_trial is None or self.mode.better(m, best):
                best_trial, best = tid, m
        return Summary(
            policy=self.policy.value,
            seed=self.seed,
            trials=self.cfg.num_trials,
            workers=self.cfg.total_workers,
            makespan_s=makespan,
            best_metric=best,
            total_worker_seconds=self.worker_seconds,
            best_trial=best_trial,
            completed=sorted(self.final_metric),
            stopped=dict(sorted(self.scheduler.stopped_at.items())),
            trajectories=self.trajectories,
        )


def run_simulation(
    cfg: ExperimentConfig,
    seed: int,
    policy: Optional[Policy] = None,
    curves: Optional[Dict[int, CurveParams]] = None,
    configs: Optional[List[Configuration]] = None,
) -> Tuple[SimEventLog, Summary]:
    """Run one (policy, seed) cell to completion."""
    return Simulation(cfg, seed, policy, curves=curves, configs=configs).run()

"""Static worker pool with a prioritised grant queue, plus epoch cost models."""

from __future__ import annotations

import bisect
import dataclasses
import hashlib
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional


class ConservationError(AssertionError):
    pass


class InfeasibleAllocation(ValueError):
    pass


@dataclass(frozen=True)
class RuntimeModel:
    """Seconds per epoch on N workers: ``D*r/N + c0 + c1*log2(N)``.

    ``trial_spread`` models architecture-dependent model size: each trial's
    compute term is scaled by a factor in ``[1 - s/2, 1 + s/2]`` derived
    from a hash of its configuration. The default 0 gives every trial the
    same epoch time.
    """

    dataset_samples: float
    per_sample_time: float
    fixed_overhead: float = 0.0
    comm_coeff: float = 0.0
    trial_spread: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.trial_spread < 2.0:
            raise ValueError(f"trial_spread must be in [0, 2), got {self.trial_spread}")
        for name in ("dataset_samples", "per_sample_time", "fixed_overhead", "comm_coeff"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and >= 0, got {v}")
        if self.dataset_samples * self.per_sample_time + self.fixed_overhead <= 0:
            raise ValueError("epoch_time(1) must be positive")

    def epoch_time(self, n: int, scale: float = 1.0) -> float:
        return epoch_time(self, n, scale)

    def trial_scale(self, config_key: str) -> float:
        """Compute-term multiplier for the configuration with this canonical key."""
        if self.trial_spread == 0.0:
            return 1.0
        digest = hashlib.blake2b(config_key.encode("utf-8"), digest_size=8, person=b"rasda-cost").digest()
        u = int.from_bytes(digest, "big") / 2.0**64
        return 1.0 + self.trial_spread * (u - 0.5)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def epoch_time(model: RuntimeModel, n: int, scale: float = 1.0) -> float:
    if n < 1:
        raise ValueError(f"need at least one worker, got {n}")
    compute = model.dataset_samples * model.per_sample_time * scale / n
    return compute + model.fixed_overhead + model.comm_coeff * math.log2(n)


@dataclass(frozen=True)
class CheckpointModel:
    every: int = 5
    cost: float = 5.0
    relaunch_cost: float = 30.0

    def __post_init__(self):
        if self.every < 1:
            raise ValueError(f"checkpoint interval must be >= 1 epoch, got {self.every}")
        if self.cost < 0 or self.relaunch_cost < 0:
            raise ValueError("checkpoint and relaunch costs must be >= 0")


@dataclass(order=True)
class GrantRequest:
    """A pending allocation. Ordering = queue priority.

    Deeper rungs go first, then the better metric at that rung
    (``metric_key``, smaller is better), then arrival order. Requests to
    start a fresh trial use rung -1.
    """

    priority: tuple = field(init=False, repr=False)
    trial_id: int = field(compare=False)
    workers: int = field(compare=False)
    rung: int = field(compare=False, default=-1)
    metric_key: float = field(compare=False, default=0.0)
    seq: int = field(compare=False, default=0)

    def __post_init__(self):
        if self.workers < 1:
            raise ValueError(f"request for {self.workers} workers")
        self.priority = (-self.rung, self.metric_key, self.seq)


class Cluster:
    """Fixed pool of ``total_workers``; tracks who holds what."""

    def __init__(self, total_workers: int):
        if total_workers < 1:
            raise ValueError(f"total_workers must be >= 1, got {total_workers}")
        self.total_workers = total_workers
        self.free_workers = total_workers
        self.allocations: Dict[int, int] = {}
        self.pending_grants: List[GrantRequest] = []

    def allocate(self, trial_id: int, workers: int) -> None:
        if workers > self.free_workers:
            raise ConservationError(
                f"trial {trial_id} wants {workers} workers, only {self.free_workers} free"
            )
        if trial_id in self.allocations:
            raise ConservationError(f"trial {trial_id} already holds workers")
        self.allocations[trial_id] = workers
        self.free_workers -= workers
        self.check()

    def release(self, trial_id: int) -> int:
        workers = self.allocations.pop(trial_id, 0)
        self.free_workers += workers
        self.check()
        return workers

    def enqueue(self, request: GrantRequest) -> None:
        bisect.insort(self.pending_grants, request)

    def pop_ready(self) -> Optional[GrantRequest]:
        """Allocate and return the head request if it fits, else None."""
        if self.pending_grants and self.pending_grants[0].workers <= self.free_workers:
            req = self.pending_grants.pop(0)
            self.allocate(req.trial_id, req.workers)
            return req
        return None

    def drain(self) -> List[GrantRequest]:
        """Fill queued requests strictly in priority order.

        Stops at the first request that does not fit, so large requests from
        deep rungs are not starved by small ones behind them.
        """
        filled = []
        while (req := self.pop_ready()) is not None:
            filled.append(req)
        return filled

    def check(self) -> None:
        held = sum(self.allocations.values())
        if not 0 <= self.free_workers <= self.total_workers:
            raise ConservationError(f"free workers out of range: {self.free_workers}")
        if held + self.free_workers != self.total_workers:
            raise ConservationError(
                f"{held} held + {self.free_workers} free != {self.total_workers} total"
            )


def grant_resources(cluster: Cluster, request: GrantRequest) -> bool:
    """Allocate now if the request fits, else queue it. Returns True if granted."""
    if request.workers > cluster.total_workers:
        raise InfeasibleAllocation(
            f"trial {request.trial_id} requests {request.workers} of {cluster.total_workers} workers"
        )
    if request.workers <= cluster.free_workers:
        cluster.allocate(request.trial_id, request.workers)
        return True
    cluster.enqueue(request)
    return False

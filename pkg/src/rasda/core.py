"""Shared domain types: search spaces, rung ladders, trials and the resource rule."""

from __future__ import annotations

import dataclasses
import enum
import json
import math
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Mapping, Optional, Sequence, Union

import numpy as np

Scalar = Union[float, int, str]

# Worker counts are exchanged with other tools as signed 64-bit integers.
MAX_WORKERS = 2**63 - 1


class InvalidLadder(ValueError):
    pass


class InvalidSearchSpace(ValueError):
    pass


class ResourceOverflow(OverflowError):
    pass


class InvalidTransition(RuntimeError):
    pass


# --------------------------------------------------------------------------
# Search space
# --------------------------------------------------------------------------


class ParamKind(str, enum.Enum):
    LOG_FLOAT = "logfloat"
    FLOAT = "float"
    INT_CHOICE = "intchoice"
    CATEGORICAL = "categorical"


@dataclass(frozen=True)
class ParamSpec:
    """One hyperparameter dimension.

    ``lo``/``hi`` are used by the two float kinds, ``values`` by the two
    choice kinds.
    """

    name: str
    kind: ParamKind
    lo: Optional[float] = None
    hi: Optional[float] = None
    values: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "kind", ParamKind(self.kind))
        object.__setattr__(self, "values", tuple(self.values))
        if not self.name or not self.name.replace("_", "").isalnum():
            raise InvalidSearchSpace(f"invalid parameter name {self.name!r}")
        if self.kind in (ParamKind.LOG_FLOAT, ParamKind.FLOAT):
            if self.lo is None or self.hi is None:
                raise InvalidSearchSpace(f"{self.name}: float kinds need lo and hi")
            lo, hi = float(self.lo), float(self.hi)
            if not (math.isfinite(lo) and math.isfinite(hi)) or not lo < hi:
                raise InvalidSearchSpace(f"{self.name}: need lo < hi, got {lo}, {hi}")
            if self.kind is ParamKind.LOG_FLOAT and lo <= 0:
                raise InvalidSearchSpace(f"{self.name}: log-scaled range needs lo > 0")
            object.__setattr__(self, "lo", lo)
            object.__setattr__(self, "hi", hi)
        else:
            if not self.values:
                raise InvalidSearchSpace(f"{self.name}: empty choice list")
            if len(set(self.values)) != len(self.values):
                raise InvalidSearchSpace(f"{self.name}: duplicate choices")
            want = int if self.kind is ParamKind.INT_CHOICE else str
            for v in self.values:
                if type(v) is not want:
                    raise InvalidSearchSpace(
                        f"{self.name}: {self.kind.value} values must be {want.__name__}, got {v!r}"
                    )

    @classmethod
    def log_float(cls, name: str, lo: float, hi: float) -> "ParamSpec":
        return cls(name, ParamKind.LOG_FLOAT, lo=lo, hi=hi)

    @classmethod
    def float_range(cls, name: str, lo: float, hi: float) -> "ParamSpec":
        return cls(name, ParamKind.FLOAT, lo=lo, hi=hi)

    @classmethod
    def int_choice(cls, name: str, values: Sequence[int]) -> "ParamSpec":
        return cls(name, ParamKind.INT_CHOICE, values=tuple(values))

    @classmethod
    def categorical(cls, name: str, values: Sequence[str]) -> "ParamSpec":
        return cls(name, ParamKind.CATEGORICAL, values=tuple(values))

    def contains(self, value: Scalar) -> bool:
        if self.kind in (ParamKind.LOG_FLOAT, ParamKind.FLOAT):
            return isinstance(value, float) and self.lo <= value <= self.hi
        return value in self.values and type(value) is type(self.values[0])

    def sample(self, rng: np.random.Generator) -> Scalar:
        if self.kind is ParamKind.LOG_FLOAT:
            exponent = rng.uniform(math.log(self.lo), math.log(self.hi))
            # exp() can round just outside the interval
            return float(min(max(math.exp(exponent), self.lo), self.hi))
        if self.kind is ParamKind.FLOAT:
            return float(rng.uniform(self.lo, self.hi))
        return self.values[int(rng.integers(len(self.values)))]

    def to_dict(self) -> dict:
        if self.kind in (ParamKind.LOG_FLOAT, ParamKind.FLOAT):
            return {"name": self.name, "kind": self.kind.value, "lo": self.lo, "hi": self.hi}
        return {"name": self.name, "kind": self.kind.value, "values": list(self.values)}


def validate_space(space: Sequence[ParamSpec]) -> None:
    names = [p.name for p in space]
    if len(set(names)) != len(names):
        raise InvalidSearchSpace(f"duplicate parameter names in {names}")


@dataclass(frozen=True)
class Configuration:
    """A sampled point of the search space (name -> float | int | str)."""

    values: Mapping[str, Scalar]

    def __post_init__(self):
        object.__setattr__(self, "values", MappingProxyType(dict(sorted(self.values.items()))))

    def __getitem__(self, name: str) -> Scalar:
        return self.values[name]

    def get(self, name: str, default=None):
        return self.values.get(name, default)

    def to_dict(self) -> dict:
        return dict(self.values)

    def canonical(self) -> str:
        """Stable text form; floats use ``repr`` so they round-trip exactly."""
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def check(self, space: Sequence[ParamSpec]) -> None:
        names = {p.name for p in space}
        if set(self.values) != names:
            raise InvalidSearchSpace(
                f"configuration keys {sorted(self.values)} do not match space {sorted(names)}"
            )
        for p in space:
            if not p.contains(self.values[p.name]):
                raise InvalidSearchSpace(f"{p.name}={self.values[p.name]!r} outside its domain")


def sample_configuration(space: Sequence[ParamSpec], rng: np.random.Generator) -> Configuration:
    """Draw one configuration: log-uniform, uniform, or uniform over choices."""
    validate_space(space)
    return Configuration({p.name: p.sample(rng) for p in space})


# --------------------------------------------------------------------------
# Rung ladder and resource doubling
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class RungLadder:
    min_t: int
    max_t: int
    sf: int
    rf: int
    milestones: tuple

    @property
    def num_rungs(self) -> int:
        return len(self.milestones) - 1

    def rung_of(self, epoch: int) -> Optional[int]:
        """Index of ``epoch`` in the milestone list, or None off-ladder."""
        try:
            return self.milestones.index(epoch)
        except ValueError:
            return None

    def to_dict(self) -> dict:
        return {
            "min_t": self.min_t,
            "max_t": self.max_t,
            "sf": self.sf,
            "rf": self.rf,
            "milestones": list(self.milestones),
        }


def _is_int(x) -> bool:
    return isinstance(x, (int, np.integer)) and not isinstance(x, bool)


def compute_ladder(min_t: int, max_t: int, sf: int, rf: int = 2) -> RungLadder:
    """Geometric milestones ``min_t * sf**k`` for k = 0..num_rungs.

    ``num_rungs = floor(log(max_t / min_t) / log(sf))``, evaluated in exact
    integer arithmetic so that e.g. (5, 40, 2) never loses the 40 to rounding.
    """
    for label, v in (("min_t", min_t), ("max_t", max_t), ("sf", sf), ("rf", rf)):
        if not _is_int(v):
            raise InvalidLadder(f"{label} must be an integer, got {v!r}")
    min_t, max_t, sf, rf = int(min_t), int(max_t), int(sf), int(rf)
    if min_t < 1:
        raise InvalidLadder(f"min_t must be >= 1, got {min_t}")
    if min_t > max_t:
        raise InvalidLadder(f"min_t={min_t} exceeds max_t={max_t}")
    if sf < 2:
        raise InvalidLadder(f"scaling factor must be >= 2, got {sf}")
    if rf < 2:
        raise InvalidLadder(f"reduction factor must be >= 2, got {rf}")
    milestones = [min_t]
    while milestones[-1] * sf <= max_t:
        milestones.append(milestones[-1] * sf)
    return RungLadder(min_t, max_t, sf, rf, tuple(milestones))


def new_resources(base_resources: int, sf: int, current_rung: int) -> int:
    if base_resources < 1:
        raise ValueError(f"base_resources must be >= 1, got {base_resources}")
    if current_rung < 0:
        raise ValueError(f"current_rung must be >= 0, got {current_rung}")
    workers = int(base_resources) * int(sf) ** int(current_rung)
    if workers > MAX_WORKERS:
        raise ResourceOverflow(f"{base_resources} * {sf}**{current_rung} overflows int64")
    return workers


def rasda_resource_decision(
    result: "TrialResult", base_resources: int, sf: int, milestones: Sequence[int]
) -> Optional[int]:
    """Resource rule evaluated literally: scale by ``sf`` to the power of the
    reported milestone's index; None when the iteration is not a milestone.

    The scheduler grants the *next* rung's allocation instead, see
    :meth:`rasda.schedulers.Scheduler.on_result`.
    """
    it = result.training_iteration
    if it not in milestones:
        return None
    return new_resources(base_resources, sf, list(milestones).index(it))


# --------------------------------------------------------------------------
# Trials
# --------------------------------------------------------------------------


class TrialState(str, enum.Enum):
    PENDING = "pending"
    RUNNING = "running"
    WAITING = "waiting_for_resources"
    TERMINATED = "terminated"
    COMPLETED = "completed"


ALLOWED_TRANSITIONS = {
    TrialState.PENDING: {TrialState.RUNNING},
    TrialState.RUNNING: {TrialState.WAITING, TrialState.TERMINATED, TrialState.COMPLETED},
    TrialState.WAITING: {TrialState.RUNNING},
    TrialState.TERMINATED: set(),
    TrialState.COMPLETED: set(),
}


@dataclass(frozen=True)
class TrialResult:
    trial_id: int
    training_iteration: int
    metric: float
    sim_time: float
    global_batch_size: int

    def __post_init__(self):
        if self.training_iteration < 1:
            raise ValueError(f"training_iteration must be >= 1, got {self.training_iteration}")
        if self.sim_time < 0:
            raise ValueError(f"sim_time must be >= 0, got {self.sim_time}")
        if self.global_batch_size < 1:
            raise ValueError(f"global_batch_size must be >= 1, got {self.global_batch_size}")


@dataclass(frozen=True)
class Trial:
    """Immutable snapshot of a trial; state changes produce new snapshots."""

    id: int
    config: Configuration
    state: TrialState = TrialState.PENDING
    current_rung: int = 0
    allocated_workers: int = 0
    completed_epochs: int = 0
    history: tuple = field(default_factory=tuple)

    def __post_init__(self):
        running = self.state is TrialState.RUNNING
        if running and self.allocated_workers < 1:
            raise InvalidTransition(f"trial {self.id}: running with no workers")
        if not running and self.allocated_workers != 0:
            raise InvalidTransition(
                f"trial {self.id}: {self.state.value} trial holds {self.allocated_workers} workers"
            )

    def transition(self, state: TrialState, **changes) -> "Trial":
        if state not in ALLOWED_TRANSITIONS[self.state]:
            raise InvalidTransition(f"trial {self.id}: {self.state.value} -> {state.value}")
        return dataclasses.replace(self, state=state, **changes)

    def record(self, result: TrialResult) -> "Trial":
        if result.training_iteration < self.completed_epochs:
            raise InvalidTransition(f"trial {self.id}: epoch counter went backwards")
        return dataclasses.replace(
            self,
            completed_epochs=result.training_iteration,
            history=self.history + (result,),
        )

    @property
    def finished(self) -> bool:
        return self.state in (TrialState.TERMINATED, TrialState.COMPLETED)

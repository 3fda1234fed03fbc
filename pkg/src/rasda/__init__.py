"""Resource-adaptive successive halving/doubling HPO with a cluster simulator."""

from rasda.core import (
    Configuration,
    ParamSpec,
    RungLadder,
    Trial,
    TrialResult,
    compute_ladder,
    new_resources,
    rasda_resource_decision,
    sample_configuration,
)
from rasda.schedulers import Policy, Scheduler, SchedulerConfig, SchedulerDecision

__version__ = "0.1.0"

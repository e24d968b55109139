"""Head-worker task scheduler with a global object store.

A job starts only when both kinds of dependency are met: its declared
data artifacts exist in the store and some worker has enough free CPU
slots. The head owns all scheduler state and the object store; workers
execute task bodies and exchange artifacts with the head over the wire.
"""

from .types import Artifact, JobPhase, JobSpec, JobStatus, WorkerState
from .core import ObjectStore, SchedulerCore, deps_satisfied, schedule_tick
from .tasks import TaskContext, register_task, registered_kinds, run_task

__all__ = [
    "Artifact",
    "JobPhase",
    "JobSpec",
    "JobStatus",
    "WorkerState",
    "ObjectStore",
    "SchedulerCore",
    "deps_satisfied",
    "schedule_tick",
    "TaskContext",
    "register_task",
    "registered_kinds",
    "run_task",
]

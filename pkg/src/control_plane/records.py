"""Persistent records of the control plane"""
import time
from enum import Enum
from typing import Any, Dict, List, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator

from ..tag.models import JobSpec


def _non_empty(value: str, name: str) -> str:
    if not value or not value.strip():
        raise ValueError(f"{name} must not be empty")
    return value.strip()


class ComputeRecord(BaseModel):
    model_config = ConfigDict(frozen=True)

    compute_id: str
    realm: str
    endpoint: str = ""  # deployer address, informational for local deployers
    capacity: int = Field(default=4, ge=1)

    @field_validator("compute_id", "realm")
    @classmethod
    def _required(cls, value: str, info) -> str:
        return _non_empty(value, info.field_name)


class DatasetRecord(BaseModel):
    """Metadata only; the bytes stay wherever ``url`` points"""

    model_config = ConfigDict(frozen=True)

    dataset_id: str
    realm: str
    url: str
    owner: str = ""
    # unmanaged datasets are served by workers their owners start (join_unmanaged)
    managed: bool = True

    @field_validator("dataset_id", "realm", "url")
    @classmethod
    def _required(cls, value: str, info) -> str:
        return _non_empty(value, info.field_name)


class JobState(str, Enum):
    CREATED = "created"
    DEPLOYING = "deploying"
    RUNNING = "running"
    COMPLETED = "completed"
    FAILED = "failed"
    STOPPED = "stopped"

    @property
    def terminal(self) -> bool:
        return self in (JobState.COMPLETED, JobState.FAILED, JobState.STOPPED)


JOB_TRANSITIONS = {
    JobState.CREATED: {JobState.DEPLOYING},
    JobState.DEPLOYING: {JobState.RUNNING, JobState.FAILED, JobState.STOPPED},
    JobState.RUNNING: {JobState.COMPLETED, JobState.FAILED, JobState.STOPPED},
    JobState.COMPLETED: set(),
    JobState.FAILED: set(),
    JobState.STOPPED: set(),
}


def can_transition(current: JobState, target: JobState) -> bool:
    return target in JOB_TRANSITIONS[current]


class TaskStatus(str, Enum):
    PENDING = "pending"        # waiting for a deployer (or an unmanaged claim)
    QUEUED = "queued"          # deployer at capacity
    FETCHING = "fetching"
    RUNNING = "running"
    DONE = "done"
    FAILED = "failed"
    TERMINATED = "terminated"

    @property
    def terminal(self) -> bool:
        return self in (TaskStatus.DONE, TaskStatus.FAILED, TaskStatus.TERMINATED)


class TaskRecord(BaseModel):
    worker_id: str
    compute_id: str
    status: TaskStatus = TaskStatus.PENDING
    managed: bool = True
    claimed_by: Optional[str] = None
    detail: str = ""
    exit_code: Optional[int] = None
    last_heartbeat: Optional[float] = None


class JobRecord(BaseModel):
    job_id: str
    spec: JobSpec
    topology: Optional[Dict[str, Any]] = None  # PhysicalTopology document
    state: JobState = JobState.CREATED
    tasks: Dict[str, TaskRecord] = Field(default_factory=dict)
    created_at: float = Field(default_factory=time.time)
    error: str = ""
    stop_requested: bool = False

    def status_view(self) -> dict:
        return {
            "job_id": self.job_id,
            "name": self.spec.job_name,
            "state": self.state.value,
            "error": self.error,
            "tasks": {wid: {"status": t.status.value, "compute_id": t.compute_id,
                            "managed": t.managed, "detail": t.detail, "exit_code": t.exit_code}
                      for wid, t in sorted(self.tasks.items())},
        }


class EventKind(str, Enum):
    DEPLOY = "deploy"
    REVOKE = "revoke"
    JOB_START = "job-start"
    JOB_STOP = "job-stop"


class Event(BaseModel):
    event_id: int
    kind: EventKind
    job_id: str
    target: str  # deployer (compute) id or worker id
    payload: Dict[str, Any] = Field(default_factory=dict)
    acked: bool = False


class ChannelManifest(BaseModel):
    name: str
    group: str
    backend: str
    pair: List[str]
    peer_role: str
    func_tags: List[str] = Field(default_factory=list)
    self_channel: bool = False
    expected_peers: List[str] = Field(default_factory=list)
    bandwidth_shape: Dict[str, float] = Field(default_factory=dict)


class TaskManifest(BaseModel):
    """Everything a worker reads while running"""

    job_id: str
    worker_id: str
    role: str
    program: str
    code_ref: str
    compute_id: str
    broker_address: str
    channels: List[ChannelManifest]
    dataset_url: Optional[str] = None
    dataset_id: Optional[str] = None
    hyperparams: Dict[str, Any] = Field(default_factory=dict)
    artifact_dir: str

"""Error hierarchy. Every error carries a machine-readable ``error_code``."""
from typing import Any, Optional


class FedorchError(Exception):
    """Base error for the orchestration engine"""

    error_code = "FEDORCH_ERROR"

    def __init__(self, message: str = "", **details: Any):
        super().__init__(message or self.error_code)
        self.message = message or self.error_code
        self.details = details

    def to_dict(self) -> dict:
        body = {"error": self.message, "error_code": self.error_code}
        body.update({k: v for k, v in self.details.items() if _jsonable(v)})
        return body


def _jsonable(value: Any) -> bool:
    return isinstance(value, (str, int, float, bool, list, dict, type(None)))


# ---- job spec ----

class SpecError(FedorchError):
    error_code = "SPEC_ERROR"


class ParseError(SpecError):
    error_code = "PARSE_ERROR"


class SchemaError(SpecError):
    error_code = "SCHEMA_ERROR"

    def __init__(self, message: str, path: str = ""):
        super().__init__(f"{path}: {message}" if path else message, path=path)
        self.path = path


class InvalidJobSpec(SpecError):
    """Raised by outer surfaces when pre_check reports violations"""

    error_code = "INVALID_JOB_SPEC"

    def __init__(self, report):
        super().__init__(f"{len(report.violations)} violation(s): {report.summary()}",
                         violations=report.to_list())
        self.report = report


# ---- expansion ----

class ExpansionError(FedorchError):
    error_code = "EXPANSION_ERROR"


class NoComputeForRealm(ExpansionError):
    error_code = "NO_COMPUTE_FOR_REALM"

    def __init__(self, subject: str, realm: str = ""):
        super().__init__(f"no registered compute admits {subject} (realm {realm!r})",
                         subject=subject, realm=realm)
        self.subject = subject


class UnregisteredDataset(ExpansionError):
    error_code = "UNREGISTERED_DATASET"

    def __init__(self, dataset_id: str):
        super().__init__(f"dataset {dataset_id!r} is not registered", dataset_id=dataset_id)
        self.dataset_id = dataset_id


class MissingGroupAssociation(ExpansionError):
    error_code = "MISSING_GROUP_ASSOCIATION"

    def __init__(self, group: str, role: str = ""):
        super().__init__(f"no groupAssociation entry of role {role!r} matches dataset group {group!r}",
                         group=group, role=role)
        self.group = group


class PostCheckFailed(ExpansionError):
    error_code = "POST_CHECK_FAILED"

    def __init__(self, report):
        super().__init__(f"post-check failed: {report.summary()}", violations=report.to_list())
        self.report = report


# ---- channels ----

class ChannelError(FedorchError):
    error_code = "CHANNEL_ERROR"


class AlreadyJoined(ChannelError):
    error_code = "ALREADY_JOINED"


class NotJoined(ChannelError):
    error_code = "NOT_JOINED"


class BackendUnavailable(ChannelError):
    error_code = "BACKEND_UNAVAILABLE"


class SendToUnknownEnd(ChannelError):
    error_code = "SEND_TO_UNKNOWN_END"


class ChannelClosed(ChannelError):
    error_code = "CHANNEL_CLOSED"


class PeerLeft(ChannelError):
    error_code = "PEER_LEFT"

    def __init__(self, end):
        super().__init__(f"peer {end} left the channel", end=str(end))
        self.end = end


class ChannelTimeout(ChannelError):
    error_code = "CHANNEL_TIMEOUT"


# ---- tasklets ----

class TaskletError(FedorchError):
    error_code = "TASKLET_ERROR"


class DuplicateAlias(TaskletError):
    error_code = "DUPLICATE_ALIAS"

    def __init__(self, alias: str):
        super().__init__(f"alias {alias!r} already present in chain", alias=alias)
        self.alias = alias


class UnknownAlias(TaskletError):
    error_code = "UNKNOWN_ALIAS"

    def __init__(self, alias: str):
        super().__init__(f"no tasklet with alias {alias!r}", alias=alias)
        self.alias = alias


class LoopNestingError(TaskletError):
    error_code = "LOOP_NESTING"


class StopRequested(TaskletError):
    error_code = "STOP_REQUESTED"


class TaskFailure(TaskletError):
    error_code = "TASK_FAILURE"

    def __init__(self, alias: str, cause: BaseException):
        super().__init__(f"tasklet {alias!r} failed: {cause!r}", alias=alias)
        self.alias = alias
        self.cause = cause


# ---- roles ----

class RoleError(FedorchError):
    error_code = "ROLE_ERROR"


class ShapeMismatch(RoleError):
    error_code = "SHAPE_MISMATCH"


class EmptyUpdateSet(RoleError):
    error_code = "EMPTY_UPDATE_SET"


class DivergenceDetected(RoleError):
    error_code = "DIVERGENCE_DETECTED"


class CoordinatorUnreachable(RoleError):
    error_code = "COORDINATOR_UNREACHABLE"


class UnknownProgram(RoleError):
    error_code = "UNKNOWN_PROGRAM"


# ---- control plane ----

class ControlPlaneError(FedorchError):
    error_code = "CONTROL_PLANE_ERROR"
    http_status = 400


class DuplicateCompute(ControlPlaneError):
    error_code = "DUPLICATE_COMPUTE"
    http_status = 409


class DuplicateDataset(ControlPlaneError):
    error_code = "DUPLICATE_DATASET"
    http_status = 409


class UnknownJob(ControlPlaneError):
    error_code = "UNKNOWN_JOB"
    http_status = 404


class UnknownWorker(ControlPlaneError):
    error_code = "UNKNOWN_WORKER"
    http_status = 404


class WrongState(ControlPlaneError):
    error_code = "WRONG_STATE"
    http_status = 409


class DuplicateSubscriber(ControlPlaneError):
    error_code = "DUPLICATE_SUBSCRIBER"
    http_status = 409


class SlotAlreadyFilled(ControlPlaneError):
    error_code = "SLOT_ALREADY_FILLED"
    http_status = 409


class JobNotRunning(ControlPlaneError):
    error_code = "JOB_NOT_RUNNING"
    http_status = 409


class UnknownEvent(ControlPlaneError):
    error_code = "UNKNOWN_EVENT"
    http_status = 404


# ---- deployer / agent ----

class AgentError(FedorchError):
    error_code = "AGENT_ERROR"


class FetchFailed(AgentError):
    error_code = "FETCH_FAILED"


class ChildCrashed(AgentError):
    error_code = "CHILD_CRASHED"

    def __init__(self, worker_id: str, exit_code: Optional[int]):
        super().__init__(f"worker {worker_id} exited with code {exit_code}",
                         worker_id=worker_id, exit_code=exit_code)
        self.exit_code = exit_code


class CapacityExceeded(AgentError):
    error_code = "CAPACITY_EXCEEDED"


# ---- client ----

class ApiError(FedorchError):
    """Non-2xx answer from the control plane, carrying the server's error body"""

    error_code = "API_ERROR"

    def __init__(self, status_code: int, body: Any):
        message = body.get("error") if isinstance(body, dict) else str(body)
        super().__init__(f"HTTP {status_code}: {message}", status_code=status_code)
        self.status_code = status_code
        self.body = body
        if isinstance(body, dict) and body.get("error_code"):
            self.error_code = body["error_code"]

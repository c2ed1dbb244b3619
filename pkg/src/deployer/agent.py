"""
Agent: supervises one worker.

It fetches the worker's manifest, writes it next to the worker's scratch
files, launches the worker through a launcher, sends heartbeats while the
worker lives and reports exactly one terminal status.
"""
import logging
import signal
import threading
import time
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Callable, Optional

from ..client import FedorchClient
from ..config import Settings, settings as default_settings
from ..control_plane.records import TaskManifest, TaskStatus
from ..exceptions import ApiError, ChildCrashed, FetchFailed, FedorchError
from ..logger import logger, log_action
from .launcher import ProcessLauncher, WorkerHandle


class AgentPhase(str, Enum):
    FETCHING = "fetching"
    RUNNING = "running"
    DONE = "done"
    FAILED = "failed"
    TERMINATED = "terminated"

    @property
    def terminal(self) -> bool:
        return self in (AgentPhase.DONE, AgentPhase.FAILED, AgentPhase.TERMINATED)


PHASE_ORDER = {AgentPhase.FETCHING: 0, AgentPhase.RUNNING: 1,
               AgentPhase.DONE: 2, AgentPhase.FAILED: 2, AgentPhase.TERMINATED: 2}


@dataclass
class AgentState:
    job_id: str
    worker_id: str
    phase: AgentPhase = AgentPhase.FETCHING
    handle: Optional[WorkerHandle] = None
    last_heartbeat: Optional[float] = None
    exit_code: Optional[int] = None

    def advance(self, phase: AgentPhase) -> bool:
        """Move forward only; a terminal phase is final"""
        if self.phase.terminal or PHASE_ORDER[phase] < PHASE_ORDER[self.phase]:
            return False
        self.phase = phase
        return True


def _retryable(error: ApiError) -> bool:
    return error.status_code == 0 or error.status_code >= 500


def exit_detail(exit_code: Optional[int]) -> str:
    if exit_code is not None and exit_code < 0:
        try:
            return f"killed by {signal.Signals(-exit_code).name}"
        except ValueError:
            return f"killed by signal {-exit_code}"
    return f"exit code {exit_code}"


class Agent:
    """
    Run one worker to a terminal status.

    ``fetch`` replaces the manifest download; unmanaged joins pass a slot
    claim here.
    """

    def __init__(self, job_id: str, worker_id: str, client: FedorchClient, launcher=None,
                 work_dir: str = "work", settings: Settings = default_settings,
                 fetch: Optional[Callable[[], TaskManifest]] = None):
        self.client = client
        self.launcher = launcher or ProcessLauncher()
        self.work_dir = Path(work_dir)
        self.settings = settings
        self.fetch = fetch or (lambda: client.fetch_manifest(job_id, worker_id))
        self.state = AgentState(job_id=job_id, worker_id=worker_id)
        self.fetch_attempts = 0
        self.reported: list = []
        self._terminating = threading.Event()
        self._exited = threading.Event()
        self._lock = threading.Lock()
        self._thread: Optional[threading.Thread] = None

    @property
    def job_id(self) -> str:
        return self.state.job_id

    @property
    def worker_id(self) -> str:
        return self.state.worker_id

    @property
    def finished(self) -> bool:
        return self.state.phase.terminal

    def start(self, on_exit: Optional[Callable[["Agent"], None]] = None) -> "Agent":
        def target():
            try:
                self.run()
            finally:
                if on_exit:
                    on_exit(self)

        self._thread = threading.Thread(target=target, name=f"agent-{self.worker_id}", daemon=True)
        self._thread.start()
        return self

    def join(self, timeout: Optional[float] = None):
        if self._thread is not None:
            self._thread.join(timeout)

    def _report(self, status: TaskStatus, detail: str = "", exit_code: Optional[int] = None):
        self.reported.append(status)
        try:
            self.client.report_status(self.job_id, self.worker_id, status.value, detail, exit_code)
        except ApiError as e:
            log_action(logger, 'REPORT_FAILED', level=logging.WARNING, job_id=self.job_id,
                       worker_id=self.worker_id, status=status.value, error_code=e.error_code, message=str(e))

    def _finish(self, phase: AgentPhase, detail: str = "", exit_code: Optional[int] = None) -> bool:
        with self._lock:
            if not self.state.advance(phase):
                return False
            self.state.exit_code = exit_code
        self._report(TaskStatus(phase.value), detail, exit_code)
        log_action(logger, 'AGENT_FINISHED', job_id=self.job_id, worker_id=self.worker_id,
                   status=phase.value, message=detail or phase.value)
        return True

    def fetch_manifest(self) -> TaskManifest:
        """Fetch with exponential backoff; only unreachable or 5xx answers are retried"""
        delay = self.settings.FETCH_BACKOFF_S
        for attempt in range(self.settings.FETCH_RETRIES + 1):
            self.fetch_attempts += 1
            try:
                return self.fetch()
            except ApiError as e:
                if not _retryable(e) or attempt == self.settings.FETCH_RETRIES:
                    raise FetchFailed(f"manifest fetch failed after {attempt + 1} attempt(s): {e}",
                                      worker_id=self.worker_id, status_code=e.status_code) from e
                log_action(logger, 'FETCH_RETRY', level=logging.WARNING, job_id=self.job_id,
                           worker_id=self.worker_id, message=f"attempt {attempt + 1}: {e}; retrying in {delay:.2f}s")
                if self._terminating.wait(delay):
                    raise FetchFailed("terminated while fetching", worker_id=self.worker_id)
                delay *= 2
        raise FetchFailed("no fetch attempts configured", worker_id=self.worker_id)

    def materialize(self, manifest: TaskManifest) -> Path:
        directory = self.work_dir / manifest.job_id / manifest.worker_id
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / "manifest.json"
        path.write_text(manifest.model_dump_json(indent=2), encoding="utf-8")
        return path

    def _heartbeats(self):
        period = self.settings.HEARTBEAT_PERIOD_S
        while not self._exited.wait(period):
            try:
                self.client.heartbeat(self.job_id, self.worker_id)
                self.state.last_heartbeat = time.time()
            except ApiError as e:
                log_action(logger, 'HEARTBEAT_FAILED', level=logging.WARNING, job_id=self.job_id,
                           worker_id=self.worker_id, error_code=e.error_code, message=str(e))

    def run(self) -> dict:
        """Fetch, launch and supervise the worker"""
        log_action(logger, 'AGENT_STARTED', job_id=self.job_id, worker_id=self.worker_id,
                   message="fetching manifest")
        self._report(TaskStatus.FETCHING)
        try:
            manifest = self.fetch_manifest()
        except FetchFailed as e:
            if self._terminating.is_set():
                self._finish(AgentPhase.TERMINATED, "revoked before launch")
                return {"success": False, "error": "terminated"}
            log_action(logger, 'FETCH_FAILED', level=logging.ERROR, job_id=self.job_id,
                       worker_id=self.worker_id, error_code=e.error_code, message=str(e))
            self._finish(AgentPhase.FAILED, str(e))
            return {"success": False, "error": str(e)}

        spawn_error = None
        # launching under the lock keeps a concurrent terminate() from missing the handle
        with self._lock:
            revoked = self._terminating.is_set()
            if not revoked:
                try:
                    path = self.materialize(manifest)
                    env = {"FLAME_API": self.client.base_url, "FLAME_JOB_ID": self.job_id,
                           "FLAME_WORKER_ID": self.worker_id, "FLAME_MANIFEST_PATH": str(path)}
                    self.state.handle = self.launcher.launch(self.worker_id, path, env)
                    self.state.advance(AgentPhase.RUNNING)
                except (OSError, FedorchError) as e:
                    spawn_error = e
        if revoked:
            self._finish(AgentPhase.TERMINATED, "revoked before launch")
            return {"success": False, "error": "terminated"}
        if spawn_error is not None:
            log_action(logger, 'SPAWN_FAILED', level=logging.ERROR, job_id=self.job_id,
                       worker_id=self.worker_id, error_code='SPAWN_FAILED', message=str(spawn_error))
            self._finish(AgentPhase.FAILED, f"spawn failed: {spawn_error}")
            return {"success": False, "error": str(spawn_error)}

        handle = self.state.handle
        log_action(logger, 'AGENT_SPAWNED', job_id=self.job_id, worker_id=self.worker_id,
                   message=f"pid {handle.pid}" if handle.pid else "in-process worker")
        self._report(TaskStatus.RUNNING)
        heartbeat = threading.Thread(target=self._heartbeats, name=f"heartbeat-{self.worker_id}", daemon=True)
        heartbeat.start()

        exit_code = handle.wait()
        self._exited.set()
        heartbeat.join()

        if exit_code == 0:
            self._finish(AgentPhase.DONE, exit_code=0)
            return {"success": True, "worker_id": self.worker_id, "exit_code": 0}
        if self._terminating.is_set():
            self._finish(AgentPhase.TERMINATED, exit_detail(exit_code), exit_code)
            return {"success": False, "error": "terminated", "exit_code": exit_code}
        crash = ChildCrashed(self.worker_id, exit_code)
        log_action(logger, 'CHILD_CRASHED', level=logging.ERROR, job_id=self.job_id,
                   worker_id=self.worker_id, error_code=crash.error_code, message=str(crash))
        self._finish(AgentPhase.FAILED, exit_detail(exit_code), exit_code)
        return {"success": False, "error": str(crash), "exit_code": exit_code}

    def terminate(self, grace: Optional[float] = None):
        """Ask the worker to stop; kill it if it is still alive after the grace period"""
        grace = self.settings.GRACE_PERIOD_S if grace is None else grace
        with self._lock:
            if self._terminating.is_set() or self.finished:
                return
            self._terminating.set()
            handle = self.state.handle
        if handle is None:
            return
        handle.terminate()
        if handle.wait(grace) is None:
            log_action(logger, 'WORKER_KILLED', level=logging.WARNING, job_id=self.job_id,
                       worker_id=self.worker_id, message=f"still alive after {grace:.1f}s grace")
            handle.kill()

"""
Deployer: one per registered compute.

Consumes the compute's notify stream, starts an agent per deployed worker
within the compute's capacity (excess workers wait in a queue), terminates
workers on revoke and acknowledges every event it has handled.
"""
import logging
import threading
import time
from collections import deque
from typing import Callable, Deque, Dict, Iterator, List, Optional, Set, Tuple

from pydantic import BaseModel, Field

from ..client import FedorchClient
from ..config import Settings, settings as default_settings
from ..control_plane.records import Event, EventKind, TaskStatus
from ..exceptions import ApiError, CapacityExceeded
from ..logger import logger, log_action
from .agent import Agent
from .launcher import ProcessLauncher

TaskKey = Tuple[str, str]

RECONNECT_MAX_S = 10.0


class DeploymentRequest(BaseModel):
    """What a deploy event asks of one compute"""

    job_id: str
    compute_id: str
    workers: List[str] = Field(default_factory=list)
    api: str = ""

    @classmethod
    def from_event(cls, event: Event) -> "DeploymentRequest":
        return cls(job_id=event.job_id, compute_id=event.target,
                   workers=list(event.payload.get("workers", [])), api=event.payload.get("api", ""))

    def manifest_urls(self) -> Dict[str, str]:
        base = self.api.rstrip("/")
        return {w: f"{base}/jobs/{self.job_id}/manifests/{w}" for w in self.workers}


class Deployer:
    def __init__(self, compute_id: str, client: FedorchClient, capacity: int = 4, launcher=None,
                 work_dir: str = "work", settings: Settings = default_settings,
                 subscribe: Optional[Callable[[], Iterator[Event]]] = None):
        self.compute_id = compute_id
        self.client = client
        self.capacity = capacity
        self.launcher = launcher or ProcessLauncher()
        self.work_dir = work_dir
        self.settings = settings
        self.subscribe = subscribe or (lambda: client.stream_events(compute_id))
        self.agents: Dict[TaskKey, Agent] = {}
        self.queue: Deque[TaskKey] = deque()
        self.revoked: Set[TaskKey] = set()
        self.seen: Set[int] = set()
        self.peak_live = 0
        self._lock = threading.RLock()
        self._stop = threading.Event()

    # ---- capacity ----

    @property
    def live_count(self) -> int:
        with self._lock:
            return sum(1 for a in self.agents.values() if not a.finished)

    def _launch(self, key: TaskKey):
        job_id, worker_id = key
        agent = Agent(job_id, worker_id, self.client, self.launcher, self.work_dir, self.settings)
        self.agents[key] = agent
        self.peak_live = max(self.peak_live, self.live_count)
        agent.start(on_exit=self._on_agent_exit)

    def _on_agent_exit(self, agent: Agent):
        with self._lock:
            while self.queue and self.live_count < self.capacity:
                key = self.queue.popleft()
                if key not in self.revoked:
                    self._launch(key)

    # ---- events ----

    def handle_event(self, event: Event):
        """Dispatch one event and acknowledge it; redelivered events are only acknowledged"""
        if event.event_id not in self.seen:
            self.seen.add(event.event_id)
            try:
                if event.kind == EventKind.DEPLOY:
                    self.handle_deploy(event)
                elif event.kind == EventKind.REVOKE:
                    self.handle_revoke(event)
                else:
                    log_action(logger, 'JOB_SIGNAL', job_id=event.job_id, compute_id=self.compute_id,
                               event_id=event.event_id, message=event.kind.value)
            except Exception as e:
                log_action(logger, 'EVENT_FAILED', level=logging.ERROR, job_id=event.job_id,
                           compute_id=self.compute_id, event_id=event.event_id,
                           error_code=getattr(e, 'error_code', 'INTERNAL'), message=str(e))
        try:
            self.client.ack_event(self.compute_id, event.event_id)
        except ApiError as e:
            log_action(logger, 'ACK_FAILED', level=logging.WARNING, compute_id=self.compute_id,
                       event_id=event.event_id, error_code=e.error_code, message=str(e))

    def handle_deploy(self, event: Event) -> List[str]:
        """Start an agent per worker; returns the workers left queued"""
        request = DeploymentRequest.from_event(event)
        log_action(logger, 'DEPLOY_RECEIVED', job_id=request.job_id, compute_id=self.compute_id,
                   event_id=event.event_id, message=f"{len(request.workers)} worker(s)")
        queued = []
        with self._lock:
            for worker_id in request.workers:
                key = (request.job_id, worker_id)
                if key in self.agents or key in self.queue:
                    continue
                if self.live_count < self.capacity:
                    self._launch(key)
                    continue
                self.queue.append(key)
                queued.append(worker_id)
        for worker_id in queued:
            error = CapacityExceeded(f"{self.compute_id} is at capacity {self.capacity}")
            log_action(logger, 'WORKER_QUEUED', job_id=event.job_id, worker_id=worker_id,
                       compute_id=self.compute_id, error_code=error.error_code, message=str(error))
            self._report(event.job_id, worker_id, TaskStatus.QUEUED, str(error))
        return queued

    def handle_revoke(self, event: Event) -> int:
        """Terminate the job's workers here; returns how many live workers were stopped"""
        job_id = event.job_id
        named = event.payload.get("workers")
        with self._lock:
            keys = {k for k in list(self.agents) + list(self.queue)
                    if k[0] == job_id and (named is None or k[1] in named)}
            self.revoked |= keys
            dropped = [k for k in self.queue if k in keys]
            self.queue = deque(k for k in self.queue if k not in keys)
            live = [self.agents[k] for k in keys if k in self.agents and not self.agents[k].finished]
        log_action(logger, 'REVOKE_RECEIVED', job_id=job_id, compute_id=self.compute_id,
                   event_id=event.event_id, message=f"{len(live)} live, {len(dropped)} queued")

        for _, worker_id in dropped:
            self._report(job_id, worker_id, TaskStatus.TERMINATED, "revoked while queued")
        stoppers = [threading.Thread(target=agent.terminate, daemon=True) for agent in live]
        for t in stoppers:
            t.start()
        for t in stoppers:
            t.join()
        # wait for the agents' terminal reports before the revoke is acknowledged
        for agent in live:
            agent.join(self.settings.GRACE_PERIOD_S + 5.0)
        return len(live)

    def _report(self, job_id: str, worker_id: str, status: TaskStatus, detail: str):
        try:
            self.client.report_status(job_id, worker_id, status.value, detail)
        except ApiError as e:
            log_action(logger, 'REPORT_FAILED', level=logging.WARNING, job_id=job_id, worker_id=worker_id,
                       compute_id=self.compute_id, error_code=e.error_code, message=str(e))

    # ---- stream loop ----

    def serve(self, max_reconnects: Optional[int] = None):
        """Consume events until stop(); a dropped stream is reopened with backoff"""
        delay = 0.5
        attempts = 0
        log_action(logger, 'DEPLOYER_STARTED', compute_id=self.compute_id,
                   message=f"capacity {self.capacity}")
        while not self._stop.is_set():
            try:
                for event in self.subscribe():
                    delay = 0.5
                    self.handle_event(event)
                    if self._stop.is_set():
                        break
            except ApiError as e:
                # 409: the previous stream has not been detached yet
                log_action(logger, 'STREAM_LOST', level=logging.WARNING, compute_id=self.compute_id,
                           error_code=e.error_code, message=str(e))
            if self._stop.is_set():
                break
            attempts += 1
            if max_reconnects is not None and attempts > max_reconnects:
                break
            self._stop.wait(delay)
            delay = min(delay * 2, RECONNECT_MAX_S)
        log_action(logger, 'DEPLOYER_STOPPED', compute_id=self.compute_id, message="event loop ended")

    def stop(self, terminate_workers: bool = True):
        self._stop.set()
        if terminate_workers:
            with self._lock:
                live = [a for a in self.agents.values() if not a.finished]
            for agent in live:
                agent.terminate()

    def wait_idle(self, timeout: float) -> bool:
        """Block until no agent is live and nothing is queued"""
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            with self._lock:
                if not self.queue and self.live_count == 0:
                    return True
            time.sleep(0.05)
        return False

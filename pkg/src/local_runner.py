"""
The whole stack in one process: controller and REST app, one deployer per
compute and workers as threads (or child processes).

Used by the experiments and the end-to-end tests. REST calls go through an
in-memory ASGI client; deployers read the notifier directly instead of an
SSE connection.
"""
import threading
import time
import uuid
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Union

from fastapi.testclient import TestClient

from .channel.broker import reset_brokers
from .channel.broker_server import BrokerServer
from .client import FedorchClient
from .config import Settings, settings as default_settings
from .control_plane.api import create_app
from .control_plane.controller import Controller
from .control_plane.notifier import Notifier
from .control_plane.records import ComputeRecord, DatasetRecord, Event, JobRecord
from .control_plane.store import JournaledStore
from .deployer import Deployer, ProcessLauncher, ThreadLauncher, join_unmanaged
from .exceptions import WrongState
from .logger import logger, log_action


def notifier_subscription(notifier: Notifier, subscriber: str, stop: threading.Event,
                          poll_s: float = 0.1) -> Iterator[Event]:
    """Same delivery as the SSE stream, read straight from the notifier"""
    notifier.attach(subscriber)
    try:
        last = 0
        while not stop.is_set():
            for event in notifier.wait_pending(subscriber, last, poll_s):
                last = event.event_id
                yield event
    finally:
        notifier.detach(subscriber)


class LocalStack:
    def __init__(self, root: Union[str, Path], settings: Settings = default_settings,
                 processes: bool = False, state: bool = True):
        self.root = Path(root)
        self.settings = settings
        self.processes = processes
        self.broker_server: Optional[BrokerServer] = None
        if processes:
            self.broker_server = BrokerServer().start()
            broker_address = self.broker_server.address
        else:
            broker_address = f"inproc://stack-{uuid.uuid4().hex[:8]}"
        self.broker_address = broker_address
        store = JournaledStore(str(self.root / "state") if state else None, settings.SNAPSHOT_EVERY)
        self.controller = Controller(store, settings=settings, broker_address=broker_address,
                                     artifact_root=str(self.root / "artifacts"))
        self.app = create_app(self.controller, monitor=False)
        self.client = FedorchClient("http://testserver",
                                     http=TestClient(self.app, raise_server_exceptions=False))
        self.deployers: Dict[str, Deployer] = {}
        self._stop = threading.Event()
        self._threads: List[threading.Thread] = []

    def _launcher(self):
        if self.processes:
            return ProcessLauncher(log_dir=str(self.root / "logs"))
        return ThreadLauncher()

    def register(self, computes: Sequence[ComputeRecord], datasets: Sequence[DatasetRecord]):
        for compute in computes:
            self.client.register_compute(compute.compute_id, compute.realm, compute.capacity, compute.endpoint)
            self._start_deployer(compute)
        for dataset in datasets:
            self.client.register_dataset(dataset.dataset_id, dataset.realm, dataset.url, dataset.owner,
                                         dataset.managed)

    def _start_deployer(self, compute: ComputeRecord):
        cid = compute.compute_id
        deployer = Deployer(cid, self.client, compute.capacity, self._launcher(), str(self.root / "work"),
                            self.settings,
                            subscribe=lambda: notifier_subscription(self.controller.notifier, cid, self._stop))
        self.deployers[cid] = deployer
        thread = threading.Thread(target=deployer.serve, name=f"deployer-{cid}", daemon=True)
        thread.start()
        self._threads.append(thread)

    def submit(self, document: Union[str, dict], start: bool = True) -> str:
        job_id = self.client.create_job(document)
        if start:
            self.client.start_job(job_id)
        return job_id

    def wait(self, job_id: str, timeout: float = 120.0) -> JobRecord:
        """Block until the job is terminal and every agent of this stack is idle"""
        deadline = time.monotonic() + timeout
        job = self.controller.job(job_id)
        while not job.state.terminal and time.monotonic() < deadline:
            time.sleep(0.05)
            job = self.controller.job(job_id)
        for deployer in self.deployers.values():
            deployer.wait_idle(max(deadline - time.monotonic(), 1.0))
        if not job.state.terminal:
            log_action(logger, 'JOB_TIMEOUT', job_id=job_id, message=f"still {job.state.value} after {timeout}s")
        return self.controller.job(job_id)

    def wait_running(self, job_id: str, timeout: float = 30.0) -> JobRecord:
        deadline = time.monotonic() + timeout
        job = self.controller.job(job_id)
        while job.state.value in ("created", "deploying") and time.monotonic() < deadline:
            time.sleep(0.02)
            job = self.controller.job(job_id)
        return job

    def run(self, document: Union[str, dict], timeout: float = 120.0) -> JobRecord:
        return self.wait(self.submit(document), timeout)

    def join(self, job_id: str, worker_id: Optional[str] = None, wait: bool = False) -> dict:
        """Start an unmanaged worker for an open slot"""
        return join_unmanaged(job_id, worker_id, self.client, self._launcher(), str(self.root / "work"),
                              claimant="local", settings=self.settings, wait=wait)

    def artifact_dir(self, job_id: str) -> Path:
        return self.controller.artifact_dir(job_id)

    def close(self):
        self._stop.set()
        for deployer in self.deployers.values():
            deployer.stop()
        for thread in self._threads:
            thread.join(timeout=2.0)
        for job in self.controller.jobs():
            if not job.state.terminal:
                try:
                    self.controller.stop_job(job.job_id)
                except WrongState:
                    pass
        if self.broker_server is not None:
            self.broker_server.stop()
        reset_brokers(self.broker_address)
        self.controller.store.close()
        self.client.close()

    def __enter__(self) -> "LocalStack":
        return self

    def __exit__(self, *exc):
        self.close()

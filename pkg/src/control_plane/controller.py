"""
Controller: owns registrations and the job lifecycle.

Every mutation runs under one lock and is persisted through the journaled
store before it becomes visible, so a restarted controller recovers the same
records and the notifier re-delivers unacknowledged events.
"""
import logging
import threading
import time
import uuid
from pathlib import Path
from typing import Dict, List, Optional, Union

from ..config import Settings, settings as default_settings
from ..exceptions import (DuplicateCompute, DuplicateDataset, ExpansionError, InvalidJobSpec,
                          JobNotRunning, SlotAlreadyFilled, UnknownJob, UnknownWorker, WrongState)
from ..expansion import PhysicalTopology, expand
from ..logger import logger, log_action
from ..roles.metrics import merge_metrics
from ..tag.parser import parse_job_spec
from ..validators import pre_check
from .manifests import ManifestBuilder
from .notifier import Notifier
from .records import (ComputeRecord, DatasetRecord, Event, EventKind, JobRecord, JobState,
                      TaskManifest, TaskRecord, TaskStatus, can_transition)
from .store import JournaledStore

COMPUTES = "computes"
DATASETS = "datasets"
JOBS = "jobs"

LIVE = (TaskStatus.PENDING, TaskStatus.QUEUED, TaskStatus.FETCHING, TaskStatus.RUNNING)


class Controller:
    def __init__(self, store: Optional[JournaledStore] = None, notifier: Optional[Notifier] = None,
                 settings: Settings = default_settings, broker_address: Optional[str] = None,
                 artifact_root: Optional[str] = None):
        self.settings = settings
        self.store = store or JournaledStore(None, settings.SNAPSHOT_EVERY)
        self.notifier = notifier or Notifier(self.store, settings.NOTIFY_KEEPALIVE_S)
        self.notifier.on_ack = self._on_ack
        self.broker_address = broker_address or settings.BROKER_ADDRESS
        self.artifact_root = Path(artifact_root or settings.ARTIFACT_DIR)
        self._lock = threading.RLock()
        self._builders: Dict[str, ManifestBuilder] = {}
        # heartbeats stay in memory; a restart grants every task a fresh window
        self._heartbeats: Dict[tuple, float] = {}

    # ---- registration ----

    def register_compute(self, record: ComputeRecord) -> str:
        with self._lock:
            if self.store.get(COMPUTES, record.compute_id):
                raise DuplicateCompute(f"compute {record.compute_id} already registered",
                                       compute_id=record.compute_id)
            self.store.put(COMPUTES, record.compute_id, record.model_dump(mode="json"))
        log_action(logger, 'COMPUTE_REGISTERED', compute_id=record.compute_id,
                   message=f"realm={record.realm} capacity={record.capacity}")
        return record.compute_id

    def register_dataset(self, record: DatasetRecord) -> str:
        with self._lock:
            if self.store.get(DATASETS, record.dataset_id):
                raise DuplicateDataset(f"dataset {record.dataset_id} already registered",
                                       dataset_id=record.dataset_id)
            self.store.put(DATASETS, record.dataset_id, record.model_dump(mode="json"))
        log_action(logger, 'DATASET_REGISTERED', message=f"{record.dataset_id} realm={record.realm}")
        return record.dataset_id

    def computes(self) -> List[ComputeRecord]:
        return sorted((ComputeRecord.model_validate(d) for _, d in self.store.items(COMPUTES)),
                      key=lambda c: c.compute_id)

    def datasets(self) -> List[DatasetRecord]:
        return sorted((DatasetRecord.model_validate(d) for _, d in self.store.items(DATASETS)),
                      key=lambda d: d.dataset_id)

    # ---- jobs ----

    def job(self, job_id: str) -> JobRecord:
        doc = self.store.get(JOBS, job_id)
        if doc is None:
            raise UnknownJob(f"no job {job_id}", job_id=job_id)
        return JobRecord.model_validate(doc)

    def jobs(self) -> List[JobRecord]:
        return sorted((JobRecord.model_validate(d) for _, d in self.store.items(JOBS)),
                      key=lambda j: j.created_at)

    def _save(self, job: JobRecord):
        self.store.put(JOBS, job.job_id, job.model_dump(mode="json", by_alias=True))

    def _transition(self, job: JobRecord, target: JobState, error: str = "") -> JobRecord:
        if not can_transition(job.state, target):
            raise WrongState(f"job {job.job_id} cannot go from {job.state.value} to {target.value}",
                             job_id=job.job_id, state=job.state.value)
        job = job.model_copy(update={"state": target, "error": error or job.error})
        self._save(job)
        log_action(logger, 'JOB_STATE', job_id=job.job_id, status=target.value,
                   message=f"job is {target.value}" + (f": {error}" if error else ""))
        return job

    def create_job(self, document: Union[str, bytes, dict]) -> str:
        """
        Parse, pre-check and record a job; returns a fresh random job id.

        Raises ParseError, SchemaError or InvalidJobSpec (carrying the report).
        """
        spec = parse_job_spec(document)
        report = pre_check(spec)
        if not report.is_empty:
            raise InvalidJobSpec(report)
        job = JobRecord(job_id=uuid.uuid4().hex, spec=spec)
        with self._lock:
            self._save(job)
        log_action(logger, 'JOB_CREATED', job_id=job.job_id, message=f"job {spec.job_name}")
        return job.job_id

    def artifact_dir(self, job_id: str) -> Path:
        return self.artifact_root / "jobs" / job_id

    def start_job(self, job_id: str) -> PhysicalTopology:
        """Expand, record tasks and emit one deploy event per compute hosting managed workers"""
        with self._lock:
            job = self.job(job_id)
            if job.state != JobState.CREATED:
                raise WrongState(f"job {job_id} is {job.state.value}", job_id=job_id, state=job.state.value)
            datasets = {d.dataset_id: d for d in self.datasets()}
            try:
                topology = expand(job.spec, list(datasets.values()), self.computes(), job_id=job_id)
            except ExpansionError as e:
                log_action(logger, 'EXPANSION_FAILED', level=logging.ERROR, job_id=job_id,
                           error_code=e.error_code, message=str(e))
                raise

            tasks = {}
            for w in topology.workers:
                managed = w.dataset_ref is None or datasets[w.dataset_ref].managed
                tasks[w.worker_id] = TaskRecord(worker_id=w.worker_id, compute_id=w.compute_id, managed=managed)
            job = job.model_copy(update={"topology": topology.to_document(), "tasks": tasks})
            job = self._transition(job, JobState.DEPLOYING)

            by_compute: Dict[str, List[str]] = {}
            for t in tasks.values():
                if t.managed:
                    by_compute.setdefault(t.compute_id, []).append(t.worker_id)
            for compute_id, workers in sorted(by_compute.items()):
                self.notifier.emit(EventKind.DEPLOY, job_id, compute_id,
                                   {"workers": sorted(workers), "api": self.settings.FEDORCH_API})
            log_action(logger, 'JOB_STARTED', job_id=job_id,
                       message=f"{len(tasks)} workers, {len(by_compute)} deploy event(s)")
            self._advance(job)
        return topology

    def _builder(self, job: JobRecord) -> ManifestBuilder:
        builder = self._builders.get(job.job_id)
        if builder is None:
            builder = ManifestBuilder(job.job_id, job.spec, PhysicalTopology.from_document(job.topology),
                                      {d.dataset_id: d for d in self.datasets()}, self.broker_address,
                                      str(self.artifact_dir(job.job_id)), self.settings)
            self._builders[job.job_id] = builder
        return builder

    def manifest(self, job_id: str, worker_id: str) -> TaskManifest:
        job = self.job(job_id)
        if job.topology is None:
            raise WrongState(f"job {job_id} is not started", job_id=job_id, state=job.state.value)
        if worker_id not in job.tasks:
            raise UnknownWorker(f"{worker_id} is not part of job {job_id}", worker_id=worker_id)
        return self._builder(job).build(worker_id)

    # ---- task reports ----

    def update_task_status(self, job_id: str, worker_id: str, status: Union[TaskStatus, str],
                           detail: str = "", exit_code: Optional[int] = None) -> JobRecord:
        """
        Record an agent report and advance the job.

        A task's first terminal status wins; later reports for it are ignored.
        """
        status = TaskStatus(status)
        with self._lock:
            job = self.job(job_id)
            task = job.tasks.get(worker_id)
            if task is None:
                raise UnknownWorker(f"{worker_id} is not part of job {job_id}", worker_id=worker_id)
            if task.status.terminal:
                return job
            task = task.model_copy(update={"status": status, "detail": detail or task.detail,
                                           "exit_code": exit_code if exit_code is not None else task.exit_code})
            job = job.model_copy(update={"tasks": {**job.tasks, worker_id: task}})
            self._save(job)
            if status == TaskStatus.RUNNING:
                self._heartbeats[(job_id, worker_id)] = time.monotonic()
            log_action(logger, 'TASK_STATUS', job_id=job_id, worker_id=worker_id, status=status.value,
                       message=detail or status.value)
            return self._advance(job)

    def heartbeat(self, job_id: str, worker_id: str):
        job = self.job(job_id)
        if worker_id not in job.tasks:
            raise UnknownWorker(f"{worker_id} is not part of job {job_id}", worker_id=worker_id)
        self._heartbeats[(job_id, worker_id)] = time.monotonic()

    def _advance(self, job: JobRecord) -> JobRecord:
        if job.state.terminal:
            return job
        tasks = list(job.tasks.values())
        failed = [t for t in tasks if t.status == TaskStatus.FAILED
                  or (t.status == TaskStatus.TERMINATED and not job.stop_requested)]
        if failed:
            names = ", ".join(t.worker_id for t in failed)
            job = self._transition(job, JobState.FAILED, f"task failure: {names}")
            self._revoke(job)
            return job
        if job.stop_requested:
            return job

        managed = [t for t in tasks if t.managed]
        if job.state == JobState.DEPLOYING and all(t.status in (TaskStatus.RUNNING, TaskStatus.DONE)
                                                   for t in managed):
            job = self._transition(job, JobState.RUNNING)
            for compute_id in sorted({t.compute_id for t in managed}):
                self.notifier.emit(EventKind.JOB_START, job.job_id, compute_id)
        if job.state == JobState.RUNNING and tasks and all(t.status == TaskStatus.DONE for t in tasks):
            job = self._transition(job, JobState.COMPLETED)
            self._finish_artifacts(job)
        return job

    def _finish_artifacts(self, job: JobRecord):
        directory = self.artifact_dir(job.job_id)
        if (directory / "metrics").exists():
            merge_metrics(str(directory))

    def _revoke(self, job: JobRecord) -> List[Event]:
        computes = sorted({t.compute_id for t in job.tasks.values()
                           if t.managed and t.status in LIVE})
        return [self.notifier.emit(EventKind.REVOKE, job.job_id, c, {"workers": sorted(
                    t.worker_id for t in job.tasks.values() if t.compute_id == c and t.managed)})
                for c in computes]

    def stop_job(self, job_id: str) -> JobRecord:
        """Revoke every live managed task; the job is stopped once all revokes are acknowledged"""
        with self._lock:
            job = self.job(job_id)
            if job.state not in (JobState.DEPLOYING, JobState.RUNNING):
                raise WrongState(f"job {job_id} is {job.state.value}", job_id=job_id, state=job.state.value)
            if job.stop_requested:
                return job
            tasks = {wid: (t.model_copy(update={"status": TaskStatus.TERMINATED, "detail": "stopped"})
                           if not t.managed and t.status in LIVE else t)
                     for wid, t in job.tasks.items()}
            job = job.model_copy(update={"stop_requested": True, "tasks": tasks})
            self._save(job)
            events = self._revoke(job)
            for compute_id in sorted({t.compute_id for t in tasks.values() if t.managed}):
                self.notifier.emit(EventKind.JOB_STOP, job_id, compute_id)
            log_action(logger, 'JOB_STOPPING', job_id=job_id, message=f"{len(events)} revoke event(s)")
            if not events:
                job = self._transition(job, JobState.STOPPED)
            return job

    def _on_ack(self, event: Event):
        if event.kind != EventKind.REVOKE:
            return
        with self._lock:
            job = self.job(event.job_id)
            if not job.stop_requested or job.state.terminal:
                return
            outstanding = [e for e in self.notifier.events(job.job_id)
                           if e.kind == EventKind.REVOKE and not e.acked]
            if not outstanding:
                self._transition(job, JobState.STOPPED)

    # ---- unmanaged workers ----

    def claim_slot(self, job_id: str, worker_id: str, claimant: str = "") -> TaskManifest:
        """Hand an unmanaged data-consumer slot to an externally started worker"""
        with self._lock:
            job = self.job(job_id)
            if job.state != JobState.RUNNING:
                raise JobNotRunning(f"job {job_id} is {job.state.value}", job_id=job_id, state=job.state.value)
            task = job.tasks.get(worker_id)
            if task is None:
                raise UnknownWorker(f"{worker_id} is not part of job {job_id}", worker_id=worker_id)
            if task.managed or task.claimed_by is not None:
                raise SlotAlreadyFilled(f"slot {worker_id} is already filled", worker_id=worker_id)
            task = task.model_copy(update={"claimed_by": claimant or "unmanaged", "status": TaskStatus.FETCHING})
            job = job.model_copy(update={"tasks": {**job.tasks, worker_id: task}})
            self._save(job)
        log_action(logger, 'SLOT_CLAIMED', job_id=job_id, worker_id=worker_id,
                   message=f"claimed by {task.claimed_by}")
        return self.manifest(job_id, worker_id)

    def open_slots(self, job_id: str) -> List[str]:
        job = self.job(job_id)
        return sorted(w for w, t in job.tasks.items() if not t.managed and t.claimed_by is None)

    # ---- supervision ----

    def check_heartbeats(self, now: Optional[float] = None) -> List[str]:
        """Fail running tasks silent for longer than the missed-heartbeat window"""
        now = time.monotonic() if now is None else now
        window = self.settings.missed_heartbeat_window
        failed = []
        for job in self.jobs():
            if job.state.terminal:
                continue
            for wid, task in job.tasks.items():
                if task.status != TaskStatus.RUNNING:
                    continue
                seen = self._heartbeats.setdefault((job.job_id, wid), now)
                if now - seen > window:
                    failed.append(wid)
                    self.update_task_status(job.job_id, wid, TaskStatus.FAILED,
                                            detail=f"no heartbeat for {now - seen:.1f}s")
        return failed

"""
Ways to start a worker.

``ProcessLauncher`` runs each worker as an OS child process (``python -m
src.worker``); ``ThreadLauncher`` runs it in-process and exists for fast
tests. Both hand back a handle with the same poll/terminate/kill surface.
"""
import os
import subprocess
import sys
import threading
from pathlib import Path
from typing import Dict, List, Optional

import psutil

from ..control_plane.records import TaskManifest
from ..logger import logger

PROJECT_ROOT = Path(__file__).resolve().parent.parent.parent


class WorkerHandle:
    worker_id: str

    @property
    def pid(self) -> Optional[int]:
        return None

    def poll(self) -> Optional[int]:
        raise NotImplementedError

    def wait(self, timeout: Optional[float] = None) -> Optional[int]:
        raise NotImplementedError

    def terminate(self):
        raise NotImplementedError

    def kill(self):
        raise NotImplementedError

    @property
    def alive(self) -> bool:
        return self.poll() is None


class ProcessHandle(WorkerHandle):
    def __init__(self, worker_id: str, process: subprocess.Popen):
        self.worker_id = worker_id
        self.process = process

    @property
    def pid(self) -> Optional[int]:
        return self.process.pid

    def poll(self) -> Optional[int]:
        return self.process.poll()

    def wait(self, timeout: Optional[float] = None) -> Optional[int]:
        try:
            return self.process.wait(timeout=timeout)
        except subprocess.TimeoutExpired:
            return None

    def _tree(self) -> List[psutil.Process]:
        try:
            parent = psutil.Process(self.process.pid)
            return parent.children(recursive=True) + [parent]
        except psutil.NoSuchProcess:
            return []

    def terminate(self):
        """SIGTERM the worker and everything it spawned"""
        for proc in self._tree():
            try:
                proc.terminate()
            except psutil.NoSuchProcess:
                pass

    def kill(self):
        procs = self._tree()
        for proc in procs:
            try:
                proc.kill()
            except psutil.NoSuchProcess:
                pass
        psutil.wait_procs(procs, timeout=1.0)


class ProcessLauncher:
    def __init__(self, python: Optional[str] = None, log_dir: Optional[str] = None):
        self.python = python or sys.executable
        self.log_dir = Path(log_dir) if log_dir else None

    def launch(self, worker_id: str, manifest_path: Path, env: Dict[str, str]) -> WorkerHandle:
        child_env = {**os.environ, **env}
        child_env["PYTHONPATH"] = os.pathsep.join(filter(None, [str(PROJECT_ROOT), os.environ.get("PYTHONPATH")]))
        stdout = subprocess.DEVNULL
        if self.log_dir is not None:
            self.log_dir.mkdir(parents=True, exist_ok=True)
            stdout = (self.log_dir / f"{worker_id}.out").open("ab")
        process = subprocess.Popen([self.python, "-m", "src.worker"], env=child_env, cwd=str(PROJECT_ROOT),
                                   stdout=stdout, stderr=subprocess.STDOUT)
        logger.debug(f"spawned {worker_id} as pid {process.pid}")
        return ProcessHandle(worker_id, process)


class ThreadHandle(WorkerHandle):
    def __init__(self, worker_id: str, manifest: TaskManifest):
        self.worker_id = worker_id
        self.manifest = manifest
        self.stop_event = threading.Event()
        self.exit_code: Optional[int] = None
        self._done = threading.Event()
        self._thread = threading.Thread(target=self._run, name=f"worker-{worker_id}", daemon=True)

    def _run(self):
        from ..worker import run_worker
        try:
            self.exit_code = run_worker(self.manifest, self.stop_event)
        finally:
            self._done.set()

    def start(self) -> "ThreadHandle":
        self._thread.start()
        return self

    def poll(self) -> Optional[int]:
        return self.exit_code if self._done.is_set() else None

    def wait(self, timeout: Optional[float] = None) -> Optional[int]:
        self._done.wait(timeout)
        return self.poll()

    def terminate(self):
        self.stop_event.set()

    def kill(self):
        # threads cannot be killed; a stopped worker unblocks once its channels close
        self.stop_event.set()


class ThreadLauncher:
    def __init__(self):
        self.handles: Dict[str, ThreadHandle] = {}

    def launch(self, worker_id: str, manifest_path: Path, env: Dict[str, str]) -> WorkerHandle:
        manifest = TaskManifest.model_validate_json(Path(manifest_path).read_text(encoding="utf-8"))
        handle = ThreadHandle(worker_id, manifest).start()
        self.handles[worker_id] = handle
        return handle

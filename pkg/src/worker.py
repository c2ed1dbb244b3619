"""
Worker entry point.

A worker reads nothing but its manifest: ``python -m src.worker`` takes the
manifest path from FLAME_MANIFEST_PATH (or ``--manifest``). Exit codes: 0 when
the program finished, 1 on failure, 143 after a graceful stop.
"""
import argparse
import logging
import os
import signal
import sys
import threading
from pathlib import Path
from typing import Optional

from .config import settings
from .control_plane.records import TaskManifest
from .exceptions import FedorchError, StopRequested, TaskFailure
from .logger import logger, log_action, setup_trace_logger
from .roles.registry import resolve_program

EXIT_DONE = 0
EXIT_FAILED = 1
EXIT_TERMINATED = 143


def run_worker(manifest: TaskManifest, stop_event: Optional[threading.Event] = None) -> int:
    """Run one worker to completion; returns its exit code"""
    stop_event = stop_event or threading.Event()
    context = {"job_id": manifest.job_id, "worker_id": manifest.worker_id, "role": manifest.role}
    try:
        role = resolve_program(manifest.code_ref or manifest.program)(manifest, stop_event=stop_event)
    except FedorchError as e:
        log_action(logger, 'WORKER_FAILED', level=logging.ERROR, error_code=e.error_code, message=str(e), **context)
        return EXIT_FAILED

    finished = threading.Event()

    def release_on_stop():
        # closing the channels unblocks a worker waiting in recv
        while not finished.is_set():
            if stop_event.wait(0.2):
                role.channels.leave_all()
                return

    threading.Thread(target=release_on_stop, name=f"stop-{manifest.worker_id}", daemon=True).start()
    log_action(logger, 'WORKER_STARTED', message=f"program {role.program_id}", **context)
    try:
        role.run()
        return EXIT_DONE
    except StopRequested:
        log_action(logger, 'WORKER_STOPPED', message="stopped at tasklet boundary", **context)
        return EXIT_TERMINATED
    except TaskFailure as e:
        if stop_event.is_set():
            log_action(logger, 'WORKER_STOPPED', message=f"stopped during {e.alias}", **context)
            return EXIT_TERMINATED
        log_action(logger, 'WORKER_FAILED', level=logging.ERROR, error_code=e.error_code,
                   message=f"{e.alias}: {e.cause!r}", **context)
        return EXIT_FAILED
    except FedorchError as e:
        if stop_event.is_set():
            return EXIT_TERMINATED
        log_action(logger, 'WORKER_FAILED', level=logging.ERROR, error_code=e.error_code, message=str(e), **context)
        return EXIT_FAILED
    finally:
        finished.set()


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description="Run one worker from its manifest")
    parser.add_argument("--manifest", default=os.environ.get("FLAME_MANIFEST_PATH"),
                        help="Manifest JSON (default: $FLAME_MANIFEST_PATH)")
    parser.add_argument("--trace-tasklets", action="store_true", default=settings.TRACE_TASKLETS)
    args = parser.parse_args(argv)
    if not args.manifest:
        print("❌ No manifest: set FLAME_MANIFEST_PATH or pass --manifest", file=sys.stderr)
        return EXIT_FAILED

    manifest = TaskManifest.model_validate_json(Path(args.manifest).read_text(encoding="utf-8"))
    setup_trace_logger(args.trace_tasklets)

    stop_event = threading.Event()
    signal.signal(signal.SIGTERM, lambda signum, frame: stop_event.set())
    signal.signal(signal.SIGINT, lambda signum, frame: stop_event.set())
    return run_worker(manifest, stop_event)


if __name__ == "__main__":
    sys.exit(main())

"""
Non-orchestration mode: a participant starts a data-consumer worker itself.

The worker claims an open slot of a running job, receives the slot's
manifest in the claim answer and runs under a locally supervised agent.
"""
import logging
from typing import Optional

from ..client import FedorchClient
from ..config import Settings, settings as default_settings
from ..exceptions import ApiError
from ..logger import logger, log_action
from .agent import Agent


def join_unmanaged(job_id: str, worker_id: Optional[str] = None, client: Optional[FedorchClient] = None,
                   launcher=None, work_dir: str = "work", claimant: str = "",
                   settings: Settings = default_settings, wait: bool = True) -> dict:
    """
    Claim a slot (the first open one when ``worker_id`` is None) and run it.

    Returns ``{"success": ..., "worker_id": ...}``; SlotAlreadyFilled and
    JobNotRunning come back as the server's error code.
    """
    client = client or FedorchClient(settings.FEDORCH_API)
    try:
        if worker_id is None:
            slots = client.open_slots(job_id)
            if not slots:
                log_action(logger, 'JOIN_FAILED', level=logging.WARNING, job_id=job_id,
                           error_code='NO_OPEN_SLOT', message="no open slot")
                return {"success": False, "error": "no open slot", "error_code": "NO_OPEN_SLOT"}
            worker_id = slots[0]
        manifest = client.claim_slot(job_id, worker_id, claimant)
    except ApiError as e:
        log_action(logger, 'JOIN_FAILED', level=logging.WARNING, job_id=job_id, worker_id=worker_id,
                   error_code=e.error_code, message=str(e))
        return {"success": False, "error": str(e), "error_code": e.error_code, "worker_id": worker_id}

    log_action(logger, 'JOINED', job_id=job_id, worker_id=worker_id, message=f"claimed as {claimant or 'unmanaged'}")
    agent = Agent(job_id, worker_id, client, launcher, work_dir, settings, fetch=lambda: manifest)
    if not wait:
        agent.start()
        return {"success": True, "worker_id": worker_id, "agent": agent}
    result = agent.run()
    result.setdefault("worker_id", worker_id)
    return result

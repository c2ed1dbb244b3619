"""REST front of the controller and the notifier's SSE streams."""
import threading
from contextlib import asynccontextmanager
from typing import Optional

from fastapi import APIRouter, FastAPI, Request
from fastapi.responses import JSONResponse, PlainTextResponse, StreamingResponse
from pydantic import BaseModel, ValidationError

from ..exceptions import ControlPlaneError, ExpansionError, FedorchError, ParseError, SchemaError, SpecError
from ..expansion import PhysicalTopology
from ..logger import logger, log_action
from .controller import Controller
from .records import ComputeRecord, DatasetRecord, TaskStatus


class StatusReport(BaseModel):
    status: TaskStatus
    detail: str = ""
    exit_code: Optional[int] = None


class SlotClaim(BaseModel):
    claimant: str = ""


def error_status(error: FedorchError) -> int:
    if isinstance(error, ControlPlaneError):
        return error.http_status
    if isinstance(error, (SpecError, ExpansionError)):
        return 422
    return 500


async def _json(request: Request) -> dict:
    try:
        body = await request.json()
    except ValueError as e:
        raise ParseError(f"malformed request body: {e}") from e
    if not isinstance(body, dict):
        raise SchemaError("request body must be an object", path="$")
    return body


def _validated(model, body: dict):
    try:
        return model.model_validate(body)
    except ValidationError as e:
        first = e.errors()[0]
        raise SchemaError(first["msg"], path=".".join(str(p) for p in first["loc"]) or "$") from e


def build_router(controller: Controller) -> APIRouter:
    router = APIRouter()

    @router.post("/computes", status_code=201)
    async def register_compute(request: Request):
        record = _validated(ComputeRecord, await _json(request))
        return {"compute_id": controller.register_compute(record)}

    @router.get("/computes")
    def list_computes():
        return [c.model_dump(mode="json") for c in controller.computes()]

    @router.post("/datasets", status_code=201)
    async def register_dataset(request: Request):
        record = _validated(DatasetRecord, await _json(request))
        return {"dataset_id": controller.register_dataset(record)}

    @router.get("/datasets")
    def list_datasets():
        return [d.model_dump(mode="json") for d in controller.datasets()]

    @router.post("/jobs", status_code=201)
    async def create_job(request: Request):
        return {"job_id": controller.create_job(await request.body())}

    @router.get("/jobs")
    def list_jobs():
        return [{"job_id": j.job_id, "name": j.spec.job_name, "state": j.state.value}
                for j in controller.jobs()]

    @router.get("/jobs/{job_id}")
    def job_status(job_id: str):
        return controller.job(job_id).status_view()

    @router.put("/jobs/{job_id}/start")
    def start_job(job_id: str):
        topology = controller.start_job(job_id)
        return {"job_id": job_id, "state": controller.job(job_id).state.value,
                "workers": len(topology.workers)}

    @router.put("/jobs/{job_id}/stop")
    def stop_job(job_id: str):
        return {"job_id": job_id, "state": controller.stop_job(job_id).state.value}

    @router.get("/jobs/{job_id}/topology")
    def job_topology(job_id: str, format: str = "json"):
        job = controller.job(job_id)
        if job.topology is None:
            return JSONResponse({"error": "job not started", "error_code": "WRONG_STATE"}, status_code=409)
        if format == "dot":
            return PlainTextResponse(PhysicalTopology.from_document(job.topology).to_dot())
        return job.topology

    @router.put("/jobs/{job_id}/tasks/{worker_id}/status")
    def task_status(job_id: str, worker_id: str, report: StatusReport):
        job = controller.update_task_status(job_id, worker_id, report.status, report.detail, report.exit_code)
        return {"job_id": job_id, "state": job.state.value}

    @router.put("/jobs/{job_id}/tasks/{worker_id}/heartbeat", status_code=204)
    def task_heartbeat(job_id: str, worker_id: str):
        controller.heartbeat(job_id, worker_id)

    @router.get("/jobs/{job_id}/manifests/{worker_id}")
    def task_manifest(job_id: str, worker_id: str):
        return controller.manifest(job_id, worker_id).model_dump(mode="json")

    @router.get("/jobs/{job_id}/slots")
    def open_slots(job_id: str):
        return {"job_id": job_id, "slots": controller.open_slots(job_id)}

    @router.post("/jobs/{job_id}/slots/{worker_id}/claim")
    def claim_slot(job_id: str, worker_id: str, claim: Optional[SlotClaim] = None):
        manifest = controller.claim_slot(job_id, worker_id, claim.claimant if claim else "")
        return manifest.model_dump(mode="json")

    @router.get("/events")
    def list_events(job_id: Optional[str] = None):
        return [e.model_dump(mode="json") for e in controller.notifier.events(job_id)]

    @router.get("/notify/{subscriber}")
    def notify(subscriber: str):
        controller.notifier.attach(subscriber)
        return StreamingResponse(controller.notifier.stream(subscriber), media_type="text/event-stream",
                                 headers={"Cache-Control": "no-cache"})

    @router.put("/notify/{subscriber}/ack/{event_id}")
    def ack(subscriber: str, event_id: int):
        return controller.notifier.ack(subscriber, event_id).model_dump(mode="json")

    return router


def _monitor(controller: Controller, stop: threading.Event):
    period = controller.settings.HEARTBEAT_PERIOD_S
    while not stop.wait(period):
        try:
            controller.check_heartbeats()
        except Exception as e:
            log_action(logger, 'MONITOR_ERROR', message=str(e))


def create_app(controller: Optional[Controller] = None, monitor: bool = True) -> FastAPI:
    """
    The control-plane application.

    With ``monitor`` a background thread fails running tasks that stop
    sending heartbeats.
    """
    controller = controller or Controller()

    @asynccontextmanager
    async def lifespan(app: FastAPI):
        stop = threading.Event()
        if monitor:
            threading.Thread(target=_monitor, args=(controller, stop), name="heartbeat-monitor",
                             daemon=True).start()
        yield
        stop.set()

    app = FastAPI(title="fedorch control plane", lifespan=lifespan)
    app.state.controller = controller

    @app.exception_handler(FedorchError)
    async def fedorch_error(request: Request, exc: FedorchError):
        return JSONResponse(exc.to_dict(), status_code=error_status(exc))

    app.include_router(build_router(controller))
    return app

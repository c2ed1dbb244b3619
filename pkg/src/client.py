import json
from typing import Any, Dict, Iterator, List, Optional, Union

import httpx

from .config import settings
from .control_plane.records import Event, TaskManifest
from .exceptions import ApiError
from .logger import logger


class FedorchClient:
    """Wrapper for the control-plane REST API with error handling"""

    def __init__(self, base_url: Optional[str] = None, timeout: float = 30.0,
                 http: Optional[httpx.Client] = None):
        self.base_url = (base_url or settings.FEDORCH_API).rstrip("/")
        # any httpx.Client works, including an ASGI test client
        self.http = http or httpx.Client(base_url=self.base_url, timeout=timeout)

    def close(self):
        self.http.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _request(self, method: str, path: str, **kwargs) -> Any:
        try:
            response = self.http.request(method, path, **kwargs)
        except httpx.HTTPError as e:
            logger.error(f"{method} {path} failed: {e}")
            raise ApiError(0, {"error": f"control plane unreachable: {e}", "error_code": "UNREACHABLE"}) from e
        if response.status_code >= 400:
            try:
                body = response.json()
            except ValueError:
                body = {"error": response.text}
            raise ApiError(response.status_code, body)
        if response.status_code == 204 or not response.content:
            return None
        if response.headers.get("content-type", "").startswith("application/json"):
            return response.json()
        return response.text

    # ---- registration ----

    def register_compute(self, compute_id: str, realm: str, capacity: int = 4, endpoint: str = "") -> str:
        body = {"compute_id": compute_id, "realm": realm, "capacity": capacity, "endpoint": endpoint}
        return self._request("POST", "/computes", json=body)["compute_id"]

    def register_dataset(self, dataset_id: str, realm: str, url: str, owner: str = "",
                         managed: bool = True) -> str:
        body = {"dataset_id": dataset_id, "realm": realm, "url": url, "owner": owner, "managed": managed}
        return self._request("POST", "/datasets", json=body)["dataset_id"]

    def list_computes(self) -> List[dict]:
        return self._request("GET", "/computes")

    def list_datasets(self) -> List[dict]:
        return self._request("GET", "/datasets")

    # ---- jobs ----

    def create_job(self, document: Union[str, dict]) -> str:
        content = document if isinstance(document, str) else json.dumps(document)
        return self._request("POST", "/jobs", content=content,
                             headers={"content-type": "application/json"})["job_id"]

    def start_job(self, job_id: str) -> dict:
        return self._request("PUT", f"/jobs/{job_id}/start")

    def stop_job(self, job_id: str) -> dict:
        return self._request("PUT", f"/jobs/{job_id}/stop")

    def job_status(self, job_id: str) -> dict:
        return self._request("GET", f"/jobs/{job_id}")

    def list_jobs(self) -> List[dict]:
        return self._request("GET", "/jobs")

    def topology(self, job_id: str, dot: bool = False) -> Union[dict, str]:
        return self._request("GET", f"/jobs/{job_id}/topology", params={"format": "dot" if dot else "json"})

    def events(self, job_id: Optional[str] = None) -> List[dict]:
        return self._request("GET", "/events", params={"job_id": job_id} if job_id else None)

    # ---- agents ----

    def report_status(self, job_id: str, worker_id: str, status: str, detail: str = "",
                      exit_code: Optional[int] = None) -> dict:
        body = {"status": status, "detail": detail, "exit_code": exit_code}
        return self._request("PUT", f"/jobs/{job_id}/tasks/{worker_id}/status", json=body)

    def heartbeat(self, job_id: str, worker_id: str):
        self._request("PUT", f"/jobs/{job_id}/tasks/{worker_id}/heartbeat")

    def fetch_manifest(self, job_id: str, worker_id: str) -> TaskManifest:
        return TaskManifest.model_validate(self._request("GET", f"/jobs/{job_id}/manifests/{worker_id}"))

    def open_slots(self, job_id: str) -> List[str]:
        return self._request("GET", f"/jobs/{job_id}/slots")["slots"]

    def claim_slot(self, job_id: str, worker_id: str, claimant: str = "") -> TaskManifest:
        body = self._request("POST", f"/jobs/{job_id}/slots/{worker_id}/claim", json={"claimant": claimant})
        return TaskManifest.model_validate(body)

    # ---- notifier ----

    def ack_event(self, subscriber: str, event_id: int) -> dict:
        return self._request("PUT", f"/notify/{subscriber}/ack/{event_id}")

    def stream_events(self, subscriber: str) -> Iterator[Event]:
        """Yield events from the subscriber's SSE stream until the server closes it"""
        try:
            with self.http.stream("GET", f"/notify/{subscriber}",
                                  timeout=httpx.Timeout(None, connect=10.0)) as response:
                if response.status_code >= 400:
                    response.read()
                    try:
                        body = response.json()
                    except ValueError:
                        body = {"error": response.text}
                    raise ApiError(response.status_code, body)
                for event in parse_sse(response.iter_lines()):
                    yield event
        except httpx.HTTPError as e:
            raise ApiError(0, {"error": f"notify stream dropped: {e}", "error_code": "UNREACHABLE"}) from e


def parse_sse(lines: Iterator[str]) -> Iterator[Event]:
    """Turn SSE lines into events; comments (keepalives) are skipped"""
    fields: Dict[str, str] = {}
    for line in lines:
        if not line:
            if "data" in fields:
                yield Event.model_validate(json.loads(fields["data"]))
            fields = {}
            continue
        if line.startswith(":"):
            continue
        key, _, value = line.partition(":")
        value = value[1:] if value.startswith(" ") else value
        fields[key] = fields[key] + "\n" + value if key in fields else value

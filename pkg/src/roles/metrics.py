import csv
import math
from pathlib import Path
from typing import List, Optional

from pydantic import BaseModel, field_validator

METRICS_HEADER = ["round", "worker_id", "role", "duration_ms", "upload_ms", "loss", "accuracy", "bytes_sent"]
# per-worker files also carry bytes_received
WORKER_HEADER = METRICS_HEADER + ["bytes_received"]
TRAFFIC_FILE = "traffic.csv"
TRAFFIC_HEADER = ["round", "worker_id", "role", "bytes_sent", "bytes_received"]


class RoundMetrics(BaseModel):
    round: int
    worker_id: str
    role: str
    duration_ms: float = 0.0
    upload_ms: float = 0.0
    loss: float = float("nan")
    accuracy: float = float("nan")
    bytes_sent: int = 0
    bytes_received: int = 0

    @field_validator("duration_ms", "upload_ms", "bytes_sent", "bytes_received")
    @classmethod
    def _non_negative(cls, value):
        return max(value, 0)

    @field_validator("accuracy")
    @classmethod
    def _unit_interval(cls, value):
        return value if math.isnan(value) else min(max(value, 0.0), 1.0)

    def row(self) -> List[str]:
        def fmt(value: float) -> str:
            return "" if math.isnan(value) else f"{value:.6g}"
        return [str(self.round), self.worker_id, self.role, f"{self.duration_ms:.3f}",
                f"{self.upload_ms:.3f}", fmt(self.loss), fmt(self.accuracy), str(self.bytes_sent),
                str(self.bytes_received)]


class MetricsWriter:
    """Appends one worker's rows to ``<artifact_dir>/metrics/<worker_id>.csv``"""

    def __init__(self, artifact_dir: str, worker_id: str):
        self.path = Path(artifact_dir) / "metrics" / f"{worker_id}.csv"
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.rows: List[RoundMetrics] = []
        with self.path.open("w", newline="", encoding="utf-8") as f:
            csv.writer(f).writerow(WORKER_HEADER)

    def write(self, metrics: RoundMetrics):
        self.rows.append(metrics)
        with self.path.open("a", newline="", encoding="utf-8") as f:
            csv.writer(f).writerow(metrics.row())


def read_metrics(path: Path) -> List[RoundMetrics]:
    rows = []
    with Path(path).open(newline="", encoding="utf-8") as f:
        for record in csv.DictReader(f):
            rows.append(RoundMetrics(
                round=int(record["round"]),
                worker_id=record["worker_id"],
                role=record["role"],
                duration_ms=float(record["duration_ms"] or 0),
                upload_ms=float(record["upload_ms"] or 0),
                loss=float(record["loss"]) if record["loss"] else float("nan"),
                accuracy=float(record["accuracy"]) if record["accuracy"] else float("nan"),
                bytes_sent=int(record["bytes_sent"] or 0),
                bytes_received=int(record.get("bytes_received") or 0),
            ))
    return rows


def merge_metrics(artifact_dir: str, target: Optional[Path] = None) -> Path:
    """
    Merge per-worker files into the job's ``metrics.csv`` ordered by (round, worker_id).

    ``metrics.csv`` carries exactly METRICS_HEADER; received byte counts go
    to ``traffic.csv`` next to it.
    """
    root = Path(artifact_dir)
    rows: List[RoundMetrics] = []
    for path in sorted((root / "metrics").glob("*.csv")):
        rows.extend(read_metrics(path))
    rows.sort(key=lambda m: (m.round, m.worker_id))

    target = target or root / "metrics.csv"
    target.parent.mkdir(parents=True, exist_ok=True)
    with target.open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(METRICS_HEADER)
        for m in rows:
            writer.writerow(m.row()[:len(METRICS_HEADER)])
    with (target.parent / TRAFFIC_FILE).open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(TRAFFIC_HEADER)
        for m in rows:
            writer.writerow([m.round, m.worker_id, m.role, m.bytes_sent, m.bytes_received])
    return target


def read_job_metrics(artifact_dir) -> List[RoundMetrics]:
    """Rows of a finished job's ``metrics.csv`` with received bytes joined in from ``traffic.csv``"""
    root = Path(artifact_dir)
    rows = read_metrics(root / "metrics.csv")
    traffic = root / TRAFFIC_FILE
    if not traffic.exists():
        return rows
    with traffic.open(newline="", encoding="utf-8") as f:
        received = {(int(r["round"]), r["worker_id"]): int(r["bytes_received"] or 0) for r in csv.DictReader(f)}
    return [m.model_copy(update={"bytes_received": received.get((m.round, m.worker_id), 0)}) for m in rows]

"""Shared pieces of the experiment harness."""
import csv
import json
import math
from datetime import datetime
from pathlib import Path
from statistics import mean
from typing import Dict, Iterable, List, Optional, Sequence

from pydantic import BaseModel, Field

from ..control_plane.records import ComputeRecord, DatasetRecord, JobRecord
from ..roles.data import synthetic_url
from ..roles.metrics import RoundMetrics, read_job_metrics


class ExperimentResult(BaseModel):
    name: str
    output_dir: str
    summary: Dict = Field(default_factory=dict)
    checks: Dict[str, bool] = Field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(self.checks.values())

    def failed_checks(self) -> List[str]:
        return [name for name, ok in self.checks.items() if not ok]

    def write_summary(self) -> Path:
        path = Path(self.output_dir) / "summary.json"
        body = {"experiment": self.name, "passed": self.passed, "checks": self.checks, **self.summary}
        path.write_text(json.dumps(body, indent=2, default=str), encoding="utf-8")
        return path


def run_directory(root: str, name: str) -> Path:
    """``<root>/<name>/<timestamp>``, suffixed when two runs share a second"""
    base = Path(root) / name / datetime.now().strftime("%Y%m%d-%H%M%S")
    path, n = base, 1
    while path.exists():
        path = base.with_name(f"{base.name}-{n}")
        n += 1
    path.mkdir(parents=True)
    return path


def dataset_names(count: int, prefix: str = "ds") -> List[str]:
    return [f"{prefix}{i:05d}" for i in range(count)]


def split_groups(names: Sequence[str], groups: int, prefix: str = "group") -> Dict[str, List[str]]:
    """Contiguous, near-equal groups in name order"""
    size, extra = divmod(len(names), groups)
    result, start = {}, 0
    for g in range(groups):
        end = start + size + (1 if g < extra else 0)
        result[f"{prefix}-{g}"] = list(names[start:end])
        start = end
    return result


def synthetic_records(names: Iterable[str], seed: int, realm: str = "local", n: int = 100, d: int = 8,
                      skew: float = 0.5, managed: bool = True) -> List[DatasetRecord]:
    """Registrations for synthetic datasets sharing one ground-truth model"""
    return [DatasetRecord(dataset_id=name, realm=realm, managed=managed,
                          url=synthetic_url(name, seed=seed * 100003 + i, n=n, d=d, skew=skew, noise=0.1,
                                            model_seed=seed))
            for i, name in enumerate(names)]


def local_computes(capacity: int, realms: Sequence[str] = ("local",)) -> List[ComputeRecord]:
    return [ComputeRecord(compute_id=f"compute-{realm.replace('/', '-')}", realm=realm, capacity=capacity)
            for realm in realms]


def role_rows(artifact_dir: Path, role: str) -> List[RoundMetrics]:
    path = Path(artifact_dir) / "metrics.csv"
    if not path.exists():
        return []
    return sorted((m for m in read_job_metrics(artifact_dir) if m.role == role), key=lambda m: m.round)


def time_to_target(rows: Sequence[RoundMetrics], target: float) -> Optional[float]:
    """Cumulative round time (s) until the first round whose loss reaches ``target``"""
    elapsed = 0.0
    for m in rows:
        elapsed += m.duration_ms / 1000.0
        if not math.isnan(m.loss) and m.loss <= target:
            return elapsed
    return None


def mean_or_nan(values: Sequence[float]) -> float:
    return mean(values) if values else float("nan")


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    with Path(path).open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(list(header))
        for row in rows:
            writer.writerow(list(row))
    return path


def job_outcome(job: JobRecord) -> Dict:
    return {"state": job.state.value, "error": job.error,
            "tasks": {w: t.status.value for w, t in sorted(job.tasks.items())}}

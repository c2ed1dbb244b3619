"""
Expansion latency of C-FL against CO-FL at equal trainer counts.

Each measurement covers expansion plus rendering the topology document the
controller persists. CO-FL runs with a fixed number of aggregator replicas
and a coordinator.
"""
import time
from pathlib import Path
from typing import List, Sequence

from ..expansion import expand
from ..logger import logger, log_action
from ..tag.parser import parse_job_spec
from ..templates import classical, coordinated
from .common import ExperimentResult, dataset_names, local_computes, run_directory, synthetic_records, write_csv

NAME = "expansion-overhead"
DEFAULT_SIZES = (100, 1000, 10000)

# below this latency timer noise dominates the comparisons
MIN_COMPARABLE_S = 0.05


def time_expansion(document: dict, datasets, computes) -> float:
    spec = parse_job_spec(document)
    started = time.perf_counter()
    topology = expand(spec, datasets, computes, job_id=spec.job_name)
    topology.to_document()
    return time.perf_counter() - started


def run(output_root: str = "artifacts", sizes: Sequence[int] = DEFAULT_SIZES, replicas: int = 100,
        seed: int = 0) -> ExperimentResult:
    out = run_directory(output_root, NAME)
    computes = local_computes(capacity=max(sizes) + replicas + 2)
    rows: List[dict] = []
    for size in sorted(sizes):
        names = dataset_names(size)
        datasets = synthetic_records(names, seed)
        cfl_s = time_expansion(classical(names), datasets, computes)
        cofl_s = time_expansion(coordinated(names, aggregators=replicas), datasets, computes)
        rows.append({"trainers": size, "cfl_s": cfl_s, "cofl_s": cofl_s, "ratio": cofl_s / cfl_s if cfl_s else None,
                     "cfl_us_per_worker": cfl_s / size * 1e6})
        log_action(logger, 'EXPERIMENT_RUN', message=f"{NAME}: {size} trainers c-fl={cfl_s:.3f}s co-fl={cofl_s:.3f}s")

    write_csv(Path(out) / "expansion.csv", ["trainers", "cfl_s", "cofl_s", "ratio"],
              ([r["trainers"], f"{r['cfl_s']:.6f}", f"{r['cofl_s']:.6f}", f"{r['ratio']:.3f}" if r["ratio"] else ""]
               for r in rows))

    comparable = [r for r in rows if r["cfl_s"] >= MIN_COMPARABLE_S]
    per_worker = [r["cfl_us_per_worker"] for r in comparable]
    result = ExperimentResult(
        name=NAME,
        output_dir=str(out),
        summary={"seed": seed, "replicas": replicas, "rows": rows},
        checks={
            "cofl_within_1.5x": all(r["ratio"] <= 1.5 for r in comparable),
            "linear_within_2x": not per_worker or max(per_worker) <= 2 * min(per_worker),
        },
    )
    result.write_summary()
    return result

"""
Coordinated vs. hierarchical FL with one slow aggregator.

Both jobs share datasets, seeds and the injected upload delay of
``aggregator-1``. The coordinated job must exclude the slow aggregator on
the binary-backoff schedule, and its rounds without the straggler must be
faster than the rounds with it.
"""
import json
from pathlib import Path
from typing import Dict, List

from ..config import Settings, settings as default_settings
from ..local_runner import LocalStack
from ..logger import logger, log_action
from ..roles.coordinator import DETECT_AFTER, MAX_EXCLUSION
from ..templates import coordinated, hierarchical
from .common import (ExperimentResult, dataset_names, job_outcome, local_computes, mean_or_nan,
                     role_rows, run_directory, split_groups, synthetic_records, write_csv)

NAME = "coordinated-vs-hierarchical"
STRAGGLER = "aggregator-1"


def backoff_schedule(first_delayed: int, rounds: int, detect_after: int = DETECT_AFTER,
                     cap: int = MAX_EXCLUSION) -> List[int]:
    """
    Rounds a persistently slow aggregator sits out.

    After ``detect_after`` delayed rounds it is excluded for 1 round, then
    each failed trial round doubles the exclusion up to ``cap``.
    """
    excluded = []
    start, length = first_delayed + detect_after, 1
    while start <= rounds:
        excluded.extend(range(start, min(start + length, rounds + 1)))
        start += length + 1
        length = min(length * 2, cap)
    return excluded


def run(output_root: str = "artifacts", seed: int = 0, rounds: int = 40, trainers: int = 10,
        delay_ms: float = 60.0, straggler_from_round: int = 1, full_stack: bool = False,
        settings: Settings = default_settings, timeout: float = 120.0) -> ExperimentResult:
    out = run_directory(output_root, NAME)
    names = dataset_names(trainers)
    hyperparams = {"rounds": rounds, "dims": 8, "epochs": 1, "learningRate": 0.05,
                   "straggler_worker": STRAGGLER, "straggler_from_round": straggler_from_round,
                   "straggler_delay_ms": delay_ms, "straggler_floor_ms": 10.0}
    documents = {
        "hierarchical": hierarchical(split_groups(names, 2), hyperparams),
        "coordinated": coordinated(names, aggregators=2, hyperparams=hyperparams),
    }

    runs: Dict[str, dict] = {}
    for label, document in documents.items():
        log_action(logger, 'EXPERIMENT_RUN', message=f"{NAME}: {label} ({rounds} rounds)")
        with LocalStack(out / label, settings, processes=full_stack) as stack:
            stack.register(local_computes(capacity=trainers + 8), synthetic_records(names, seed, d=8))
            job = stack.run(document, timeout)
            rows = role_rows(stack.artifact_dir(job.job_id), "global-aggregator")
            coordination = stack.artifact_dir(job.job_id) / "coordination.json"
            runs[label] = {
                "outcome": job_outcome(job),
                "round_ms": {m.round: m.duration_ms for m in rows},
                "schedule": json.loads(coordination.read_text(encoding="utf-8")) if coordination.exists() else None,
            }

    schedule = runs["coordinated"]["schedule"] or {"rounds": []}
    excluded = [r["round"] for r in schedule["rounds"] if STRAGGLER not in r["enabled"]]
    expected = backoff_schedule(straggler_from_round, rounds)
    cofl_ms = runs["coordinated"]["round_ms"]
    hfl_ms = runs["hierarchical"]["round_ms"]
    slow_rounds = [cofl_ms[r] for r in cofl_ms if r >= straggler_from_round and r not in excluded]
    fast_rounds = [cofl_ms[r] for r in cofl_ms if r in excluded]

    write_csv(Path(out) / "rounds.csv", ["round", "hierarchical_ms", "coordinated_ms", "straggler_enabled"],
              ([r, f"{hfl_ms.get(r, float('nan')):.3f}", f"{cofl_ms.get(r, float('nan')):.3f}", int(r not in excluded)]
               for r in range(1, rounds + 1)))

    hfl_total = sum(hfl_ms.values()) / 1000.0
    cofl_total = sum(cofl_ms.values()) / 1000.0
    result = ExperimentResult(
        name=NAME,
        output_dir=str(out),
        summary={
            "seed": seed,
            "rounds": rounds,
            "trainers": trainers,
            "straggler": STRAGGLER,
            "straggler_delay_ms": delay_ms,
            "excluded_rounds": excluded,
            "expected_excluded_rounds": expected,
            "hierarchical_s": hfl_total,
            "coordinated_s": cofl_total,
            "speedup": hfl_total / cofl_total if cofl_total else None,
            "mean_round_ms_with_straggler": mean_or_nan(slow_rounds),
            "mean_round_ms_without_straggler": mean_or_nan(fast_rounds),
            "jobs": {label: r["outcome"] for label, r in runs.items()},
        },
        checks={
            "jobs_completed": all(r["outcome"]["state"] == "completed" for r in runs.values()),
            "backoff_schedule": excluded == expected,
            "exclusion_rounds_faster": bool(slow_rounds and fast_rounds)
            and mean_or_nan(fast_rounds) < mean_or_nan(slow_rounds),
        },
    )
    result.write_summary()
    return result

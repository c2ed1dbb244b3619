"""
Hybrid vs. classical FL with one bandwidth-limited trainer.

The straggler's broker link is shaped to ``straggler_bps``; in the hybrid
job trainers of a group average over a point-to-point channel shaped to
``p2p_bps`` and only one copy per group reaches the aggregator.
"""
import math
from pathlib import Path
from typing import Dict

from ..config import Settings, settings as default_settings
from ..local_runner import LocalStack
from ..logger import logger, log_action
from ..templates import classical, hybrid
from .common import (ExperimentResult, dataset_names, job_outcome, local_computes, mean_or_nan,
                     role_rows, run_directory, split_groups, synthetic_records, time_to_target, write_csv)

NAME = "hybrid-vs-classical"


def run(output_root: str = "artifacts", seed: int = 0, rounds: int = 10, trainers: int = 10, groups: int = 2,
        dims: int = 2000, straggler_bps: float = 1e6, p2p_bps: float = 1e8, full_stack: bool = False,
        settings: Settings = default_settings, timeout: float = 300.0) -> ExperimentResult:
    out = run_directory(output_root, NAME)
    names = dataset_names(trainers)
    straggler = f"trainer-{trainers - 1}"
    hyperparams = {"rounds": rounds, "dims": dims, "epochs": 1, "learningRate": 0.05}
    shaped = {"kind": "BrokerSim", "bandwidthShape": {straggler: straggler_bps}}
    classical_doc = classical(names, hyperparams)
    classical_doc["channels"][0]["backend"] = shaped
    documents = {
        "classical": classical_doc,
        "hybrid": hybrid(split_groups(names, groups), hyperparams, straggler=straggler,
                         straggler_bps=straggler_bps, p2p_bps=p2p_bps),
    }

    runs: Dict[str, dict] = {}
    for label, document in documents.items():
        log_action(logger, 'EXPERIMENT_RUN', message=f"{NAME}: {label} ({rounds} rounds, {dims} dims)")
        with LocalStack(out / label, settings, processes=full_stack) as stack:
            stack.register(local_computes(capacity=trainers + 4), synthetic_records(names, seed, d=dims))
            job = stack.run(document, timeout)
            rows = role_rows(stack.artifact_dir(job.job_id), "global-aggregator")
        runs[label] = {"outcome": job_outcome(job), "rows": rows}
        write_csv(Path(out) / f"{label}.csv", ["round", "duration_ms", "loss", "bytes_received"],
                  ([m.round, f"{m.duration_ms:.3f}", "" if math.isnan(m.loss) else f"{m.loss:.9g}", m.bytes_received]
                   for m in rows))

    final = [r["rows"][-1].loss for r in runs.values() if r["rows"]]
    # both topologies compute the same averages, so the worse final loss is reachable by both
    target = max(final) * (1 + 1e-9) if len(final) == 2 else float("nan")
    t_classical = time_to_target(runs["classical"]["rows"], target)
    t_hybrid = time_to_target(runs["hybrid"]["rows"], target)
    speedup = t_classical / t_hybrid if t_classical and t_hybrid else None

    def bytes_per_round(label: str) -> float:
        return mean_or_nan([m.bytes_received for m in runs[label]["rows"]])

    per_group = trainers / groups
    reduction = bytes_per_round("classical") / bytes_per_round("hybrid") if bytes_per_round("hybrid") else None
    result = ExperimentResult(
        name=NAME,
        output_dir=str(out),
        summary={
            "seed": seed,
            "rounds": rounds,
            "trainers": trainers,
            "groups": groups,
            "straggler": straggler,
            "straggler_bps": straggler_bps,
            "p2p_bps": p2p_bps,
            "target_loss": target,
            "classical_s": t_classical,
            "hybrid_s": t_hybrid,
            "speedup": speedup,
            "aggregator_bytes_per_round": {label: bytes_per_round(label) for label in runs},
            "bytes_reduction": reduction,
            "expected_bytes_reduction": per_group,
            "jobs": {label: r["outcome"] for label, r in runs.items()},
        },
        checks={
            "jobs_completed": all(r["outcome"]["state"] == "completed" for r in runs.values()),
            "hybrid_faster": speedup is not None and speedup >= 1.5,
            "bytes_reduced_by_group_size": reduction is not None and abs(reduction - per_group) <= 0.1 * per_group,
        },
    )
    result.write_summary()
    return result

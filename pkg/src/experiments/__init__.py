"""Reproduction harness. Each experiment writes ``<root>/<name>/<timestamp>/summary.json``."""
from typing import Callable, Dict

from . import coordination, expansion_overhead, hybrid
from .common import ExperimentResult

EXPERIMENTS: Dict[str, Callable[..., ExperimentResult]] = {
    coordination.NAME: coordination.run,
    hybrid.NAME: hybrid.run,
    expansion_overhead.NAME: expansion_overhead.run,
}


def run_experiment(name: str, **options) -> ExperimentResult:
    try:
        runner = EXPERIMENTS[name]
    except KeyError:
        raise KeyError(f"unknown experiment {name!r}; choose from {', '.join(EXPERIMENTS)}") from None
    return runner(**options)


__all__ = ["EXPERIMENTS", "ExperimentResult", "run_experiment"]

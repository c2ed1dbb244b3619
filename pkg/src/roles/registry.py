"""Program id -> role class resolution."""
import importlib
from typing import Dict, Type

from ..exceptions import UnknownProgram
from .aggregator import Aggregator, GlobalAggregator
from .base import Role
from .coordinated import CoordinatedAggregator, CoordinatedGlobalAggregator, CoordinatedTrainer
from .coordinator import Coordinator
from .distributed import DistributedTrainer, HybridAggregator, HybridTrainer
from .trainer import Trainer

PROGRAMS: Dict[str, Type[Role]] = {
    cls.program_id: cls
    for cls in (Trainer, Aggregator, GlobalAggregator, Coordinator, CoordinatedTrainer,
                CoordinatedAggregator, CoordinatedGlobalAggregator, DistributedTrainer,
                HybridTrainer, HybridAggregator)
}


def code_ref(program: str) -> str:
    """``module:Class`` reference recorded in manifests"""
    cls = resolve_program(program)
    return f"{cls.__module__}:{cls.__qualname__}"


def resolve_program(program: str) -> Type[Role]:
    """
    Resolve a built-in program id or a ``package.module:ClassName`` reference.

    Raises UnknownProgram when neither resolves to a Role subclass.
    """
    if program in PROGRAMS:
        return PROGRAMS[program]
    if ":" not in program:
        raise UnknownProgram(f"unknown program {program!r}", program=program)
    module_name, _, class_name = program.partition(":")
    try:
        cls = getattr(importlib.import_module(module_name), class_name)
    except (ImportError, AttributeError) as e:
        raise UnknownProgram(f"cannot load {program!r}: {e}", program=program) from e
    if not (isinstance(cls, type) and issubclass(cls, Role)):
        raise UnknownProgram(f"{program!r} is not a role program", program=program)
    return cls

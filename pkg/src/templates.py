"""
Built-in topology templates and the change list between two of them.

Every template is a plain job document; ``load_template`` parses it into a
JobSpec. Role and channel names stay stable across templates so that
``diff_templates`` reports the transformation a user would make by hand.
"""
from typing import Callable, Dict, List, Mapping, Optional, Sequence

from pydantic import BaseModel, Field

from .tag.models import JobSpec
from .tag.parser import parse_job_spec

DEFAULT_DATASETS = ["A", "B", "C", "D"]
DEFAULT_GROUPS = {"west": ["A", "B"], "east": ["C", "D"]}

DEFAULT_HYPERPARAMS = {"rounds": 5, "epochs": 1, "learningRate": 0.05, "dims": 8}

PARAM = "param-channel"
GLOBAL = "global-channel"
GROUP = "group-channel"
COORD_GLOBAL = "coord-global-channel"
COORD_AGGREGATOR = "coord-aggregator-channel"
COORD_TRAINER = "coord-trainer-channel"

TRAINER_TAGS = ["fetch", "upload"]
AGGREGATOR_TAGS = ["distribute", "aggregate"]


def _hyperparams(overrides: Optional[Mapping]) -> dict:
    return {**DEFAULT_HYPERPARAMS, **(overrides or {})}


def _role(name: str, program: str, entries: Sequence[dict] = (), replica: int = 1,
          data_consumer: bool = False) -> dict:
    return {"name": name, "program": program, "replica": replica, "isDataConsumer": data_consumer,
            "groupAssociation": [dict(e) for e in entries]}


def _channel(name: str, pair: Sequence[str], func_tags: Dict[str, List[str]],
             group_by: Sequence[str] = ("default",), backend="BrokerSim") -> dict:
    return {"name": name, "pair": list(pair), "groupBy": list(group_by), "funcTags": func_tags,
            "backend": backend}


def classical(datasets: Optional[Sequence[str]] = None, hyperparams: Optional[Mapping] = None,
              name: str = "c-fl") -> dict:
    """Trainers around one global aggregator"""
    return {
        "name": name,
        "roles": [
            _role("trainer", "trainer", [{PARAM: "default"}], data_consumer=True),
            _role("global-aggregator", "global-aggregator", [{PARAM: "default"}]),
        ],
        "channels": [
            _channel(PARAM, ["trainer", "global-aggregator"],
                     {"trainer": TRAINER_TAGS, "global-aggregator": AGGREGATOR_TAGS}),
        ],
        "datasetGroups": {"default": list(datasets or DEFAULT_DATASETS)},
        "hyperparams": _hyperparams(hyperparams),
    }


def hierarchical(dataset_groups: Optional[Mapping[str, Sequence[str]]] = None,
                 hyperparams: Optional[Mapping] = None, name: str = "h-fl") -> dict:
    """One aggregator per dataset group under a global aggregator"""
    groups = {g: list(ds) for g, ds in (dataset_groups or DEFAULT_GROUPS).items()}
    return {
        "name": name,
        "roles": [
            _role("trainer", "trainer", [{PARAM: g} for g in groups], data_consumer=True),
            _role("aggregator", "aggregator", [{PARAM: g, GLOBAL: "default"} for g in groups]),
            _role("global-aggregator", "global-aggregator", [{GLOBAL: "default"}]),
        ],
        "channels": [
            _channel(PARAM, ["trainer", "aggregator"],
                     {"trainer": TRAINER_TAGS, "aggregator": AGGREGATOR_TAGS}, group_by=list(groups)),
            _channel(GLOBAL, ["aggregator", "global-aggregator"],
                     {"aggregator": TRAINER_TAGS, "global-aggregator": AGGREGATOR_TAGS}),
        ],
        "datasetGroups": groups,
        "hyperparams": _hyperparams(hyperparams),
    }


def coordinated(datasets: Optional[Sequence[str]] = None, aggregators: int = 2,
                hyperparams: Optional[Mapping] = None, name: str = "co-fl") -> dict:
    """
    Hierarchical topology with replicated aggregators and a coordinator.

    Every trainer is linked to every aggregator; the coordinator picks the
    live links each round.
    """
    return {
        "name": name,
        "roles": [
            _role("trainer", "coordinated-trainer", [{PARAM: "default", COORD_TRAINER: "default"}],
                  data_consumer=True),
            _role("aggregator", "coordinated-aggregator",
                  [{PARAM: "default", GLOBAL: "default", COORD_AGGREGATOR: "default"}], replica=aggregators),
            _role("global-aggregator", "coordinated-global-aggregator",
                  [{GLOBAL: "default", COORD_GLOBAL: "default"}]),
            _role("coordinator", "coordinator",
                  [{COORD_GLOBAL: "default", COORD_AGGREGATOR: "default", COORD_TRAINER: "default"}]),
        ],
        "channels": [
            _channel(PARAM, ["trainer", "aggregator"],
                     {"trainer": TRAINER_TAGS, "aggregator": AGGREGATOR_TAGS}),
            _channel(GLOBAL, ["aggregator", "global-aggregator"],
                     {"aggregator": TRAINER_TAGS, "global-aggregator": AGGREGATOR_TAGS}),
            _channel(COORD_GLOBAL, ["global-aggregator", "coordinator"],
                     {"global-aggregator": ["coordinate"], "coordinator": ["coordinate_global"]}),
            _channel(COORD_AGGREGATOR, ["aggregator", "coordinator"],
                     {"aggregator": ["coordinate"], "coordinator": ["coordinate_aggregator"]}),
            _channel(COORD_TRAINER, ["trainer", "coordinator"],
                     {"trainer": ["coordinate"], "coordinator": ["coordinate_trainer"]}),
        ],
        "datasetGroups": {"default": list(datasets or DEFAULT_DATASETS)},
        "hyperparams": _hyperparams(hyperparams),
    }


def distributed(datasets: Optional[Sequence[str]] = None, hyperparams: Optional[Mapping] = None,
                name: str = "distributed") -> dict:
    """Trainers averaging among themselves over a self channel"""
    return {
        "name": name,
        "roles": [_role("trainer", "distributed-trainer", [{PARAM: "default"}], data_consumer=True)],
        "channels": [
            _channel(PARAM, ["trainer", "trainer"], {"trainer": ["allreduce"]}),
        ],
        "datasetGroups": {"default": list(datasets or DEFAULT_DATASETS)},
        "hyperparams": _hyperparams(hyperparams),
    }


def hybrid(dataset_groups: Optional[Mapping[str, Sequence[str]]] = None, hyperparams: Optional[Mapping] = None,
           straggler: Optional[str] = None, straggler_bps: float = 1e6, p2p_bps: float = 1e8,
           name: str = "hybrid") -> dict:
    """
    Co-located trainers average over a fast point-to-point group channel and
    one copy per group goes to the global aggregator through the broker.

    ``straggler`` (a worker id or glob) gets ``straggler_bps`` on its
    broker link.
    """
    groups = {g: list(ds) for g, ds in (dataset_groups or {"group-0": ["A", "B"], "group-1": ["C", "D"]}).items()}
    param_backend = {"kind": "BrokerSim", "bandwidthShape": {straggler: straggler_bps}} if straggler else "BrokerSim"
    return {
        "name": name,
        "roles": [
            _role("trainer", "hybrid-trainer", [{PARAM: "default", GROUP: g} for g in groups],
                  data_consumer=True),
            _role("global-aggregator", "hybrid-aggregator", [{PARAM: "default"}]),
        ],
        "channels": [
            _channel(PARAM, ["trainer", "global-aggregator"],
                     {"trainer": TRAINER_TAGS, "global-aggregator": AGGREGATOR_TAGS}, backend=param_backend),
            _channel(GROUP, ["trainer", "trainer"], {"trainer": ["allreduce"]}, group_by=list(groups),
                     backend={"kind": "PointToPoint", "bandwidthShape": {"*": p2p_bps}}),
        ],
        "datasetGroups": groups,
        "hyperparams": _hyperparams(hyperparams),
    }


TEMPLATES: Dict[str, Callable[..., dict]] = {
    "c-fl": classical,
    "h-fl": hierarchical,
    "co-fl": coordinated,
    "distributed": distributed,
    "hybrid": hybrid,
}


def template_document(name: str, **kwargs) -> dict:
    try:
        builder = TEMPLATES[name]
    except KeyError:
        raise KeyError(f"unknown template {name!r}; choose from {', '.join(TEMPLATES)}") from None
    return builder(**kwargs)


def load_template(name: str, **kwargs) -> JobSpec:
    return parse_job_spec(template_document(name, **kwargs))


# ---- transformations ----

class TemplateDiff(BaseModel):
    """Changes from one topology to another: code (programs), TAG and metadata"""

    code: List[str] = Field(default_factory=list)
    tag: List[str] = Field(default_factory=list)
    metadata: List[str] = Field(default_factory=list)

    def lines(self) -> List[str]:
        return ([f"code: {c}" for c in self.code] + [f"tag: {t}" for t in self.tag]
                + [f"metadata: {m}" for m in self.metadata])


def _plural(count: int, word: str) -> str:
    return word if count == 1 else f"{word}s"


def diff_specs(before: JobSpec, after: JobSpec) -> TemplateDiff:
    """
    Change list between two job specs.

    Channels are matched by name. A channel whose pair is re-pointed to a
    role that the change adds counts as part of that role's insertion, so
    neither its pair nor its groupBy is reported.
    """
    result = TemplateDiff()
    old_roles = {r.name: r for r in before.roles}
    new_roles = {r.name: r for r in after.roles}
    added_roles = [n for n in new_roles if n not in old_roles]
    removed_roles = [n for n in old_roles if n not in new_roles]
    result.code += [f"+ {n}" for n in added_roles] + [f"- {n}" for n in removed_roles]
    common = [n for n in new_roles if n in old_roles]
    if any(old_roles[n].program != new_roles[n].program for n in common):
        result.code.append("Δ inheritance")
    for n in common:
        if new_roles[n].replica > old_roles[n].replica == 1:
            result.tag.append("+ replica")
        elif new_roles[n].replica != old_roles[n].replica:
            result.tag.append("Δ replica")

    old_channels = {c.name: c for c in before.channels}
    new_channels = {c.name: c for c in after.channels}
    added = [n for n in new_channels if n not in old_channels]
    removed = [n for n in old_channels if n not in new_channels]
    if added:
        result.tag.append(f"+ {_plural(len(added), 'channel')}")
    if removed:
        result.tag.append(f"- {_plural(len(removed), 'channel')}")
    changed_pair = changed_groups = changed_backend = False
    for n in (n for n in new_channels if n in old_channels):
        old, new = old_channels[n], new_channels[n]
        reattached = False
        if set(old.pair) != set(new.pair) or old.is_self_channel != new.is_self_channel:
            reattached = (set(new.pair) - set(old.pair)) <= set(added_roles) and not new.is_self_channel
            changed_pair = changed_pair or not reattached
        if set(old.group_by) != set(new.group_by) and not reattached:
            changed_groups = True
        if old.backend.kind != new.backend.kind:
            changed_backend = True
    if changed_backend:
        result.tag.append("Δ backend")
    if changed_pair:
        result.tag.append("Δ channel")
    if changed_groups:
        result.tag.append("Δ groupBy")

    if set(before.dataset_groups) != set(after.dataset_groups):
        result.metadata.append("Δ datasetGroups")
    return result


def diff_templates(before: str, after: str) -> TemplateDiff:
    return diff_specs(load_template(before), load_template(after))

"""
TAG expansion: JobSpec + registered datasets/computes -> PhysicalTopology.

Worker ids are ``<role>-<index>``; roles are processed in name order so the
result does not depend on the order roles are declared in.  Edges are never
materialized here; ``PhysicalTopology.iter_edges`` derives them on demand
and ``graph()`` loads them into a networkx MultiGraph.
"""
import json
from collections import defaultdict
from itertools import combinations, product
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import networkx as nx  # pyright: ignore[reportMissingImports]
from pydantic import BaseModel, ConfigDict, Field

from .control_plane.records import ComputeRecord, DatasetRecord
from .exceptions import MissingGroupAssociation, NoComputeForRealm, PostCheckFailed, UnregisteredDataset
from .logger import logger, log_action
from .tag.models import JobSpec, RoleSpec
from .validators import post_check

ANY_REALM = "*"


class WorkerConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    worker_id: str
    role: str
    compute_id: str
    channel_bindings: Dict[str, str]
    dataset_ref: Optional[str] = None
    program: str


class PhysicalTopology(BaseModel):
    model_config = ConfigDict(frozen=True)

    job_id: str
    workers: List[WorkerConfig]
    # channel name -> endpoint role pair; enough to derive edges without the JobSpec
    channels: Dict[str, Tuple[str, str]] = Field(default_factory=dict)
    notes: List[str] = Field(default_factory=list)

    def worker(self, worker_id: str) -> Optional[WorkerConfig]:
        return next((w for w in self.workers if w.worker_id == worker_id), None)

    def workers_of(self, role: str) -> List[WorkerConfig]:
        return [w for w in self.workers if w.role == role]

    def members(self) -> Dict[Tuple[str, str, str], List[str]]:
        """(channel, group, role) -> worker ids, in topology order"""
        index: Dict[Tuple[str, str, str], List[str]] = defaultdict(list)
        for w in self.workers:
            for channel, group in w.channel_bindings.items():
                index[(channel, group, w.role)].append(w.worker_id)
        return index

    def peers_of(self, worker_id: str, channel: str) -> List[str]:
        """Worker ids sharing ``channel`` and group with ``worker_id`` on the opposite side"""
        me = self.worker(worker_id)
        group = me.channel_bindings[channel]
        pair = self.channels[channel]
        peer_role = pair[1] if pair[0] == me.role else pair[0]
        return [w.worker_id for w in self.workers
                if w.worker_id != worker_id and w.role == peer_role
                and w.channel_bindings.get(channel) == group]

    def iter_edges(self) -> Iterator[Tuple[str, str, str]]:
        """
        Yield (worker_id, worker_id, channel) for every connected pair.

        Two workers are connected on a channel when they sit on opposite
        endpoints of it (or both on a self-channel) and bind the same group.
        """
        index = self.members()
        groups: Dict[str, set] = defaultdict(set)
        for channel, group, _ in index:
            groups[channel].add(group)

        for channel in sorted(self.channels):
            left, right = self.channels[channel]
            for group in sorted(groups[channel]):
                if left == right:
                    for a, b in combinations(sorted(index.get((channel, group, left), [])), 2):
                        yield (a, b, channel)
                else:
                    for a, b in product(index.get((channel, group, left), []),
                                        index.get((channel, group, right), [])):
                        yield (min(a, b), max(a, b), channel)

    def graph(self) -> nx.MultiGraph:
        """
        Worker graph: one node per worker, one edge per connected pair keyed
        by channel. Built on every call.
        """
        graph = nx.MultiGraph(name=self.job_id)
        for w in self.workers:
            graph.add_node(w.worker_id, role=w.role, compute=w.compute_id, dataset=w.dataset_ref)
        graph.add_edges_from((a, b, channel, {"channel": channel}) for a, b, channel in self.iter_edges())
        return graph

    @property
    def edges(self) -> List[Tuple[str, str, str]]:
        """Computed on every access"""
        return sorted((min(a, b), max(a, b), channel) for a, b, channel in self.graph().edges(keys=True))

    def count_edges(self) -> int:
        index = self.members()
        total = 0
        for (channel, group, role), ids in index.items():
            left, right = self.channels[channel]
            if left == right:
                total += len(ids) * (len(ids) - 1) // 2
            elif role == left:
                total += len(ids) * len(index.get((channel, group, right), []))
        return total

    def to_document(self) -> dict:
        return {
            "job_id": self.job_id,
            "workers": [
                {
                    "worker_id": w.worker_id,
                    "role": w.role,
                    "compute_id": w.compute_id,
                    "channel_bindings": dict(sorted(w.channel_bindings.items())),
                    "dataset_ref": w.dataset_ref,
                    "program": w.program,
                }
                for w in self.workers
            ],
            "channels": {name: list(pair) for name, pair in sorted(self.channels.items())},
            "notes": list(self.notes),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_document(), indent=2)

    @classmethod
    def from_document(cls, document: dict) -> "PhysicalTopology":
        return cls.model_validate(document)

    def to_dot(self) -> str:
        graph = self.graph()
        lines = [f'graph "{self.job_id}" {{']
        for node, attrs in graph.nodes(data=True):
            label = f"{node}\\n{attrs['compute']}"
            if attrs["dataset"]:
                label += f"\\n[{attrs['dataset']}]"
            lines.append(f'  "{node}" [label="{label}"];')
        for a, b, channel in sorted((min(a, b), max(a, b), k) for a, b, k in graph.edges(keys=True)):
            lines.append(f'  "{a}" -- "{b}" [label="{channel}"];')
        lines.append("}")
        return "\n".join(lines)


# ---- realms ----

def realm_segments(realm: str) -> Tuple[str, ...]:
    if realm == ANY_REALM:
        return ()
    return tuple(part for part in realm.split("/") if part)


def admits(compute_realm: str, realm: str) -> bool:
    """A compute admits a realm when its own realm is a segment-wise prefix of it, or '*'"""
    if compute_realm == ANY_REALM:
        return True
    mine = realm_segments(compute_realm)
    theirs = realm_segments(realm)
    return len(mine) <= len(theirs) and theirs[:len(mine)] == mine


def common_ancestor(realms: Iterable[str]) -> str:
    prefix: Optional[Tuple[str, ...]] = None
    for realm in realms:
        segments = realm_segments(realm)
        if prefix is None:
            prefix = segments
            continue
        size = 0
        for a, b in zip(prefix, segments):
            if a != b:
                break
            size += 1
        prefix = prefix[:size]
    return "/".join(prefix or ())


class ComputePlacer:
    """Deterministic compute selection for one expansion"""

    def __init__(self, computes: Sequence[ComputeRecord]):
        self.computes = sorted(computes, key=lambda c: c.compute_id)
        self.realm_of = {c.compute_id: c.realm for c in self.computes}
        self.notes: List[str] = []
        self._rotation: Dict[Tuple[str, ...], int] = defaultdict(int)
        self._dataset_choice: Dict[str, str] = {}

    def for_dataset(self, dataset: DatasetRecord) -> str:
        """Most specific admitting compute, then lowest compute_id"""
        cached = self._dataset_choice.get(dataset.realm)
        if cached is not None:
            return cached

        admitting = [c for c in self.computes if admits(c.realm, dataset.realm)]
        if not admitting:
            raise NoComputeForRealm(dataset.dataset_id, dataset.realm)
        admitting.sort(key=lambda c: (-len(realm_segments(c.realm)), c.compute_id))
        chosen = admitting[0].compute_id
        if len(admitting) > 1:
            self.notes.append(
                f"AMBIGUOUS_PLACEMENT realm={dataset.realm} chosen={chosen} "
                f"alternatives={','.join(c.compute_id for c in admitting[1:])}")
        self._dataset_choice[dataset.realm] = chosen
        return chosen

    def decide_compute(self, peer_realms: Iterable[str], subject: str) -> str:
        """Round-robin over computes whose realm is an ancestor of every peer realm"""
        peer_realms = list(peer_realms)
        if peer_realms:
            anchor = common_ancestor(peer_realms)
            candidates = tuple(c.compute_id for c in self.computes if admits(c.realm, anchor))
        else:
            anchor = ANY_REALM
            candidates = tuple(c.compute_id for c in self.computes)
        if not candidates:
            raise NoComputeForRealm(subject, anchor)
        turn = self._rotation[candidates]
        self._rotation[candidates] = turn + 1
        return candidates[turn % len(candidates)]


def decide_compute(computes: Sequence[ComputeRecord], peer_realms: Iterable[str],
                   subject: str = "worker") -> str:
    """Single placement decision with a fresh rotation"""
    if not computes:
        raise NoComputeForRealm(subject, "")
    return ComputePlacer(computes).decide_compute(peer_realms, subject)


# ---- worker construction ----

def build_workers_data_consumer(role: RoleSpec, spec: JobSpec,
                                datasets: Sequence[DatasetRecord],
                                placer: Optional[ComputePlacer] = None) -> List[WorkerConfig]:
    """
    One worker per dataset of the job, in datasetGroups declaration order.

    Bindings come from the groupAssociation entry naming the dataset's group;
    compute is the one admitting the dataset's realm when a placer is given.
    """
    registered = {d.dataset_id: d for d in datasets}
    entries = spec.group_entries(role.name)
    workers = []
    for group, dataset_ids in spec.dataset_groups.items():
        entry = next((e for e in entries if group in e.values()), None)
        if entry is None and dataset_ids:
            raise MissingGroupAssociation(group, role.name)
        for dataset_id in dataset_ids:
            record = registered.get(dataset_id)
            if record is None:
                raise UnregisteredDataset(dataset_id)
            workers.append(WorkerConfig(
                worker_id=f"{role.name}-{len(workers)}",
                role=role.name,
                compute_id=placer.for_dataset(record) if placer else "",
                channel_bindings=entry,
                dataset_ref=dataset_id,
                program=role.program,
            ))
    return workers


def build_workers_general(role: RoleSpec, spec: Optional[JobSpec] = None) -> List[WorkerConfig]:
    """replica copies per groupAssociation entry; copies share bindings"""
    entries = spec.group_entries(role.name) if spec else [dict(e) for e in role.group_association]
    workers = []
    for entry in entries:
        for _ in range(role.replica):
            workers.append(WorkerConfig(
                worker_id=f"{role.name}-{len(workers)}",
                role=role.name,
                compute_id="",
                channel_bindings=dict(entry),
                program=role.program,
            ))
    return workers


def _place_general(workers: List[WorkerConfig], spec: JobSpec, placer: ComputePlacer,
                   dataset_realm: Dict[str, str]) -> List[WorkerConfig]:
    """
    Place non data consumers in layers outward from the data consumers.

    A worker is placed once at least one of its channel peers is placed; its
    candidates are computes admitting the common ancestor of placed peer realms.
    """
    pairs = {c.name: c.pair for c in spec.channels}
    # (channel, group, role) -> realms of placed workers
    placed_realms: Dict[Tuple[str, str, str], set] = defaultdict(set)
    chosen: Dict[str, str] = {}

    def record(worker: WorkerConfig, realm: str):
        for channel, group in worker.channel_bindings.items():
            placed_realms[(channel, group, worker.role)].add(realm)

    for w in workers:
        if w.dataset_ref is not None:
            record(w, dataset_realm[w.dataset_ref])

    def peer_realms(worker: WorkerConfig) -> set:
        realms = set()
        for channel, group in worker.channel_bindings.items():
            left, right = pairs[channel]
            peer_role = right if left == worker.role else left
            realms |= placed_realms.get((channel, group, peer_role), set())
        return realms

    pending = [w for w in workers if w.dataset_ref is None]
    while pending:
        layer = [(w, peer_realms(w)) for w in pending]
        ready = [(w, realms) for w, realms in layer if realms]
        if not ready:
            # disconnected from every data consumer: any compute will do
            ready = [(w, set()) for w in pending]
        for w, realms in ready:
            compute_id = placer.decide_compute(sorted(realms), w.worker_id)
            chosen[w.worker_id] = compute_id
        for w, _ in ready:
            record(w, placer.realm_of[chosen[w.worker_id]])
        placed = {w.worker_id for w, _ in ready}
        pending = [w for w in pending if w.worker_id not in placed]

    return [w if w.dataset_ref is not None else w.model_copy(update={"compute_id": chosen[w.worker_id]})
            for w in workers]


def expand(spec: JobSpec, datasets: Sequence[DatasetRecord], computes: Sequence[ComputeRecord],
           job_id: Optional[str] = None) -> PhysicalTopology:
    """
    Expand a pre-checked spec into a physical topology.

    Raises UnregisteredDataset, NoComputeForRealm, MissingGroupAssociation
    or PostCheckFailed.
    """
    job_id = job_id or spec.job_name
    registered = {d.dataset_id: d for d in datasets}
    for dataset_id in spec.dataset_ids():
        if dataset_id not in registered:
            raise UnregisteredDataset(dataset_id)
    if not computes:
        raise NoComputeForRealm(job_id, "")

    placer = ComputePlacer(computes)
    workers: List[WorkerConfig] = []
    for role in sorted(spec.roles, key=lambda r: r.name):
        if role.is_data_consumer:
            workers.extend(build_workers_data_consumer(role, spec, datasets, placer))
        else:
            workers.extend(build_workers_general(role, spec))

    dataset_realm = {d: registered[d].realm for d in spec.dataset_ids()}
    workers = _place_general(workers, spec, placer, dataset_realm)

    topology = PhysicalTopology(
        job_id=job_id,
        workers=workers,
        channels={c.name: c.pair for c in spec.channels},
        notes=placer.notes,
    )

    report = post_check(topology, spec)
    if not report.is_empty:
        raise PostCheckFailed(report)

    log_action(logger, 'TOPOLOGY_EXPANDED', job_id=job_id,
               message=f"{len(workers)} workers on {len({w.compute_id for w in workers})} computes")
    return topology

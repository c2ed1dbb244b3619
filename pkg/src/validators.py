from collections import Counter, defaultdict
from typing import Dict, List, Set, Tuple

from pydantic import BaseModel, Field

from .logger import logger, log_action
from .tag.models import JobSpec


class Violation(BaseModel):
    code: str
    subject: str
    detail: str = ""


class ValidationReport(BaseModel):
    """Violations found by a check; empty means valid"""

    violations: List[Violation] = Field(default_factory=list)

    @property
    def is_empty(self) -> bool:
        return not self.violations

    def add(self, code: str, subject: str, detail: str = ""):
        self.violations.append(Violation(code=code, subject=subject, detail=detail))

    def extend(self, items: List[Violation]):
        self.violations.extend(items)

    def codes(self) -> Set[str]:
        return {v.code for v in self.violations}

    def summary(self) -> str:
        return "; ".join(f"{v.code}({v.subject})" for v in self.violations) or "ok"

    def to_list(self) -> List[dict]:
        return [v.model_dump() for v in self.violations]


class JobSpecValidator:
    """Structural checks over a parsed JobSpec. Each check returns its violations."""

    @staticmethod
    def validate_unique_names(spec: JobSpec) -> List[Violation]:
        found = []
        for name, count in Counter(r.name for r in spec.roles).items():
            if count > 1:
                found.append(Violation(code="DUPLICATE_ROLE", subject=name,
                                       detail=f"role declared {count} times"))
        for name, count in Counter(c.name for c in spec.channels).items():
            if count > 1:
                found.append(Violation(code="DUPLICATE_CHANNEL", subject=name,
                                       detail=f"channel declared {count} times"))
        return found

    @staticmethod
    def validate_channels(spec: JobSpec) -> List[Violation]:
        found = []
        role_names = {r.name for r in spec.roles}
        for channel in spec.channels:
            for endpoint in channel.pair:
                if endpoint not in role_names:
                    found.append(Violation(code="UNKNOWN_ROLE", subject=endpoint,
                                           detail=f"endpoint of channel {channel.name}"))
            for role_name in channel.func_tags:
                if not channel.has_endpoint(role_name):
                    found.append(Violation(code="FUNC_TAG_NOT_ENDPOINT", subject=role_name,
                                           detail=f"funcTags of channel {channel.name}"))
            for pattern, bps in channel.backend.bandwidth_shape.items():
                if not bps > 0:
                    found.append(Violation(code="INVALID_BANDWIDTH", subject=channel.name,
                                           detail=f"{pattern} -> {bps}"))
        return found

    @staticmethod
    def validate_roles(spec: JobSpec) -> List[Violation]:
        found = []
        consumers = spec.data_consumers()
        if len(consumers) > 1:
            found.append(Violation(code="MULTIPLE_DATA_CONSUMERS",
                                   subject=",".join(r.name for r in consumers),
                                   detail="at most one data consumer role is supported"))

        for role in spec.roles:
            if role.replica < 1:
                found.append(Violation(code="INVALID_REPLICA", subject=role.name,
                                       detail=f"replica={role.replica}"))
            elif role.replica > 1 and role.is_data_consumer:
                found.append(Violation(code="REPLICA_ON_DATA_CONSUMER", subject=role.name,
                                       detail=f"replica={role.replica}"))
            if not role.is_data_consumer and not role.group_association:
                found.append(Violation(code="MISSING_GROUP_ASSOCIATION", subject=role.name,
                                       detail="non data consumer roles need at least one entry"))
        return found

    @staticmethod
    def validate_group_associations(spec: JobSpec) -> List[Violation]:
        found = []
        for role in spec.roles:
            for index, entry in enumerate(role.group_association):
                for channel_name, group in entry.items():
                    subject = f"{role.name}.groupAssociation[{index}].{channel_name}"
                    channel = spec.channel(channel_name)
                    if channel is None:
                        found.append(Violation(code="UNKNOWN_CHANNEL", subject=subject,
                                               detail=f"no channel named {channel_name}"))
                    elif not channel.has_endpoint(role.name):
                        found.append(Violation(code="NON_INCIDENT_CHANNEL", subject=subject,
                                               detail=f"{role.name} is not an endpoint of {channel_name}"))
                    elif group not in channel.group_labels:
                        found.append(Violation(code="GROUP_NOT_IN_GROUPBY", subject=subject,
                                               detail=f"group {group!r} not in groupBy {channel.group_by}"))
        return found

    @staticmethod
    def validate_dataset_groups(spec: JobSpec) -> List[Violation]:
        found = []
        seen: Dict[str, str] = {}
        for group, datasets in spec.dataset_groups.items():
            for dataset_id in datasets:
                if dataset_id in seen:
                    found.append(Violation(code="DUPLICATE_DATASET_REF", subject=dataset_id,
                                           detail=f"listed in {seen[dataset_id]!r} and {group!r}"))
                else:
                    seen[dataset_id] = group
        return found


def pre_check(spec: JobSpec) -> ValidationReport:
    """Validate a parsed spec. Violations are returned, never raised."""
    report = ValidationReport()
    report.extend(JobSpecValidator.validate_unique_names(spec))
    report.extend(JobSpecValidator.validate_channels(spec))
    report.extend(JobSpecValidator.validate_roles(spec))
    report.extend(JobSpecValidator.validate_group_associations(spec))
    report.extend(JobSpecValidator.validate_dataset_groups(spec))

    for v in report.violations:
        log_action(logger, 'VALIDATION_FAILED', error_code=v.code,
                   message=f"{v.subject}: {v.detail}")
    return report


def post_check(topology, spec: JobSpec) -> ValidationReport:
    """
    Validate an expanded topology against its spec in one pass over the workers.

    Checks unique ids, binding coverage, dataset refs, the per-role count law,
    group legality and that every used group has both channel sides populated.
    """
    report = ValidationReport()
    incident = {r.name: sorted(c.name for c in spec.incident_channels(r.name)) for r in spec.roles}

    ids = Counter(w.worker_id for w in topology.workers)
    for worker_id, count in ids.items():
        if count > 1:
            report.add("DUPLICATE_WORKER_ID", worker_id, f"{count} workers share this id")

    per_role: Counter = Counter()
    # (channel, group) -> roles present
    sides: Dict[Tuple[str, str], Set[str]] = defaultdict(set)
    for worker in topology.workers:
        role = spec.role(worker.role)
        if role is None:
            report.add("UNKNOWN_ROLE", worker.worker_id, f"role {worker.role} not in spec")
            continue
        per_role[role.name] += 1

        if sorted(worker.channel_bindings) != incident[role.name]:
            report.add("BINDING_MISMATCH", worker.worker_id,
                       f"binds {sorted(worker.channel_bindings)}, expected {incident[role.name]}")
        if (worker.dataset_ref is not None) != role.is_data_consumer:
            report.add("DATASET_REF_MISMATCH", worker.worker_id,
                       "dataset_ref must be present exactly for data consumers")

        for channel_name, group in worker.channel_bindings.items():
            channel = spec.channel(channel_name)
            if channel is None:
                continue
            if group not in channel.group_labels:
                report.add("GROUP_NOT_IN_GROUPBY", worker.worker_id,
                           f"{channel_name}:{group} not in {channel.group_by}")
            sides[(channel_name, group)].add(role.name)

    for role in spec.roles:
        if role.is_data_consumer:
            expected = len(spec.dataset_ids())
        else:
            expected = len(role.group_association) * max(role.replica, 0)
        if per_role[role.name] != expected:
            report.add("WORKER_COUNT", role.name, f"{per_role[role.name]} workers, expected {expected}")

    for (channel_name, group), present in sorted(sides.items()):
        channel = spec.channel(channel_name)
        for endpoint in set(channel.pair):
            if endpoint not in present:
                report.add("EMPTY_CHANNEL_SIDE", f"{channel_name}/{group}",
                           f"no {endpoint} worker in group {group}")

    for v in report.violations:
        log_action(logger, 'VALIDATION_FAILED', error_code=v.code, job_id=topology.job_id,
                   message=f"{v.subject}: {v.detail}")
    return report

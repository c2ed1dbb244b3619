"""
TAG domain types.

Field aliases follow the attribute names users write in job documents
(``isDataConsumer``, ``groupAssociation``, ``groupBy``, ``funcTags`` ...).
Models only enforce types; semantic rules live in ``src.validators.pre_check``
so that a structurally typed but invalid spec can still be reported on.
"""
from enum import Enum
from typing import Dict, List, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

DEFAULT_GROUP = "default"

Scalar = Union[bool, int, float, str]


class BackendKind(str, Enum):
    BROKER_SIM = "BrokerSim"
    POINT_TO_POINT = "PointToPoint"

    @classmethod
    def parse(cls, value: str) -> "BackendKind":
        aliases = {"mqtt": cls.BROKER_SIM, "brokersim": cls.BROKER_SIM,
                   "p2p": cls.POINT_TO_POINT, "pointtopoint": cls.POINT_TO_POINT}
        try:
            return aliases[value.replace("_", "").replace("-", "").lower()]
        except KeyError:
            raise ValueError(f"unknown backend {value!r}") from None


class _Model(BaseModel):
    model_config = ConfigDict(frozen=True, populate_by_name=True, extra="forbid")


class BackendSpec(_Model):
    """Backend choice for one channel plus optional link shaping (end pattern -> bits/s)"""

    kind: BackendKind = BackendKind.BROKER_SIM
    bandwidth_shape: Dict[str, float] = Field(default_factory=dict, alias="bandwidthShape")

    @field_validator("kind", mode="before")
    @classmethod
    def _kind(cls, value):
        if isinstance(value, str) and not isinstance(value, BackendKind):
            return BackendKind.parse(value)
        return value

    def to_document(self) -> Union[str, dict]:
        if not self.bandwidth_shape:
            return self.kind.value
        return {"kind": self.kind.value, "bandwidthShape": dict(self.bandwidth_shape)}


class RoleSpec(_Model):
    name: str
    replica: int = 1
    is_data_consumer: bool = Field(default=False, alias="isDataConsumer")
    group_association: List[Dict[str, str]] = Field(default_factory=list, alias="groupAssociation")
    program: str = ""

    @model_validator(mode="before")
    @classmethod
    def _default_program(cls, data):
        if isinstance(data, dict) and not data.get("program"):
            data = {**data, "program": data.get("name", "")}
        return data

    def to_document(self) -> dict:
        return {
            "name": self.name,
            "replica": self.replica,
            "isDataConsumer": self.is_data_consumer,
            "groupAssociation": [dict(entry) for entry in self.group_association],
            "program": self.program,
        }


class ChannelSpec(_Model):
    name: str
    pair: Tuple[str, str]
    group_by: List[str] = Field(default_factory=lambda: [DEFAULT_GROUP], alias="groupBy")
    func_tags: Dict[str, List[str]] = Field(default_factory=dict, alias="funcTags")
    backend: BackendSpec = Field(default_factory=BackendSpec)

    @field_validator("group_by", mode="before")
    @classmethod
    def _group_by(cls, value):
        if value is None or (isinstance(value, list) and not value):
            return [DEFAULT_GROUP]
        return value

    @field_validator("backend", mode="before")
    @classmethod
    def _backend(cls, value):
        if value is None:
            return BackendSpec()
        if isinstance(value, (str, BackendKind)):
            return {"kind": value}
        return value

    @property
    def is_self_channel(self) -> bool:
        return self.pair[0] == self.pair[1]

    @property
    def group_labels(self) -> frozenset:
        """groupBy labels plus the always-legal default label"""
        return frozenset(self.group_by) | {DEFAULT_GROUP}

    def has_endpoint(self, role_name: str) -> bool:
        return role_name in self.pair

    def peer_role(self, role_name: str) -> str:
        return self.pair[1] if self.pair[0] == role_name else self.pair[0]

    def to_document(self) -> dict:
        return {
            "name": self.name,
            "pair": list(self.pair),
            "groupBy": list(self.group_by),
            "funcTags": {role: list(tags) for role, tags in self.func_tags.items()},
            "backend": self.backend.to_document(),
        }


class JobSpec(_Model):
    job_name: str = Field(alias="name")
    roles: List[RoleSpec]
    channels: List[ChannelSpec] = Field(default_factory=list)
    dataset_groups: Dict[str, List[str]] = Field(default_factory=dict, alias="datasetGroups")
    hyperparams: Dict[str, Scalar] = Field(default_factory=dict)

    def role(self, name: str) -> Optional[RoleSpec]:
        return next((r for r in self.roles if r.name == name), None)

    def channel(self, name: str) -> Optional[ChannelSpec]:
        return next((c for c in self.channels if c.name == name), None)

    def incident_channels(self, role_name: str) -> List[ChannelSpec]:
        return [c for c in self.channels if c.has_endpoint(role_name)]

    def data_consumers(self) -> List[RoleSpec]:
        return [r for r in self.roles if r.is_data_consumer]

    def data_consumer(self) -> Optional[RoleSpec]:
        consumers = self.data_consumers()
        return consumers[0] if consumers else None

    def group_entries(self, role_name: str) -> List[Dict[str, str]]:
        """
        groupAssociation entries with every incident channel bound.

        Channels an entry leaves out bind to the default group; a data
        consumer without entries gets one entry of all-default bindings.
        """
        role = self.role(role_name)
        incident = [c.name for c in self.incident_channels(role_name)]
        entries = list(role.group_association) if role else []
        if not entries and role is not None and role.is_data_consumer:
            entries = [{}]
        return [{ch: entry.get(ch, DEFAULT_GROUP) for ch in incident} for entry in entries]

    def dataset_ids(self) -> List[str]:
        """Dataset ids in declaration order (group order, then list order)"""
        return [ds for datasets in self.dataset_groups.values() for ds in datasets]

    def hyperparam(self, key: str, default: Scalar) -> Scalar:
        return self.hyperparams.get(key, default)

    def with_defaults(self) -> "JobSpec":
        """Defaults are filled at construction; re-validating is a fixed point"""
        return JobSpec.model_validate(self.to_document())

    def to_document(self) -> dict:
        return {
            "name": self.job_name,
            "roles": [r.to_document() for r in self.roles],
            "channels": [c.to_document() for c in self.channels],
            "datasetGroups": {g: list(ds) for g, ds in self.dataset_groups.items()},
            "hyperparams": dict(self.hyperparams),
        }

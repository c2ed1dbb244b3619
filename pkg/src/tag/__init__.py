"""
TAG (topology abstraction graph) job specifications

Roles are vertices, channels are edges; a JobSpec is the declarative
input that expansion compiles into a physical worker topology.
"""

from .models import DEFAULT_GROUP, BackendKind, BackendSpec, ChannelSpec, JobSpec, RoleSpec
from .parser import job_spec_schema, load_job_spec, parse_job_spec, serialize_job_spec

__all__ = [
    'DEFAULT_GROUP',
    'BackendKind',
    'BackendSpec',
    'ChannelSpec',
    'JobSpec',
    'RoleSpec',
    'job_spec_schema',
    'load_job_spec',
    'parse_job_spec',
    'serialize_job_spec',
]

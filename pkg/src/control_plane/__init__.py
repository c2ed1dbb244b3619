"""
Control plane: records, journaled store, notifier, controller and REST API

Only the record types are re-exported here; import the service modules directly.
"""

from .records import (ComputeRecord, DatasetRecord, Event, EventKind, JobRecord, JobState,
                      TaskManifest, TaskRecord, TaskStatus)

__all__ = [
    'ComputeRecord',
    'DatasetRecord',
    'Event',
    'EventKind',
    'JobRecord',
    'JobState',
    'TaskManifest',
    'TaskRecord',
    'TaskStatus',
]

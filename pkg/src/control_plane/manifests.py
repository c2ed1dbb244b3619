"""Per-worker TaskManifest construction from an expanded topology."""
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Tuple

from ..config import Settings, settings as default_settings
from ..exceptions import UnknownProgram, UnknownWorker
from ..expansion import PhysicalTopology
from ..roles.registry import code_ref
from ..tag.models import JobSpec
from .records import ChannelManifest, DatasetRecord, TaskManifest

# hyperparameter -> settings field used when the job leaves it out
TIMEOUT_DEFAULTS = {
    "aggregationTimeout": "AGGREGATION_TIMEOUT_S",
    "coordinatorTimeout": "COORDINATOR_TIMEOUT_S",
    "peerWaitTimeout": "PEER_WAIT_TIMEOUT_S",
    "roundTimeout": "ROUND_TIMEOUT_S",
}


def job_hyperparams(spec: JobSpec, settings: Settings = default_settings) -> dict:
    hyperparams = dict(spec.hyperparams)
    for key, field in TIMEOUT_DEFAULTS.items():
        hyperparams.setdefault(key, getattr(settings, field))
    return hyperparams


def program_ref(program: str) -> str:
    try:
        return code_ref(program)
    except UnknownProgram:
        # resolved (and reported) by the worker itself
        return program


class ManifestBuilder:
    """
    Builds manifests for every worker of one job.

    The (channel, group, role) membership index is computed once, so building
    all manifests stays linear in the number of workers plus peer lists.
    """

    def __init__(self, job_id: str, spec: JobSpec, topology: PhysicalTopology,
                 datasets: Mapping[str, DatasetRecord], broker_address: str, artifact_dir: str,
                 settings: Settings = default_settings):
        self.job_id = job_id
        self.spec = spec
        self.topology = topology
        self.datasets = datasets
        self.broker_address = broker_address
        self.artifact_dir = str(Path(artifact_dir))
        self.hyperparams = job_hyperparams(spec, settings)
        self._members: Dict[Tuple[str, str, str], List[str]] = topology.members()
        self._workers = {w.worker_id: w for w in topology.workers}

    def build(self, worker_id: str) -> TaskManifest:
        worker = self._workers.get(worker_id)
        if worker is None:
            raise UnknownWorker(f"{worker_id} is not part of job {self.job_id}", worker_id=worker_id)

        channels = []
        for name, group in sorted(worker.channel_bindings.items()):
            channel = self.spec.channel(name)
            peer_role = channel.peer_role(worker.role)
            peers = [w for w in self._members.get((name, group, peer_role), []) if w != worker_id]
            channels.append(ChannelManifest(
                name=name,
                group=group,
                backend=channel.backend.kind.value,
                pair=list(channel.pair),
                peer_role=peer_role,
                func_tags=list(channel.func_tags.get(worker.role, [])),
                self_channel=channel.is_self_channel,
                expected_peers=sorted(peers),
                bandwidth_shape=dict(channel.backend.bandwidth_shape),
            ))

        dataset: Optional[DatasetRecord] = self.datasets.get(worker.dataset_ref) if worker.dataset_ref else None
        return TaskManifest(
            job_id=self.job_id,
            worker_id=worker_id,
            role=worker.role,
            program=worker.program,
            code_ref=program_ref(worker.program),
            compute_id=worker.compute_id,
            broker_address=self.broker_address,
            channels=channels,
            dataset_url=dataset.url if dataset else None,
            dataset_id=worker.dataset_ref,
            hyperparams=dict(self.hyperparams),
            artifact_dir=self.artifact_dir,
        )

    def build_all(self) -> Dict[str, TaskManifest]:
        return {w.worker_id: self.build(w.worker_id) for w in self.topology.workers}

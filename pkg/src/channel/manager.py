from typing import Dict, List, Optional

from ..control_plane.records import ChannelManifest, TaskManifest
from ..exceptions import ChannelError, NotJoined
from ..tag.models import BackendKind
from .handle import ChannelHandle


class ChannelManager:
    """All channel handles of one worker, addressable by name or funcTag"""

    def __init__(self, handles: List[ChannelHandle], expected: Optional[Dict[str, List[str]]] = None):
        self.handles: Dict[str, ChannelHandle] = {h.channel: h for h in handles}
        self.expected = expected or {}

    @classmethod
    def from_manifest(cls, manifest: TaskManifest, broker_address: Optional[str] = None) -> "ChannelManager":
        handles = [cls._build(manifest, ch, broker_address or manifest.broker_address)
                   for ch in manifest.channels]
        return cls(handles, {ch.name: list(ch.expected_peers) for ch in manifest.channels})

    @staticmethod
    def _build(manifest: TaskManifest, ch: ChannelManifest, broker_address: str) -> ChannelHandle:
        return ChannelHandle(
            job_id=manifest.job_id,
            channel=ch.name,
            group=ch.group,
            worker_id=manifest.worker_id,
            role=manifest.role,
            peer_role=ch.peer_role,
            backend=BackendKind.parse(ch.backend),
            broker_address=broker_address,
            bandwidth_shape=ch.bandwidth_shape,
            func_tags=ch.func_tags,
        )

    def get(self, name: str) -> ChannelHandle:
        try:
            return self.handles[name]
        except KeyError:
            raise ChannelError(f"no channel named {name!r}") from None

    def channel_for(self, func_tag: str) -> Optional[ChannelHandle]:
        """Handle whose funcTags include ``func_tag``; a lone untagged channel also matches"""
        for handle in self.handles.values():
            if func_tag in handle.func_tags:
                return handle
        untagged = [h for h in self.handles.values() if not h.func_tags]
        if len(self.handles) == 1 and untagged:
            return untagged[0]
        return None

    def join_all(self):
        for handle in self.handles.values():
            handle.join()

    def await_peers(self, timeout: Optional[float] = None):
        for name, peers in self.expected.items():
            self.handles[name].await_peers(peers, timeout)

    def leave_all(self):
        for handle in self.handles.values():
            try:
                handle.leave()
            except NotJoined:
                pass

    @property
    def bytes_sent(self) -> int:
        return sum(h.bytes_sent for h in self.handles.values())

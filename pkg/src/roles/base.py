"""
Base class of every role program.

A program composes a tasklet chain in ``compose()`` from its own methods;
subclasses change behaviour by overriding methods or by editing the chain
returned by ``super().compose()``.
"""
import json
import logging
import threading
import time
from pathlib import Path
from typing import Dict, List, Optional

from ..channel.handle import ChannelHandle, EndId, Message
from ..channel.manager import ChannelManager
from ..control_plane.records import TaskManifest
from ..exceptions import ChannelError, ChannelTimeout, PeerLeft, RoleError, SendToUnknownEnd
from ..logger import logger, log_action
from ..tasklet import TaskletChain
from .metrics import MetricsWriter, RoundMetrics
from .model import ModelUpdate, ModelWeights

trace_logger = logging.getLogger("fedorch.trace")

# message types
WEIGHTS = "weights"
UPDATE = "update"
EOT = "eot"


class Role:
    program_id = "role"

    def __init__(self, manifest: TaskManifest, channels: Optional[ChannelManager] = None,
                 stop_event: Optional[threading.Event] = None):
        self.manifest = manifest
        self.channels = channels or ChannelManager.from_manifest(manifest)
        self.stop_event = stop_event or threading.Event()
        self.worker_id = manifest.worker_id
        self.role_name = manifest.role

        hp = manifest.hyperparams
        self.rounds = int(hp.get("rounds", 1))
        self.epochs = int(hp.get("epochs", 1))
        self.lr = float(hp.get("learningRate", 0.01))
        self.dims = int(hp.get("dims", 8))
        self.aggregation_timeout = float(hp.get("aggregationTimeout", 30.0))
        self.coordinator_timeout = float(hp.get("coordinatorTimeout", 30.0))
        self.peer_wait_timeout = float(hp.get("peerWaitTimeout", 120.0))
        self.round_timeout = float(hp.get("roundTimeout", 300.0))

        self.work_done = False
        self.round = 0
        self.weights: Optional[ModelWeights] = None
        self.chain: Optional[TaskletChain] = None
        self.artifact_dir = Path(manifest.artifact_dir)
        self.metrics = MetricsWriter(manifest.artifact_dir, self.worker_id)
        self._round_started = time.perf_counter()
        self._bytes_mark = 0

    def compose(self) -> TaskletChain:
        raise NotImplementedError

    # ---- lifecycle ----

    def run(self) -> Optional[ModelWeights]:
        """Join channels, run the chain, always leave"""
        self.chain = self.compose()
        self.channels.join_all()
        try:
            self.channels.await_peers(self.peer_wait_timeout)
            self.chain.run(self, should_stop=self.stop_event.is_set, tracer=self._trace)
        finally:
            self.channels.leave_all()
        log_action(logger, 'WORKER_FINISHED', job_id=self.manifest.job_id, worker_id=self.worker_id,
                   role=self.role_name, round=self.round, message=f"{self.program_id} finished")
        return self.weights

    def stop(self):
        """Ask the chain to stop at the next tasklet boundary and unblock receives"""
        self.stop_event.set()
        threading.Thread(target=self.channels.leave_all, daemon=True).start()

    def _trace(self, alias: str, iteration: int, duration_ms: float):
        trace_logger.info(f"{self.worker_id},{alias},{iteration},{duration_ms:.3f}")

    # ---- channel helpers ----

    def require_channel(self, func_tag: str) -> ChannelHandle:
        handle = self.channels.channel_for(func_tag)
        if handle is None:
            raise RoleError(f"{self.worker_id}: no channel carries funcTag {func_tag!r}")
        return handle

    def expected_peers(self, handle: ChannelHandle) -> List[str]:
        return sorted(self.channels.expected.get(handle.channel, []))

    def first_peer(self, handle: ChannelHandle) -> EndId:
        ends = handle.ends()
        if not ends:
            handle.await_peers(self.expected_peers(handle)[:1], self.peer_wait_timeout)
            ends = handle.ends()
        if not ends:
            raise ChannelError(f"{self.worker_id}: no peer on {handle.channel}")
        return ends[0]

    def assignment_timeout(self) -> float:
        """How long a worker waits for its next coordinator message"""
        timeout = max(self.coordinator_timeout, self.round_timeout)
        return timeout if self.round else timeout + self.peer_wait_timeout

    def weights_message(self, weights: ModelWeights, func_tag: str, **headers) -> Message:
        return Message.build(weights.to_bytes(), func_tag=func_tag, type=WEIGHTS, round=self.round, **headers)

    def control_message(self, kind: str, func_tag: str, body: Optional[dict] = None, **headers) -> Message:
        payload = json.dumps(body).encode("utf-8") if body is not None else b""
        return Message.build(payload, func_tag=func_tag, type=kind, round=self.round, **headers)

    def send_quietly(self, handle: ChannelHandle, end: EndId, msg: Message) -> bool:
        """send() that tolerates a peer which already left"""
        try:
            handle.send(end, msg)
            return True
        except SendToUnknownEnd:
            log_action(logger, 'PEER_GONE', level=logging.WARNING, job_id=self.manifest.job_id,
                       worker_id=self.worker_id, channel=handle.channel, message=f"{end} left before {msg.header('type')}")
            return False

    def receive_model(self, handle: ChannelHandle, end: EndId) -> Optional[Message]:
        """
        Wait for the next weights (newer than the current round) or end-of-training from ``end``.

        Returns the weights message, or None once training is over.
        """
        while True:
            try:
                msg = handle.recv(end, timeout=self.round_timeout)
            except PeerLeft:
                self.work_done = True
                return None
            kind = msg.header("type")
            if kind == EOT:
                self.work_done = True
                return None
            if kind == WEIGHTS and int(msg.header("round", "0")) > self.round:
                self.round = int(msg.header("round"))
                return msg

    def gather_messages(self, handle: ChannelHandle, ends: List[EndId], kind: str = UPDATE,
                        timeout: Optional[float] = None) -> Dict[str, Message]:
        """
        One ``kind`` message of the current round from each end, keyed by sender.

        Messages from older rounds are dropped; ends silent past the timeout
        or gone are left out.
        """
        timeout = self.aggregation_timeout if timeout is None else timeout
        deadline = time.monotonic() + timeout
        pending = list(ends)
        received: Dict[str, Message] = {}
        while pending:
            remaining = deadline - time.monotonic()
            try:
                if remaining <= 0:
                    raise ChannelTimeout("aggregation window closed", missing=[str(e) for e in pending])
                for end, item in handle.recv_fifo(pending, timeout=remaining):
                    if isinstance(item, PeerLeft):
                        pending.remove(end)
                        continue
                    if item.header("type") != kind or int(item.header("round", "-1")) != self.round:
                        continue
                    received[end.worker_id] = item
                    pending.remove(end)
            except ChannelTimeout:
                log_action(logger, 'ROUND_TIMEOUT', level=logging.WARNING, job_id=self.manifest.job_id,
                           worker_id=self.worker_id, round=self.round,
                           message=f"no {kind} from {', '.join(e.worker_id for e in pending)}")
                break
        return dict(sorted(received.items()))

    @staticmethod
    def decode_update(msg: Message) -> Optional[ModelUpdate]:
        """None for zero-byte markers"""
        if not msg.payload:
            return None
        return ModelUpdate(
            weights=ModelWeights.from_bytes(msg.payload),
            sample_count=int(msg.header("sample_count", "0")),
            round=int(msg.header("round", "0")),
            sender=msg.sender,
            loss=float(msg.header("loss", "nan")),
            accuracy=float(msg.header("accuracy", "nan")),
        )

    @staticmethod
    def update_headers(update: ModelUpdate) -> dict:
        return {"sample_count": update.sample_count, "loss": repr(update.loss),
                "accuracy": repr(update.accuracy)}

    # ---- metrics ----

    def start_round_clock(self):
        self._round_started = time.perf_counter()

    def record_round(self, loss: float = float("nan"), accuracy: float = float("nan"),
                     upload_ms: float = 0.0, bytes_received: int = 0) -> RoundMetrics:
        sent = self.channels.bytes_sent
        metrics = RoundMetrics(
            round=self.round,
            worker_id=self.worker_id,
            role=self.role_name,
            duration_ms=(time.perf_counter() - self._round_started) * 1000.0,
            upload_ms=upload_ms,
            loss=loss,
            accuracy=accuracy,
            bytes_sent=sent - self._bytes_mark,
            bytes_received=bytes_received,
        )
        self._bytes_mark = sent
        self.metrics.write(metrics)
        return metrics

    def save_weights(self, name: str, weights: Optional[ModelWeights] = None) -> Path:
        weights = weights or self.weights
        path = self.artifact_dir / "checkpoints" / name
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(weights.to_bytes())
        return path

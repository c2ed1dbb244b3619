"""Aggregation programs: the middle aggregator of a hierarchy and the global aggregator."""
import logging
import math
import time
from typing import Dict, List, Optional

from ..channel.handle import ChannelHandle, EndId, Message
from ..logger import logger, log_action
from ..tasklet import Loop, Tasklet, TaskletChain, step
from .base import EOT, UPDATE, Role
from .model import ModelUpdate, ModelWeights, fedavg_aggregate, weighted_mean


def distribute(weights: ModelWeights, handle: ChannelHandle, round_: int,
               ends: Optional[List[EndId]] = None, func_tag: str = "distribute") -> List[EndId]:
    """
    Send the serialized weights to ``ends`` (default: every current peer).

    Returns the ends actually sent to; with no peers this is a logged no-op.
    """
    targets = handle.ends() if ends is None else list(ends)
    if not targets:
        log_action(logger, 'NO_PEERS', level=logging.WARNING, job_id=handle.job_id,
                   worker_id=handle.my_end.worker_id, channel=handle.channel, round=round_,
                   message="distribute found no peers")
        return []
    msg = Message.build(weights.to_bytes(), func_tag=func_tag, type="weights", round=round_)
    for end in targets:
        handle.send(end, msg)
    return targets


def upload_delays(messages: Dict[str, Message]) -> Dict[str, float]:
    """Per-sender transfer time in ms from the sender's ``sent_at`` stamp to arrival"""
    delays = {}
    for sender, msg in messages.items():
        sent_at = msg.header("sent_at")
        if sent_at:
            delays[sender] = max(0.0, (msg.arrived_at - float(sent_at)) * 1000.0)
    return delays


class _Aggregating(Role):
    """Shared gather/aggregate steps"""

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.sent_to: List[EndId] = []
        self.updates: List[ModelUpdate] = []
        self.upload_ms: Dict[str, float] = {}
        self.bytes_received = 0
        self.sample_count = 0
        self.loss = float("nan")
        self.accuracy = float("nan")

    def initialize(self):
        self.weights = ModelWeights.zeros(self.dims)

    def downstream_ends(self, handle: ChannelHandle) -> List[EndId]:
        return handle.ends()

    def gather(self):
        if self.work_done:
            return
        handle = self.require_channel("aggregate")
        messages = self.gather_messages(handle, self.sent_to)
        self.upload_ms = upload_delays(messages)
        self.bytes_received = sum(len(m.payload) for m in messages.values())
        self.updates = [u for u in (self.decode_update(m) for m in messages.values()) if u is not None]

    def aggregate(self):
        if self.work_done:
            return
        if not self.updates:
            log_action(logger, 'EMPTY_ROUND', level=logging.WARNING, job_id=self.manifest.job_id,
                       worker_id=self.worker_id, round=self.round, message="no updates; weights kept")
            self.sample_count = 0
            return
        self.weights = fedavg_aggregate(self.updates)
        counts = [u.sample_count for u in self.updates]
        self.sample_count = sum(counts)
        self.loss = weighted_mean([u.loss for u in self.updates], counts)
        self.accuracy = weighted_mean([u.accuracy for u in self.updates], counts)

    def end_downstream(self, handle: ChannelHandle):
        """Tell every downstream peer that training is over"""
        msg = self.control_message(EOT, "distribute")
        for end in handle.ends():
            self.send_quietly(handle, end, msg)


class Aggregator(_Aggregating):
    """Middle aggregator: relays global weights down and group aggregates up"""

    program_id = "aggregator"

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.upstream: Optional[EndId] = None

    def compose(self) -> TaskletChain:
        loop = Loop(lambda: self.work_done)
        return (
            Tasklet("init", step("initialize"))
            >> loop(
                Tasklet("get", step("get"))
                >> Tasklet("distribute", step("distribute"))
                >> Tasklet("gather", step("gather"))
                >> Tasklet("aggregate", step("aggregate"))
                >> Tasklet("put", step("put"))
            )
        )

    def get(self):
        if self.work_done:
            return
        handle = self.require_channel("fetch")
        self.upstream = self.first_peer(handle)
        msg = self.receive_model(handle, self.upstream)
        if msg is not None:
            self.start_round_clock()
            self.weights = ModelWeights.from_bytes(msg.payload)

    def distribute(self):
        handle = self.require_channel("distribute")
        if self.work_done:
            self.end_downstream(handle)
            return
        self.sent_to = distribute(self.weights, handle, self.round, self.downstream_ends(handle))

    def straggling(self) -> bool:
        hp = self.manifest.hyperparams
        return (hp.get("straggler_worker") == self.worker_id
                and self.round >= int(hp.get("straggler_from_round", 1)))

    def put(self):
        if self.work_done:
            return
        handle = self.require_channel("upload")
        msg = Message.build(self.weights.to_bytes(), func_tag="upload", type=UPDATE, round=self.round,
                            sample_count=self.sample_count, loss=repr(self.loss),
                            accuracy=repr(self.accuracy), sent_at=repr(time.time()))
        if self.straggling():
            # emulated slow uplink, counted in the receiver's upload delay
            time.sleep(float(self.manifest.hyperparams.get("straggler_delay_ms", 0)) / 1000.0)
        self.send_quietly(handle, self.upstream, msg)
        self.record_round(loss=self.loss, accuracy=self.accuracy,
                          upload_ms=max(self.upload_ms.values(), default=0.0), bytes_received=self.bytes_received)


class GlobalAggregator(_Aggregating):
    """Top of the hierarchy: owns the round counter and the model checkpoints"""

    program_id = "global-aggregator"

    def compose(self) -> TaskletChain:
        loop = Loop(lambda: self.work_done)
        return (
            Tasklet("init", step("initialize"))
            >> loop(
                Tasklet("distribute", step("distribute"))
                >> Tasklet("gather", step("gather"))
                >> Tasklet("aggregate", step("aggregate"))
                >> Tasklet("evaluate", step("evaluate"))
            )
            >> Tasklet("end_of_train", step("end_of_train"))
        )

    def initialize(self):
        super().initialize()
        if self.rounds <= 0:
            self.work_done = True
            self.save_weights("final.bin")

    def distribute(self):
        if self.work_done:
            return
        self.round += 1
        self.start_round_clock()
        handle = self.require_channel("distribute")
        self.sent_to = distribute(self.weights, handle, self.round, self.downstream_ends(handle))

    def evaluate(self):
        if self.work_done:
            return
        slowest = max(self.upload_ms.values(), default=0.0)
        metrics = self.record_round(loss=self.loss, accuracy=self.accuracy, upload_ms=slowest,
                                    bytes_received=self.bytes_received)
        self.save_weights(f"round-{self.round}.bin")
        log_action(logger, 'ROUND_COMPLETED', job_id=self.manifest.job_id, worker_id=self.worker_id,
                   round=self.round, message=(
                       f"{len(self.updates)} update(s) duration_ms={metrics.duration_ms:.1f}"
                       + ("" if math.isnan(self.loss) else f" loss={self.loss:.6g}")))
        if self.round >= self.rounds:
            self.work_done = True
            self.save_weights("final.bin")

    def end_of_train(self):
        self.end_downstream(self.require_channel("distribute"))

"""
Peer-averaging programs.

``DistributedTrainer`` averages with every peer on a self-channel each round.
``HybridTrainer`` does the same inside its group over a fast channel and only
the group leader (lowest worker id) uploads to the aggregator; the others
upload zero-byte markers. ``HybridAggregator`` sends full weights only to last
round's leaders.
"""
import logging
from typing import List, Set

from ..channel.handle import ChannelHandle, Message
from ..logger import logger, log_action
from ..tasklet import Loop, Tasklet, TaskletChain, step
from .aggregator import GlobalAggregator
from .base import UPDATE, WEIGHTS
from .model import ModelUpdate, ModelWeights, fedavg_aggregate, weighted_mean
from .trainer import Trainer


class _PeerAveraging(Trainer):

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.group: List[str] = []

    def peer_handle(self) -> ChannelHandle:
        return self.require_channel("allreduce")

    def allreduce(self):
        """Replace the local update with the sample-weighted mean over this worker and its peers"""
        if self.work_done or self.update is None:
            return
        handle = self.peer_handle()
        peers = handle.ends()
        msg = Message.build(self.update.weights.to_bytes(), func_tag="allreduce", type=UPDATE,
                            round=self.round, **self.update_headers(self.update))
        for end in peers:
            self.send_quietly(handle, end, msg)
        received = self.gather_messages(handle, peers, timeout=self.round_timeout)
        updates = {self.worker_id: self.update}
        for sender, m in received.items():
            update = self.decode_update(m)
            if update is not None:
                updates[sender] = update
        ordered = [updates[k] for k in sorted(updates)]
        counts = [u.sample_count for u in ordered]
        self.update = ModelUpdate(fedavg_aggregate(ordered), sum(counts), self.round, self.worker_id,
                                  weighted_mean([u.loss for u in ordered], counts),
                                  weighted_mean([u.accuracy for u in ordered], counts))
        self.group = sorted(updates)


class DistributedTrainer(_PeerAveraging):
    """No aggregator: every trainer ends each round with the same averaged model"""

    program_id = "distributed-trainer"

    def compose(self) -> TaskletChain:
        loop = Loop(lambda: self.work_done)
        return (
            Tasklet("load", step("load_data"))
            >> Tasklet("init", step("initialize"))
            >> loop(
                Tasklet("train", step("train"))
                >> Tasklet("evaluate", step("evaluate"))
                >> Tasklet("allreduce", step("allreduce"))
            )
        )

    def initialize(self):
        super().initialize()
        if self.rounds <= 0:
            self.work_done = True

    def train(self):
        if self.work_done:
            return
        self.round += 1
        self.start_round_clock()
        super().train()

    def allreduce(self):
        super().allreduce()
        if self.work_done:
            return
        self.weights = self.update.weights
        self.record_round(loss=self.eval_loss, accuracy=self.eval_accuracy)
        if self.round >= self.rounds:
            self.work_done = True
            if self.worker_id == min(self.group):
                self.save_weights("final.bin")


class HybridTrainer(_PeerAveraging):
    program_id = "hybrid-trainer"

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.shared = False

    def compose(self) -> TaskletChain:
        loop = Loop(lambda: self.work_done)
        return (
            Tasklet("load", step("load_data"))
            >> Tasklet("init", step("initialize"))
            >> loop(
                Tasklet("get", step("get"))
                >> Tasklet("sync", step("sync"))
                >> Tasklet("train", step("train"))
                >> Tasklet("evaluate", step("evaluate"))
                >> Tasklet("allreduce", step("allreduce"))
                >> Tasklet("put", step("put"))
            )
        )

    def get(self):
        if self.work_done:
            return
        handle = self.require_channel("fetch")
        self.upstream = self.upstream_end(handle)
        msg = self.receive_model(handle, self.upstream)
        if msg is None:
            return
        self.start_round_clock()
        self.shared = msg.header("shared") == "1"
        if msg.payload:
            self.weights = ModelWeights.from_bytes(msg.payload)

    def leader(self) -> str:
        members = [e.worker_id for e in self.peer_handle().ends()] + [self.worker_id]
        return min(members)

    def sync(self):
        """Leaders that received the global model pass it on to their group"""
        if self.work_done:
            return
        handle = self.peer_handle()
        if self.shared:
            msg = Message.build(self.weights.to_bytes(), func_tag="allreduce", type=WEIGHTS, round=self.round)
            for end in handle.ends():
                self.send_quietly(handle, end, msg)
        elif self.round > 1:
            leader = handle.end_of(self.leader())
            while True:
                msg = handle.recv(leader, timeout=self.round_timeout)
                if msg.header("type") == WEIGHTS and int(msg.header("round", "0")) == self.round:
                    break
            self.weights = ModelWeights.from_bytes(msg.payload)

    def put(self):
        if self.work_done:
            return
        handle = self.require_channel("upload")
        update = self.update if self.worker_id == min(self.group) else None
        self.send_quietly(handle, self.upstream, self.update_message(update))
        self.record_round(loss=self.eval_loss, accuracy=self.eval_accuracy)


class HybridAggregator(GlobalAggregator):
    program_id = "hybrid-aggregator"

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.uploaders: Set[str] = set()

    def distribute(self):
        if self.work_done:
            return
        self.round += 1
        self.start_round_clock()
        handle = self.require_channel("distribute")
        ends = handle.ends()
        if not ends:
            log_action(logger, 'NO_PEERS', level=logging.WARNING, job_id=self.manifest.job_id,
                       worker_id=self.worker_id, round=self.round, message="distribute found no peers")
        payload = self.weights.to_bytes()
        plain = Message.build(payload, func_tag="distribute", type=WEIGHTS, round=self.round)
        full = Message.build(payload, func_tag="distribute", type=WEIGHTS, round=self.round, shared=1)
        marker = Message.build(b"", func_tag="distribute", type=WEIGHTS, round=self.round)
        for end in ends:
            if self.round == 1:
                msg = plain
            else:
                msg = full if end.worker_id in self.uploaders else marker
            handle.send(end, msg)
        self.sent_to = ends

    def gather(self):
        super().gather()
        if not self.work_done:
            self.uploaders = {u.sender for u in self.updates}

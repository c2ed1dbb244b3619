import logging
import time
from typing import Optional

from ..channel.handle import ChannelHandle, EndId, Message
from ..exceptions import RoleError
from ..logger import logger, log_action
from ..tasklet import Loop, Tasklet, TaskletChain, step
from .base import UPDATE, Role
from .data import SyntheticDataset, load_dataset
from .model import (ModelUpdate, ModelWeights, least_squares_loss, local_train,
                    r2_accuracy)


class Trainer(Role):
    """
    Data-consuming worker: fetch global weights, train locally, upload the update.

    Subclasses typically override ``load_data``, ``initialize``, ``train`` or
    ``evaluate``; channel plumbing lives in ``get`` and ``put``.
    """

    program_id = "trainer"

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.dataset: Optional[SyntheticDataset] = None
        self.update: Optional[ModelUpdate] = None
        self.upstream: Optional[EndId] = None
        self.eval_loss = float("nan")
        self.eval_accuracy = float("nan")

    def compose(self) -> TaskletChain:
        loop = Loop(lambda: self.work_done)
        return (
            Tasklet("load", step("load_data"))
            >> Tasklet("init", step("initialize"))
            >> loop(
                Tasklet("get", step("get"))
                >> Tasklet("train", step("train"))
                >> Tasklet("evaluate", step("evaluate"))
                >> Tasklet("put", step("put"))
            )
        )

    def load_data(self):
        if not self.manifest.dataset_url:
            raise RoleError(f"{self.worker_id} has no dataset in its manifest")
        self.dataset = load_dataset(self.manifest.dataset_url)
        log_action(logger, 'DATA_LOADED', job_id=self.manifest.job_id, worker_id=self.worker_id,
                   message=f"{len(self.dataset)} samples from {self.manifest.dataset_id or self.dataset.name}")

    def initialize(self):
        self.weights = ModelWeights.zeros(self.dims)

    def upstream_end(self, handle: ChannelHandle) -> EndId:
        return self.first_peer(handle)

    def get(self):
        if self.work_done:
            return
        handle = self.require_channel("fetch")
        self.upstream = self.upstream_end(handle)
        msg = self.receive_model(handle, self.upstream)
        if msg is None:
            return
        self.start_round_clock()
        self.weights = ModelWeights.from_bytes(msg.payload)

    def train(self):
        if self.work_done:
            return
        self.update = local_train(self.weights, self.dataset, self.epochs, self.lr,
                                  round_=self.round, sender=self.worker_id)

    def evaluate(self):
        """Loss and R^2 of the received global model on local data"""
        if self.work_done:
            return
        w = self.weights.values
        self.eval_loss = least_squares_loss(w, self.dataset.features, self.dataset.labels)
        self.eval_accuracy = r2_accuracy(w, self.dataset.features, self.dataset.labels)

    def update_message(self, update: Optional[ModelUpdate]) -> Message:
        """Serialized update; None gives a zero-byte marker"""
        if update is None:
            return Message.build(b"", func_tag="upload", type=UPDATE, round=self.round,
                                 sample_count=0, sent_at=repr(time.time()))
        return Message.build(update.weights.to_bytes(), func_tag="upload", type=UPDATE, round=self.round,
                             sent_at=repr(time.time()), **self.update_headers(update))

    def put(self):
        if self.work_done:
            return
        handle = self.require_channel("upload")
        self.send_quietly(handle, self.upstream, self.update_message(self.update))
        metrics = self.record_round(loss=self.eval_loss, accuracy=self.eval_accuracy)
        log_action(logger, 'ROUND_COMPLETED', level=logging.DEBUG, job_id=self.manifest.job_id,
                   worker_id=self.worker_id, round=self.round,
                   message=f"loss={metrics.loss:.6g} duration_ms={metrics.duration_ms:.1f}")

"""
Coordinated variants of the hierarchical programs.

Each one is the inherited chain plus a ``get_coord_ends`` tasklet; the
global aggregator also drops ``end_of_train`` since the coordinator ends
the job for everybody else.
"""
from typing import List, Optional

from ..channel.handle import ChannelHandle, EndId
from ..tasklet import Tasklet, TaskletChain, step
from .aggregator import Aggregator, GlobalAggregator
from .coordinator import REPORT, get_coord_ends, receive_assignment
from .trainer import Trainer


class CoordinatedGlobalAggregator(GlobalAggregator):
    program_id = "coordinated-global-aggregator"

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.coord_ends: Optional[List[EndId]] = None

    def compose(self) -> TaskletChain:
        chain = super().compose()
        chain.get_tasklet("distribute").insert_before(Tasklet("get_coord_ends", step("get_coord_ends")))
        chain.get_tasklet("end_of_train").remove()
        return chain

    def get_coord_ends(self):
        if self.work_done:
            return
        timeout = self.coordinator_timeout if self.round else self.coordinator_timeout + self.peer_wait_timeout
        self.coord_ends = get_coord_ends(self.require_channel("coordinate"), self.require_channel("distribute"),
                                         timeout, round_=self.round + 1)

    def downstream_ends(self, handle: ChannelHandle) -> List[EndId]:
        if self.coord_ends is None:
            return handle.ends()
        return self.coord_ends

    def aggregate(self):
        super().aggregate()
        if self.work_done:
            return
        handle = self.require_channel("coordinate")
        body = {"round": self.round, "delays": self.upload_ms}
        for end in handle.ends():
            self.send_quietly(handle, end, self.control_message(REPORT, "coordinate", body))


class CoordinatedAggregator(Aggregator):
    """Takes part only in rounds the coordinator enables it for"""

    program_id = "coordinated-aggregator"

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.idle = False
        self.assigned: List[str] = []

    def compose(self) -> TaskletChain:
        chain = super().compose()
        chain.get_tasklet("get").insert_before(Tasklet("get_coord_ends", step("get_coord_ends")))
        return chain

    def get_coord_ends(self):
        if self.work_done:
            return
        body = receive_assignment(self.require_channel("coordinate"), self.assignment_timeout())
        if body.get("done"):
            self.work_done = True
            return
        self.idle = not body.get("enabled", True)
        self.assigned = list(body.get("ends", []))
        if self.idle:
            self.round = int(body["round"])

    def downstream_ends(self, handle: ChannelHandle) -> List[EndId]:
        chosen = set(self.assigned)
        return [end for end in handle.ends() if end.worker_id in chosen]

    def end_downstream(self, handle: ChannelHandle):
        # trainers are released by the coordinator
        pass

    def get(self):
        if not self.idle:
            super().get()

    def distribute(self):
        if not self.idle:
            super().distribute()

    def gather(self):
        if not self.idle:
            super().gather()

    def aggregate(self):
        if not self.idle:
            super().aggregate()

    def put(self):
        if not self.idle:
            super().put()


class CoordinatedTrainer(Trainer):
    """Talks to whichever aggregator the coordinator assigned for the round"""

    program_id = "coordinated-trainer"

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.assigned: Optional[EndId] = None

    def compose(self) -> TaskletChain:
        chain = super().compose()
        chain.get_tasklet("get").insert_before(Tasklet("get_coord_ends", step("get_coord_ends")))
        return chain

    def get_coord_ends(self):
        if self.work_done:
            return
        body = receive_assignment(self.require_channel("coordinate"), self.assignment_timeout())
        if body.get("done"):
            self.work_done = True
            return
        self.assigned = self.require_channel("fetch").end_of(body["ends"][0])

    def upstream_end(self, handle: ChannelHandle) -> EndId:
        return self.assigned or super().upstream_end(handle)

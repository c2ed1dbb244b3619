"""
Coordinator program and the binary-backoff straggler policy.

Each round the coordinator tells the global aggregator which aggregators to
use, each aggregator whether it takes part (and which trainers it serves),
and each trainer which aggregator to talk to. The global aggregator reports
per-aggregator upload delays back; ``coordinator_step`` turns them into the
next round's enabled set.
"""
import json
import logging
import statistics
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Set

from ..channel.handle import ChannelHandle, EndId
from ..exceptions import ChannelTimeout, CoordinatorUnreachable, PeerLeft
from ..logger import logger, log_action
from ..tasklet import Loop, Tasklet, TaskletChain, step
from .base import Role

ASSIGN = "assign"
REPORT = "report"
DONE = "done"

DETECT_AFTER = 3
MAX_EXCLUSION = 16


@dataclass
class CoordinatorState:
    aggregators: List[str]
    factor: float = 2.0
    floor_ms: float = 10.0
    consecutive: Dict[str, int] = field(default_factory=dict)
    exponent: Dict[str, int] = field(default_factory=dict)
    excluded: Dict[str, int] = field(default_factory=dict)
    probing: Set[str] = field(default_factory=set)
    history: Dict[str, List[float]] = field(default_factory=dict)

    def __post_init__(self):
        self.aggregators = sorted(self.aggregators)

    def enabled(self) -> List[str]:
        return [a for a in self.aggregators if self.excluded.get(a, 0) == 0]

    def is_delayed(self, aggregator: str, delays: Dict[str, float]) -> bool:
        """Delay above twice the median of the others and above median + floor"""
        others = [d for a, d in delays.items() if a != aggregator]
        if not others:
            return False
        median = statistics.median(others)
        delay = delays[aggregator]
        return delay > self.factor * median and delay > median + self.floor_ms

    def _exclude(self, aggregator: str, rounds: int) -> bool:
        if len(self.enabled()) <= 1:
            return False
        self.excluded[aggregator] = rounds
        return True


def coordinator_step(state: CoordinatorState, delays: Dict[str, float]) -> List[str]:
    """
    Fold one round's upload delays into ``state``; returns next round's enabled aggregators.

    Aggregators absent from ``delays`` that are excluded count down one round;
    when the count reaches zero they come back for a trial round.
    """
    for agg in state.aggregators:
        if agg not in delays and state.excluded.get(agg, 0) > 0:
            state.excluded[agg] -= 1
            if state.excluded[agg] == 0:
                state.probing.add(agg)

    for agg in sorted(delays):
        state.history.setdefault(agg, []).append(delays[agg])
        delayed = state.is_delayed(agg, delays)
        if agg in state.probing:
            state.probing.discard(agg)
            if delayed:
                k = state.exponent.get(agg, 0) + 1
                if state._exclude(agg, min(2 ** k, MAX_EXCLUSION)):
                    state.exponent[agg] = k
                    _log_exclusion(agg, state.excluded[agg])
            else:
                state.exponent[agg] = 0
                state.consecutive[agg] = 0
            continue

        state.consecutive[agg] = state.consecutive.get(agg, 0) + 1 if delayed else 0
        if state.consecutive[agg] >= DETECT_AFTER:
            if state._exclude(agg, 1):
                state.exponent[agg] = 0
                state.consecutive[agg] = 0
                _log_exclusion(agg, 1)
    return state.enabled()


def _log_exclusion(aggregator: str, rounds: int):
    log_action(logger, 'AGGREGATOR_EXCLUDED', worker_id=aggregator,
               message=f"excluded for {rounds} round(s)")


def assign_trainers(trainers: Iterable[str], enabled: List[str]) -> Dict[str, List[str]]:
    """Round-robin sorted trainers over the enabled aggregators"""
    plan: Dict[str, List[str]] = {agg: [] for agg in enabled}
    for i, trainer in enumerate(sorted(trainers)):
        plan[enabled[i % len(enabled)]].append(trainer)
    return plan


def receive_assignment(handle: ChannelHandle, timeout: float, round_: Optional[int] = None) -> dict:
    """
    Next assignment from the coordinator; ``{"done": True}`` once training ended.

    Raises CoordinatorUnreachable when nothing arrives within ``timeout`` or the
    coordinator left.
    """
    ends = handle.ends()
    if not ends:
        raise CoordinatorUnreachable(f"no coordinator on {handle.channel}")
    coordinator = ends[0]
    while True:
        try:
            msg = handle.recv(coordinator, timeout=timeout)
        except (ChannelTimeout, PeerLeft) as e:
            raise CoordinatorUnreachable(f"coordinator silent on {handle.channel}: {e}") from e
        kind = msg.header("type")
        if kind == DONE:
            return {"done": True}
        if kind != ASSIGN:
            continue
        body = json.loads(msg.payload.decode("utf-8"))
        if round_ is None or int(body.get("round", -1)) == round_:
            return body


def get_coord_ends(coord_handle: ChannelHandle, data_handle: ChannelHandle, timeout: float,
                   round_: Optional[int] = None) -> List[EndId]:
    """Ends of ``data_handle`` the coordinator enabled for the round; [] when training ended"""
    body = receive_assignment(coord_handle, timeout, round_)
    if body.get("done"):
        return []
    chosen = set(body.get("ends", []))
    return [end for end in data_handle.ends() if end.worker_id in chosen]


class Coordinator(Role):
    program_id = "coordinator"

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.state: Optional[CoordinatorState] = None
        self.enabled: List[str] = []
        self.schedule: List[dict] = []

    def compose(self) -> TaskletChain:
        loop = Loop(lambda: self.work_done)
        return (
            Tasklet("init", step("initialize"))
            >> loop(Tasklet("assign", step("assign")) >> Tasklet("monitor", step("monitor")))
            >> Tasklet("end_of_train", step("end_of_train"))
        )

    def _peers(self, func_tag: str) -> List[EndId]:
        handle = self.require_channel(func_tag)
        return handle.ends()

    def initialize(self):
        aggregators = [e.worker_id for e in self._peers("coordinate_aggregator")]
        hp = self.manifest.hyperparams
        self.state = CoordinatorState(aggregators, floor_ms=float(hp.get("straggler_floor_ms", 10.0)))
        self.enabled = self.state.enabled()
        self.work_done = self.rounds <= 0

    def assign(self):
        if self.work_done:
            return
        self.round += 1
        self.start_round_clock()
        enabled = self.enabled
        trainers = self._peers("coordinate_trainer")
        plan = assign_trainers([t.worker_id for t in trainers], enabled)

        glob = self.require_channel("coordinate_global")
        for end in glob.ends():
            glob.send(end, self.control_message(ASSIGN, "coordinate_global",
                                                {"round": self.round, "ends": enabled}))

        aggs = self.require_channel("coordinate_aggregator")
        for end in aggs.ends():
            body = {"round": self.round, "enabled": end.worker_id in plan,
                    "ends": plan.get(end.worker_id, [])}
            self.send_quietly(aggs, end, self.control_message(ASSIGN, "coordinate_aggregator", body))

        served_by = {t: agg for agg, ts in plan.items() for t in ts}
        coord_trainers = self.require_channel("coordinate_trainer")
        for end in trainers:
            body = {"round": self.round, "ends": [served_by[end.worker_id]]}
            self.send_quietly(coord_trainers, end, self.control_message(ASSIGN, "coordinate_trainer", body))

        self.schedule.append({"round": self.round, "enabled": list(enabled)})
        log_action(logger, 'ROUND_ASSIGNED', level=logging.DEBUG, job_id=self.manifest.job_id,
                   worker_id=self.worker_id, round=self.round, message=f"enabled={enabled}")

    def monitor(self):
        if self.work_done:
            return
        handle = self.require_channel("coordinate_global")
        global_end = self.first_peer(handle)
        while True:
            try:
                msg = handle.recv(global_end, timeout=self.round_timeout)
            except PeerLeft:
                self.work_done = True
                return
            if msg.header("type") != REPORT:
                continue
            body = json.loads(msg.payload.decode("utf-8"))
            if int(body.get("round", -1)) == self.round:
                break
        delays = {k: float(v) for k, v in body.get("delays", {}).items()}
        self.enabled = coordinator_step(self.state, delays)
        self.record_round(upload_ms=max(delays.values(), default=0.0))
        if self.round >= self.rounds:
            self.work_done = True

    def end_of_train(self):
        for tag in ("coordinate_aggregator", "coordinate_trainer"):
            handle = self.require_channel(tag)
            msg = self.control_message(DONE, tag)
            for end in handle.ends():
                self.send_quietly(handle, end, msg)
        path = self.artifact_dir / "coordination.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps({"aggregators": self.state.aggregators, "rounds": self.schedule},
                                   indent=2), encoding="utf-8")

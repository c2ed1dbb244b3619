import json
import random
import time

import pytest

from src.control_plane.controller import Controller
from src.control_plane.notifier import EVENTS, KEEPALIVE, Notifier, format_sse
from src.control_plane.records import (ComputeRecord, DatasetRecord, EventKind, JobState, TaskStatus,
                                       can_transition)
from src.control_plane.store import JOURNAL_FILE, SNAPSHOT_FILE, JournaledStore
from src.client import parse_sse
from src.exceptions import (DuplicateCompute, DuplicateDataset, DuplicateSubscriber, InvalidJobSpec,
                            JobNotRunning, NoComputeForRealm, SlotAlreadyFilled, UnknownEvent, UnknownJob,
                            WrongState)
from src.templates import classical, hierarchical

from .conftest import make_datasets


class TestJournaledStore:
    def test_state_survives_reopen(self, tmp_path):
        store = JournaledStore(str(tmp_path))
        store.put("jobs", "j1", {"state": "created"})
        store.put("jobs", "j2", {"state": "created"})
        store.delete("jobs", "j2")
        store.close()
        reopened = JournaledStore(str(tmp_path))
        assert reopened.get("jobs", "j1") == {"state": "created"}
        assert reopened.get("jobs", "j2") is None
        assert reopened.seq == 3

    def test_snapshot_truncates_journal(self, tmp_path):
        store = JournaledStore(str(tmp_path), snapshot_every=3)
        for i in range(4):
            store.put("events", str(i), {"n": i})
        store.close()
        assert (tmp_path / SNAPSHOT_FILE).exists()
        assert len((tmp_path / JOURNAL_FILE).read_text().splitlines()) == 1
        reopened = JournaledStore(str(tmp_path), snapshot_every=3)
        assert reopened.count("events") == 4
        assert reopened.seq == 4

    def test_torn_final_entry_is_ignored(self, tmp_path):
        store = JournaledStore(str(tmp_path))
        store.put("jobs", "j1", {"ok": True})
        store.close()
        with (tmp_path / JOURNAL_FILE).open("a") as f:
            f.write('{"seq": 2, "op": "put", "coll')
        reopened = JournaledStore(str(tmp_path))
        assert reopened.get("jobs", "j1") == {"ok": True}
        assert reopened.seq == 1

    def test_memory_only_store(self):
        store = JournaledStore(None)
        store.put("a", "k", {"v": 1})
        assert not store.durable
        assert dict(store.items("a")) == {"k": {"v": 1}}


class TestNotifier:
    def test_pending_until_acked(self):
        notifier = Notifier(JournaledStore(None))
        first = notifier.emit(EventKind.DEPLOY, "job", "compute-a", {"workers": ["trainer-0"]})
        notifier.emit(EventKind.DEPLOY, "job", "compute-b")
        assert [e.event_id for e in notifier.pending("compute-a")] == [first.event_id]
        notifier.ack("compute-a", first.event_id)
        assert notifier.ack("compute-a", first.event_id).acked
        assert notifier.pending("compute-a") == []

    def test_acked_events_leave_the_store(self):
        store = JournaledStore(None)
        notifier = Notifier(store)
        first = notifier.emit(EventKind.DEPLOY, "job", "compute-a")
        second = notifier.emit(EventKind.REVOKE, "job", "compute-a")
        notifier.ack("compute-a", first.event_id)
        assert [int(k) for k, _ in store.items(EVENTS)] == [second.event_id]
        assert [e.event_id for e in notifier.events("job")] == [second.event_id]
        assert notifier.ack("compute-a", first.event_id).acked
        with pytest.raises(UnknownEvent):
            notifier.ack("compute-b", first.event_id)

    def test_ids_are_not_reused_after_restart(self, tmp_path):
        store = JournaledStore(str(tmp_path))
        notifier = Notifier(store)
        for _ in range(3):
            event = notifier.emit(EventKind.DEPLOY, "job", "compute-a")
            notifier.ack("compute-a", event.event_id)
        store.close()
        reopened = Notifier(JournaledStore(str(tmp_path)))
        assert reopened.events() == []
        assert reopened.emit(EventKind.DEPLOY, "job", "compute-a").event_id == 4

    def test_ack_of_foreign_event(self):
        notifier = Notifier(JournaledStore(None))
        event = notifier.emit(EventKind.DEPLOY, "job", "compute-a")
        with pytest.raises(UnknownEvent):
            notifier.ack("compute-b", event.event_id)
        with pytest.raises(UnknownEvent):
            notifier.ack("compute-a", 999)

    def test_one_stream_per_subscriber(self):
        notifier = Notifier(JournaledStore(None))
        notifier.attach("compute-a")
        with pytest.raises(DuplicateSubscriber):
            notifier.attach("compute-a")
        notifier.detach("compute-a")
        notifier.attach("compute-a")

    def test_ids_continue_after_restart(self, tmp_path):
        notifier = Notifier(JournaledStore(str(tmp_path)))
        notifier.emit(EventKind.DEPLOY, "job", "compute-a")
        notifier.emit(EventKind.DEPLOY, "job", "compute-a")
        notifier.store.close()
        restarted = Notifier(JournaledStore(str(tmp_path)))
        assert [e.event_id for e in restarted.pending("compute-a")] == [1, 2]
        assert restarted.emit(EventKind.REVOKE, "job", "compute-a").event_id == 3

    def test_wait_pending_times_out_empty(self):
        notifier = Notifier(JournaledStore(None))
        started = time.monotonic()
        assert notifier.wait_pending("compute-a", 0, 0.05) == []
        assert time.monotonic() - started >= 0.04

    def test_sse_text_parses_back(self):
        notifier = Notifier(JournaledStore(None))
        event = notifier.emit(EventKind.REVOKE, "job", "compute-a", {"workers": ["trainer-1"]})
        text = KEEPALIVE + format_sse(event)
        parsed = list(parse_sse(iter(text.split("\n"))))
        assert len(parsed) == 1
        assert parsed[0].kind == EventKind.REVOKE
        assert parsed[0].payload == {"workers": ["trainer-1"]}


def make_controller(settings, tmp_path, state=False, computes=None, datasets=None):
    store = JournaledStore(str(tmp_path / "state") if state else None)
    controller = Controller(store, settings=settings, broker_address="inproc://tests",
                            artifact_root=str(tmp_path / "artifacts"))
    for compute in computes or [ComputeRecord(compute_id="compute-local", realm="local", capacity=16)]:
        controller.register_compute(compute)
    for dataset in datasets if datasets is not None else make_datasets(["A", "B", "C", "D"]):
        controller.register_dataset(dataset)
    return controller


def report_all(controller, job_id, status):
    for worker_id in sorted(controller.job(job_id).tasks):
        controller.update_task_status(job_id, worker_id, status)


class TestController:
    def test_duplicate_registrations(self, fast_settings, tmp_path):
        controller = make_controller(fast_settings, tmp_path)
        with pytest.raises(DuplicateCompute):
            controller.register_compute(ComputeRecord(compute_id="compute-local", realm="other"))
        with pytest.raises(DuplicateDataset):
            controller.register_dataset(make_datasets(["A"])[0])

    def test_invalid_job_carries_violations(self, fast_settings, tmp_path):
        controller = make_controller(fast_settings, tmp_path)
        document = classical()
        document["channels"][0]["pair"] = ["trainer", "ghost"]
        with pytest.raises(InvalidJobSpec) as excinfo:
            controller.create_job(document)
        assert excinfo.value.details["violations"][0]["code"] == "UNKNOWN_ROLE"
        assert controller.jobs() == []

    def test_job_ids_are_unique(self, fast_settings, tmp_path):
        controller = make_controller(fast_settings, tmp_path)
        assert controller.create_job(classical()) != controller.create_job(classical())

    def test_start_emits_one_deploy_per_compute(self, fast_settings, tmp_path):
        computes = [ComputeRecord(compute_id="compute-west", realm="west"),
                    ComputeRecord(compute_id="compute-east", realm="east"),
                    ComputeRecord(compute_id="compute-root", realm="*")]
        datasets = make_datasets(["A", "B"], realm="west") + make_datasets(["C", "D"], realm="east")
        controller = make_controller(fast_settings, tmp_path, computes=computes, datasets=datasets)
        job_id = controller.create_job(hierarchical())
        topology = controller.start_job(job_id)
        assert len(topology.workers) == 7
        assert controller.job(job_id).state == JobState.DEPLOYING
        deploys = [e for e in controller.notifier.events(job_id) if e.kind == EventKind.DEPLOY]
        assert sorted(e.target for e in deploys) == sorted({w.compute_id for w in topology.workers})
        assert sum(len(e.payload["workers"]) for e in deploys) == 7

    def test_start_twice(self, fast_settings, tmp_path):
        controller = make_controller(fast_settings, tmp_path)
        job_id = controller.create_job(classical())
        controller.start_job(job_id)
        with pytest.raises(WrongState):
            controller.start_job(job_id)

    def test_expansion_failure_leaves_job_created(self, fast_settings, tmp_path):
        controller = make_controller(fast_settings, tmp_path, datasets=make_datasets(["A", "B", "C", "D"], realm="eu"))
        job_id = controller.create_job(classical())
        with pytest.raises(NoComputeForRealm):
            controller.start_job(job_id)
        assert controller.job(job_id).state == JobState.CREATED

    def test_lifecycle_to_completed(self, fast_settings, tmp_path):
        controller = make_controller(fast_settings, tmp_path)
        job_id = controller.create_job(classical())
        controller.start_job(job_id)
        report_all(controller, job_id, TaskStatus.RUNNING)
        assert controller.job(job_id).state == JobState.RUNNING
        assert any(e.kind == EventKind.JOB_START for e in controller.notifier.events(job_id))
        report_all(controller, job_id, TaskStatus.DONE)
        assert controller.job(job_id).state == JobState.COMPLETED

    def test_task_failure_fails_job_and_revokes(self, fast_settings, tmp_path):
        controller = make_controller(fast_settings, tmp_path)
        job_id = controller.create_job(classical())
        controller.start_job(job_id)
        report_all(controller, job_id, TaskStatus.RUNNING)
        controller.update_task_status(job_id, "trainer-2", TaskStatus.FAILED, "exit 1", exit_code=1)
        job = controller.job(job_id)
        assert job.state == JobState.FAILED
        assert "trainer-2" in job.error
        revokes = [e for e in controller.notifier.events(job_id) if e.kind == EventKind.REVOKE]
        assert [e.target for e in revokes] == ["compute-local"]

    def test_first_terminal_report_wins(self, fast_settings, tmp_path):
        controller = make_controller(fast_settings, tmp_path)
        job_id = controller.create_job(classical())
        controller.start_job(job_id)
        controller.update_task_status(job_id, "trainer-0", TaskStatus.DONE)
        controller.update_task_status(job_id, "trainer-0", TaskStatus.FAILED)
        assert controller.job(job_id).tasks["trainer-0"].status == TaskStatus.DONE

    def test_stop_completes_after_revoke_acks(self, fast_settings, tmp_path):
        controller = make_controller(fast_settings, tmp_path)
        job_id = controller.create_job(classical())
        controller.start_job(job_id)
        report_all(controller, job_id, TaskStatus.RUNNING)
        controller.stop_job(job_id)
        assert controller.job(job_id).state == JobState.RUNNING
        assert controller.stop_job(job_id).stop_requested
        revoke = next(e for e in controller.notifier.events(job_id) if e.kind == EventKind.REVOKE)
        controller.notifier.ack("compute-local", revoke.event_id)
        assert controller.job(job_id).state == JobState.STOPPED

    def test_terminated_after_stop_is_not_a_failure(self, fast_settings, tmp_path):
        controller = make_controller(fast_settings, tmp_path)
        job_id = controller.create_job(classical())
        controller.start_job(job_id)
        report_all(controller, job_id, TaskStatus.RUNNING)
        controller.stop_job(job_id)
        controller.update_task_status(job_id, "trainer-0", TaskStatus.TERMINATED)
        assert controller.job(job_id).state == JobState.RUNNING

    def test_stop_requires_active_job(self, fast_settings, tmp_path):
        controller = make_controller(fast_settings, tmp_path)
        job_id = controller.create_job(classical())
        with pytest.raises(WrongState):
            controller.stop_job(job_id)
        with pytest.raises(UnknownJob):
            controller.stop_job("missing")

    def test_missed_heartbeats_fail_the_task(self, fast_settings, tmp_path):
        controller = make_controller(fast_settings, tmp_path)
        job_id = controller.create_job(classical())
        controller.start_job(job_id)
        report_all(controller, job_id, TaskStatus.RUNNING)
        controller.heartbeat(job_id, "trainer-1")
        assert controller.check_heartbeats(now=time.monotonic()) == []
        later = time.monotonic() + fast_settings.missed_heartbeat_window + 1
        assert "trainer-1" in controller.check_heartbeats(now=later)
        assert controller.job(job_id).state == JobState.FAILED

    def test_manifest_lists_peers(self, fast_settings, tmp_path):
        controller = make_controller(fast_settings, tmp_path)
        job_id = controller.create_job(hierarchical())
        controller.start_job(job_id)
        manifest = controller.manifest(job_id, "aggregator-0")
        assert manifest.code_ref == "src.roles.aggregator:Aggregator"
        channels = {c.name: c for c in manifest.channels}
        assert channels["param-channel"].expected_peers == ["trainer-0", "trainer-1"]
        assert channels["global-channel"].expected_peers == ["global-aggregator-0"]
        assert manifest.hyperparams["roundTimeout"] == fast_settings.ROUND_TIMEOUT_S
        trainer = controller.manifest(job_id, "trainer-3")
        assert trainer.dataset_id == "D"
        assert trainer.dataset_url.startswith("synthetic://D")

    def test_state_recovers_after_restart(self, fast_settings, tmp_path):
        controller = make_controller(fast_settings, tmp_path, state=True)
        job_id = controller.create_job(classical())
        controller.start_job(job_id)
        controller.store.close()
        restarted = Controller(JournaledStore(str(tmp_path / "state")), settings=fast_settings,
                               broker_address="inproc://tests", artifact_root=str(tmp_path / "artifacts"))
        assert restarted.job(job_id).state == JobState.DEPLOYING
        assert len(restarted.datasets()) == 4
        assert [e.kind for e in restarted.notifier.pending("compute-local")] == [EventKind.DEPLOY]


class TestUnmanagedSlots:
    def start_running(self, fast_settings, tmp_path):
        datasets = make_datasets(["A", "B", "C"]) + [
            DatasetRecord(dataset_id="D", realm="local", url="synthetic://D?seed=9&n=50&d=8", managed=False)]
        controller = make_controller(fast_settings, tmp_path, datasets=datasets)
        job_id = controller.create_job(classical())
        controller.start_job(job_id)
        for worker_id, task in controller.job(job_id).tasks.items():
            if task.managed:
                controller.update_task_status(job_id, worker_id, TaskStatus.RUNNING)
        return controller, job_id

    def test_running_waits_only_for_managed_tasks(self, fast_settings, tmp_path):
        controller, job_id = self.start_running(fast_settings, tmp_path)
        assert controller.job(job_id).state == JobState.RUNNING
        assert controller.open_slots(job_id) == ["trainer-3"]

    def test_claim_once(self, fast_settings, tmp_path):
        controller, job_id = self.start_running(fast_settings, tmp_path)
        manifest = controller.claim_slot(job_id, "trainer-3", "owner-d")
        assert manifest.dataset_id == "D"
        assert controller.job(job_id).tasks["trainer-3"].claimed_by == "owner-d"
        assert controller.open_slots(job_id) == []
        with pytest.raises(SlotAlreadyFilled):
            controller.claim_slot(job_id, "trainer-3")
        with pytest.raises(SlotAlreadyFilled):
            controller.claim_slot(job_id, "trainer-0")

    def test_claim_needs_running_job(self, fast_settings, tmp_path):
        datasets = make_datasets(["A", "B", "C"]) + [
            DatasetRecord(dataset_id="D", realm="local", url="synthetic://D", managed=False)]
        controller = make_controller(fast_settings, tmp_path, datasets=datasets)
        job_id = controller.create_job(classical())
        controller.start_job(job_id)
        with pytest.raises(JobNotRunning):
            controller.claim_slot(job_id, "trainer-3")


class TestJobStates:
    def test_transitions(self):
        assert can_transition(JobState.CREATED, JobState.DEPLOYING)
        assert not can_transition(JobState.CREATED, JobState.RUNNING)
        assert not can_transition(JobState.COMPLETED, JobState.FAILED)
        assert json.loads(json.dumps(JobState.RUNNING.value)) == "running"

    @pytest.mark.parametrize("seed", range(500))
    def test_random_reports_only_take_legal_transitions(self, seed, fast_settings, tmp_path):
        rng = random.Random(seed)
        controller = make_controller(fast_settings, tmp_path)
        job_id = controller.create_job(classical(["A", "B", "C", "D"][:rng.randint(1, 4)]))
        states = [controller.job(job_id).state]
        save = controller._save

        def recording_save(job):
            if job.state != states[-1]:
                states.append(job.state)
            save(job)

        controller._save = recording_save
        controller.start_job(job_id)
        seen = {}
        for _ in range(rng.randint(1, 25)):
            job = controller.job(job_id)
            action = rng.random()
            if action < 0.7:
                worker_id = rng.choice(sorted(job.tasks))
                status = rng.choice([TaskStatus.FETCHING, TaskStatus.RUNNING, TaskStatus.RUNNING,
                                     TaskStatus.DONE, TaskStatus.DONE, TaskStatus.FAILED, TaskStatus.TERMINATED])
                controller.update_task_status(job_id, worker_id, status)
            elif action < 0.8:
                controller.check_heartbeats(now=time.monotonic() + rng.choice([0.0, 100.0]))
            elif action < 0.9:
                try:
                    controller.stop_job(job_id)
                except WrongState:
                    assert job.state.terminal
            else:
                for event in controller.notifier.events(job_id):
                    controller.notifier.ack(event.target, event.event_id)
            job = controller.job(job_id)
            for worker_id, task in job.tasks.items():
                if worker_id in seen:
                    assert task.status == seen[worker_id]
                elif task.status.terminal:
                    seen[worker_id] = task.status
        assert all(can_transition(a, b) for a, b in zip(states, states[1:])), states
        assert not any(s.terminal for s in states[:-1])
        final = controller.job(job_id)
        if final.state == JobState.COMPLETED:
            assert all(t.status == TaskStatus.DONE for t in final.tasks.values())
        if final.state == JobState.FAILED:
            assert any(t.status in (TaskStatus.FAILED, TaskStatus.TERMINATED) for t in final.tasks.values())

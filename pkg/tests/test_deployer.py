import json
import time

import pytest

from src import worker
from src.config import Settings
from src.control_plane.records import Event, EventKind, TaskStatus
from src.deployer.agent import Agent, AgentPhase, AgentState, exit_detail
from src.deployer.deployer import Deployer, DeploymentRequest
from src.deployer.unmanaged import join_unmanaged
from src.exceptions import ApiError

from .fakes import FakeClient, FakeLauncher

TERMINAL = {"done", "failed", "terminated"}


def unavailable():
    return ApiError(503, {"error": "busy", "error_code": "UNAVAILABLE"})


def unreachable():
    return ApiError(0, {"error": "connection refused", "error_code": "UNREACHABLE"})


def deploy(event_id, workers, job_id="job-1"):
    return Event(event_id=event_id, kind=EventKind.DEPLOY, job_id=job_id, target="compute-local",
                 payload={"workers": workers, "api": "http://fake"})


def revoke(event_id, job_id="job-1", workers=None):
    payload = {} if workers is None else {"workers": workers}
    return Event(event_id=event_id, kind=EventKind.REVOKE, job_id=job_id, target="compute-local", payload=payload)


def wait_for(predicate, timeout=5.0):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if predicate():
            return True
        time.sleep(0.01)
    return predicate()


class TestAgentLifecycle:
    def test_clean_exit_is_done(self, fast_settings, tmp_path):
        client, launcher = FakeClient(), FakeLauncher(exit_code=0)
        agent = Agent("job-1", "trainer-0", client, launcher, str(tmp_path), fast_settings)
        result = agent.run()
        assert result["success"] is True
        assert client.statuses("trainer-0") == ["fetching", "running", "done"]
        assert agent.state.phase == AgentPhase.DONE

    def test_manifest_is_materialized_for_the_worker(self, fast_settings, tmp_path):
        client, launcher = FakeClient(), FakeLauncher(exit_code=0)
        Agent("job-1", "trainer-0", client, launcher, str(tmp_path), fast_settings).run()
        path = tmp_path / "job-1" / "trainer-0" / "manifest.json"
        assert json.loads(path.read_text())["worker_id"] == "trainer-0"
        env = launcher.envs["trainer-0"]
        assert env["FLAME_MANIFEST_PATH"] == str(path)
        assert (env["FLAME_JOB_ID"], env["FLAME_WORKER_ID"]) == ("job-1", "trainer-0")
        assert env["FLAME_API"] == "http://fake"

    def test_crash_reports_signal(self, fast_settings, tmp_path):
        client = FakeClient()
        agent = Agent("job-1", "trainer-0", client, FakeLauncher(exit_code=-9), str(tmp_path), fast_settings)
        result = agent.run()
        assert result["exit_code"] == -9
        assert client.statuses("trainer-0")[-1] == "failed"
        assert client.detail("trainer-0", "failed") == "killed by SIGKILL"

    def test_non_zero_exit_fails(self, fast_settings, tmp_path):
        client = FakeClient()
        Agent("job-1", "trainer-0", client, FakeLauncher(exit_code=3), str(tmp_path), fast_settings).run()
        assert client.reports[-1] == ("trainer-0", "failed", "exit code 3", 3)

    def test_spawn_failure(self, fast_settings, tmp_path):
        client = FakeClient()
        launcher = FakeLauncher(error=OSError("no such interpreter"))
        result = Agent("job-1", "trainer-0", client, launcher, str(tmp_path), fast_settings).run()
        assert result["success"] is False
        assert client.statuses("trainer-0") == ["fetching", "failed"]
        assert client.detail("trainer-0", "failed").startswith("spawn failed")

    def test_heartbeats_while_running(self, fast_settings, tmp_path):
        client, launcher = FakeClient(), FakeLauncher(exit_code=None)
        agent = Agent("job-1", "trainer-0", client, launcher, str(tmp_path), fast_settings).start()
        assert wait_for(lambda: len(client.heartbeats) >= 2)
        launcher.handles["trainer-0"].release(0)
        agent.join(5)
        assert agent.state.phase == AgentPhase.DONE
        assert agent.state.last_heartbeat is not None


class TestWorkerEnvironment:
    def test_settings_accept_worker_api_variable(self, monkeypatch):
        monkeypatch.delenv("FEDORCH_API", raising=False)
        monkeypatch.setenv("FLAME_API", "http://control:9000")
        assert Settings().FEDORCH_API == "http://control:9000"

    def test_worker_needs_manifest_path(self, monkeypatch, capsys):
        monkeypatch.delenv("FLAME_MANIFEST_PATH", raising=False)
        assert worker.main([]) == worker.EXIT_FAILED
        assert "FLAME_MANIFEST_PATH" in capsys.readouterr().err


class TestManifestFetch:
    def test_retries_then_gives_up(self, fast_settings, tmp_path):
        client = FakeClient(fetch_errors=[unavailable() for _ in range(10)])
        launcher = FakeLauncher()
        agent = Agent("job-1", "trainer-0", client, launcher, str(tmp_path), fast_settings)
        result = agent.run()
        assert agent.fetch_attempts == fast_settings.FETCH_RETRIES + 1 == 4
        assert result["success"] is False
        assert client.statuses("trainer-0") == ["fetching", "failed"]
        assert launcher.handles == {}

    def test_transient_outage_recovers(self, fast_settings, tmp_path):
        client = FakeClient(fetch_errors=[unreachable(), unavailable()])
        agent = Agent("job-1", "trainer-0", client, FakeLauncher(), str(tmp_path), fast_settings)
        assert agent.run()["success"] is True
        assert agent.fetch_attempts == 3

    def test_client_errors_are_not_retried(self, fast_settings, tmp_path):
        client = FakeClient(fetch_errors=[ApiError(404, {"error": "gone", "error_code": "UNKNOWN_WORKER"})])
        agent = Agent("job-1", "trainer-0", client, FakeLauncher(), str(tmp_path), fast_settings)
        agent.run()
        assert agent.fetch_attempts == 1
        assert client.statuses("trainer-0")[-1] == "failed"


class TestTermination:
    def test_terminate_while_running(self, fast_settings, tmp_path):
        client, launcher = FakeClient(), FakeLauncher(exit_code=None)
        agent = Agent("job-1", "trainer-0", client, launcher, str(tmp_path), fast_settings).start()
        assert launcher.launched.wait(5)
        agent.terminate()
        agent.join(5)
        assert launcher.handles["trainer-0"].terminated
        assert not launcher.handles["trainer-0"].killed
        assert client.statuses("trainer-0")[-1] == "terminated"

    def test_stubborn_worker_is_killed_after_grace(self, fast_settings, tmp_path):
        client, launcher = FakeClient(), FakeLauncher(exit_code=None, stubborn=True)
        agent = Agent("job-1", "trainer-0", client, launcher, str(tmp_path), fast_settings).start()
        assert launcher.launched.wait(5)
        started = time.monotonic()
        agent.terminate(grace=0.2)
        agent.join(5)
        assert time.monotonic() - started >= 0.2
        assert launcher.handles["trainer-0"].killed
        assert client.reports[-1][1:] == ("terminated", "killed by SIGKILL", -9)

    def test_revoke_before_launch(self, fast_settings, tmp_path):
        client, launcher = FakeClient(), FakeLauncher()
        agent = Agent("job-1", "trainer-0", client, launcher, str(tmp_path), fast_settings)
        agent.terminate()
        agent.run()
        assert launcher.handles == {}
        assert client.reports[-1][1:3] == ("terminated", "revoked before launch")

    def test_exactly_one_terminal_report(self, fast_settings, tmp_path):
        client, launcher = FakeClient(), FakeLauncher(exit_code=None)
        agent = Agent("job-1", "trainer-0", client, launcher, str(tmp_path), fast_settings).start()
        assert launcher.launched.wait(5)
        launcher.handles["trainer-0"].release(0)
        agent.terminate()
        agent.join(5)
        agent.terminate()
        assert sum(1 for s in client.statuses("trainer-0") if s in TERMINAL) == 1

    def test_phases_only_move_forward(self):
        state = AgentState(job_id="job-1", worker_id="trainer-0")
        assert state.advance(AgentPhase.RUNNING)
        assert not state.advance(AgentPhase.FETCHING)
        assert state.advance(AgentPhase.FAILED)
        assert not state.advance(AgentPhase.DONE)
        assert state.phase == AgentPhase.FAILED

    def test_exit_detail(self):
        assert exit_detail(-15) == "killed by SIGTERM"
        assert exit_detail(2) == "exit code 2"


class TestDeployer:
    def make(self, fast_settings, tmp_path, launcher=None, capacity=4, subscribe=None):
        client = FakeClient()
        deployer = Deployer("compute-local", client, capacity, launcher or FakeLauncher(exit_code=None),
                            str(tmp_path), fast_settings, subscribe=subscribe)
        return client, deployer

    def test_request_from_event(self):
        request = DeploymentRequest.from_event(deploy(7, ["trainer-0", "trainer-1"]))
        assert request.compute_id == "compute-local"
        assert request.manifest_urls()["trainer-1"] == "http://fake/jobs/job-1/manifests/trainer-1"

    def test_capacity_queues_the_overflow(self, fast_settings, tmp_path):
        launcher = FakeLauncher(exit_code=None)
        client, deployer = self.make(fast_settings, tmp_path, launcher)
        workers = [f"trainer-{i}" for i in range(5)]
        deployer.handle_event(deploy(1, workers))
        assert client.acks == [1]
        assert [w for _, w in deployer.queue] == ["trainer-4"]
        assert client.statuses("trainer-4") == ["queued"]
        assert "capacity 4" in client.detail("trainer-4", "queued")
        assert wait_for(lambda: len(launcher.handles) == 4)

        launcher.handles["trainer-0"].release(0)
        assert wait_for(lambda: "trainer-4" in launcher.handles)
        for worker_id in workers[1:]:
            assert wait_for(lambda: worker_id in launcher.handles)
            launcher.handles[worker_id].release(0)
        assert deployer.wait_idle(5)
        assert deployer.peak_live == 4
        assert all(client.statuses(w)[-1] == "done" for w in workers)

    def test_redelivered_event_is_acked_once_dispatched(self, fast_settings, tmp_path):
        launcher = FakeLauncher(exit_code=0)
        client, deployer = self.make(fast_settings, tmp_path, launcher)
        deployer.handle_event(deploy(1, ["trainer-0"]))
        deployer.handle_event(deploy(1, ["trainer-0"]))
        assert client.acks == [1, 1]
        assert deployer.wait_idle(5)
        assert client.statuses("trainer-0").count("fetching") == 1

    def test_revoke_stops_live_and_queued(self, fast_settings, tmp_path):
        launcher = FakeLauncher(exit_code=None)
        client, deployer = self.make(fast_settings, tmp_path, launcher, capacity=2)
        deployer.handle_event(deploy(1, ["trainer-0", "trainer-1", "trainer-2"]))
        assert wait_for(lambda: len(launcher.handles) == 2)
        assert deployer.handle_revoke(revoke(2)) == 2
        assert client.statuses("trainer-2") == ["queued", "terminated"]
        assert client.detail("trainer-2", "terminated") == "revoked while queued"
        assert client.statuses("trainer-0")[-1] == "terminated"
        assert deployer.wait_idle(5)
        assert "trainer-2" not in launcher.handles

    def test_revoke_is_idempotent(self, fast_settings, tmp_path):
        client, deployer = self.make(fast_settings, tmp_path)
        deployer.handle_event(deploy(1, ["trainer-0"]))
        assert wait_for(lambda: deployer.live_count == 1)
        deployer.handle_event(revoke(2))
        deployer.handle_event(revoke(3))
        assert client.acks == [1, 2, 3]
        assert deployer.handle_revoke(revoke(4)) == 0
        assert sum(1 for s in client.statuses("trainer-0") if s in TERMINAL) == 1

    def test_revoke_names_workers(self, fast_settings, tmp_path):
        launcher = FakeLauncher(exit_code=None)
        client, deployer = self.make(fast_settings, tmp_path, launcher)
        deployer.handle_event(deploy(1, ["trainer-0", "trainer-1"]))
        assert wait_for(lambda: len(launcher.handles) == 2)
        assert deployer.handle_revoke(revoke(2, workers=["trainer-1"])) == 1
        assert deployer.live_count == 1
        deployer.stop()
        assert deployer.wait_idle(5)

    def test_serve_consumes_and_reconnects(self, fast_settings, tmp_path):
        streams = [iter([deploy(1, ["trainer-0"])]), unavailable(), iter([deploy(1, ["trainer-0"]), revoke(2)])]

        def subscribe():
            stream = streams.pop(0)
            if isinstance(stream, ApiError):
                raise stream
            return stream

        client, deployer = self.make(fast_settings, tmp_path, subscribe=subscribe)
        deployer.serve(max_reconnects=2)
        assert streams == []
        assert client.acks == [1, 1, 2]
        assert client.statuses("trainer-0")[-1] == "terminated"

    def test_stop_terminates_workers(self, fast_settings, tmp_path):
        client, deployer = self.make(fast_settings, tmp_path)
        deployer.handle_event(deploy(1, ["trainer-0", "trainer-1"]))
        assert wait_for(lambda: deployer.live_count == 2)
        deployer.stop()
        assert deployer.wait_idle(5)
        assert {client.statuses(w)[-1] for w in ("trainer-0", "trainer-1")} == {"terminated"}


class TestUnmanagedJoin:
    def test_no_open_slot(self, fast_settings, tmp_path):
        result = join_unmanaged("job-1", client=FakeClient(), launcher=FakeLauncher(), work_dir=str(tmp_path),
                                settings=fast_settings)
        assert result["error_code"] == "NO_OPEN_SLOT"

    def test_claims_first_open_slot(self, fast_settings, tmp_path):
        client = FakeClient(slots=["trainer-1", "trainer-3"])
        result = join_unmanaged("job-1", client=client, launcher=FakeLauncher(exit_code=0),
                                work_dir=str(tmp_path), claimant="owner-b", settings=fast_settings)
        assert result["success"] is True
        assert result["worker_id"] == "trainer-1"
        assert client.claims == [("trainer-1", "owner-b")]
        assert client.statuses("trainer-1") == ["fetching", "running", "done"]

    def test_filled_slot(self, fast_settings, tmp_path):
        client = FakeClient(claim_error=ApiError(409, {"error": "taken", "error_code": "SLOT_ALREADY_FILLED"}))
        result = join_unmanaged("job-1", "trainer-1", client=client, launcher=FakeLauncher(),
                                work_dir=str(tmp_path), settings=fast_settings)
        assert result == {"success": False, "error": "HTTP 409: taken", "error_code": "SLOT_ALREADY_FILLED",
                          "worker_id": "trainer-1"}

    def test_background_join(self, fast_settings, tmp_path):
        launcher = FakeLauncher(exit_code=None)
        result = join_unmanaged("job-1", "trainer-2", client=FakeClient(), launcher=launcher,
                                work_dir=str(tmp_path), settings=fast_settings, wait=False)
        agent = result["agent"]
        assert launcher.launched.wait(5)
        launcher.handles["trainer-2"].release(0)
        agent.join(5)
        assert agent.state.phase == AgentPhase.DONE

import numpy as np
import pytest

from src.control_plane.records import ComputeRecord, JobState, TaskStatus
from src.local_runner import LocalStack
from src.roles.metrics import read_job_metrics
from src.roles.model import ModelWeights
from src.templates import classical, coordinated, distributed, hierarchical, hybrid

from .conftest import make_datasets

FEW_ROUNDS = {"rounds": 3, "epochs": 2, "learningRate": 0.05, "dims": 8}


def final_weights(stack, job_id):
    return ModelWeights.from_bytes((stack.artifact_dir(job_id) / "checkpoints" / "final.bin").read_bytes())


def aggregator_rows(stack, job_id, role="global-aggregator"):
    rows = read_job_metrics(stack.artifact_dir(job_id))
    return [m for m in rows if m.role == role]


@pytest.fixture
def stack(tmp_path, fast_settings, one_compute, abcd_datasets):
    with LocalStack(tmp_path / "stack", fast_settings) as s:
        s.register(one_compute, abcd_datasets)
        yield s


class TestManagedJobs:
    def test_classical_completes(self, stack):
        job = stack.run(classical(hyperparams=FEW_ROUNDS), timeout=60)
        assert job.state == JobState.COMPLETED
        assert all(t.status == TaskStatus.DONE for t in job.tasks.values())
        rows = aggregator_rows(stack, job.job_id)
        assert [m.round for m in rows] == [1, 2, 3]
        assert rows[-1].loss < rows[0].loss
        assert all(m.bytes_received > 0 for m in rows)
        assert final_weights(stack, job.job_id).dims == (8,)

    def test_hierarchical_matches_classical(self, stack):
        flat = stack.run(classical(hyperparams=FEW_ROUNDS), timeout=60)
        tiered = stack.run(hierarchical(hyperparams=FEW_ROUNDS), timeout=60)
        assert tiered.state == JobState.COMPLETED
        assert len(tiered.tasks) == 7
        np.testing.assert_allclose(final_weights(stack, tiered.job_id).values,
                                   final_weights(stack, flat.job_id).values, rtol=1e-9, atol=1e-12)
        assert [m.round for m in aggregator_rows(stack, tiered.job_id, "aggregator")] == [1, 1, 2, 2, 3, 3]

    def test_distributed_completes(self, stack):
        job = stack.run(distributed(hyperparams=FEW_ROUNDS), timeout=60)
        assert job.state == JobState.COMPLETED
        assert set(job.tasks) == {"trainer-0", "trainer-1", "trainer-2", "trainer-3"}
        assert (stack.artifact_dir(job.job_id) / "checkpoints" / "final.bin").exists()

    def test_hybrid_completes(self, stack):
        job = stack.run(hybrid(hyperparams=FEW_ROUNDS), timeout=60)
        assert job.state == JobState.COMPLETED
        rows = aggregator_rows(stack, job.job_id)
        assert [m.round for m in rows] == [1, 2, 3]

    @pytest.mark.slow
    def test_coordinated_completes(self, stack):
        job = stack.run(coordinated(hyperparams=FEW_ROUNDS), timeout=90)
        assert job.state == JobState.COMPLETED
        assert (stack.artifact_dir(job.job_id) / "coordination.json").exists()
        assert [m.round for m in aggregator_rows(stack, job.job_id)] == [1, 2, 3]


class TestJobControl:
    def test_divergence_fails_the_job(self, stack):
        job = stack.run(classical(hyperparams={"rounds": 2, "epochs": 200, "learningRate": 1e6}), timeout=60)
        assert job.state == JobState.FAILED
        assert any(t.status == TaskStatus.FAILED for t in job.tasks.values())
        assert all(t.status.terminal for t in job.tasks.values())

    def test_stop_running_job(self, stack):
        job_id = stack.submit(classical(hyperparams={"rounds": 100000}))
        assert stack.wait_running(job_id).state == JobState.RUNNING
        stack.client.stop_job(job_id)
        job = stack.wait(job_id, timeout=30)
        assert job.state == JobState.STOPPED
        assert all(t.status in (TaskStatus.TERMINATED, TaskStatus.DONE) for t in job.tasks.values())

    def test_capacity_below_job_size_still_completes(self, tmp_path, fast_settings, abcd_datasets):
        with LocalStack(tmp_path / "small", fast_settings, state=False) as small:
            small.register([ComputeRecord(compute_id="compute-local", realm="local", capacity=5)], abcd_datasets)
            job = small.run(classical(hyperparams={"rounds": 1}), timeout=60)
            assert job.state == JobState.COMPLETED
            assert small.deployers["compute-local"].peak_live <= 5


class TestMixedMode:
    def test_unmanaged_slot_gives_the_same_model(self, tmp_path, fast_settings, one_compute):
        managed = make_datasets(["A", "B", "C", "D"])
        with LocalStack(tmp_path / "managed", fast_settings) as s:
            s.register(one_compute, managed)
            reference = final_weights(s, s.run(classical(hyperparams=FEW_ROUNDS), timeout=60).job_id)

        mixed = make_datasets(["A", "B", "C", "D"])
        mixed[1] = mixed[1].model_copy(update={"managed": False})
        with LocalStack(tmp_path / "mixed", fast_settings) as s:
            s.register(one_compute, mixed)
            job_id = s.submit(classical(hyperparams=FEW_ROUNDS))
            assert s.wait_running(job_id).state == JobState.RUNNING
            assert s.client.open_slots(job_id) == ["trainer-1"]
            joined = s.join(job_id)
            assert joined["worker_id"] == "trainer-1"
            job = s.wait(job_id, timeout=60)
            joined["agent"].join(10)
            assert job.state == JobState.COMPLETED
            assert not job.tasks["trainer-1"].managed
            np.testing.assert_allclose(final_weights(s, job_id).values, reference.values, rtol=1e-9, atol=1e-12)


@pytest.mark.slow
class TestWorkerProcesses:
    def test_classical_with_child_processes(self, tmp_path, fast_settings, one_compute, abcd_datasets):
        with LocalStack(tmp_path / "procs", fast_settings, processes=True, state=False) as s:
            assert s.broker_address.startswith("tcp://")
            s.register(one_compute, abcd_datasets)
            job = s.run(classical(hyperparams={"rounds": 2, "dims": 8}), timeout=120)
            assert job.state == JobState.COMPLETED
            assert all(t.exit_code == 0 for t in job.tasks.values())
            assert [m.round for m in aggregator_rows(s, job.job_id)] == [1, 2]

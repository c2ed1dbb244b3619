import pytest

from src.channel.broker import reset_brokers
from src.config import Settings
from src.control_plane.records import ComputeRecord, DatasetRecord
from src.roles.data import synthetic_url


@pytest.fixture
def fast_settings(tmp_path):
    """Short timeouts so failure paths finish quickly"""
    return Settings(
        BROKER_ADDRESS="inproc://tests",
        STATE_DIR=str(tmp_path / "state"),
        ARTIFACT_DIR=str(tmp_path / "artifacts"),
        LOG_DIR=str(tmp_path / "logs"),
        HEARTBEAT_PERIOD_S=0.05,
        MISSED_HEARTBEATS=5,
        GRACE_PERIOD_S=0.5,
        FETCH_RETRIES=3,
        FETCH_BACKOFF_S=0.01,
        NOTIFY_KEEPALIVE_S=0.2,
        AGGREGATION_TIMEOUT_S=5.0,
        COORDINATOR_TIMEOUT_S=5.0,
        PEER_WAIT_TIMEOUT_S=10.0,
        ROUND_TIMEOUT_S=30.0,
    )


@pytest.fixture(autouse=True)
def _fresh_brokers():
    yield
    reset_brokers()


@pytest.fixture
def one_compute():
    return [ComputeRecord(compute_id="compute-local", realm="local", capacity=16)]


def make_datasets(names, realm="local", seed=0, d=8):
    return [DatasetRecord(dataset_id=name, realm=realm,
                          url=synthetic_url(name, seed=seed * 1000 + i, n=50, d=d, skew=0.5, noise=0.1,
                                            model_seed=seed))
            for i, name in enumerate(names)]


@pytest.fixture
def abcd_datasets():
    return make_datasets(["A", "B", "C", "D"])

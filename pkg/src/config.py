from dotenv import load_dotenv  # pyright: ignore[reportMissingImports]
from pydantic import AliasChoices, Field
from pydantic_settings import BaseSettings, SettingsConfigDict  # pyright: ignore[reportMissingImports]

load_dotenv()

class Settings(BaseSettings):
    # Control plane
    # FLAME_API is what worker children receive; it wins over FEDORCH_API
    FEDORCH_API: str = Field("http://127.0.0.1:10100", validation_alias=AliasChoices("FLAME_API", "FEDORCH_API"))
    API_HOST: str = "127.0.0.1"
    API_PORT: int = 10100

    # Broker service shared by BrokerSim channels and PointToPoint discovery
    BROKER_ADDRESS: str = "tcp://127.0.0.1:10101"

    # Storage
    STATE_DIR: str = "state"
    ARTIFACT_DIR: str = "artifacts"
    SNAPSHOT_EVERY: int = 200

    # Logging
    LOG_DIR: str = "logs"
    LOG_LEVEL: str = "INFO"
    TRACE_TASKLETS: bool = False

    # Agent supervision
    HEARTBEAT_PERIOD_S: float = 2.0
    MISSED_HEARTBEATS: int = 5
    GRACE_PERIOD_S: float = 5.0
    FETCH_RETRIES: int = 3
    FETCH_BACKOFF_S: float = 0.5
    NOTIFY_KEEPALIVE_S: float = 15.0

    # Round timing
    AGGREGATION_TIMEOUT_S: float = 30.0
    COORDINATOR_TIMEOUT_S: float = 30.0
    PEER_WAIT_TIMEOUT_S: float = 120.0
    ROUND_TIMEOUT_S: float = 300.0

    model_config = SettingsConfigDict(
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=False,
        extra="ignore",
        populate_by_name=True,
    )

    @property
    def missed_heartbeat_window(self) -> float:
        """Seconds of silence after which a running task is declared failed"""
        return self.HEARTBEAT_PERIOD_S * self.MISSED_HEARTBEATS

settings = Settings()

from .agent import Agent, AgentPhase, AgentState
from .deployer import Deployer, DeploymentRequest
from .launcher import ProcessLauncher, ThreadLauncher, WorkerHandle
from .unmanaged import join_unmanaged

__all__ = ["Agent", "AgentPhase", "AgentState", "Deployer", "DeploymentRequest", "ProcessLauncher", "ThreadLauncher",
           "WorkerHandle", "join_unmanaged"]

"""
Channel layer

Uniform send/receive between workers over interchangeable backends:
BrokerSim (topic broker) and PointToPoint (direct sockets), with optional
receiver-side bandwidth shaping.
"""

from .broker import Broker, connect_broker, reset_brokers, topic_matches
from .broker_server import BrokerServer, RemoteBroker
from .handle import ChannelHandle, EndId, Message
from .manager import ChannelManager
from .shaping import Shaper, link_rate

__all__ = [
    'Broker',
    'BrokerServer',
    'ChannelHandle',
    'ChannelManager',
    'EndId',
    'Message',
    'RemoteBroker',
    'Shaper',
    'connect_broker',
    'link_rate',
    'reset_brokers',
    'topic_matches',
]

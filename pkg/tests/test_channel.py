import socket
import struct
import threading
import time
from types import SimpleNamespace

import pytest

from src.channel import (Broker, BrokerServer, ChannelHandle, ChannelManager, Message, Shaper, connect_broker,
                         link_rate, reset_brokers, topic_matches)
from src.channel.backends import PointToPointTransport
from src.exceptions import (AlreadyJoined, ChannelClosed, ChannelTimeout, NotJoined, PeerLeft,
                            SendToUnknownEnd)
from src.tag.models import BackendKind

BACKENDS = [BackendKind.BROKER_SIM, BackendKind.POINT_TO_POINT]


def make_handle(worker_id, role, peer_role, backend=BackendKind.BROKER_SIM, group="default",
                address="inproc://channel-tests", **kwargs):
    return ChannelHandle(job_id="job", channel="param", group=group, worker_id=worker_id, role=role,
                         peer_role=peer_role, backend=backend, broker_address=address, **kwargs)


def joined_pair(backend, **kwargs):
    trainer = make_handle("trainer-0", "trainer", "aggregator", backend, **kwargs)
    aggregator = make_handle("aggregator-0", "aggregator", "trainer", backend, **kwargs)
    trainer.join()
    aggregator.join()
    trainer.await_peers(["aggregator-0"], timeout=5)
    aggregator.await_peers(["trainer-0"], timeout=5)
    return trainer, aggregator


def close_all(*handles):
    for handle in handles:
        if handle.joined:
            handle.leave()


class TestTopics:
    def test_wildcards(self):
        assert topic_matches("job/param/+/$presence/+", "job/param/default/$presence/trainer-0")
        assert topic_matches("job/#", "job/param/default/trainer-0")
        assert not topic_matches("job/+", "job/param/default")
        assert not topic_matches("job/param", "job/param/default")

    def test_retained_reaches_late_subscribers(self):
        broker = Broker()
        broker.publish("a/b", {"k": "v"}, b"1", retain=True)
        seen = []
        broker.subscribe("a/+", lambda topic, headers, payload: seen.append((topic, headers["k"])))
        assert seen == [("a/b", "v")]

    def test_empty_retained_payload_clears(self):
        broker = Broker()
        broker.publish("a/b", {}, b"1", retain=True)
        broker.publish("a/b", {}, b"", retain=True)
        assert broker.retained("a/#") == {}

    def test_connect_broker_shares_instances(self):
        assert connect_broker("inproc://shared") is connect_broker("inproc://shared")
        reset_brokers("inproc://shared")
        assert connect_broker("inproc://shared").closed is False


class TestShaping:
    def test_link_rate_takes_slowest_match(self):
        shape = {"*": 1e8, "trainer-9": 1e6}
        assert link_rate(shape, "trainer-9", "aggregator-0") == 1e6
        assert link_rate(shape, "trainer-1", "aggregator-0") == 1e8
        assert link_rate({}, "trainer-1", "aggregator-0") is None

    def test_unshaped_delivers_inline(self):
        shaper = Shaper({}, "aggregator-0")
        delivered = []
        shaper.submit("trainer-0", 10_000, lambda: delivered.append(1))
        assert delivered == [1]

    def test_shaped_delay_and_order(self):
        shaper = Shaper({"trainer-0": 80_000}, "aggregator-0")
        delivered = []
        done = threading.Event()
        started = time.monotonic()
        shaper.submit("trainer-0", 1000, lambda: delivered.append("first"))
        shaper.submit("trainer-0", 0, lambda: (delivered.append("second"), done.set()))
        assert done.wait(5)
        assert time.monotonic() - started >= 0.09
        assert delivered == ["first", "second"]
        shaper.close()


@pytest.mark.parametrize("backend", BACKENDS)
class TestChannelHandle:
    def test_send_and_recv_in_order(self, backend):
        trainer, aggregator = joined_pair(backend)
        try:
            for i in range(3):
                trainer.send(trainer.end_of("aggregator-0"), Message.build(f"w{i}".encode(), "upload", round=i))
            received = [aggregator.recv(aggregator.end_of("trainer-0"), timeout=5) for _ in range(3)]
            assert [m.payload for m in received] == [b"w0", b"w1", b"w2"]
            assert [m.seq for m in received] == [1, 2, 3]
            assert received[0].sender == "trainer-0"
            assert received[0].func_tag == "upload"
            assert received[2].header("round") == "2"
            assert trainer.bytes_sent == 6
        finally:
            close_all(trainer, aggregator)

    def test_concurrent_sends_are_all_counted(self, backend):
        trainer, aggregator = joined_pair(backend)
        try:
            end = trainer.end_of("aggregator-0")

            def burst():
                for _ in range(50):
                    trainer.send(end, Message.build(b"0123456789", "upload"))

            threads = [threading.Thread(target=burst) for _ in range(8)]
            for t in threads:
                t.start()
            for t in threads:
                t.join()
            assert trainer.bytes_sent == 8 * 50 * 10
        finally:
            close_all(trainer, aggregator)

    def test_broadcast_reaches_every_peer(self, backend):
        aggregator = make_handle("aggregator-0", "aggregator", "trainer", backend)
        trainers = [make_handle(f"trainer-{i}", "trainer", "aggregator", backend) for i in range(3)]
        for handle in [aggregator, *trainers]:
            handle.join()
        try:
            aggregator.await_peers([t.my_end.worker_id for t in trainers], timeout=5)
            for t in trainers:
                t.await_peers(["aggregator-0"], timeout=5)
            targets = aggregator.broadcast(Message.build(b"model", "distribute"))
            assert [e.worker_id for e in targets] == ["trainer-0", "trainer-1", "trainer-2"]
            for t in trainers:
                assert t.recv(t.end_of("aggregator-0"), timeout=5).payload == b"model"
        finally:
            close_all(aggregator, *trainers)

    def test_recv_fifo_follows_arrival(self, backend):
        aggregator = make_handle("aggregator-0", "aggregator", "trainer", backend)
        trainers = [make_handle(f"trainer-{i}", "trainer", "aggregator", backend) for i in range(2)]
        for handle in [aggregator, *trainers]:
            handle.join()
        try:
            aggregator.await_peers(["trainer-0", "trainer-1"], timeout=5)
            for t in trainers:
                t.await_peers(["aggregator-0"], timeout=5)
            trainers[1].send(trainers[1].end_of("aggregator-0"), Message.build(b"late-id-first"))
            time.sleep(0.1)
            trainers[0].send(trainers[0].end_of("aggregator-0"), Message.build(b"second"))
            order = [end.worker_id for end, _ in aggregator.recv_fifo(aggregator.ends(), timeout=5)]
            assert order == ["trainer-1", "trainer-0"]
        finally:
            close_all(aggregator, *trainers)

    def test_departure_after_queued_messages(self, backend):
        trainer, aggregator = joined_pair(backend)
        try:
            trainer.send(trainer.end_of("aggregator-0"), Message.build(b"last"))
            trainer.leave()
            end = aggregator.end_of("trainer-0")
            assert aggregator.recv(end, timeout=5).payload == b"last"
            with pytest.raises(PeerLeft):
                aggregator.recv(end, timeout=5)
        finally:
            close_all(trainer, aggregator)

    def test_recv_timeout(self, backend):
        trainer, aggregator = joined_pair(backend)
        try:
            with pytest.raises(ChannelTimeout):
                aggregator.recv(aggregator.end_of("trainer-0"), timeout=0.1)
            with pytest.raises(ChannelTimeout) as excinfo:
                list(aggregator.recv_fifo(aggregator.ends(), timeout=0.1))
            assert excinfo.value.details["missing"] == ["param/default/trainer-0"]
        finally:
            close_all(trainer, aggregator)


class TestPointToPointFrames:
    def test_truncated_frame_drops_the_connection(self):
        received = []
        handle = SimpleNamespace(my_end=SimpleNamespace(worker_id="aggregator-0"), channel="param",
                                 inbound=lambda headers, payload: received.append(headers))
        ours, theirs = socket.socketpair()
        try:
            theirs.sendall(struct.pack(">I", 1) + b"\x00")
            PointToPointTransport(handle)._read_loop(ours)
            assert received == []
            assert ours.fileno() == -1
        finally:
            theirs.close()


class TestMembership:
    def test_join_twice_and_leave_twice(self):
        handle = make_handle("trainer-0", "trainer", "aggregator")
        handle.join()
        with pytest.raises(AlreadyJoined):
            handle.join()
        handle.leave()
        with pytest.raises(NotJoined):
            handle.leave()

    def test_operations_need_join(self):
        handle = make_handle("trainer-0", "trainer", "aggregator")
        with pytest.raises(ChannelClosed):
            handle.ends()

    def test_send_to_unknown_end(self):
        trainer, aggregator = joined_pair(BackendKind.BROKER_SIM)
        try:
            with pytest.raises(SendToUnknownEnd):
                trainer.send(trainer.end_of("aggregator-7"), Message.build(b"x"))
        finally:
            close_all(trainer, aggregator)

    def test_groups_are_isolated(self):
        west = make_handle("trainer-0", "trainer", "aggregator", group="west")
        east = make_handle("aggregator-1", "aggregator", "trainer", group="east")
        west.join()
        east.join()
        try:
            assert west.empty() and east.empty()
        finally:
            close_all(west, east)

    def test_same_role_is_not_a_peer_on_pair_channels(self):
        first = make_handle("trainer-0", "trainer", "aggregator")
        second = make_handle("trainer-1", "trainer", "aggregator")
        first.join()
        second.join()
        try:
            assert first.ends() == []
        finally:
            close_all(first, second)

    def test_self_channel_peers_and_loopback(self):
        handles = [make_handle(f"trainer-{i}", "trainer", "trainer") for i in range(3)]
        for h in handles:
            h.join()
        try:
            handles[0].await_peers(["trainer-1", "trainer-2"], timeout=5)
            assert [e.worker_id for e in handles[0].ends()] == ["trainer-1", "trainer-2"]
            handles[0].send(handles[0].my_end, Message.build(b"me"))
            assert handles[0].peek(handles[0].my_end).payload == b"me"
            assert handles[0].recv(handles[0].my_end, timeout=1).payload == b"me"
        finally:
            close_all(*handles)

    def test_selector_filters_ends(self):
        aggregator = make_handle("aggregator-0", "aggregator", "trainer",
                                 selector=lambda end: end.worker_id != "trainer-1")
        trainers = [make_handle(f"trainer-{i}", "trainer", "aggregator") for i in range(2)]
        for handle in [aggregator, *trainers]:
            handle.join()
        try:
            aggregator.await_peers(["trainer-0", "trainer-1"], timeout=5)
            assert [e.worker_id for e in aggregator.ends()] == ["trainer-0"]
        finally:
            close_all(aggregator, *trainers)


class TestRemoteBroker:
    def test_handles_over_tcp_broker(self):
        server = BrokerServer().start()
        try:
            trainer, aggregator = joined_pair(BackendKind.BROKER_SIM, address=server.address)
            try:
                trainer.send(trainer.end_of("aggregator-0"), Message.build(b"over-tcp"))
                assert aggregator.recv(aggregator.end_of("trainer-0"), timeout=5).payload == b"over-tcp"
            finally:
                close_all(trainer, aggregator)
        finally:
            reset_brokers(server.address)
            server.stop()


class TestChannelManager:
    def test_lookup_by_func_tag(self):
        param = make_handle("trainer-0", "trainer", "aggregator", func_tags=["fetch", "upload"])
        coord = ChannelHandle(job_id="job", channel="coord", group="default", worker_id="trainer-0",
                              role="trainer", peer_role="coordinator", func_tags=["coordinate"])
        manager = ChannelManager([param, coord])
        assert manager.channel_for("upload") is param
        assert manager.channel_for("coordinate") is coord
        assert manager.channel_for("allreduce") is None
        assert manager.get("coord") is coord

    def test_lone_untagged_channel_matches_anything(self):
        handle = make_handle("trainer-0", "trainer", "aggregator")
        assert ChannelManager([handle]).channel_for("upload") is handle

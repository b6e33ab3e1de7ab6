import queue
import time
from concurrent.futures import Future

import pytest

from mrbsp.actors import Actor, ActorRef, ActorSystem, Aggregator, ask_all, parse_ref
from mrbsp.core import TransportKind
from mrbsp.errors import (AddressError, AggregationTimeout, AggregatorError,
                          SpawnError)
from mrbsp.transport import make_transport


@pytest.fixture(params=[TransportKind.INPROC, TransportKind.TCP])
def system(request):
    transport = make_transport(request.param, 4)
    with ActorSystem(transport, workers_per_node=3) as s:
        yield s
    transport.close()


class Probe(Actor):
    """Forwards everything it receives to a thread-safe queue."""

    def __init__(self):
        self.q = queue.Queue()

    def receive(self, message):
        self.q.put((self.sender, message))

    def get(self, timeout=5):
        return self.q.get(timeout=timeout)


class Echo(Actor):
    def receive(self, message):
        self.reply(("echo", self.node, message))


class Holder(Actor):
    def __init__(self, value):
        self.value = value

    def receive(self, message):
        if message == "max":
            self.reply(("max", self.node, self.value))


class Silent(Actor):
    def receive(self, message):
        pass


class Counter(Actor):
    def __init__(self):
        self.count = 0
        self.inside = False
        self.overlaps = 0

    def receive(self, message):
        if self.inside:
            self.overlaps += 1
        self.inside = True
        c = self.count
        if c % 97 == 0:
            time.sleep(0)  # invite a thread switch mid-update
        self.count = c + 1
        self.inside = False


class Blaster(Actor):
    def receive(self, message):
        target, n = message
        for _ in range(n):
            self.tell(target, "inc")


def test_remote_echo_via_resolved_address(system):
    system.spawn(3, "dist-array", Echo())
    probe = system.spawn(0, "probe", Probe())
    target = system.resolve("node3/dist-array")
    system.tell(target, "hi", sender=probe)
    sender, reply = system._cells[0]["probe"].actor.get()
    assert reply == ("echo", 3, "hi")
    assert sender == ActorRef(3, "dist-array")


def test_duplicate_spawn(system):
    system.spawn(1, "x", Silent())
    with pytest.raises(SpawnError):
        system.spawn(1, "x", Silent())
    system.spawn(2, "x", Silent())  # same path on another node is fine


def test_tell_order_from_one_sender(system):
    p = Probe()
    ref = system.spawn(2, "ordered", p)
    me = system.spawn(0, "me", Silent())
    for i in range(200):
        system.tell(ref, i, sender=me)
    assert [p.get()[1] for _ in range(200)] == list(range(200))


def test_concurrent_tells_are_serialized(system):
    counter = Counter()
    target = system.spawn(1, "counter", counter)
    blasters = [system.spawn(i % 4, "blaster-%d" % i, Blaster()) for i in range(8)]
    for b in blasters:
        system.tell(b, (target, 1250))
    deadline = time.time() + 30
    while counter.count < 10_000 and time.time() < deadline:
        time.sleep(0.01)
    assert counter.count == 10_000
    assert counter.overlaps == 0


def test_ask_all_max(system):
    refs = [system.spawn(n, "holder", Holder(v)) for n, v in enumerate([7, 42, 3])]
    assert ask_all(system, refs, "max", max, key=lambda m: m[2]) == 42


def test_ask_all_single_target(system):
    ref = system.spawn(2, "holder", Holder(11))
    assert ask_all(system, [ref], "max", max) == ("max", 2, 11)


def test_ask_all_timeout_names_missing_node(system):
    refs = [system.spawn(0, "holder", Holder(1)), system.spawn(3, "mute", Silent())]
    with pytest.raises(AggregationTimeout) as info:
        ask_all(system, refs, "max", max, timeout=2.0)
    assert info.value.missing == [3]


def test_dead_letters_counted(system):
    before = system.dead_letters
    system.tell(ActorRef(0, "nobody"), "x")
    system.tell(ActorRef(9, "nobody"), "x")
    assert system.dead_letters == before + 2


def test_aggregator_completes_once_and_rejects_late_reply(system):
    results = []
    agg = Aggregator(2, lambda a, b: a + b, results.append)
    ref = system.spawn(0, "agg", agg)
    for v in (1, 2):
        system.tell(ref, v)
    deadline = time.time() + 5
    while not results and time.time() < deadline:
        time.sleep(0.01)
    assert results == [3]
    # the aggregator stopped itself; a late reply becomes a dead letter
    before = system.dead_letters
    system.tell(ref, 3)
    assert system.dead_letters == before + 1
    assert results == [3]


def test_aggregator_late_reply_is_an_error():
    agg = Aggregator(1, max, lambda r: None)
    agg.stop = lambda: None
    agg.receive(1)
    with pytest.raises(AggregatorError):
        agg.receive(2)


def test_parse_ref():
    assert parse_ref("node3/dist-array") == ActorRef(3, "dist-array")
    assert str(ActorRef(1, "a/b")) == "node1/a/b"
    with pytest.raises(AddressError):
        parse_ref("3/dist-array")


def test_handler_failure_propagates_to_watched_future(system):
    class Boom(Actor):
        def receive(self, message):
            raise RuntimeError("boom")

    fut = system.watch(Future())
    ref = system.spawn(1, "boom", Boom())
    system.tell(ref, "go")
    with pytest.raises(RuntimeError):
        fut.result(timeout=5)

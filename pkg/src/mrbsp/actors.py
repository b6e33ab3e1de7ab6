"""Message-passing backend: per-node actor dispatchers over the transport.

An actor is addressed cluster-wide by ``ActorRef(node, path)``. Sends to
an actor on the sender's own node go straight into its mailbox; sends to
another node are pickled and travel over transport channel 1 as the
``(path, sender, message)`` triple. Each node runs a small pool of
dispatcher threads; an actor is handed to at most one of them at a time,
so a handler never runs concurrently with itself.
"""

import itertools
import logging
import pickle
import threading
from collections import deque
from concurrent.futures import Future
from concurrent.futures import TimeoutError as FutureTimeout
from typing import NamedTuple

from .core import PICKLE_PROTOCOL
from .errors import (AddressError, AggregationTimeout, AggregatorError,
                     ClosedError, SpawnError, TransportError)

log = logging.getLogger(__name__)

ACTOR_CHANNEL = 1
THROUGHPUT = 32
DEFAULT_ASK_TIMEOUT = 30.0


class ActorRef(NamedTuple):
    node: int
    path: str

    def __str__(self):
        return "node%d/%s" % (self.node, self.path)


def parse_ref(text):
    head, _, path = text.partition("/")
    if not head.startswith("node") or not path:
        raise AddressError("bad actor address %r" % text)
    return ActorRef(int(head[4:]), path)


class Actor:
    """Base class for actor behaviors.

    Subclasses implement ``receive(message)``; while it runs, ``self.sender``
    is the sender's ref (or None). State kept on ``self`` is private to the
    actor and needs no locking.
    """

    system = None
    ref = None
    sender = None

    @property
    def node(self):
        return self.ref.node

    def receive(self, message):
        raise NotImplementedError

    def started(self):
        """Hook run on the actor's dispatcher right after spawn."""

    def tell(self, target, message):
        self.system.tell(target, message, sender=self.ref)

    def reply(self, message):
        if self.sender is None:
            raise AddressError("no sender to reply to")
        self.tell(self.sender, message)

    def spawn(self, path, actor, node=None):
        return self.system.spawn(self.node if node is None else node, path, actor)

    def stop(self):
        self.system.stop(self.ref)


class _Started:
    __slots__ = ()


_STARTED = _Started()


class _Cell:
    __slots__ = ("actor", "ref", "mailbox", "lock", "scheduled", "stopped",
                 "dispatcher")

    def __init__(self, actor, ref, dispatcher):
        self.actor = actor
        self.ref = ref
        self.dispatcher = dispatcher
        self.mailbox = deque()
        self.lock = threading.Lock()
        self.scheduled = False
        self.stopped = False


_local = threading.local()


class _Dispatcher:
    """Worker threads of one node; each owns a deque and steals when idle."""

    def __init__(self, system, node, n_workers):
        self.system = system
        self.node = node
        self.deques = [deque() for _ in range(n_workers)]
        self.cond = threading.Condition()
        self.pending = 0
        self.running = True
        self._rr = itertools.count()
        self.threads = [threading.Thread(target=self._run, args=(i,), daemon=True,
                                         name="actor-n%d-w%d" % (node, i))
                        for i in range(n_workers)]

    def start(self):
        for t in self.threads:
            t.start()

    def schedule(self, cell):
        me = getattr(_local, "worker", None)
        if me is not None and me[0] is self:
            idx = me[1]
        else:
            idx = next(self._rr) % len(self.deques)
        with self.cond:
            self.deques[idx].append(cell)
            self.pending += 1
            self.cond.notify()

    def _take(self, idx):
        # caller holds cond
        own = self.deques[idx]
        if own:
            return own.popleft()
        n = len(self.deques)
        for k in range(1, n):
            victim = self.deques[(idx + k) % n]
            if victim:
                return victim.pop()
        return None

    def _run(self, idx):
        _local.worker = (self, idx)
        while True:
            with self.cond:
                cell = self._take(idx)
                while cell is None:
                    if not self.running:
                        return
                    self.cond.wait()
                    cell = self._take(idx)
                self.pending -= 1
            self._process(cell)

    def _process(self, cell):
        actor = cell.actor
        for _ in range(THROUGHPUT):
            with cell.lock:
                if cell.stopped or not cell.mailbox:
                    cell.scheduled = False
                    return
                sender, message = cell.mailbox.popleft()
            if message is _STARTED:
                self._invoke(cell, actor.started)
                continue
            actor.sender = sender
            self._invoke(cell, actor.receive, message)
            actor.sender = None
        with cell.lock:
            if cell.mailbox and not cell.stopped:
                resched = True
            else:
                cell.scheduled = False
                resched = False
        if resched:
            self.schedule(cell)

    def _invoke(self, cell, fn, *args):
        try:
            fn(*args)
        except Exception as exc:
            log.exception("actor %s failed", cell.ref)
            self.system.fail(exc)

    def stop(self):
        with self.cond:
            self.running = False
            self.cond.notify_all()


class ActorSystem:
    """All actor nodes of one cluster hosted in this process."""

    def __init__(self, transport, workers_per_node=2):
        self.transport = transport
        self.n_nodes = transport.n_nodes
        self.dispatchers = [_Dispatcher(self, n, workers_per_node)
                            for n in range(self.n_nodes)]
        self._cells = [dict() for _ in range(self.n_nodes)]
        self._lock = threading.Lock()
        self._ids = itertools.count()
        self._watchers = set()
        self.failure = None
        self.dead_letters = 0
        self.remote_sends = 0
        self._receivers = [threading.Thread(target=self._receive_loop, args=(n,),
                                            daemon=True, name="actor-recv-n%d" % n)
                           for n in range(self.n_nodes)]
        self._stopped = False

    def start(self):
        for d in self.dispatchers:
            d.start()
        for r in self._receivers:
            r.start()
        return self

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.shutdown()

    def unique_path(self, prefix):
        return "%s-%d" % (prefix, next(self._ids))

    def spawn(self, node, path, actor):
        """Register ``actor`` at ``node``/``path`` and return its ref."""
        if not 0 <= node < self.n_nodes:
            raise AddressError("unknown node %r" % (node,))
        if not isinstance(actor, Actor):
            raise SpawnError("behavior must be an Actor instance, got %r" % (actor,))
        if actor.ref is not None:
            raise SpawnError("actor instance already spawned as %s" % (actor.ref,))
        ref = ActorRef(node, path)
        cell = _Cell(actor, ref, self.dispatchers[node])
        with self._lock:
            if path in self._cells[node]:
                raise SpawnError("path %r already in use on node %d" % (path, node))
            self._cells[node][path] = cell
        actor.system = self
        actor.ref = ref
        self._enqueue(cell, None, _STARTED)
        return ref

    def resolve(self, address):
        ref = parse_ref(address) if isinstance(address, str) else ActorRef(*address)
        if not 0 <= ref.node < self.n_nodes:
            raise AddressError("unknown node in %s" % (ref,))
        return ref

    def stop(self, ref):
        with self._lock:
            cell = self._cells[ref.node].pop(ref.path, None)
        if cell is not None:
            with cell.lock:
                cell.stopped = True
                dropped = len(cell.mailbox)
                cell.mailbox.clear()
            if dropped:
                self._dead_letter(ref, "%d queued message(s) at stop" % dropped, dropped)

    def tell(self, target, message, sender=None):
        """Fire-and-forget send; the source node is the sender's node (driver: 0)."""
        src = sender.node if sender is not None else 0
        if target.node == src:
            self._deliver_local(target, sender, message)
            return
        if not 0 <= target.node < self.n_nodes:
            self._dead_letter(target, "unknown node")
            return
        payload = pickle.dumps((target.path, sender, message),
                               protocol=PICKLE_PROTOCOL)
        try:
            self.transport.send(src, target.node, ACTOR_CHANNEL, payload)
        except TransportError as exc:
            self.fail(exc)
            raise
        self.remote_sends += 1

    def _deliver_local(self, target, sender, message):
        cell = self._cells[target.node].get(target.path) \
            if 0 <= target.node < self.n_nodes else None
        if cell is None:
            self._dead_letter(target, type(message).__name__)
            return
        self._enqueue(cell, sender, message)

    def _enqueue(self, cell, sender, message):
        with cell.lock:
            if cell.stopped:
                stopped = True
            else:
                stopped = False
                cell.mailbox.append((sender, message))
                wake = not cell.scheduled
                cell.scheduled = True
        if stopped:
            self._dead_letter(cell.ref, type(message).__name__)
        elif wake:
            cell.dispatcher.schedule(cell)

    def _dead_letter(self, target, what, count=1):
        with self._lock:
            self.dead_letters += count
        log.debug("dead letter to %s: %s", target, what)

    def _receive_loop(self, node):
        while True:
            try:
                msg = self.transport.recv(node, ACTOR_CHANNEL)
            except ClosedError as exc:
                if self.transport.failure is not None and not self._stopped:
                    self.fail(exc)
                return
            except TransportError as exc:
                self.fail(exc)
                return
            path, sender, message = pickle.loads(msg.payload)
            self._deliver_local(ActorRef(node, path), sender, message)

    def watch(self, future):
        """Fail ``future`` if the system fails before it completes."""
        with self._lock:
            if self.failure is not None:
                future.set_exception(self.failure)
                return future
            self._watchers.add(future)
        future.add_done_callback(self._unwatch)
        return future

    def _unwatch(self, future):
        with self._lock:
            self._watchers.discard(future)

    def fail(self, exc):
        with self._lock:
            if self.failure is not None:
                return
            self.failure = exc
            watchers = list(self._watchers)
        for f in watchers:
            if not f.done():
                try:
                    f.set_exception(exc)
                except Exception:  # already resolved concurrently
                    pass

    def shutdown(self):
        if self._stopped:
            return
        self._stopped = True
        for d in self.dispatchers:
            d.stop()


class Aggregator(Actor):
    """Collects ``expected`` replies, folds them and completes exactly once.

    With ``request`` set it first sends the request to every target with
    itself as sender. ``completion(result)`` runs in the aggregator's own
    handler; replies arriving after completion raise AggregatorError.
    """

    def __init__(self, expected, fold, completion, targets=(), request=None,
                 initial=None, key=None):
        if expected < 1:
            raise AggregatorError("expected must be positive")
        self.expected = expected
        self.fold = fold
        self.completion = completion
        self.targets = list(targets)
        self.request = request
        self.initial = initial
        self.key = key
        self.received = []
        self.replied_nodes = []
        self.done = False
        self._snapshot_lock = threading.Lock()

    def started(self):
        for t in self.targets:
            self.tell(t, self.request)

    def receive(self, message):
        if self.done:
            raise AggregatorError("late reply %r after completion" % (message,))
        value = self.key(message) if self.key else message
        with self._snapshot_lock:
            self.received.append(value)
            if self.sender is not None:
                self.replied_nodes.append(self.sender.node)
        if len(self.received) == self.expected:
            self.done = True
            acc = self.initial
            for i, v in enumerate(self.received):
                acc = v if (i == 0 and self.initial is None) else self.fold(acc, v)
            self.stop()
            self.completion(acc)

    def missing_nodes(self):
        with self._snapshot_lock:
            replied = list(self.replied_nodes)
        missing = []
        for t in self.targets:
            if t.node in replied:
                replied.remove(t.node)
            else:
                missing.append(t.node)
        return missing


def ask_all(system, targets, message, fold, timeout=DEFAULT_ASK_TIMEOUT, node=0,
            key=None):
    """Send ``message`` to every target and fold exactly one reply from each.

    ``key`` maps each raw reply to the value being folded.
    """
    targets = list(targets)
    if not targets:
        raise ValueError("ask_all needs at least one target")
    done = system.watch(Future())

    def complete(result):
        if not done.done():
            done.set_result(result)

    agg = Aggregator(len(targets), fold, complete, targets=targets,
                     request=message, key=key)
    ref = system.spawn(node, system.unique_path("ask"), agg)
    try:
        return done.result(timeout=timeout)
    except FutureTimeout:
        system.stop(ref)
        raise AggregationTimeout(agg.missing_nodes(), timeout) from None

"""BSP engine: phased agents with double-buffered inboxes and a global barrier.

Each phase runs compute on every active agent, delivers the messages it
emitted, then waits until every node has finished computing and every
message is stored at its recipient. A message sent in phase S lands in
``buffers[S % 2]`` of the recipient and is read during phase S + 1.
"""

import json
import time
from concurrent.futures import Future
from concurrent.futures import TimeoutError as FutureTimeout
from dataclasses import asdict, dataclass, field

from .actors import Actor, Aggregator, ask_all
from .core import AgentId, Backend
from .errors import (AddressError, BarrierError, MaxPhasesExceeded,
                     PhaseIsolationError, TooManyThreads)
from .shm import closure, current_runtime

DEFAULT_TIMEOUT = 120.0


class PhaseInbox:
    """Two message buffers indexed by phase parity.

    Entries are ``(phase_tag, message)``; ``read(S)`` returns the messages
    tagged S and empties their buffer. Callers serialize ``deliver``.
    """

    __slots__ = ("buffers",)

    def __init__(self):
        self.buffers = [[], []]

    def deliver(self, phase, message):
        self.buffers[phase % 2].append((phase, message))

    def pending(self, phase):
        return len(self.buffers[phase % 2])

    def read(self, phase):
        if phase < 0:
            return []
        i = phase % 2
        buf = self.buffers[i]
        self.buffers[i] = []
        out = []
        for tag, message in buf:
            if tag != phase:
                raise PhaseIsolationError(
                    "message tagged phase %d read as phase %d" % (tag, phase))
            out.append(message)
        return out


class BspAgentState:
    """One agent: id, job-defined state and whether it runs next phase.

    ``inbox`` is the agent's PhaseInbox on the shared-memory backend; on the
    actor backend inboxes live in the node's inbox actor and this is None.
    """

    __slots__ = ("id", "user_state", "active", "inbox")

    def __init__(self, agent_id, user_state=None, active=False, inbox=None):
        self.id = agent_id
        self.user_state = user_state
        self.active = active
        self.inbox = inbox

    def __repr__(self):
        return "BspAgentState(%s, %r, active=%s)" % (
            tuple(self.id), self.user_state, self.active)


@dataclass
class PhaseReport:
    """Cluster-wide counters of one phase.

    ``messages_read`` counts messages of the previous phase consumed in this
    one, so ``sent[S] == received[S] == read[S + 1]``.
    """

    phase: int
    active_before: int
    messages_sent: int
    messages_received: int
    messages_read: int
    duration: float
    activated: int = 0

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class BspResult:
    states: list
    reports: list = field(default_factory=list)
    wall: float = 0.0

    @property
    def phases(self):
        return len(self.reports)

    def state_of(self, agent):
        return self.states[agent[0]][agent[1]]


def report_lines(reports):
    return "".join(r.to_json() + "\n" for r in reports)


class Outbox:
    """Handle given to ``compute``: buffers sends per destination node."""

    __slots__ = ("phase", "agent", "n_nodes", "n_per_node", "batches", "sent",
                 "kept")

    def __init__(self, phase, agent, n_nodes, n_per_node):
        self.phase = phase
        self.agent = agent
        self.n_nodes = n_nodes
        self.n_per_node = n_per_node
        self.batches = {}
        self.sent = 0
        self.kept = False

    def send(self, to, message):
        node, idx = to
        if not (0 <= node < self.n_nodes and 0 <= idx < self.n_per_node):
            raise AddressError("no agent %r" % (tuple(to),))
        self.batches.setdefault(node, []).append((idx, message))
        self.sent += 1

    def keep_active(self):
        """Stay active for the next phase without a message."""
        self.kept = True

    def take(self):
        b, self.batches = self.batches, {}
        return b


@dataclass
class BspFault:
    """Fault injection for tests: drop the ack of the first batch that
    ``node`` delivers in ``phase`` (actor backend only)."""

    node: int
    phase: int = 0


def _stop_now(job, phase, active):
    if active == 0:
        return True
    if job.stop_criterion is not None and job.stop_criterion(phase, active):
        return True
    if job.max_phases is not None and phase >= job.max_phases:
        raise MaxPhasesExceeded("still %d active agents after %d phases"
                                % (active, phase))
    return False


def _initial_states(job, n_nodes, states):
    if states is not None:
        if len(states) != n_nodes or any(len(s) != job.agent_count_per_node
                                         for s in states):
            raise ValueError("states must be n_nodes lists of agent_count_per_node")
        return [list(s) for s in states]
    out = []
    for p in range(n_nodes):
        if job.init_state is None:
            out.append([None] * job.agent_count_per_node)
        else:
            out.append([job.init_state(AgentId(p, i))
                        for i in range(job.agent_count_per_node)])
    return out


def run_bsp(job, cluster, states=None, timeout=DEFAULT_TIMEOUT, fault=None):
    """Run ``job`` until no agent is active or its stop criterion holds.

    ``states`` optionally gives the initial user state of every agent as one
    list per node; otherwise ``job.init_state`` (or None) is used.
    ``timeout`` bounds each phase barrier.
    """
    n = cluster.n_nodes
    for a in job.initially_active:
        if not 0 <= a.node < n:
            raise AddressError("initially active agent %r on unknown node" % (a,))
    init = _initial_states(job, n, states)
    t0 = time.perf_counter()
    if cluster.backend.is_shared_memory:
        res = _run_shm(job, cluster, init, timeout)
    else:
        res = _run_actor(job, cluster, init, timeout, fault)
    res.wall = time.perf_counter() - t0
    return res


# -- shared-memory backend ---------------------------------------------------

class _BspPlace:
    def __init__(self, job, node, n_nodes, states, parallel):
        self.job = job
        self.node = node
        self.n_nodes = n_nodes
        self.parallel = parallel
        self.agents = [BspAgentState(AgentId(node, i), s, inbox=PhaseInbox())
                       for i, s in enumerate(states)]
        self.active = [set(), set()]
        for a in job.initially_active:
            if a.node == node:
                self.active[0].add(a.local_index)
                self.agents[a.local_index].active = True
        self.stored = {}
        self.current = ()


@closure
def _bsp_setup(job, n_nodes, states, parallel):
    rt = current_runtime()
    return rt.make_ref(_BspPlace(job, rt.here, n_nodes, states, parallel))


@closure
def _bsp_deliver(ref, phase, batch, keep=()):
    rt = current_runtime()
    state = rt.deref(ref)
    n_agents = len(state.agents)
    for idx, _ in batch:
        if not 0 <= idx < n_agents:
            raise AddressError("no agent (%d, %d)" % (state.node, idx))
    nxt = (phase + 1) % 2
    agents = state.agents
    with rt.atomic():
        active = state.active[nxt]
        for idx, message in batch:
            agents[idx].inbox.deliver(phase, message)
            active.add(idx)
        active.update(keep)
        state.stored[phase] = state.stored.get(phase, 0) + len(batch)


def _shm_compute(rt, refs, state, idx, phase):
    """Run one agent's compute and flush its outbox; returns (sent, read)."""
    agent = state.agents[idx]
    messages = agent.inbox.read(phase - 1)
    out = Outbox(phase, agent.id, state.n_nodes, len(state.agents))
    state.job.compute(agent, messages, out)
    for q, batch in out.take().items():
        rt.at(q, _bsp_deliver, refs[q], phase, batch)
    if out.kept:
        rt.at(state.node, _bsp_deliver, refs[state.node], phase, [], (idx,))
    return out.sent, len(messages)


def _add(a, b):
    return tuple(x + y for x, y in zip(a, b))


def _shm_agent_activity(refs, ref, idx, phase):
    rt = current_runtime()
    rt.offer(_shm_compute(rt, refs, rt.deref(ref), idx, phase))


@closure
def _bsp_phase(refs, phase):
    rt = current_runtime()
    ref = refs[rt.here]
    state = rt.deref(ref)
    i = phase % 2
    current = sorted(state.active[i])
    state.active[i] = set()
    state.current = current
    if state.parallel:
        with rt.finish(reducer=_add, initial=(0, 0)) as inner:
            for idx in current:
                rt.async_(_shm_agent_activity, refs, ref, idx, phase)
        sent, read = inner.result
    else:
        sent = read = 0
        for idx in current:
            s, r = _shm_compute(rt, refs, state, idx, phase)
            sent += s
            read += r
    rt.offer((len(current), sent, read))


@closure
def _bsp_barrier(ref, phase):
    """Stored count for ``phase`` and agents activated for ``phase + 1``."""
    state = current_runtime().deref(ref)
    for idx in state.current:
        state.agents[idx].active = False
    nxt = state.active[(phase + 1) % 2]
    for idx in nxt:
        state.agents[idx].active = True
    return state.stored.pop(phase, 0), len(nxt)


@closure
def _bsp_collect(ref):
    rt = current_runtime()
    state = rt.deref(ref)
    rt.free(ref)
    return [a.user_state for a in state.agents]


def _run_shm(job, cluster, init, timeout):
    rt = cluster.places
    n = cluster.n_nodes
    parallel = cluster.backend is Backend.SHM_PARALLEL
    refs = [rt.at(p, _bsp_setup, job, n, init[p], parallel) for p in range(n)]
    reports = []
    phase = 0
    active = len(job.initially_active)
    try:
        while not _stop_now(job, phase, active):
            t0 = time.perf_counter()
            with rt.finish(reducer=_add, initial=(0, 0, 0)) as fs:
                for p in range(n):
                    rt.at_async(p, _bsp_phase, refs, phase)
            ran, sent, read = fs.result
            stored = activated = 0
            for p in range(n):
                s, a = rt.at(p, _bsp_barrier, refs[p], phase)
                stored += s
                activated += a
            reports.append(PhaseReport(phase, ran, sent, stored, read,
                                       time.perf_counter() - t0, activated))
            active = activated
            phase += 1
    except TooManyThreads as exc:
        exc.completed_phases = phase
        _recover(rt)
        raise
    states = [rt.at(p, _bsp_collect, refs[p]) for p in range(n)]
    return BspResult(states, reports)


def _recover(rt):
    """Let the aborted run drain so the runtime is reusable."""
    deadline = time.monotonic() + 10.0
    while time.monotonic() < deadline:
        if all(not pl.pool.queue and pl.pool.parked == 0 for pl in rt.places):
            break
        time.sleep(0.01)
    rt.reset()


# -- actor backend -----------------------------------------------------------
#
# Per node: one inbox actor owning every agent's PhaseInbox and the active
# sets, and H host actors owning the agent states (agent i lives on host
# i % H). The driver on node 0 runs the phase loop with aggregators.

class InboxActor(Actor):
    def __init__(self, job, node, n_hosts, fault):
        self.job = job
        self.n_agents = job.agent_count_per_node
        self.inboxes = [PhaseInbox() for _ in range(self.n_agents)]
        self.active = [set(), set()]
        for a in job.initially_active:
            if a.node == node:
                self.active[0].add(a.local_index)
        self.n_hosts = n_hosts
        self.hosts = None
        self.stored = {}
        self.fault = fault

    def receive(self, message):
        kind = message[0]
        if kind == "deliver":
            _, phase, batch, keep = message
            nxt = self.active[(phase + 1) % 2]
            for idx, msg in batch:
                if not 0 <= idx < self.n_agents:
                    raise AddressError("no agent (%d, %d)" % (self.node, idx))
                self.inboxes[idx].deliver(phase, msg)
                nxt.add(idx)
            nxt.update(keep)
            self.stored[phase] = self.stored.get(phase, 0) + len(batch)
            f = self.fault
            if f is not None and f.phase == phase and f.node == self.sender.node:
                self.fault = None
                return
            self.reply(("ack", phase, len(batch)))
        elif kind == "hosts":
            self.hosts = message[1]
        elif kind == "start":
            _, phase, report_to = message
            i = phase % 2
            current = sorted(self.active[i])
            self.active[i] = set()
            shards = [[] for _ in range(self.n_hosts)]
            for idx in current:
                shards[idx % self.n_hosts].append(
                    (idx, self.inboxes[idx].read(phase - 1)))
            for h, host in enumerate(self.hosts):
                self.tell(host, ("compute", phase, shards[h], report_to))
        elif kind == "count":
            phase = message[1]
            self.reply(("count", self.node, self.stored.pop(phase, 0),
                        len(self.active[(phase + 1) % 2])))
        else:
            raise ValueError("InboxActor: unknown message %r" % (kind,))


class HostActor(Actor):
    def __init__(self, job, n_nodes, indices, states, inboxes):
        self.job = job
        self.n_nodes = n_nodes
        self.agents = {i: BspAgentState(AgentId(0, i), s)
                       for i, s in zip(indices, states)}
        self.inboxes = inboxes
        self.pending_acks = 0
        self.report = None

    def started(self):
        for i, agent in self.agents.items():
            agent.id = AgentId(self.node, i)
            agent.active = agent.id in self.job.initially_active

    def receive(self, message):
        kind = message[0]
        if kind == "compute":
            _, phase, work, report_to = message
            n_per = self.job.agent_count_per_node
            batches, keep, sent, read = {}, [], 0, 0
            compute = self.job.compute
            for idx, messages in work:
                agent = self.agents[idx]
                out = Outbox(phase, agent.id, self.n_nodes, n_per)
                compute(agent, messages, out)
                agent.active = False
                for q, batch in out.take().items():
                    batches.setdefault(q, []).extend(batch)
                if out.kept:
                    keep.append(idx)
                sent += out.sent
                read += len(messages)
            if keep:
                batches.setdefault(self.node, [])
            for q, batch in batches.items():
                self.tell(self.inboxes[q], ("deliver", phase, batch,
                                            keep if q == self.node else ()))
            self.pending_acks = len(batches)
            self.report = (report_to, ("host", self.node, len(work), sent, read))
            self._maybe_report()
        elif kind == "ack":
            self.pending_acks -= 1
            self._maybe_report()
        elif kind == "collect":
            self.reply(("states", self.node,
                        [(i, a.user_state) for i, a in self.agents.items()]))
            self.stop()
        else:
            raise ValueError("HostActor: unknown message %r" % (kind,))

    def _maybe_report(self):
        if self.pending_acks == 0 and self.report is not None:
            report_to, msg = self.report
            self.report = None
            self.tell(report_to, msg)


def _sum_hosts(acc, item):
    return _add(acc, item)


def _merge(a, b):
    return {**a, **b}


def _run_actor(job, cluster, init, timeout, fault):
    system = cluster.actors
    n = cluster.n_nodes
    h_count = cluster.spec.workers_per_node
    run = system.unique_path("bsp")
    inboxes = [system.spawn(p, run + "/inbox", InboxActor(job, p, h_count, fault))
               for p in range(n)]
    hosts = []
    n_per = job.agent_count_per_node
    for p in range(n):
        row = []
        for h in range(h_count):
            idx = list(range(h, n_per, h_count))
            row.append(system.spawn(p, "%s/host-%d" % (run, h), HostActor(
                job, n, idx, [init[p][i] for i in idx], inboxes)))
        hosts.append(row)
        system.tell(inboxes[p], ("hosts", row))
    all_hosts = [ref for row in hosts for ref in row]
    reports = []
    phase = 0
    active = len(job.initially_active)
    try:
        while not _stop_now(job, phase, active):
            t0 = time.perf_counter()
            done = system.watch(Future())
            agg = Aggregator(len(all_hosts), _sum_hosts,
                             lambda r, d=done: d.done() or d.set_result(r),
                             initial=(0, 0, 0), key=lambda m: m[2:])
            agg_ref = system.spawn(0, system.unique_path("bsp-barrier"), agg)
            for ref in inboxes:
                system.tell(ref, ("start", phase, agg_ref))
            try:
                ran, sent, read = done.result(timeout=timeout)
            except FutureTimeout:
                system.stop(agg_ref)
                with agg._snapshot_lock:
                    replied = list(agg.replied_nodes)
                unconfirmed = [p for p in range(n) if replied.count(p) < h_count]
                raise BarrierError(phase, unconfirmed) from None
            counts = ask_all(system, inboxes, ("count", phase), _merge,
                             timeout=timeout, key=lambda m: {m[1]: m[2:]})
            stored = sum(counts[p][0] for p in range(n))
            activated = sum(counts[p][1] for p in range(n))
            reports.append(PhaseReport(phase, ran, sent, stored, read,
                                       time.perf_counter() - t0, activated))
            active = activated
            phase += 1
        got = ask_all(system, all_hosts, ("collect",), _merge, timeout=timeout,
                      key=lambda m: {(m[1], i): s for i, s in m[2]})
    except BaseException:
        for ref in all_hosts:
            system.stop(ref)
        raise
    finally:
        for ref in inboxes:
            system.stop(ref)
    states = [[got[(p, i)] for i in range(n_per)] for p in range(n)]
    return BspResult(states, reports)

"""MapReduce engine: Init -> Map -> Shuffle -> Reduce -> Sink on either backend.

Nodes run each step in parallel with one another; inside a node the
mapper runs sequentially over the local pairs and the reducer once per
key group. Shuffle completion is detected by counts exchange: every node
announces how many pairs it routes to each peer, and a node enters
Reduce only once it has received exactly the announced number from
everybody.
"""

import json
import time
from collections import defaultdict
from concurrent.futures import Future
from concurrent.futures import TimeoutError as FutureTimeout
from dataclasses import asdict, dataclass, field

from .actors import Actor, Aggregator, ask_all
from .core import KvPair, Stage
from .errors import PartitionError, ShuffleBarrierError
from .shm import DistSlice, ShmDistArray, closure, current_runtime

DEFAULT_TIMEOUT = 120.0


@dataclass
class StepTiming:
    """Per-node step durations of one run, in seconds."""

    node: int
    init: float = 0.0
    map: float = 0.0
    shuffle: float = 0.0
    reduce: float = 0.0
    sink: float = 0.0

    def total(self):
        return self.init + self.map + self.shuffle + self.reduce + self.sink

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)


def timing_lines(timings):
    """Line-delimited JSON stream of per-node step timings."""
    return "".join(t.to_json() + "\n" for t in timings)


@dataclass
class MapReduceResult:
    results: list
    timings: list
    emitted: int
    received: int
    output: object = None
    wall: float = 0.0


class ShufflePlan:
    """Stage2 pairs bucketed by destination node."""

    def __init__(self, n_nodes):
        self.n_nodes = n_nodes
        self.buffers = [[] for _ in range(n_nodes)]

    @property
    def counts(self):
        return [len(b) for b in self.buffers]

    @classmethod
    def build(cls, pairs, partition, n_nodes):
        plan = cls(n_nodes)
        buffers = plan.buffers
        for k, v in pairs:
            dest = partition(k, n_nodes)
            if not isinstance(dest, int) or not 0 <= dest < n_nodes:
                raise PartitionError(k, dest, n_nodes)
            buffers[dest].append((k, v))
        return plan


def group_by_key(batches):
    """Group ``(key, value)`` pairs from per-sender batches.

    ``batches`` is ordered by sender; within a group values keep arrival
    order per sender.
    """
    groups = defaultdict(list)
    for batch in batches:
        for k, v in batch:
            groups[k].append(v)
    return groups


def map_local(job, node, local_data):
    """Init and Map at one node; returns (stage2 pairs, init_s, map_s)."""
    t0 = time.perf_counter()
    stage1 = list(job.source(node, local_data))
    t1 = time.perf_counter()
    mapper = job.mapper
    stage2 = []
    for k1, v1 in stage1:
        stage2.extend(mapper(k1, v1))
    return stage2, t1 - t0, time.perf_counter() - t1


def reduce_local(job, groups):
    reducer = job.reducer
    out = []
    for k2, values in groups.items():
        k3, v3 = reducer(k2, values)
        out.append(KvPair(k3, v3, Stage.STAGE3))
    return out


def sink_local(job, node, stage3):
    if job.sink is None:
        return stage3
    return job.sink(node, stage3)


def coordinate(job, sink_results):
    payloads = list(job.coordinator(sink_results))
    if len(payloads) != len(sink_results):
        raise ValueError("coordinator returned %d payloads for %d nodes"
                         % (len(payloads), len(sink_results)))
    return payloads


@dataclass
class ShuffleFault:
    """Drop ``drop`` pairs from the src->dst shuffle batch (tests only)."""

    src: int
    dst: int
    drop: int = 1


def run_mapreduce(job, cluster, inputs=None, timeout=DEFAULT_TIMEOUT, fault=None):
    """Run ``job`` on ``cluster``.

    ``inputs`` is an optional distributed array; each node's ``source``
    receives its DistSlice (or None without inputs). With a coordinator the
    result's ``output`` is a new distributed array holding the payloads.
    """
    t0 = time.perf_counter()
    if cluster.backend.is_shared_memory:
        res = _run_shm(job, cluster, inputs, timeout, fault)
    else:
        res = _run_actor(job, cluster, inputs, timeout, fault)
    res.wall = time.perf_counter() - t0
    if res.emitted != res.received:
        raise ShuffleBarrierError(-1, {-1: res.emitted - res.received})
    return res


# -- shared-memory backend ---------------------------------------------------
#
# One control loop at place 0 drives every step with
# ``finish { for p: at(p) async step(p) }``. Each place pre-reserves one
# shuffle slot per sender, so no atomic section is needed in Shuffle.

class _MrPlace:
    def __init__(self, job, n_nodes, input_ref):
        self.job = job
        self.input_ref = input_ref
        self.announced = [None] * n_nodes
        self.slots = [None] * n_nodes
        self.stage3 = None
        self.sink_result = None
        self.emitted = 0
        self.timing = None


@closure
def _mr_setup(job, n_nodes, input_ref):
    rt = current_runtime()
    return rt.make_ref(_MrPlace(job, n_nodes, input_ref))


@closure
def _mr_announce(ref, src, count):
    current_runtime().deref(ref).announced[src] = count


@closure
def _mr_deliver(ref, src, batch):
    current_runtime().deref(ref).slots[src] = batch


@closure
def _mr_map_chunk(job, pairs, out_ref, index):
    mapper = job.mapper
    out = []
    for k1, v1 in pairs:
        out.extend(mapper(k1, v1))
    current_runtime().deref(out_ref)[index] = out


@closure
def _mr_map_shuffle(refs, fault):
    rt = current_runtime()
    here = rt.here
    state = rt.deref(refs[here])
    job = state.job
    n = len(refs)
    timing = state.timing = StepTiming(here)
    local = None
    if state.input_ref is not None:
        local = rt.deref(state.input_ref)
    if job.parallel_local:
        t0 = time.perf_counter()
        stage1 = list(job.source(here, local))
        t1 = time.perf_counter()
        workers = rt.places[here].pool.target
        parts = [stage1[i::workers] for i in range(workers)]
        out = [None] * workers
        out_ref = rt.make_ref(out)
        with rt.finish():
            for i, part in enumerate(parts):
                rt.async_(_mr_map_chunk, job, part, out_ref, i)
        rt.free(out_ref)
        stage2 = [kv for chunk in out for kv in chunk]
        timing.init, timing.map = t1 - t0, time.perf_counter() - t1
    else:
        stage2, timing.init, timing.map = map_local(job, here, local)
    state.emitted = len(stage2)
    t0 = time.perf_counter()
    plan = ShufflePlan.build(stage2, job.partition, n)
    for q in _peer_order(here, n):
        batch = plan.buffers[q]
        rt.at(q, _mr_announce, refs[q], here, len(batch))
        if fault is not None and fault.src == here and fault.dst == q:
            batch = batch[fault.drop:]
        rt.at(q, _mr_deliver, refs[q], here, batch)
    timing.shuffle = time.perf_counter() - t0


def _peer_order(here, n):
    # start with the next node so senders do not all hit node 0 first
    return [(here + k) % n for k in range(n)]


@closure
def _mr_check_barrier(ref):
    state = current_runtime().deref(ref)
    deltas = {}
    for src, (ann, got) in enumerate(zip(state.announced, state.slots)):
        have = len(got) if got is not None else 0
        if ann is None or ann != have:
            deltas[src] = (ann or 0) - have
    return deltas


@closure
def _mr_reduce_sink(ref):
    rt = current_runtime()
    state = rt.deref(ref)
    t0 = time.perf_counter()
    groups = group_by_key(state.slots)
    received = sum(len(s) for s in state.slots)
    state.slots = None
    stage3 = reduce_local(state.job, groups)
    t1 = time.perf_counter()
    state.sink_result = sink_local(state.job, rt.here, stage3)
    state.timing.reduce = t1 - t0
    state.timing.sink = time.perf_counter() - t1
    rt.offer(received)


@closure
def _mr_take_sink(ref):
    state = current_runtime().deref(ref)
    result, state.sink_result = state.sink_result, None
    return result


@closure
def _mr_store(ref, global_len, offset, payload):
    rt = current_runtime()
    t0 = time.perf_counter()
    state = rt.deref(ref)
    out = rt.make_ref(DistSlice(global_len, rt.here, offset, list(payload)))
    state.timing.sink += time.perf_counter() - t0
    return out


@closure
def _mr_finish(ref):
    rt = current_runtime()
    state = rt.deref(ref)
    rt.free(ref)
    return state.emitted, state.timing


def _run_shm(job, cluster, inputs, timeout, fault):
    rt = cluster.places
    n = cluster.n_nodes
    input_refs = inputs.refs if inputs is not None else [None] * n
    refs = [rt.at(p, _mr_setup, job, n, input_refs[p]) for p in range(n)]
    with rt.finish():
        for p in range(n):
            rt.at_async(p, _mr_map_shuffle, refs, fault)
    for p in range(n):
        deltas = rt.at(p, _mr_check_barrier, refs[p])
        if deltas:
            raise ShuffleBarrierError(p, deltas)
    with rt.finish(reducer=lambda a, b: a + b, initial=0) as reduced:
        for p in range(n):
            rt.at_async(p, _mr_reduce_sink, refs[p])
    results, output = None, None
    if job.coordinator is not None:
        t0 = time.perf_counter()
        gathered = [rt.at(p, _mr_take_sink, refs[p]) for p in range(n)]
        payloads = coordinate(job, gathered)
        total = sum(len(pl) for pl in payloads)
        t_coord = time.perf_counter() - t0
        out_refs, offset = [], 0
        for p in range(n):
            out_refs.append(rt.at(p, _mr_store, refs[p], total, offset, payloads[p]))
            offset += len(payloads[p])
        output = ShmDistArray(rt, total, out_refs)
    else:
        t_coord = 0.0
        results = [rt.at(p, _mr_take_sink, refs[p]) for p in range(n)]
    emitted, timings = 0, []
    for p in range(n):
        e, timing = rt.at(p, _mr_finish, refs[p])
        if p == 0:
            timing.sink += t_coord
        emitted += e
        timings.append(timing)
    return MapReduceResult(results, timings, emitted, reduced.result, output)


# -- actor backend -------------------------------------------------------------
#
# One MrWorker per node, one MrCoordinator per run on node 0, and an
# Aggregator per barrier. Workers message each other directly in Shuffle.

class MrWorker(Actor):
    def __init__(self, job, n_nodes, input_ref, fault):
        self.job = job
        self.n = n_nodes
        self.input_ref = input_ref
        self.fault = fault
        self.peers = None
        self.announced = [None] * n_nodes
        self.batches = [None] * n_nodes
        self.report_to = None
        self.timing = None
        self.emitted = 0
        self.groups = None
        self.shuffle_start = None
        self.barrier_passed = False

    def receive(self, message):
        kind = message[0]
        if kind == "init":
            _, self.peers, self.report_to = message
            self.timing = StepTiming(self.node)
            if self.input_ref is not None:
                self.tell(self.input_ref, ("get",))
            else:
                self._map(None)
        elif kind == "slice":
            _, node, offset, elements, global_len = message
            self._map(DistSlice(global_len, node, offset, elements))
        elif kind == "count":
            self.announced[message[1]] = message[2]
            self._check_barrier()
        elif kind == "pairs":
            self.batches[message[1]] = message[2]
            self._check_barrier()
        elif kind == "reduce":
            self._reduce(message[1])
        elif kind == "store":
            _, global_len, offset, payload, report_to = message
            t0 = time.perf_counter()
            from .cluster import DistArrayNodeActor
            ref = self.spawn(self.system.unique_path("dist-array"),
                             DistArrayNodeActor(global_len, offset, payload))
            self.timing.sink += time.perf_counter() - t0
            self.tell(report_to, ("stored", self.node, ref, self.emitted, self.timing))
            self.stop()
        elif kind == "status":
            self.reply(("status", self.node, self._deltas()))
        else:
            raise ValueError("MrWorker: unknown message %r" % (kind,))

    def _map(self, local):
        stage2, self.timing.init, self.timing.map = map_local(self.job, self.node, local)
        self.emitted = len(stage2)
        self.shuffle_start = time.perf_counter()
        plan = ShufflePlan.build(stage2, self.job.partition, self.n)
        for q in _peer_order(self.node, self.n):
            batch = plan.buffers[q]
            if q == self.node:
                self.announced[q] = len(batch)
                self.batches[q] = batch
                continue
            self.tell(self.peers[q], ("count", self.node, len(batch)))
            f = self.fault
            if f is not None and f.src == self.node and f.dst == q:
                batch = batch[f.drop:]
            self.tell(self.peers[q], ("pairs", self.node, batch))
        self._check_barrier()

    def _deltas(self):
        if self.barrier_passed:
            return {}
        deltas = {}
        for src in range(self.n):
            ann, got = self.announced[src], self.batches[src]
            have = len(got) if got is not None else 0
            if ann is None or got is None or ann != have:
                deltas[src] = (ann or 0) - have
        return deltas

    def _check_barrier(self):
        if self.barrier_passed or self.shuffle_start is None:
            return
        for ann, got in zip(self.announced, self.batches):
            if ann is None or got is None or ann != len(got):
                return
        self.barrier_passed = True
        self.groups = group_by_key(self.batches)
        received = sum(len(b) for b in self.batches)
        self.batches = None
        self.timing.shuffle = time.perf_counter() - self.shuffle_start
        self.tell(self.report_to, ("shuffled", self.node, received))

    def _reduce(self, report_to):
        t0 = time.perf_counter()
        stage3 = reduce_local(self.job, self.groups)
        self.groups = None
        t1 = time.perf_counter()
        result = sink_local(self.job, self.node, stage3)
        self.timing.reduce = t1 - t0
        self.timing.sink = time.perf_counter() - t1
        if self.job.coordinator is None:
            self.tell(report_to, ("done", self.node, result, self.emitted, self.timing))
            self.stop()
        else:
            self.tell(report_to, ("sunk", self.node, result))


def _collect(acc, item):
    acc.update(item)
    return acc


class MrCoordinator(Actor):
    def __init__(self, job, workers, done):
        self.job = job
        self.workers = workers
        self.done = done
        self.received = 0
        self.coord_time = 0.0

    def _aggregator(self, tag):
        n = len(self.workers)
        agg = Aggregator(n, _collect,
                         lambda result, me=self.ref: self.system.tell(me, (tag, result)),
                         initial={}, key=lambda m: {m[1]: m[2:]})
        return self.spawn(self.system.unique_path("mr-" + tag), agg)

    def receive(self, message):
        kind = message[0]
        if kind == "start":
            agg = self._aggregator("shuffled")
            for w in self.workers:
                self.tell(w, ("init", self.workers, agg))
        elif kind == "shuffled":
            self.received = sum(v[0] for v in message[1].values())
            tag = "done" if self.job.coordinator is None else "sunk"
            agg = self._aggregator(tag)
            for w in self.workers:
                self.tell(w, ("reduce", agg))
        elif kind == "sunk":
            t0 = time.perf_counter()
            by_node = message[1]
            payloads = coordinate(self.job, [by_node[p][0]
                                             for p in range(len(self.workers))])
            total = sum(len(pl) for pl in payloads)
            self.coord_time = time.perf_counter() - t0
            agg = self._aggregator("stored")
            offset = 0
            for p, w in enumerate(self.workers):
                self.tell(w, ("store", total, offset, payloads[p], agg))
                offset += len(payloads[p])
            self.total = total
        elif kind in ("done", "stored"):
            by_node = message[1]
            n = len(self.workers)
            results = [by_node[p][0] for p in range(n)]
            emitted = sum(by_node[p][1] for p in range(n))
            timings = [by_node[p][2] for p in range(n)]
            timings[0].sink += self.coord_time
            if kind == "done":
                res = MapReduceResult(results, timings, emitted, self.received)
            else:
                res = MapReduceResult(None, timings, emitted, self.received,
                                      output=(self.total, results))
            self.stop()
            if not self.done.done():
                self.done.set_result(res)
        else:
            raise ValueError("MrCoordinator: unknown message %r" % (kind,))


def _run_actor(job, cluster, inputs, timeout, fault):
    from .cluster import ActorDistArray
    system = cluster.actors
    n = cluster.n_nodes
    run = system.unique_path("mr")
    input_refs = inputs.refs if inputs is not None else [None] * n
    workers = [system.spawn(p, run + "/worker",
                            MrWorker(job, n, input_refs[p], fault)) for p in range(n)]
    done = system.watch(Future())
    coord = system.spawn(0, run + "/coordinator", MrCoordinator(job, workers, done))
    system.tell(coord, ("start",))
    try:
        res = done.result(timeout=timeout)
    except FutureTimeout:
        statuses = ask_all(system, workers, ("status",), _collect, timeout=5.0,
                           key=lambda m: {m[1]: m[2]})
        for ref in workers + [coord]:
            system.stop(ref)
        for node in range(n):
            if statuses.get(node):
                raise ShuffleBarrierError(node, statuses[node]) from None
        raise
    if res.output is not None:
        total, refs = res.output
        res.output = ActorDistArray(cluster, total, refs)
    return res

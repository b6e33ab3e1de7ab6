"""Acceptance suite: one test per primary criterion.

Each test prints a single PASS/FAIL line (also repeated in the pytest
summary) and then asserts the same verdict.
"""

import os
import random
import statistics
import threading
import time
from collections import Counter

import pytest

from conftest import BACKENDS, make_cluster
from hotspot import conservation_problems, hotspot_job, hotspot_states, totals
from mrbsp.bench import (CSV_COLUMNS, ExperimentKind, ExperimentSpec, Outcome,
                         default_start, run_experiment)
from mrbsp.bsp import run_bsp
from mrbsp.core import block_sizes
from mrbsp.errors import TooManyThreads
from mrbsp.jobs.dumps import dump_array
from mrbsp.jobs.graph import (bfs_levels, expected_phases, explore_graph,
                              generate_graph, tree_problems)
from mrbsp.jobs.sort import distributed_sort, random_array
from mrbsp.mapreduce import run_mapreduce
from mrbsp.transport import (InProcessTransport, TcpTransport, TransportConfig,
                             wire_decode, wire_encode)
from test_transport import random_envelope
from wordcount import counts_of, oracle, random_lines, word_count_job

SORT_SIZES = (1000, 3000, 10000, 30000, 100000)
SORT_SHAPES = ((1, 1), (2, 2), (2, 4))


def sort_instance(i):
    return 1000 + i, SORT_SIZES[i % len(SORT_SIZES)], SORT_SHAPES[i % len(SORT_SHAPES)]


def test_sort_correctness(verdict):
    t0 = time.perf_counter()
    problems = []
    dumps = {}
    for backend in BACKENDS:
        for i in range(100):
            seed, size, shape = sort_instance(i)
            values = random_array(seed, size)
            with make_cluster(backend, shape) as c:
                out, _ = distributed_sort(c.dist_array(values), c)
                slices = out.slices()
            flat = [v for s in slices for v in s]
            if flat != sorted(values):
                problems.append("%s #%d: not the sorted input" % (backend, i))
            if [len(s) for s in slices] != block_sizes(size, len(slices)):
                problems.append("%s #%d: slice sizes %s" % (backend, i,
                                                            [len(s) for s in slices]))
            dumps.setdefault(i, {})[backend] = dump_array(flat, seed).encode()
    for i, by_backend in dumps.items():
        if len(set(by_backend.values())) != 1:
            problems.append("#%d: backends disagree byte-wise" % i)
    elapsed = time.perf_counter() - t0
    ok = not problems and elapsed < 300
    verdict("sort correctness", ok,
            "300 instances, %d problems, %.1fs (limit 300s)%s"
            % (len(problems), elapsed, "; " + problems[0] if problems else ""))
    assert ok, problems[:5]


EXPLORE_SHAPES = ((1, 1, 200), (1, 2, 500), (2, 2, 1000), (2, 2, 2000), (1, 4, 2000))


def test_exploration_correctness(verdict):
    t0 = time.perf_counter()
    problems = []
    for backend in BACKENDS:
        for i in range(100):
            a, b, per = EXPLORE_SHAPES[i % len(EXPLORE_SHAPES)]
            g = generate_graph(2000 + i, a * b, per)
            start = default_start(g)
            with make_cluster(backend, (a, b)) as c:
                ex = explore_graph(g, start, c)
            bad = tree_problems(g, start, ex.parents)
            if set(ex.parents) != set(bfs_levels(g, start)):
                bad.append("visited set differs from BFS")
            want = expected_phases(g, start)
            if ex.phases != want:
                bad.append("%d phases, oracle %d" % (ex.phases, want))
            problems.extend("%s #%d: %s" % (backend, i, p) for p in bad)
    elapsed = time.perf_counter() - t0
    ok = not problems and elapsed < 600
    verdict("exploration correctness", ok,
            "300 graphs, %d problems, %.1fs (limit 600s)%s"
            % (len(problems), elapsed, "; " + problems[0] if problems else ""))
    assert ok, problems[:5]


def test_phase_isolation_and_conservation(verdict):
    problems = []
    counted = []
    for backend in BACKENDS:
        job, senders = hotspot_job(64, 40, 4)
        with make_cluster(backend, (2, 2)) as c:
            res = run_bsp(job, c, states=hotspot_states(4, 40, 16, 100))
        sent, read, bad = totals(res)
        counted.append(sent)
        if bad:
            problems.append("%s: %d reads with a stale tag" % (backend, bad))
        if not sent == read == sum(r.messages_received for r in res.reports):
            problems.append("%s: sent %d read %d" % (backend, sent, read))
        problems.extend("%s: %s" % (backend, p)
                        for p in conservation_problems(res.reports))
    ok = not problems and min(counted) >= 10**5
    verdict("phase isolation and conservation", ok,
            "64 senders, %s messages per backend, %d problems"
            % (counted, len(problems)))
    assert ok, problems[:5]


def test_worker_cap_exhaustion(verdict):
    # identical instance on both backends: 2 in-process nodes, 2000 agents each
    per = 2000
    aborts, smp_other = 0, []
    actor_ok = 0
    for run in range(10):
        g = generate_graph(3000 + run, 2, per)
        start = default_start(g)
        with make_cluster("smp", (1, 2), worker_cap=8) as c:
            try:
                ex = explore_graph(g, start, c)
                smp_other.append("completed" if not tree_problems(g, start, ex.parents)
                                 else "wrong")
            except TooManyThreads:
                aborts += 1
        with make_cluster("a", (1, 2), worker_cap=8) as c:
            ex = explore_graph(g, start, c)
            if not tree_problems(g, start, ex.parents) and \
                    ex.phases == expected_phases(g, start):
                actor_ok += 1
    ok = aborts >= 9 and actor_ok == 10
    verdict("worker-cap exhaustion", ok,
            "smp TooManyThreads %d/10 (need >= 9), actor correct %d/10, "
            "host cores %s" % (aborts, actor_ok, os.cpu_count()))
    assert ok


def test_agent_sweep_trend(verdict):
    exp = ExperimentSpec(ExperimentKind.BSP_AGENT_SWEEP, BACKENDS, (100, 500, 2000),
                         shapes=((2, 4),), repetitions=3)
    records, _ = run_experiment(exp)
    mean = {}
    for b in BACKENDS:
        for v in exp.values:
            times = [r.wall_s for r in records if r.backend == b and r.value == v
                     and r.outcome is Outcome.OK]
            mean[b, v] = statistics.fmean(times) if len(times) == 3 else float("nan")
    top, low = exp.values[-1], exp.values[0]
    sms_slowest = mean["sms", top] > max(mean["a", top], mean["smp", top])
    actor_growth = mean["a", top] / mean["a", low]
    sms_growth = mean["sms", top] / mean["sms", low]
    sublinear = actor_growth < sms_growth
    cores = os.cpu_count() or 1
    ok = cores >= 8 and sms_slowest and sublinear
    cells = ", ".join("%s@%d=%.3fs" % (b, v, mean[b, v])
                      for b in BACKENDS for v in exp.values)
    verdict("agent-sweep trend", ok,
            "host cores %d (need >= 8); sms slowest at %d: %s; actor growth %.1fx vs "
            "sms %.1fx: %s; %s" % (cores, top, sms_slowest, actor_growth, sms_growth,
                                   sublinear, cells))
    assert ok


def test_mapreduce_backend_equivalence(verdict):
    problems = []
    for seed in range(50):
        lines = random_lines(500 + seed, n_lines=random.Random(seed).randint(0, 300))
        want = oracle(lines)
        outs = []
        for backend in BACKENDS:
            with make_cluster(backend, (2, 2)) as c:
                res = run_mapreduce(word_count_job(), c, c.dist_array(lines))
            if not res.emitted == res.received == sum(want.values()):
                problems.append("%s seed %d: emitted %d received %d expected %d"
                                % (backend, seed, res.emitted, res.received,
                                   sum(want.values())))
            outs.append(Counter(counts_of(res)))
        if not outs[0] == outs[1] == outs[2] == want:
            problems.append("seed %d: outputs differ" % seed)
    ok = not problems
    verdict("mapreduce backend equivalence", ok,
            "50 jobs x 3 backends, %d problems" % len(problems))
    assert ok, problems[:5]


def test_transport(verdict):
    problems = []
    rng = random.Random(99)
    for i in range(1000):
        e = random_envelope(rng)
        if wire_decode(wire_encode(e)) != e:
            problems.append("envelope %d" % i)
    chunk = 16
    with TcpTransport(2, TransportConfig(max_chunk_bytes=chunk)) as t:
        for size in (0, 1, chunk, chunk + 1, 10 * chunk):
            payload = rng.randbytes(size)
            t.send(0, 1, 2, payload)
            if t.recv(1, 2, timeout=10).payload != payload:
                problems.append("tcp payload of %d bytes" % size)
    n = 10_000
    for cls in (InProcessTransport, TcpTransport):
        with cls(2, TransportConfig(max_chunk_bytes=chunk)) as t:
            th = threading.Thread(target=lambda: [t.send(0, 1, 3, i.to_bytes(4, "big"))
                                                  for i in range(n)])
            th.start()
            got = [int.from_bytes(t.recv(1, 3, timeout=10).payload, "big")
                   for _ in range(n)]
            th.join()
            if got != list(range(n)):
                problems.append("%s FIFO broken" % cls.__name__)
    ok = not problems
    verdict("transport", ok, "1000 envelopes, 5 tcp chunk sizes, FIFO over %d "
            "messages on 2 transports, %d problems" % (n, len(problems)))
    assert ok, problems


def test_bench_csv(verdict):
    exp = ExperimentSpec(ExperimentKind.MR_ARRAY_SWEEP, BACKENDS, (1000, 10000),
                         shapes=((2, 2),), repetitions=3)
    records, table = run_experiment(exp)
    _, again = run_experiment(exp)
    lines = table.splitlines()
    problems = []
    if tuple(lines[0].split(",")) != CSV_COLUMNS:
        problems.append("header %r" % lines[0])
    order = [tuple(l.split(",")[:4]) for l in lines[1:]]
    if order != [tuple(l.split(",")[:4]) for l in again.splitlines()[1:]]:
        problems.append("row order changed between runs")
    if order != [("MrArraySweep", b, "2x2", str(v)) for b in BACKENDS
                 for v in exp.values]:
        problems.append("unexpected rows %s" % order)
    if any(r.outcome is Outcome.OK and not r.oracle_ok for r in records):
        problems.append("Ok record without a passed oracle")
    ok = not problems
    verdict("bench csv", ok, "%d rows, %d records, %d problems"
            % (len(order), len(records), len(problems)))
    assert ok, problems

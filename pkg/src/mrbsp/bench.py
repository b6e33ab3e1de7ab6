"""Benchmark harness: sweeps over input size, agents per node and cluster shape.

Every run gets a fresh cluster and a fresh seeded input (seed = base + rep),
is timed around the engine call only, and is checked against a sequential
oracle before its time is kept. One untimed warm-up run precedes each cell.
"""

import argparse
import csv
import enum
import io
import json
import logging
import statistics
import sys
import time
from dataclasses import asdict, dataclass, field

from .cluster import Cluster
from .core import (Backend, ClusterSpec, TransportKind, block_sizes,
                   load_cluster_spec, parse_shape, validate_cluster_spec)
from .errors import ConfigError, TooManyThreads
from .jobs.graph import explore_graph, generate_graph, tree_problems, expected_phases
from .jobs.sort import distributed_sort, random_array

log = logging.getLogger(__name__)

CSV_COLUMNS = ("experiment", "backend", "shape", "value", "mean_s", "stddev_s",
               "ok", "fail")


class ExperimentKind(enum.Enum):
    MR_ARRAY_SWEEP = "MrArraySweep"
    MR_CLUSTER_SWEEP = "MrClusterSweep"
    BSP_AGENT_SWEEP = "BspAgentSweep"
    BSP_CLUSTER_SWEEP = "BspClusterSweep"

    @classmethod
    def parse(cls, text):
        key = text.replace("-", "").replace("_", "").lower()
        for kind in cls:
            if kind.value.lower() == key:
                return kind
        raise ConfigError("unknown experiment kind %r (choose from %s)"
                          % (text, ", ".join(k.value for k in cls)))

    @property
    def is_mapreduce(self):
        return self in (ExperimentKind.MR_ARRAY_SWEEP, ExperimentKind.MR_CLUSTER_SWEEP)


class Outcome(enum.Enum):
    OK = "Ok"
    TOO_MANY_THREADS = "TooManyThreads"
    ERROR = "Error"


@dataclass
class ExperimentSpec:
    kind: ExperimentKind
    backends: tuple
    values: tuple
    shapes: tuple = ((2, 2),)
    repetitions: int = 10
    seed: int = 42
    base: ClusterSpec = field(default_factory=ClusterSpec)
    warmup: bool = True
    timeout: float = 300.0

    def __post_init__(self):
        vals = list(self.values)
        if not vals or any(b <= a for a, b in zip(vals, vals[1:])):
            raise ConfigError("sweep values must be nonempty and strictly increasing")
        if self.repetitions < 1:
            raise ConfigError("repetitions must be positive")
        if not self.backends or not self.shapes:
            raise ConfigError("need at least one backend and one shape")

    @property
    def experiment_id(self):
        return self.kind.value


@dataclass
class RunRecord:
    experiment: str
    backend: str
    shape: str
    value: int
    rep: int
    seed: int
    wall_s: float
    outcome: Outcome
    oracle_ok: bool = False
    detail: str = ""
    breakdown: dict = field(default_factory=dict)
    mapping: str = ""

    def to_json(self):
        d = asdict(self)
        d["outcome"] = self.outcome.value
        return json.dumps(d, sort_keys=True)


def _shape_mapping(spec):
    if spec.transport is TransportKind.TCP:
        return "%d nodes in one process over loopback tcp" % spec.n_nodes()
    return "%d nodes in one process, in-process queues" % spec.n_nodes()


def _run_sort(cluster, n, seed, timeout):
    values = random_array(seed, n)
    arr = cluster.dist_array(values)
    t0 = time.perf_counter()
    out, res = distributed_sort(arr, cluster, timeout=timeout)
    wall = time.perf_counter() - t0
    slices = out.slices()
    got = [v for s in slices for v in s]
    problems = []
    if got != sorted(values):
        problems.append("output differs from sequential sort")
    if [len(s) for s in slices] != block_sizes(len(values), cluster.n_nodes):
        problems.append("slice sizes break the remainder rule")
    steps = ("init", "map", "shuffle", "reduce", "sink")
    breakdown = {s: statistics.fmean(getattr(t, s) for t in res.timings) for s in steps}
    out.free()
    arr.free()
    return wall, problems, breakdown


def default_start(graph):
    """First vertex in global order with an out-edge (else vertex 0)."""
    for v in graph.vertices():
        if graph.out_edges(v):
            return v
    return next(graph.vertices())


def _run_explore(cluster, n, seed, timeout):
    graph = generate_graph(seed, cluster.n_nodes, n)
    start = default_start(graph)
    t0 = time.perf_counter()
    ex = explore_graph(graph, start, cluster, timeout=timeout)
    wall = time.perf_counter() - t0
    problems = tree_problems(graph, start, ex.parents)
    if ex.phases != expected_phases(graph, start):
        problems.append("%d phases, oracle expects %d"
                        % (ex.phases, expected_phases(graph, start)))
    breakdown = {"phases": ex.phases,
                 "phase_s": sum(r.duration for r in ex.reports)}
    return wall, problems, breakdown


def run_once(kind, spec, value, seed, timeout=300.0):
    """One timed, oracle-checked run on a fresh cluster."""
    runner = _run_sort if kind.is_mapreduce else _run_explore
    with Cluster(spec) as cluster:
        return runner(cluster, value, seed, timeout)


def run_experiment(exp, progress=None):
    """Run every (backend, shape, value) cell; returns ``(records, csv_text)``."""
    records = []
    for backend in exp.backends:
        for a, b in exp.shapes:
            spec = validate_cluster_spec(exp.base.with_(
                backend=Backend.parse(backend), machines=a, nodes_per_machine=b))
            for value in exp.values:
                if exp.warmup:
                    try:
                        run_once(exp.kind, spec, value, exp.seed - 1, exp.timeout)
                    except Exception as exc:
                        log.info("warm-up failed: %r", exc)
                for rep in range(exp.repetitions):
                    rec = _timed(exp, spec, value, rep)
                    records.append(rec)
                    if progress is not None:
                        progress(rec)
    return records, summarize(records)


def _timed(exp, spec, value, rep):
    seed = exp.seed + rep
    rec = RunRecord(exp.experiment_id, spec.backend.value, spec.shape, value, rep,
                    seed, 0.0, Outcome.ERROR, mapping=_shape_mapping(spec))
    try:
        wall, problems, breakdown = run_once(exp.kind, spec, value, seed, exp.timeout)
    except TooManyThreads as exc:
        rec.outcome = Outcome.TOO_MANY_THREADS
        rec.detail = str(exc)
        return rec
    except Exception as exc:
        log.warning("run failed: %r", exc)
        rec.detail = "%s: %s" % (type(exc).__name__, exc)
        return rec
    rec.wall_s = wall
    rec.breakdown = breakdown
    if problems:
        rec.detail = "; ".join(problems[:3])
        return rec
    rec.oracle_ok = True
    rec.outcome = Outcome.OK
    return rec


def summarize(records):
    """CSV with one row per (experiment, backend, shape, value) cell."""
    cells = {}
    for r in records:
        cells.setdefault((r.experiment, r.backend, r.shape, r.value), []).append(r)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for key in cells:
        group = cells[key]
        times = [r.wall_s for r in group if r.outcome is Outcome.OK and r.oracle_ok]
        fail = len(group) - len(times)
        if times:
            mean = "%.6f" % statistics.fmean(times)
            sd = "%.6f" % (statistics.stdev(times) if len(times) > 1 else 0.0)
        else:
            mean = sd = "N/A"
        w.writerow(list(key) + [mean, sd, len(times), fail])
    return buf.getvalue()


def cells_acceptable(records):
    """Every cell has an Ok run or an expected TooManyThreads outcome."""
    cells = {}
    for r in records:
        key = (r.experiment, r.backend, r.shape, r.value)
        ok = r.outcome is Outcome.OK or (
            r.outcome is Outcome.TOO_MANY_THREADS
            and Backend.parse(r.backend).is_shared_memory)
        cells[key] = cells.get(key, False) or ok
    return all(cells.values())


def _int_list(text):
    return tuple(int(float(v)) for v in text.split(",") if v.strip())


def build_parser():
    p = argparse.ArgumentParser(prog="bench", description=__doc__.splitlines()[0])
    p.add_argument("kind", help="MrArraySweep, MrClusterSweep, BspAgentSweep "
                                "or BspClusterSweep")
    p.add_argument("--backends", default="a,smp,sms")
    p.add_argument("--shapes", default="2x2")
    p.add_argument("--values", required=True,
                   help="comma-separated sweep values (array size or agents per node)")
    p.add_argument("--reps", type=int, default=10)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--transport", choices=("inproc", "tcp"), default=None)
    p.add_argument("--config", help="key=value cluster config file")
    p.add_argument("--workers", type=int, default=None, help="workers per node")
    p.add_argument("--worker-cap", type=int, default=None)
    p.add_argument("--no-warmup", action="store_true")
    p.add_argument("--timeout", type=float, default=300.0)
    p.add_argument("--out", help="CSV path (default stdout)")
    p.add_argument("--records", help="write per-run records as JSON lines")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        base = load_cluster_spec(args.config) if args.config else ClusterSpec()
        overrides = {}
        if args.transport:
            overrides["transport"] = TransportKind.parse(args.transport)
        if args.workers is not None:
            overrides["workers_per_node"] = args.workers
        if args.worker_cap is not None:
            overrides["worker_cap"] = args.worker_cap
        base = validate_cluster_spec(base.with_(**overrides))
        backends = tuple(Backend.parse(b).value for b in args.backends.split(",")
                         if b.strip())
        exp = ExperimentSpec(ExperimentKind.parse(args.kind), backends,
                             _int_list(args.values),
                             tuple(parse_shape(s) for s in args.shapes.split(",")),
                             args.reps, args.seed, base, not args.no_warmup,
                             args.timeout)
    except (ConfigError, ValueError) as exc:
        print("bench: %s" % exc, file=sys.stderr)
        return 2

    def progress(rec):
        if args.verbose:
            print("%s %s %s %d rep %d: %s %.4fs %s" % (
                rec.experiment, rec.backend, rec.shape, rec.value, rec.rep,
                rec.outcome.value, rec.wall_s, rec.detail), file=sys.stderr)

    records, table = run_experiment(exp, progress)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(table)
    else:
        sys.stdout.write(table)
    if args.records:
        with open(args.records, "w") as fh:
            fh.writelines(r.to_json() + "\n" for r in records)
    return 0 if cells_acceptable(records) else 1


if __name__ == "__main__":
    sys.exit(main())

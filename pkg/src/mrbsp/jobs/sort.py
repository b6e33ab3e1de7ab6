"""Distributed array sort as one MapReduce round.

Keys are routed by value range: with global extrema known, node q receives
the values in ``[min + q*I, min + (q+1)*I - 1]`` where
``I = (max - min) // n + 1``. The identity partition ships each pair to the
node named by its key, every node sorts what it received, and node 0
gathers the sorted runs and cuts them back into balanced slices.
"""

import random
from typing import NamedTuple

from ..actors import ask_all
from ..core import MapReduceJob, block_sizes
from ..errors import EmptyInputError, RangeError, SinkMemoryError
from ..mapreduce import run_mapreduce
from ..shm import closure, current_runtime

DEFAULT_SINK_LIMIT = 50_000_000


class RangeInfo(NamedTuple):
    min: int
    max: int
    range: int
    interval: int


def range_info(lo, hi, n_nodes):
    if lo > hi:
        raise ValueError("min %r above max %r" % (lo, hi))
    return RangeInfo(lo, hi, hi - lo, (hi - lo) // n_nodes + 1)


def sort_destination(v, r, n_nodes):
    """Node whose value interval holds ``v``."""
    if not r.min <= v <= r.max:
        raise RangeError("value %r outside [%r, %r]" % (v, r.min, r.max))
    interval = (r.max - r.min) // n_nodes + 1
    return (v - r.min) // interval


def _fold_minmax(a, b):
    if a[0] is None:
        return b
    if b[0] is None:
        return a
    return (min(a[0], b[0]), max(a[1], b[1]))


@closure
def _local_minmax(ref):
    rt = current_runtime()
    elements = rt.deref(ref).elements
    if elements:
        rt.offer((min(elements), max(elements)))


def compute_range(array, cluster):
    """Global extrema of a distributed integer array."""
    n = cluster.n_nodes
    if cluster.places is not None:
        rt = cluster.places
        with rt.finish(reducer=_fold_minmax, initial=(None, None)) as fs:
            for p in range(n):
                rt.at_async(p, _local_minmax, array.refs[p])
        lo, hi = fs.result
    else:
        lo, hi = ask_all(cluster.actors, array.refs, ("minmax",), _fold_minmax,
                         timeout=cluster.ask_timeout, key=lambda m: m[2:])
    if lo is None:
        raise EmptyInputError("cannot sort an empty array")
    return range_info(lo, hi, n)


def sort_source(node, local):
    """Stage1 pairs ``(global_index, value)``."""
    if local is None:
        return []
    return zip(range(local.offset, local.stop), local.elements)


class SortMapper:
    """Emit ``(destination node, (value, global_index))``."""

    def __init__(self, r, n_nodes):
        self.r = r
        self.n_nodes = n_nodes

    def __call__(self, k1, v1):
        return [(sort_destination(v1, self.r, self.n_nodes), (v1, k1))]


def identity_partition(key, n_nodes):
    return key


def sort_reducer(k2, values):
    values.sort()
    return (k2, values)


def sort_sink(node, stage3):
    """Sorted values held by this node after Reduce."""
    if not stage3:
        return []
    (pair,) = stage3
    return [v for v, _ in pair.value]


class SortCoordinator:
    """Gather the sorted runs at node 0 and cut them into balanced slices."""

    def __init__(self, limit=DEFAULT_SINK_LIMIT):
        self.limit = limit

    def __call__(self, runs):
        total = sum(len(r) for r in runs)
        if total > self.limit:
            raise SinkMemoryError("sink would gather %d elements, limit %d"
                                  % (total, self.limit))
        merged = [v for run in runs for v in run]
        out, start = [], 0
        for size in block_sizes(total, len(runs)):
            out.append(merged[start:start + size])
            start += size
        return out


def sort_job(r, n_nodes, sink_limit=DEFAULT_SINK_LIMIT):
    return MapReduceJob(source=sort_source, mapper=SortMapper(r, n_nodes),
                        partition=identity_partition, reducer=sort_reducer,
                        sink=sort_sink, coordinator=SortCoordinator(sink_limit),
                        name="sort")


def distributed_sort(array, cluster, timeout=120.0, sink_limit=DEFAULT_SINK_LIMIT):
    """Sort ``array`` and return ``(sorted distributed array, MapReduceResult)``."""
    r = compute_range(array, cluster)
    res = run_mapreduce(sort_job(r, cluster.n_nodes, sink_limit), cluster,
                        inputs=array, timeout=timeout)
    return res.output, res


def random_array(seed, size, lo=-10**6, hi=10**6):
    """Seeded uniform integers in ``[lo, hi]``."""
    rng = random.Random(seed)
    return [rng.randint(lo, hi) for _ in range(size)]

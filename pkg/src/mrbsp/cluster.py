"""Live cluster handle: transport plus the runtime selected by ClusterSpec."""

import logging

from .actors import Actor, ActorSystem, ask_all
from .core import Backend, TransportKind, block_range, validate_cluster_spec
from .errors import AddressError
from .shm import PlaceRuntime, ShmDistArray
from .transport import TransportConfig, make_transport

log = logging.getLogger(__name__)


class Cluster:
    """Start with ``with Cluster(spec) as cluster:``.

    The driver (the code using the handle) lives on node 0, as the control
    loop of both runtimes does.
    """

    def __init__(self, spec, ask_timeout=30.0):
        self.spec = validate_cluster_spec(spec)
        self.n_nodes = spec.n_nodes()
        self.ask_timeout = ask_timeout
        self.transport = None
        self.actors = None
        self.places = None
        self._started = False

    @property
    def backend(self):
        return self.spec.backend

    def start(self):
        if self._started:
            return self
        spec = self.spec
        cfg = TransportConfig(max_chunk_bytes=spec.max_chunk_bytes,
                              endpoints=tuple(spec.endpoints))
        self.transport = make_transport(spec.transport, self.n_nodes, cfg)
        if spec.backend is Backend.ACTOR:
            self.actors = ActorSystem(self.transport, spec.workers_per_node).start()
        else:
            tcp = spec.transport is TransportKind.TCP
            self.places = PlaceRuntime(self.n_nodes, spec.workers_per_node,
                                       spec.worker_cap,
                                       self.transport if tcp else None).start()
        self._started = True
        return self

    def shutdown(self):
        if not self._started:
            return
        if self.actors is not None:
            self.actors.shutdown()
        if self.places is not None:
            self.places.shutdown()
        self.transport.close()
        self._started = False

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.shutdown()

    def dist_array(self, values):
        """Block-distribute ``values`` over the nodes."""
        if self.places is not None:
            return ShmDistArray.from_values(self.places, values)
        return ActorDistArray.from_values(self, values)

    def dist_array_from_slices(self, slices):
        if len(slices) != self.n_nodes:
            raise AddressError("%d slices for %d nodes" % (len(slices), self.n_nodes))
        if self.places is not None:
            return ShmDistArray.from_slices(self.places, slices)
        return ActorDistArray.from_slices(self, slices)

    def pool_stats(self):
        return self.places.pool_stats() if self.places is not None else []


class DistArrayNodeActor(Actor):
    """Holds one node's slice of a distributed array and answers queries on it."""

    def __init__(self, global_len, offset, elements):
        self.global_len = global_len
        self.offset = offset
        self.elements = list(elements)

    def local_indices(self):
        return range(self.offset, self.offset + len(self.elements))

    def receive(self, message):
        kind = message[0]
        if kind == "get":
            self.reply(("slice", self.node, self.offset, self.elements,
                        self.global_len))
        elif kind == "minmax":
            if self.elements:
                self.reply(("minmax", self.node,
                            min(self.elements), max(self.elements)))
            else:
                self.reply(("minmax", self.node, None, None))
        elif kind == "indices":
            r = self.local_indices()
            self.reply(("indices", self.node, r.start, r.stop))
        elif kind == "free":
            self.stop()
        else:
            raise ValueError("DistArrayNodeActor: unknown message %r" % (kind,))


class ActorDistArray:
    """Distributed array as one DistArrayNodeActor per node."""

    def __init__(self, cluster, global_len, refs):
        self.cluster = cluster
        self.global_len = global_len
        self.refs = list(refs)

    @classmethod
    def from_values(cls, cluster, values):
        values = list(values)
        n = cluster.n_nodes
        slices = []
        for p in range(n):
            r = block_range(len(values), n, p)
            slices.append(values[r.start:r.stop])
        return cls.from_slices(cluster, slices)

    @classmethod
    def from_slices(cls, cluster, slices):
        system = cluster.actors
        path = system.unique_path("dist-array")
        total = sum(len(s) for s in slices)
        refs, offset = [], 0
        for p, chunk in enumerate(slices):
            refs.append(system.spawn(p, path, DistArrayNodeActor(total, offset, chunk)))
            offset += len(chunk)
        return cls(cluster, total, refs)

    @property
    def n_nodes(self):
        return len(self.refs)

    def slices(self):
        got = ask_all(self.cluster.actors, self.refs, ("get",), _merge,
                      timeout=self.cluster.ask_timeout,
                      key=lambda r: {r[1]: r[3]})
        return [got[p] for p in range(self.n_nodes)]

    def to_list(self):
        return [x for s in self.slices() for x in s]

    def free(self):
        for ref in self.refs:
            self.cluster.actors.tell(ref, ("free",))


def _merge(a, b):
    return {**a, **b}

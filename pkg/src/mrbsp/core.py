"""Domain types shared by both engines and both runtimes."""

import enum
import pickle
from dataclasses import dataclass, field, fields, replace
from typing import Any, Callable, Iterable, NamedTuple, Optional

from .errors import ConfigError

PICKLE_PROTOCOL = 4


class NodeId(int):
    """Index of a cluster node; nodes are totally ordered 0..n_nodes-1."""

    def __new__(cls, index):
        index = int(index)
        if index < 0:
            raise ValueError("node index must be non-negative, got %d" % index)
        return super().__new__(cls, index)

    @property
    def index(self):
        return int(self)

    def __repr__(self):
        return "n%d" % self


class Backend(enum.Enum):
    ACTOR = "a"
    SHM_PARALLEL = "smp"
    SHM_SEQUENTIAL = "sms"

    @property
    def is_shared_memory(self):
        return self is not Backend.ACTOR

    @classmethod
    def parse(cls, text):
        text = str(text).strip().lower()
        aliases = {"actor": cls.ACTOR,
                   "sharedmemoryparallel": cls.SHM_PARALLEL,
                   "sharedmemorysequential": cls.SHM_SEQUENTIAL}
        if text in aliases:
            return aliases[text]
        try:
            return cls(text)
        except ValueError:
            raise ConfigError("unknown backend %r" % text) from None


class TransportKind(enum.Enum):
    INPROC = "inproc"
    TCP = "tcp"

    @classmethod
    def parse(cls, text):
        try:
            return cls(str(text).strip().lower())
        except ValueError:
            raise ConfigError("unknown transport %r" % text) from None


@dataclass(frozen=True)
class ClusterSpec:
    """An AxB cluster shape plus backend and transport selection."""

    machines: int = 1
    nodes_per_machine: int = 1
    workers_per_node: int = 2
    backend: Backend = Backend.ACTOR
    transport: TransportKind = TransportKind.INPROC
    worker_cap: int = 1000
    max_chunk_bytes: int = 60000
    endpoints: tuple = ()

    def n_nodes(self):
        return self.machines * self.nodes_per_machine

    @property
    def shape(self):
        return "%dx%d" % (self.machines, self.nodes_per_machine)

    def machine_of(self, node):
        return int(node) // self.nodes_per_machine

    def with_(self, **changes):
        return replace(self, **changes)


def validate_cluster_spec(spec):
    """Return ``spec`` unchanged or raise ConfigError."""
    for name in ("machines", "nodes_per_machine", "workers_per_node",
                 "worker_cap", "max_chunk_bytes"):
        value = getattr(spec, name)
        if not isinstance(value, int) or value < 1:
            raise ConfigError("%s must be a positive integer, got %r"
                              % (name, value))
    if spec.worker_cap < spec.workers_per_node:
        raise ConfigError("worker_cap (%d) < workers_per_node (%d)"
                          % (spec.worker_cap, spec.workers_per_node))
    if not isinstance(spec.backend, Backend):
        raise ConfigError("backend must be a Backend, got %r" % (spec.backend,))
    if not isinstance(spec.transport, TransportKind):
        raise ConfigError("transport must be a TransportKind, got %r"
                          % (spec.transport,))
    if spec.endpoints and len(spec.endpoints) != spec.n_nodes():
        raise ConfigError("%d endpoints given for %d nodes"
                          % (len(spec.endpoints), spec.n_nodes()))
    return spec


def parse_shape(text):
    """'8x4' -> (8, 4)."""
    try:
        a, b = text.lower().split("x")
        return int(a), int(b)
    except ValueError:
        raise ConfigError("bad cluster shape %r, expected AxB" % text) from None


_CONVERTERS = {
    "machines": int,
    "nodes_per_machine": int,
    "workers_per_node": int,
    "worker_cap": int,
    "max_chunk_bytes": int,
    "backend": Backend.parse,
    "transport": TransportKind.parse,
    "endpoints": lambda s: tuple(e.strip() for e in s.split(",") if e.strip()),
}


def parse_cluster_config(text, base=None):
    """Parse ``key = value`` lines into a validated ClusterSpec.

    ``shape = AxB`` is accepted as shorthand for machines/nodes_per_machine.
    Blank lines and ``#`` comments are ignored.
    """
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError("line %d: expected key=value, got %r" % (lineno, raw))
        key, value = (part.strip() for part in line.split("=", 1))
        key = key.lower().replace("-", "_")
        if key == "shape":
            values["machines"], values["nodes_per_machine"] = parse_shape(value)
            continue
        if key not in _CONVERTERS:
            raise ConfigError("line %d: unknown key %r" % (lineno, key))
        try:
            values[key] = _CONVERTERS[key](value)
        except ValueError as exc:
            raise ConfigError("line %d: %s" % (lineno, exc)) from None
    spec = replace(base or ClusterSpec(), **values)
    return validate_cluster_spec(spec)


def load_cluster_spec(path, base=None):
    with open(path) as fh:
        return parse_cluster_config(fh.read(), base)


class Stage(enum.IntEnum):
    STAGE1 = 1
    STAGE2 = 2
    STAGE3 = 3


class KvPair(NamedTuple):
    key: Any
    value: Any
    stage: Stage = Stage.STAGE1

    def to_bytes(self):
        return pickle.dumps(tuple(self), protocol=PICKLE_PROTOCOL)

    @classmethod
    def from_bytes(cls, data):
        key, value, stage = pickle.loads(data)
        return cls(key, value, Stage(stage))


class AgentId(NamedTuple):
    node: int
    local_index: int


def agent_id_to_global(agent, n_per_node):
    if not 0 <= agent.local_index < n_per_node:
        raise ValueError("local_index %d outside [0, %d)"
                         % (agent.local_index, n_per_node))
    if agent.node < 0:
        raise ValueError("negative node index %d" % agent.node)
    return agent.node * n_per_node + agent.local_index


def global_to_agent_id(index, n_per_node):
    if index < 0:
        raise ValueError("negative global agent index %d" % index)
    node, local = divmod(index, n_per_node)
    return AgentId(node, local)


def block_range(global_len, n_nodes, node):
    """Half-open index range owned by ``node`` under block distribution.

    The first ``global_len % n_nodes`` nodes hold one extra element.
    """
    if not 0 <= node < n_nodes:
        raise ValueError("node %d outside [0, %d)" % (node, n_nodes))
    base, extra = divmod(global_len, n_nodes)
    start = node * base + min(node, extra)
    return range(start, start + base + (1 if node < extra else 0))


def block_sizes(global_len, n_nodes):
    return [len(block_range(global_len, n_nodes, p)) for p in range(n_nodes)]


@dataclass(frozen=True)
class MapReduceJob:
    """User functions for one MapReduce round.

    ``source(node, local_data)`` yields Stage1 ``(k1, v1)`` pairs,
    ``mapper(k1, v1)`` yields Stage2 pairs, ``partition(k2, n_nodes)``
    picks a destination node, ``reducer(k2, values)`` returns one Stage3
    pair and ``sink(node, stage3_pairs)`` produces the node's result.

    When ``coordinator`` is set the sink results are gathered at node 0,
    ``coordinator(results_by_node)`` returns one payload per node and that
    payload becomes the node's final result.

    Every function is shipped to other nodes, so it must be picklable
    (module-level functions or instances of module-level classes).
    """

    source: Callable[[NodeId, Any], Iterable]
    mapper: Callable[[Any, Any], Iterable]
    partition: Callable[[Any, int], int]
    reducer: Callable[[Any, list], tuple]
    sink: Optional[Callable[[NodeId, list], Any]] = None
    coordinator: Optional[Callable[[list], list]] = None
    parallel_local: bool = False
    name: str = "mapreduce"


@dataclass(frozen=True)
class BspJob:
    """A BSP job: agents, the starting active set and a stop criterion.

    ``compute(agent, messages, outbox)`` runs once per active agent per
    phase. ``agent`` is a BspAgentState whose ``user_state`` may be
    replaced or mutated; ``outbox.send(to, msg)`` delivers for the next
    phase. Agents deactivate after compute unless they call
    ``outbox.keep_active()``.
    """

    agent_count_per_node: int
    compute: Callable
    initially_active: frozenset = field(default_factory=frozenset)
    init_state: Optional[Callable[[AgentId], Any]] = None
    stop_criterion: Optional[Callable[[int, int], bool]] = None
    max_phases: Optional[int] = None
    name: str = "bsp"

    def __post_init__(self):
        if self.agent_count_per_node < 1:
            raise ConfigError("agent_count_per_node must be positive")
        if self.max_phases is not None and self.max_phases < 1:
            raise ConfigError("max_phases must be positive when set")
        active = frozenset(AgentId(*a) for a in self.initially_active)
        for a in active:
            if not 0 <= a.local_index < self.agent_count_per_node:
                raise ConfigError("initially active agent %r out of range" % (a,))
        object.__setattr__(self, "initially_active", active)


def spec_summary(spec):
    return {f.name: (getattr(spec, f.name).value
                     if isinstance(getattr(spec, f.name), enum.Enum)
                     else getattr(spec, f.name))
            for f in fields(spec)}

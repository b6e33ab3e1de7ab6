"""Sparse-graph exploration as a BSP job, plus its sequential oracle.

Every vertex is an agent. An unvisited vertex that receives messages takes
the first one as its parent, messages all its out-neighbours and goes
idle; the start vertex is its own parent. The run ends when a phase
activates nobody.
"""

import random
from collections import deque
from dataclasses import dataclass

from ..core import AgentId, BspJob, agent_id_to_global, global_to_agent_id
from ..bsp import run_bsp


@dataclass
class Graph:
    """Directed graph over ``n_nodes * agents_per_node`` vertices.

    ``edges[node][local_index]`` is the tuple of out-neighbour AgentIds.
    """

    seed: int
    n_nodes: int
    agents_per_node: int
    edges: list

    @property
    def n_vertices(self):
        return self.n_nodes * self.agents_per_node

    def out_edges(self, v):
        return self.edges[v[0]][v[1]]

    def vertices(self):
        for p in range(self.n_nodes):
            for i in range(self.agents_per_node):
                yield AgentId(p, i)

    def edge_set(self):
        return {(v, t) for v in self.vertices() for t in self.out_edges(v)}


def generate_graph(seed, n_nodes, agents_per_node):
    """Random simple digraph: each vertex draws out-degree 0..3 uniformly,
    then that many distinct non-self targets."""
    if n_nodes < 1 or agents_per_node < 1:
        raise ValueError("need at least one node and one agent per node")
    rng = random.Random(seed)
    total = n_nodes * agents_per_node
    edges = []
    for p in range(n_nodes):
        row = []
        for i in range(agents_per_node):
            g = p * agents_per_node + i
            d = rng.randrange(4)
            if total < 2:
                d = 0
            d = min(d, total - 1)
            picks = rng.sample(range(total - 1), d)
            targets = tuple(global_to_agent_id(t + (t >= g), agents_per_node)
                            for t in picks)
            row.append(targets)
        edges.append(row)
    return Graph(seed, n_nodes, agents_per_node, edges)


def graph_from_edges(n_nodes, agents_per_node, pairs, seed=None):
    """Graph from ``(src, dst)`` global vertex numbers."""
    total = n_nodes * agents_per_node
    out = [[] for _ in range(total)]
    for s, t in pairs:
        if s == t or not (0 <= s < total and 0 <= t < total):
            raise ValueError("bad edge %r -> %r" % (s, t))
        if t in out[s]:
            raise ValueError("duplicate edge %r -> %r" % (s, t))
        out[s].append(t)
    edges = [[tuple(global_to_agent_id(t, agents_per_node)
                    for t in out[p * agents_per_node + i])
              for i in range(agents_per_node)] for p in range(n_nodes)]
    return Graph(seed, n_nodes, agents_per_node, edges)


class VertexState:
    __slots__ = ("parent", "edges")

    def __init__(self, edges, parent=None):
        self.edges = edges
        self.parent = parent

    def __getstate__(self):
        return (self.edges, self.parent)

    def __setstate__(self, state):
        self.edges, self.parent = state

    def __repr__(self):
        return "VertexState(parent=%r, edges=%r)" % (self.parent, self.edges)


def explore_compute(agent, messages, out):
    st = agent.user_state
    if st.parent is not None:
        return
    st.parent = messages[0] if messages else agent.id
    for t in st.edges:
        out.send(t, agent.id)


@dataclass
class Exploration:
    parents: dict
    phases: int
    reports: list
    wall: float


def exploration_job(graph, start):
    return BspJob(agent_count_per_node=graph.agents_per_node,
                  compute=explore_compute,
                  initially_active=frozenset([AgentId(*start)]),
                  name="explore")


def explore_graph(graph, start, cluster, timeout=120.0):
    """Parent map of the exploration tree rooted at ``start``."""
    start = AgentId(*start)
    if not (0 <= start.node < graph.n_nodes
            and 0 <= start.local_index < graph.agents_per_node):
        raise ValueError("start %r not in graph" % (start,))
    states = [[VertexState(e) for e in row] for row in graph.edges]
    res = run_bsp(exploration_job(graph, start), cluster, states=states,
                  timeout=timeout)
    parents = {}
    for p, row in enumerate(res.states):
        for i, st in enumerate(row):
            if st.parent is not None:
                parents[AgentId(p, i)] = AgentId(*st.parent)
    return Exploration(parents, res.phases, res.reports, res.wall)


# -- oracle --------------------------------------------------------------

def bfs_levels(graph, start):
    """Level of every vertex reachable from ``start``."""
    start = AgentId(*start)
    levels = {start: 0}
    queue = deque([start])
    while queue:
        v = queue.popleft()
        for t in graph.out_edges(v):
            if t not in levels:
                levels[t] = levels[v] + 1
                queue.append(t)
    return levels


def expected_phases(graph, start):
    """Phases with active agents: one per BFS level, plus one when the
    deepest level still has out-edges (those messages wake visited
    vertices for one idle phase)."""
    levels = bfs_levels(graph, start)
    depth = max(levels.values())
    tail = any(graph.out_edges(v) for v, lv in levels.items() if lv == depth)
    return depth + 1 + (1 if tail else 0)


def tree_problems(graph, start, parents):
    """Reasons ``parents`` is not a valid exploration tree (empty if valid)."""
    start = AgentId(*start)
    problems = []
    reach = bfs_levels(graph, start)
    if set(parents) != set(reach):
        problems.append("visited %d vertices, reachable %d"
                        % (len(parents), len(reach)))
    if parents.get(start) != start:
        problems.append("root %r is not self-parented" % (start,))
    for v, par in parents.items():
        if v == start:
            continue
        if v not in graph.out_edges(par):
            problems.append("parent edge %r -> %r not in graph" % (par, v))
    for v in parents:
        seen = set()
        while v != start:
            if v in seen or v not in parents:
                problems.append("parent chain from %r does not reach root" % (v,))
                break
            seen.add(v)
            v = parents[v]
    return problems


def global_parent_map(parents, agents_per_node):
    return {agent_id_to_global(v, agents_per_node): agent_id_to_global(p, agents_per_node)
            for v, p in parents.items()}

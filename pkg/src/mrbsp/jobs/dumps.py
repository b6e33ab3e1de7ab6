"""Line-oriented text dumps of arrays and graphs for cross-checking.

Array lines are ``index value``; graph lines are
``vertex_id parent_id edge,edge,edge`` with global vertex numbers and
``-`` for a missing parent or an empty edge list. The first line records
the generator seed.
"""

from ..core import agent_id_to_global, global_to_agent_id
from .graph import Graph


def _header(seed):
    return "# seed=%s\n" % ("none" if seed is None else seed)


def _read_header(lines):
    if not lines or not lines[0].startswith("# seed="):
        raise ValueError("missing seed header")
    raw = lines[0][len("# seed="):].strip()
    return None if raw == "none" else int(raw)


def dump_array(values, seed=None):
    return _header(seed) + "".join("%d %d\n" % (i, v) for i, v in enumerate(values))


def load_array(text):
    lines = text.splitlines()
    seed = _read_header(lines)
    values = []
    for n, line in enumerate(lines[1:]):
        i, v = line.split()
        if int(i) != n:
            raise ValueError("index %s out of sequence at line %d" % (i, n + 2))
        values.append(int(v))
    return seed, values


def dump_graph(graph, parents=None):
    parents = parents or {}
    n = graph.agents_per_node
    out = [_header(graph.seed), "# shape=%dx%d\n" % (graph.n_nodes, n)]
    for v in graph.vertices():
        par = parents.get(v)
        edges = ",".join(str(agent_id_to_global(t, n)) for t in graph.out_edges(v))
        out.append("%d %s %s\n" % (agent_id_to_global(v, n),
                                   "-" if par is None else agent_id_to_global(par, n),
                                   edges or "-"))
    return "".join(out)


def load_graph(text):
    """Inverse of dump_graph: returns ``(graph, parents)``."""
    lines = text.splitlines()
    seed = _read_header(lines)
    if len(lines) < 2 or not lines[1].startswith("# shape="):
        raise ValueError("missing shape header")
    n_nodes, n = (int(x) for x in lines[1][len("# shape="):].split("x"))
    flat, parents = [], {}
    for line in lines[2:]:
        vid, par, edges = line.split()
        v = global_to_agent_id(int(vid), n)
        if par != "-":
            parents[v] = global_to_agent_id(int(par), n)
        flat.append(() if edges == "-" else
                    tuple(global_to_agent_id(int(t), n) for t in edges.split(",")))
    if len(flat) != n_nodes * n:
        raise ValueError("expected %d vertices, got %d" % (n_nodes * n, len(flat)))
    edges = [flat[p * n:(p + 1) * n] for p in range(n_nodes)]
    return Graph(seed, n_nodes, n, edges), parents

"""The two bundled workloads: distributed sort and graph exploration."""

from .graph import (Exploration, Graph, VertexState, bfs_levels, explore_graph,
                    expected_phases, generate_graph, graph_from_edges,
                    tree_problems)
from .sort import (RangeInfo, compute_range, distributed_sort, random_array,
                   range_info, sort_destination)

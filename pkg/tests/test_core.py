import pytest
from hypothesis import given
from hypothesis import strategies as st

from mrbsp.core import (AgentId, Backend, BspJob, ClusterSpec, KvPair, NodeId,
                        Stage, TransportKind, agent_id_to_global, block_range,
                        block_sizes, global_to_agent_id, parse_cluster_config,
                        parse_shape, validate_cluster_spec)
from mrbsp.errors import ConfigError


def test_agent_id_to_global_examples():
    assert agent_id_to_global(AgentId(0, 0), 500) == 0
    assert agent_id_to_global(AgentId(2, 3), 500) == 1003
    assert agent_id_to_global(AgentId(7, 499), 500) == 3999


def test_agent_id_out_of_range():
    with pytest.raises(ValueError):
        agent_id_to_global(AgentId(0, 500), 500)


@given(st.integers(1, 2000), st.integers(1, 64), st.data())
def test_agent_id_round_trip(n_per, n_nodes, data):
    g = data.draw(st.integers(0, n_per * n_nodes - 1))
    a = global_to_agent_id(g, n_per)
    assert 0 <= a.local_index < n_per and a.node < n_nodes
    assert agent_id_to_global(a, n_per) == g


def test_agent_id_bijection_small():
    n_per, n_nodes = 7, 5
    seen = {agent_id_to_global(AgentId(p, i), n_per)
            for p in range(n_nodes) for i in range(n_per)}
    assert seen == set(range(n_per * n_nodes))


@pytest.mark.parametrize("a,b,w", [(8, 4, 4), (4, 8, 8)])
def test_validate_32_node_shapes(a, b, w):
    spec = ClusterSpec(machines=a, nodes_per_machine=b, workers_per_node=w)
    assert validate_cluster_spec(spec) is spec
    assert spec.n_nodes() == 32


@pytest.mark.parametrize("kw", [dict(machines=0, nodes_per_machine=4),
                                dict(nodes_per_machine=0),
                                dict(workers_per_node=0),
                                dict(workers_per_node=8, worker_cap=4)])
def test_validate_rejects(kw):
    with pytest.raises(ConfigError):
        validate_cluster_spec(ClusterSpec(**kw))


def test_node_ids_are_ordered_ints():
    ids = [NodeId(3), NodeId(0), NodeId(2)]
    assert sorted(ids) == [0, 2, 3]
    assert repr(NodeId(4)) == "n4"


def test_parse_shape():
    assert parse_shape("8x4") == (8, 4)
    with pytest.raises(ConfigError):
        parse_shape("8by4")


def test_parse_cluster_config():
    text = """
    # desk cluster
    shape = 2x4
    workers_per_node = 3
    backend = smp
    transport = tcp
    worker-cap = 16
    """
    spec = parse_cluster_config(text)
    assert (spec.machines, spec.nodes_per_machine) == (2, 4)
    assert spec.workers_per_node == 3 and spec.worker_cap == 16
    assert spec.backend is Backend.SHM_PARALLEL
    assert spec.transport is TransportKind.TCP
    with pytest.raises(ConfigError):
        parse_cluster_config("colour = blue")
    with pytest.raises(ConfigError):
        parse_cluster_config("shape 2x2")


def test_backend_parse_aliases():
    assert Backend.parse("A") is Backend.ACTOR
    assert Backend.parse("sms") is Backend.SHM_SEQUENTIAL
    assert Backend.SHM_PARALLEL.is_shared_memory
    assert not Backend.ACTOR.is_shared_memory
    with pytest.raises(ConfigError):
        Backend.parse("mpi")


keys = st.one_of(st.integers(), st.text(max_size=20), st.tuples(st.integers(), st.text()))
values = st.one_of(st.none(), st.integers(), st.floats(allow_nan=False),
                   st.binary(max_size=50), st.lists(st.integers(), max_size=10))


@given(keys, values, st.sampled_from(list(Stage)))
def test_kvpair_round_trip(k, v, stage):
    pair = KvPair(k, v, stage)
    back = KvPair.from_bytes(pair.to_bytes())
    assert back == pair and back.stage is stage


@pytest.mark.parametrize("total,n,node,expected", [
    (100, 4, 2, range(50, 75)),
    (0, 4, 0, range(0, 0)),
    (10, 4, 3, range(8, 10)),  # sizes 3, 3, 2, 2
    (10, 4, 0, range(0, 3)),
])
def test_block_range_examples(total, n, node, expected):
    assert block_range(total, n, node) == expected


@given(st.integers(0, 10_000), st.integers(1, 64))
def test_block_ranges_partition(total, n):
    ranges = [block_range(total, n, p) for p in range(n)]
    assert ranges[0].start == 0 and ranges[-1].stop == total
    for a, b in zip(ranges, ranges[1:]):
        assert a.stop == b.start
    sizes = block_sizes(total, n)
    assert sizes == sorted(sizes, reverse=True)
    assert max(sizes) - min(sizes) <= 1


def test_bsp_job_normalizes_active_set():
    job = BspJob(agent_count_per_node=4, compute=print, initially_active=[(1, 2)])
    assert job.initially_active == frozenset([AgentId(1, 2)])
    with pytest.raises(ConfigError):
        BspJob(agent_count_per_node=4, compute=print, initially_active=[(0, 4)])
    with pytest.raises(ConfigError):
        BspJob(agent_count_per_node=0, compute=print)

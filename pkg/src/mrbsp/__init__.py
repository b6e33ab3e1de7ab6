"""MapReduce and BSP engines over an actor runtime and a shared-memory runtime."""

from .core import (AgentId, Backend, BspJob, ClusterSpec, KvPair, MapReduceJob,
                   NodeId, Stage, TransportKind, agent_id_to_global,
                   global_to_agent_id, validate_cluster_spec)
from .cluster import Cluster
from .mapreduce import run_mapreduce
from .bsp import run_bsp

__version__ = "0.1.0"

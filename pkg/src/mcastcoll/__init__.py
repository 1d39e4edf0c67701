"""Multicast collective protocols on a deterministic packet-level fabric.

Reliable Broadcast and bandwidth-optimal Allgather built on unreliable
hardware multicast, point-to-point reference algorithms, per-link traffic
accounting, fault injection, and the matching analytic cost models.
"""

from .allgather import AllgatherConfig, ChainSchedule, allgather, build_schedule, verify_allgather
from .broadcast import (
    BroadcastConfig,
    ChunkBitmap,
    CollectiveResult,
    RunStats,
    StagingArea,
    SubgroupMap,
    broadcast,
    cutoff_deadline,
    map_blocks,
)
from .fabric import Datagram, Fabric, FaultModel, ReceiveQueue, SimInvariantError
from .harness import ExperimentConfig, RunRecord, compare, run_experiment, sweep
from .topology import (
    Link,
    MulticastTree,
    Topology,
    TrafficLedger,
    build_clos,
    compute_multicast_tree,
    route_unicast,
)
from .transport import ImmediateLayout, decode_immediate, encode_immediate

__version__ = "0.1.0"

"""Bandwidth-optimal Allgather composed from multicast Broadcasts.

The P participants are split into M parallel chains of length R = P/M.
At step i the active group is {i, R+i, 2*R+i, ..., (M-1)*R+i}: within each
chain the roots multicast one-by-one, activated by their predecessor's
completion signal, while all chains run concurrently.  Every rank therefore
acts as root exactly once and as leaf for all other sources; one RNR
barrier covers the whole operation and the usual cutoff / fetch-ring /
final-handshake machinery closes it out.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

from .broadcast import (
    BroadcastConfig,
    CollectiveEngine,
    CollectiveResult,
    SubgroupMap,
    make_payload,
    map_blocks,
)
from .fabric import Fabric
from .transport import ImmediateLayout

__all__ = [
    "ChainSchedule",
    "SubgroupMap",
    "AllgatherConfig",
    "build_schedule",
    "map_blocks",
    "allgather",
    "verify_allgather",
]


@dataclass(frozen=True)
class ChainSchedule:
    """M chains of length R = P/M; chain m holds ranks m*R .. m*R+R-1."""

    participants: int
    concurrent_roots: int
    chains: Tuple[Tuple[int, ...], ...]

    @property
    def steps(self) -> int:
        return self.participants // self.concurrent_roots

    def active_group(self, step: int) -> Tuple[int, ...]:
        """Ranks multicasting at schedule step i."""
        if not 0 <= step < self.steps:
            raise ValueError(f"step {step} outside [0, {self.steps})")
        return tuple(chain[step] for chain in self.chains)


def build_schedule(participants: int, concurrent_roots: int,
                   rank_order: Optional[Sequence[int]] = None) -> ChainSchedule:
    """Chain split of the rank ring into `concurrent_roots` parallel chains.

    `rank_order` optionally permutes which rank occupies each schedule slot
    (e.g. to align chains with leaf switches); default is ascending ranks.
    """
    if participants < 1:
        raise ValueError("participants must be >= 1")
    if concurrent_roots < 1:
        raise ValueError("concurrent_roots must be >= 1")
    if participants % concurrent_roots != 0:
        raise ValueError(
            f"participants ({participants}) must be divisible by the number of "
            f"concurrently multicasting roots ({concurrent_roots})")
    order = list(rank_order) if rank_order is not None else list(range(participants))
    if sorted(order) != list(range(participants)):
        raise ValueError("rank_order must be a permutation of 0..P-1")
    steps = participants // concurrent_roots
    chains = tuple(
        tuple(order[m * steps + i] for i in range(steps))
        for m in range(concurrent_roots)
    )
    return ChainSchedule(participants, concurrent_roots, chains)


def rack_aligned_order(participants: int, nodes_per_leaf: int) -> List[int]:
    """Identity order grouped by leaf switch; with ascending rank placement
    ranks are already rack-contiguous, so this is the identity permutation
    kept as an explicit hook for other placements."""
    return sorted(range(participants), key=lambda r: (r // nodes_per_leaf, r))


@dataclass
class AllgatherConfig:
    """Parameters of one multicast Allgather."""

    participants: Sequence[int]
    buffer_bytes: int
    mtu: int = 4096
    subgroups: int = 1
    concurrent_roots: int = 1
    alpha: Optional[float] = None
    transport: str = "UD"
    uc_chunk_bytes: int = 16384
    immediate: ImmediateLayout = field(default_factory=ImmediateLayout)
    rnr_barrier: bool = True
    leaf_setup_time: Optional[float] = None
    control_bytes: int = 64
    queue_depth: int = 8192
    rank_order: Optional[Sequence[int]] = None

    def __post_init__(self) -> None:
        self.participants = list(self.participants)
        p = len(self.participants)
        if p < 1:
            raise ValueError("need at least one participant")
        if p % self.concurrent_roots != 0:
            raise ValueError(
                f"participants ({p}) must be divisible by concurrent_roots "
                f"({self.concurrent_roots})")

    def broadcast_config(self) -> BroadcastConfig:
        return BroadcastConfig(
            root=self.participants[0],
            participants=self.participants,
            buffer_bytes=self.buffer_bytes,
            mtu=self.mtu,
            subgroups=self.subgroups,
            alpha=self.alpha,
            transport=self.transport,
            uc_chunk_bytes=self.uc_chunk_bytes,
            immediate=self.immediate,
            rnr_barrier=self.rnr_barrier,
            leaf_setup_time=self.leaf_setup_time,
            control_bytes=self.control_bytes,
            queue_depth=self.queue_depth,
        )


def allgather(config: AllgatherConfig, fabric: Fabric,
              send_buffers: Optional[Dict[int, bytes]] = None) -> CollectiveResult:
    """Run one multicast Allgather; every rank ends with the concatenation
    of all send buffers in rank order."""
    ranks = list(config.participants)
    if send_buffers is None:
        send_buffers = {r: make_payload(fabric.seed, r, config.buffer_bytes) for r in ranks}
    for r in ranks:
        if len(send_buffers[r]) != config.buffer_bytes:
            raise ValueError(f"send buffer of rank {r} is not {config.buffer_bytes} bytes")
    schedule = build_schedule(len(ranks), config.concurrent_roots, config.rank_order)
    chains = [[ranks[pos] for pos in chain] for chain in schedule.chains]
    engine = CollectiveEngine(
        config.broadcast_config(), fabric, sources=ranks, chains=chains,
        send_buffers=send_buffers, algorithm="mc_allgather", gather_layout=True)
    return engine.run()


def verify_allgather(result: CollectiveResult) -> Tuple[bool, Optional[Tuple[int, int, int]]]:
    """Check the concatenation property byte-for-byte on every rank.

    Returns (True, None) on success, else (False, (rank, source, offset))
    locating the first differing byte.
    """
    ranks = sorted(result.send_buffers)
    n = len(next(iter(result.send_buffers.values())))
    expected = b"".join(result.send_buffers[r] for r in ranks)
    for rank in ranks:
        got = bytes(result.recv_buffers[rank])
        if got == expected:
            continue
        for off, (a, b) in enumerate(zip(got, expected)):
            if a != b:
                return False, (rank, ranks[off // n], off % n)
        return False, (rank, ranks[min(len(got), len(expected)) // n], 0)
    return True, None

"""Closed-form traffic and resource models.

These are the analytic oracles the simulator ledgers are checked against:
NIC bandwidth shares of concurrent Allgather/Reduce-Scatter pairs, the
speedup of the multicast + in-network-compute configuration, addressable
buffer and bitmap/staging sizing, and exact per-link byte totals on the
two-level folded Clos with ascending-rank placement.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict


@dataclass(frozen=True)
class BandwidthShares:
    """Fractions of one NIC direction used by concurrent Allgather and
    Reduce-Scatter collectives."""

    ag_send: float
    ag_recv: float
    rs_send: float
    rs_recv: float


def bandwidth_shares_ring(participants: int) -> BandwidthShares:
    """Ring Allgather + ring Reduce-Scatter: each NIC direction is split
    evenly between the two collectives, independent of P."""
    if participants < 1:
        raise ValueError("participants must be >= 1")
    return BandwidthShares(0.5, 0.5, 0.5, 0.5)


def bandwidth_shares_mc_inc(participants: int) -> BandwidthShares:
    """Multicast Allgather + in-network-compute Reduce-Scatter: the
    Allgather send path needs only 1/P of the NIC, its receive path the
    remaining 1 - 1/P; the Reduce-Scatter shares mirror this."""
    if participants < 1:
        raise ValueError("participants must be >= 1")
    s = 1.0 / participants
    return BandwidthShares(ag_send=s, ag_recv=1.0 - s, rs_send=1.0 - s, rs_recv=s)


def speedup_mc_inc(participants: int) -> float:
    """Runtime speedup of {multicast AG, INC RS} over {ring AG, ring RS}:
    2 - 2/P, approaching 2x at scale."""
    if participants < 1:
        raise ValueError("participants must be >= 1")
    return 2.0 - 2.0 / participants


def max_addressable_buffer(psn_bits: int, mtu: int) -> int:
    """Largest buffer addressable by a PSN of `psn_bits` bits at one chunk
    per MTU: 2^psn_bits * mtu bytes."""
    if psn_bits < 1 or mtu < 1:
        raise ValueError("psn_bits and mtu must be >= 1")
    return (1 << psn_bits) * mtu


def bitmap_bytes(buffer_bytes: int, chunk_size: int) -> int:
    """Bytes of the received-chunk bitmap for a buffer: ceil(chunks / 8)."""
    if buffer_bytes < 1 or chunk_size < 1:
        raise ValueError("buffer_bytes and chunk_size must be >= 1")
    chunks = -(-buffer_bytes // chunk_size)
    return -(-chunks // 8)


def addressable_by_bitmap(bitmap_capacity_bytes: int, chunk_size: int) -> int:
    """Buffer size addressable by a bitmap of the given capacity:
    capacity * 8 chunks of chunk_size bytes."""
    if bitmap_capacity_bytes < 1 or chunk_size < 1:
        raise ValueError("inputs must be >= 1")
    return bitmap_capacity_bytes * 8 * chunk_size


def staging_bytes(queue_depth: int, mtu: int) -> int:
    """Staging-area footprint: one MTU slot per posted receive."""
    if queue_depth < 1 or mtu < 1:
        raise ValueError("queue_depth and mtu must be >= 1")
    return queue_depth * mtu


def _multicast_links_per_root(participants: int, leaf_switches: int) -> int:
    """Directed links one root's buffer traverses on the two-level Clos with
    full participation: root uplink + leaf-to-core + (L-1) core-to-leaf +
    (P-1) node downlinks.  A single leaf switch needs no core hop."""
    if leaf_switches == 1:
        return participants  # uplink + (P-1) downlinks
    return participants + leaf_switches


def _ring_links_per_step(participants: int, leaf_switches: int) -> int:
    """Directed links per ring step under ascending-rank placement: every
    rank sends one block to its right neighbor; L of those hops cross leaf
    switches (4 links), the rest stay local (2 links)."""
    crossings = leaf_switches if leaf_switches > 1 else 0
    return 2 * participants + 2 * crossings


def theoretical_link_bytes(algorithm: str, participants: int, buffer_bytes: int,
                           leaf_switches: int) -> int:
    """Exact fast-path link-byte total of one lossless run on the two-level
    Clos with full participation and ascending-rank placement."""
    if participants < 1 or buffer_bytes < 1 or leaf_switches < 1:
        raise ValueError("inputs must be >= 1")
    if participants % leaf_switches != 0:
        raise ValueError("full participation requires leaf_switches | participants")
    p, n, l = participants, buffer_bytes, leaf_switches
    if p == 1:
        return 0
    if algorithm == "mc_allgather":
        return n * p * _multicast_links_per_root(p, l)
    if algorithm == "mc_broadcast":
        return n * _multicast_links_per_root(p, l)
    if algorithm == "ring_allgather":
        return n * (p - 1) * _ring_links_per_step(p, l)
    if algorithm == "linear_allgather":
        per_leaf = p // l
        co_located = l * per_leaf * (per_leaf - 1)
        cross = p * (p - 1) - co_located
        return n * (2 * co_located + 4 * cross)
    raise ValueError(f"no closed form for algorithm {algorithm!r}")


def theoretical_traffic_ratio(participants: int) -> float:
    """Ring-over-multicast Allgather link-byte ratio: 2 - 2/P (the P + L
    per-root link count cancels), bounded by 2."""
    if participants < 1:
        raise ValueError("participants must be >= 1")
    return 2.0 - 2.0 / participants


def min_receive_workers(target_throughput: float, single_thread_throughput: float) -> int:
    """Lower bound on receive-path workers to sustain a target rate.

    ceil(target / single-thread); real scaling needs at least this many
    threads, typically more."""
    if target_throughput <= 0 or single_thread_throughput <= 0:
        raise ValueError("throughputs must be positive")
    return math.ceil(target_throughput / single_thread_throughput)


def model_table(participants: int, buffer_bytes: int, leaf_switches: int,
                psn_bits: int = 24, mtu: int = 4096,
                queue_depth: int = 8192) -> Dict[str, object]:
    """All analytic quantities for one parameter point (CLI `model`)."""
    shares_ring = bandwidth_shares_ring(participants)
    shares_mc = bandwidth_shares_mc_inc(participants)
    return {
        "participants": participants,
        "buffer_bytes": buffer_bytes,
        "leaf_switches": leaf_switches,
        "ring_share_send": shares_ring.ag_send,
        "ring_share_recv": shares_ring.ag_recv,
        "mc_ag_share_send": shares_mc.ag_send,
        "mc_ag_share_recv": shares_mc.ag_recv,
        "speedup_mc_inc": speedup_mc_inc(participants),
        "mc_allgather_link_bytes": theoretical_link_bytes(
            "mc_allgather", participants, buffer_bytes, leaf_switches),
        "ring_allgather_link_bytes": theoretical_link_bytes(
            "ring_allgather", participants, buffer_bytes, leaf_switches),
        "traffic_ratio": theoretical_traffic_ratio(participants),
        "max_addressable_buffer": max_addressable_buffer(psn_bits, mtu),
        "bitmap_bytes": bitmap_bytes(buffer_bytes, mtu),
        "staging_bytes": staging_bytes(queue_depth, mtu),
    }

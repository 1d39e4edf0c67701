"""Point-to-point reference collectives over the reliable transport.

Used for traffic comparison against the multicast algorithms: ring and
linear Allgather, binary-tree and k-nomial-tree Broadcast.  They run on the
reliable service (drops are hardware-recovered in production stacks), so
the recovery machinery is never exercised and results must be
byte-identical to the multicast counterparts for equal inputs.
"""

from __future__ import annotations

from typing import Dict, List, Optional, Sequence

from .broadcast import CollectiveResult, RunStats, make_payload
from .fabric import Fabric, SimInvariantError
from .topology import PAYLOAD, route_unicast


def _stats(algorithm: str, p: int, n: int, fabric: Fabric,
           sent: Dict[int, int], received: Dict[int, int]) -> RunStats:
    ledger = fabric.ledger
    stats = RunStats(
        algorithm=algorithm, participants=p, buffer_bytes=n,
        mtu=fabric.mtu, subgroups=1, chains=0,
        fastpath_bytes=sum(sent.values()),
        per_rank_send_bytes=dict(sent),
        per_rank_recv_bytes=dict(received),
        payload_link_bytes=ledger.kind_total(PAYLOAD),
        recovery_bytes=ledger.kind_total("recovery"),
        control_bytes=ledger.kind_total("control"),
        total_link_bytes=ledger.total(),
        rnr_drops=fabric.rnr_drops,
        fabric_drops=fabric.fabric_drops,
        max_concurrent_roots=0,
        sim_time=fabric.now,
    )
    return stats


def ring_allgather(participants: Sequence[int], buffer_bytes: int, fabric: Fabric,
                   send_buffers: Optional[Dict[int, bytes]] = None) -> CollectiveResult:
    """P-1 steps; at step s each rank forwards to its right neighbor the
    block it received at step s-1 (its own block at s=0)."""
    ranks = list(participants)
    p = len(ranks)
    if p < 2:
        raise ValueError("ring allgather needs at least 2 participants")
    n = buffer_bytes
    if send_buffers is None:
        send_buffers = {r: make_payload(fabric.seed, r, n) for r in ranks}
    pos = {r: i for i, r in enumerate(ranks)}
    recv = {r: bytearray(n * p) for r in ranks}
    for r in ranks:
        recv[r][pos[r] * n:(pos[r] + 1) * n] = send_buffers[r]
    sent = {r: 0 for r in ranks}
    received = {r: 0 for r in ranks}
    pending = {r: p - 1 for r in ranks}

    def forward(rank: int, block_pos: int, step: int) -> None:
        right = ranks[(pos[rank] + 1) % p]
        data = bytes(recv[rank][block_pos * n:(block_pos + 1) * n])
        sent[rank] += len(data)
        path = route_unicast(fabric.topology, rank, right)
        fabric.unicast_send(
            path, data, classification=PAYLOAD, source=rank,
            on_delivered=_make_install(right, block_pos, step))

    def _make_install(rank: int, block_pos: int, step: int):
        def install(message: bytes, t: float) -> None:
            recv[rank][block_pos * n:(block_pos + 1) * n] = message
            received[rank] += len(message)
            pending[rank] -= 1
            if step + 1 < p - 1:
                forward(rank, block_pos, step + 1)
        return install

    for r in ranks:
        forward(r, pos[r], 0)
    fabric.run()
    if any(v != 0 for v in pending.values()):
        raise SimInvariantError("ring allgather did not complete")
    stats = _stats("ring_allgather", p, n, fabric, sent, received)
    return CollectiveResult(stats, dict(send_buffers), recv, {})


def linear_allgather(participants: Sequence[int], buffer_bytes: int, fabric: Fabric,
                     send_buffers: Optional[Dict[int, bytes]] = None) -> CollectiveResult:
    """Every rank sends its buffer to every other rank directly:
    P*(P-1) transfers of N bytes."""
    ranks = list(participants)
    p = len(ranks)
    n = buffer_bytes
    if send_buffers is None:
        send_buffers = {r: make_payload(fabric.seed, r, n) for r in ranks}
    pos = {r: i for i, r in enumerate(ranks)}
    recv = {r: bytearray(n * p) for r in ranks}
    for r in ranks:
        recv[r][pos[r] * n:(pos[r] + 1) * n] = send_buffers[r]
    sent = {r: 0 for r in ranks}
    received = {r: 0 for r in ranks}

    def _make_install(rank: int, block_pos: int):
        def install(message: bytes, t: float) -> None:
            recv[rank][block_pos * n:(block_pos + 1) * n] = message
            received[rank] += len(message)
        return install

    for r in ranks:
        for dst in ranks:
            if dst == r:
                continue
            sent[r] += n
            path = route_unicast(fabric.topology, r, dst)
            fabric.unicast_send(path, send_buffers[r], classification=PAYLOAD,
                                source=r, on_delivered=_make_install(dst, pos[r]))
    fabric.run()
    stats = _stats("linear_allgather", p, n, fabric, sent, received)
    return CollectiveResult(stats, dict(send_buffers), recv, {})


def _run_tree_bcast(algorithm: str, root: int, participants: Sequence[int],
                    buffer_bytes: int, fabric: Fabric,
                    children_of, send_buffer: Optional[bytes]) -> CollectiveResult:
    ranks = list(participants)
    p = len(ranks)
    if root not in ranks:
        raise ValueError(f"root {root} not among participants")
    n = buffer_bytes
    if send_buffer is None:
        send_buffer = make_payload(fabric.seed, root, n)
    pos = {r: i for i, r in enumerate(ranks)}
    rel = lambda r: (pos[r] - pos[root]) % p
    unrel = lambda v: ranks[(v + pos[root]) % p]
    recv = {r: bytearray(n) for r in ranks}
    recv[root][:] = send_buffer
    sent = {r: 0 for r in ranks}
    received = {r: 0 for r in ranks}
    have = {root}

    def forward(rank: int) -> None:
        for child_rel in children_of(rel(rank), p):
            child = unrel(child_rel)
            sent[rank] += n
            path = route_unicast(fabric.topology, rank, child)
            fabric.unicast_send(path, bytes(recv[rank]), classification=PAYLOAD,
                                source=rank, on_delivered=_make_install(child))

    def _make_install(rank: int):
        def install(message: bytes, t: float) -> None:
            recv[rank][:] = message
            received[rank] += len(message)
            have.add(rank)
            forward(rank)
        return install

    forward(root)
    fabric.run()
    if len(have) != p:
        raise SimInvariantError(f"{algorithm} reached only {len(have)} of {p} ranks")
    stats = _stats(algorithm, p, n, fabric, sent, received)
    return CollectiveResult(stats, {root: bytes(send_buffer)}, recv, {})


def binary_tree_bcast(root: int, participants: Sequence[int], buffer_bytes: int,
                      fabric: Fabric, send_buffer: Optional[bytes] = None) -> CollectiveResult:
    """Classic binary tree: children of relative node v are 2v+1 and 2v+2."""

    def children(v: int, p: int) -> List[int]:
        return [c for c in (2 * v + 1, 2 * v + 2) if c < p]

    return _run_tree_bcast("binary_tree_bcast", root, participants, buffer_bytes,
                           fabric, children, send_buffer)


def knomial_children(v: int, p: int, k: int) -> List[int]:
    """Children of relative node v in a k-nomial tree of p nodes.

    A node owns the subtrees below its lowest non-zero base-k digit; larger
    subtrees are served first.  k = p degenerates to a star."""
    # position of the lowest non-zero base-k digit (cap for the root)
    t0 = 0
    x = v
    while x and x % k == 0:
        x //= k
        t0 += 1
    if v == 0:
        t0 = 0
        span = 1
        while span < p:
            span *= k
            t0 += 1
    out = []
    for t in range(t0 - 1, -1, -1):
        step = k ** t
        for j in range(1, k):
            c = v + j * step
            if c < p:
                out.append(c)
    return out


def knomial_bcast(root: int, participants: Sequence[int], buffer_bytes: int,
                  fabric: Fabric, k: int = 4,
                  send_buffer: Optional[bytes] = None) -> CollectiveResult:
    """k-nomial tree broadcast; each non-leaf forwards N bytes per child."""
    if k < 2:
        raise ValueError("k must be >= 2")

    def children(v: int, p: int) -> List[int]:
        return knomial_children(v, p, k)

    return _run_tree_bcast("knomial_bcast", root, participants, buffer_bytes,
                           fabric, children, send_buffer)

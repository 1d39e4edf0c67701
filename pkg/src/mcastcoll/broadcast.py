"""Reliable multicast Broadcast: fragmentation, reassembly, recovery.

The sender chunks its buffer into MTU-sized datagrams tagged with a packet
sequence number (PSN) in the immediate word and multicasts them after an
RNR barrier.  Receivers reassemble via a staging ring and a per-block chunk
bitmap; a cutoff timer bounds the wait, after which missing chunks are
fetched chunk-by-chunk from ring neighbors over the reliable path, and a
final ring handshake releases the buffer.

The same engine runs the composed all-source collective: each rank may hold
a send role (its own block) and a receive role (one block state per remote
source and subgroup); a chain schedule decides when send roles activate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

from .fabric import Datagram, Fabric, ReceiveQueue, SimInvariantError, post_credits
from .topology import CONTROL, compute_multicast_tree, route_unicast
from .transport import (
    ImmediateLayout,
    RCEndpoint,
    UCEndpoint,
    UDEndpoint,
    decode_immediate,
    encode_immediate,
)

# Receive-side phases, in legal order (recovery may be skipped).
IDLE = "idle"
RNR_SYNC = "rnr_sync"
RECEIVING = "receiving"
RECOVERY = "recovery"
HANDSHAKE = "handshake"
DONE = "done"

_ALLOWED_TRANSITIONS = {
    IDLE: {RNR_SYNC},
    RNR_SYNC: {RECEIVING},
    RECEIVING: {RECOVERY, HANDSHAKE},
    RECOVERY: {HANDSHAKE},
    HANDSHAKE: {DONE},
}


class ChunkBitmap:
    """Tracks received chunks of one block; the only state that scales with
    buffer size.  Bit index = PSN relative to the block base."""

    __slots__ = ("nbits", "_words", "_popcount")

    def __init__(self, nbits: int):
        if nbits < 0:
            raise ValueError("nbits must be >= 0")
        self.nbits = nbits
        self._words = bytearray((nbits + 7) // 8)
        self._popcount = 0

    def set(self, i: int) -> bool:
        """Set bit i; returns True if it was newly set (idempotent)."""
        if not 0 <= i < self.nbits:
            raise IndexError(f"bit {i} outside [0, {self.nbits})")
        byte, mask = i >> 3, 1 << (i & 7)
        if self._words[byte] & mask:
            return False
        self._words[byte] |= mask
        self._popcount += 1
        return True

    def test(self, i: int) -> bool:
        if not 0 <= i < self.nbits:
            raise IndexError(f"bit {i} outside [0, {self.nbits})")
        return bool(self._words[i >> 3] & (1 << (i & 7)))

    @property
    def popcount(self) -> int:
        return self._popcount

    @property
    def complete(self) -> bool:
        return self._popcount == self.nbits

    def missing(self) -> List[int]:
        return [i for i in range(self.nbits) if not self.test(i)]

    @property
    def nbytes(self) -> int:
        return len(self._words)


class StagingArea:
    """Ring of MTU-sized slots where datagrams land before the copy into the
    user buffer.  A slot is never overwritten before its chunk was copied
    out; credit accounting keeps occupancy within capacity."""

    def __init__(self, slots: int, slot_bytes: int):
        if slots < 1 or slot_bytes < 1:
            raise ValueError("slots and slot_bytes must be >= 1")
        self.slots = slots
        self.slot_bytes = slot_bytes
        self._ring: List[Optional[bytes]] = [None] * slots
        self.head = 0
        self.in_use = 0

    def put(self, data: bytes) -> int:
        if len(data) > self.slot_bytes:
            raise ValueError(f"chunk of {len(data)} bytes exceeds slot size {self.slot_bytes}")
        idx = self.head
        if self._ring[idx] is not None:
            raise SimInvariantError("staging slot overwritten before copy-out")
        self._ring[idx] = data
        self.head = (idx + 1) % self.slots
        self.in_use += 1
        return idx

    def take(self, idx: int) -> bytes:
        data = self._ring[idx]
        if data is None:
            raise SimInvariantError(f"staging slot {idx} taken twice")
        self._ring[idx] = None
        self.in_use -= 1
        return data

    @property
    def capacity_bytes(self) -> int:
        return self.slots * self.slot_bytes


@dataclass(frozen=True)
class BlockRange:
    """Contiguous chunk-aligned byte range of a send buffer owned by one
    multicast subgroup."""

    subgroup_id: int
    chunk_base: int
    chunk_count: int
    byte_base: int
    byte_len: int


@dataclass(frozen=True)
class SubgroupMap:
    """Disjoint contiguous blocks covering [0, total_bytes)."""

    total_bytes: int
    chunk_size: int
    blocks: Tuple[BlockRange, ...]

    @property
    def total_chunks(self) -> int:
        return sum(b.chunk_count for b in self.blocks)


def chunk_count(total_bytes: int, chunk_size: int) -> int:
    return -(-total_bytes // chunk_size)


def chunk_len(total_bytes: int, chunk_size: int, index: int) -> int:
    return min(chunk_size, total_bytes - index * chunk_size)


def map_blocks(total_bytes: int, subgroups: int, chunk_size: int) -> SubgroupMap:
    """Split the buffer into `subgroups` contiguous chunk-aligned blocks
    whose chunk counts differ by at most one."""
    if total_bytes < 1:
        raise ValueError("buffer must be at least 1 byte")
    if chunk_size < 1:
        raise ValueError("chunk_size must be >= 1")
    if subgroups < 1:
        raise ValueError("need at least one subgroup")
    chunks = chunk_count(total_bytes, chunk_size)
    if subgroups > chunks:
        raise ValueError(f"{subgroups} subgroups exceed {chunks} chunks")
    q, r = divmod(chunks, subgroups)
    blocks = []
    base = 0
    for j in range(subgroups):
        n = q + (1 if j < r else 0)
        byte_base = base * chunk_size
        byte_end = min((base + n) * chunk_size, total_bytes)
        blocks.append(BlockRange(j, base, n, byte_base, byte_end - byte_base))
        base += n
    return SubgroupMap(total_bytes, chunk_size, tuple(blocks))


def cutoff_deadline(buffer_bytes: int, link_bandwidth: float, alpha: float) -> float:
    """Receive-side timeout: transmission time of the expected bytes through
    one link plus the slack alpha."""
    if link_bandwidth <= 0:
        raise ValueError("link_bandwidth must be positive")
    if buffer_bytes < 1:
        raise ValueError("buffer_bytes must be >= 1")
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    return buffer_bytes / link_bandwidth + alpha


def default_alpha(participants: int, hop_latency: float) -> float:
    return 10.0 * participants * hop_latency


def barrier_rounds(participants: int) -> int:
    return max(0, math.ceil(math.log2(participants))) if participants > 1 else 0


@dataclass
class BroadcastConfig:
    """Parameters of one reliable multicast Broadcast."""

    root: int
    participants: Sequence[int]
    buffer_bytes: int
    mtu: int = 4096
    subgroups: int = 1
    alpha: Optional[float] = None          # None -> 10 * P * hop_latency
    transport: str = "UD"                  # "UD" or "UC"
    uc_chunk_bytes: int = 16384
    immediate: ImmediateLayout = field(default_factory=ImmediateLayout)
    collective_id: int = 0
    rnr_barrier: bool = True
    leaf_setup_time: Optional[float] = None  # credit-post stagger, barrier off
    control_bytes: int = 64
    queue_depth: int = 8192

    def __post_init__(self) -> None:
        self.participants = list(self.participants)
        if len(set(self.participants)) != len(self.participants):
            raise ValueError("participants must be distinct")
        if self.root not in self.participants:
            raise ValueError(f"root {self.root} not among participants")
        if self.buffer_bytes < 1:
            raise ValueError("buffer_bytes must be >= 1")
        if self.transport not in ("UD", "UC"):
            raise ValueError(f"unknown transport {self.transport!r}")
        if self.subgroups < 1:
            raise ValueError("subgroups must be >= 1")
        if self.queue_depth < 1:
            raise ValueError("queue_depth must be >= 1")
        if self.control_bytes < 1:
            raise ValueError("control_bytes must be >= 1")

    @property
    def chunk_size(self) -> int:
        return self.mtu if self.transport == "UD" else self.uc_chunk_bytes

    @property
    def num_chunks(self) -> int:
        return chunk_count(self.buffer_bytes, self.chunk_size)


@dataclass
class RootState:
    """Send-side state of one broadcasting rank."""

    rank: int
    send_buffer: bytes
    next_psn: Dict[int, int]     # subgroup -> next PSN to inject
    phase: str = IDLE            # IDLE -> sending -> done
    start_time: float = 0.0
    finish_time: float = 0.0


class LeafState:
    """Receive-side state of one rank: per-block bitmaps, staging, phases."""

    def __init__(self, rank: int, queue_depth: int, slot_bytes: int):
        self.rank = rank
        self.phase = IDLE
        self.blocks: Dict[Tuple[int, int], "_BlockState"] = {}
        self.staging = StagingArea(queue_depth, slot_bytes)
        self.queue = ReceiveQueue(rank, queue_depth)
        self.cutoff_at: Optional[float] = None
        self.entered_receiving_at: Optional[float] = None
        self.recv_payload_bytes = 0
        self.recovered_bytes = 0
        self.protocol_errors = 0
        self.final_sent = False
        self.final_received = False
        self.completion_time: Optional[float] = None
        # recovery bookkeeping
        self.recovery_queue: List[Tuple[int, int]] = []
        self.recovery_block: Optional[Tuple[int, int]] = None
        self.recovery_depth = 0
        self.max_recovery_depth = 0
        self.pending_reads = 0

    def advance_phase(self, new_phase: str) -> None:
        if new_phase not in _ALLOWED_TRANSITIONS.get(self.phase, ()):
            raise SimInvariantError(f"illegal phase transition {self.phase} -> {new_phase}")
        self.phase = new_phase

    @property
    def receive_complete(self) -> bool:
        return all(b.bitmap.complete for b in self.blocks.values())


class _BlockState:
    """One (source, subgroup) block a rank expects to receive."""

    __slots__ = ("source", "subgroup", "chunk_base", "nchunks", "bitmap")

    def __init__(self, source: int, subgroup: int, chunk_base: int, nchunks: int):
        self.source = source
        self.subgroup = subgroup
        self.chunk_base = chunk_base
        self.nchunks = nchunks
        self.bitmap = ChunkBitmap(nchunks)

    def missing_psns(self) -> List[int]:
        return [self.chunk_base + i for i in self.bitmap.missing()]


@dataclass
class RunStats:
    """Aggregate outcome of one collective run."""

    algorithm: str
    participants: int
    buffer_bytes: int
    mtu: int
    subgroups: int
    chains: int
    root: Optional[int] = None   # single-source collectives only
    fastpath_bytes: int = 0
    recovery_bytes: int = 0
    control_bytes: int = 0
    payload_link_bytes: int = 0
    total_link_bytes: int = 0
    per_rank_send_bytes: Dict[int, int] = field(default_factory=dict)
    per_rank_recv_bytes: Dict[int, int] = field(default_factory=dict)
    rnr_drops: int = 0
    fabric_drops: int = 0
    protocol_errors: int = 0
    recovered_chunk_bytes: int = 0
    max_recovery_depth: int = 0
    max_concurrent_roots: int = 0
    barrier_messages: int = 0
    final_messages: int = 0
    sim_time: float = 0.0

    def to_json_dict(self) -> dict:
        from dataclasses import asdict
        doc = asdict(self)
        doc["per_rank_send_bytes"] = {str(k): v for k, v in self.per_rank_send_bytes.items()}
        doc["per_rank_recv_bytes"] = {str(k): v for k, v in self.per_rank_recv_bytes.items()}
        return doc


@dataclass
class CollectiveResult:
    """Buffers and stats of one completed run."""

    stats: RunStats
    send_buffers: Dict[int, bytes]
    recv_buffers: Dict[int, bytearray]
    root_intervals: Dict[int, Tuple[float, float]]

    def buffer_for(self, rank: int) -> bytes:
        """The rank's completed view: received buffer, or its own send
        buffer when it contributed the only block."""
        buf = self.recv_buffers.get(rank)
        if buf is not None and len(buf):
            return bytes(buf)
        return self.send_buffers[rank]


def max_interval_overlap(intervals: Sequence[Tuple[float, float]]) -> int:
    """Maximum number of intervals covering a single instant (closed start,
    open end; touching intervals do not overlap)."""
    points = []
    for start, end in intervals:
        points.append((start, 1))
        points.append((end, -1))
    points.sort()
    best = cur = 0
    for _, delta in points:
        cur += delta
        best = max(best, cur)
    return best


class CollectiveEngine:
    """Event-driven run of one multicast collective.

    `sources` lists the ranks that broadcast a block; `chains` orders their
    activation (each chain runs its roots one-by-one, all chains in
    parallel).  A plain Broadcast is the single-source, single-chain case.
    For the all-source case every rank assembles one block per remote
    source into its receive buffer at source_index * buffer_bytes.
    """

    def __init__(self, config: BroadcastConfig, fabric: Fabric,
                 sources: Sequence[int], chains: Sequence[Sequence[int]],
                 send_buffers: Dict[int, bytes], algorithm: str,
                 gather_layout: bool = False):
        self.cfg = config
        self.fabric = fabric
        self.topology = fabric.topology
        self.sources = list(sources)
        self.chains = [list(c) for c in chains]
        self.algorithm = algorithm
        self.ranks = list(config.participants)
        self.pos = {r: i for i, r in enumerate(self.ranks)}
        p = len(self.ranks)

        if fabric.mtu != config.mtu:
            raise ValueError("fabric MTU differs from collective MTU")
        layout = config.immediate
        if config.num_chunks - 1 > layout.max_psn:
            raise ValueError(
                f"buffer of {config.num_chunks} chunks exceeds the "
                f"{layout.psn_bits}-bit PSN space")

        self.block_map = map_blocks(config.buffer_bytes, config.subgroups, config.chunk_size)
        self.cid_of_source: Dict[int, int] = {}
        self.source_of_cid: Dict[int, int] = {}
        for s in self.sources:
            cid = config.collective_id if len(self.sources) == 1 else s
            if cid > layout.max_collective_id:
                raise ValueError(
                    f"collective id {cid} does not fit in {layout.collective_id_bits} bits")
            self.cid_of_source[s] = cid
            self.source_of_cid[cid] = s

        # one tree per (source, subgroup); the subgroup fixes the core switch
        self.trees = {
            (s, b.subgroup_id): compute_multicast_tree(
                fabric.topology, s, self.ranks, b.subgroup_id)
            for s in self.sources for b in self.block_map.blocks
        }

        # gather layout: every rank assembles one block per source at
        # source_position * buffer_bytes; plain broadcast receives one block
        self.gather_layout = gather_layout
        self.leaves: Dict[int, LeafState] = {}
        self.roots: Dict[int, RootState] = {}
        self.send_buffers = dict(send_buffers)
        self.recv_buffers: Dict[int, bytearray] = {}
        self.successor: Dict[int, int] = {}
        for chain in self.chains:
            for a, b in zip(chain, chain[1:]):
                self.successor[a] = b
        self.injected_bytes: Dict[int, int] = {r: 0 for r in self.ranks}
        self.barrier_round: Dict[int, int] = {}
        self.barrier_seen: Dict[int, set] = {}
        self.barrier_messages = 0
        self.final_messages = 0
        self._uc_endpoints: Dict[int, UCEndpoint] = {}
        self._ud_endpoints: Dict[int, UDEndpoint] = {}
        # slow-path ring: exactly two standing reliable connections per rank
        self.rc_ring: Dict[Tuple[int, int], RCEndpoint] = {}
        if p > 1:
            for r in self.ranks:
                for peer in (self._neighbor_left(r, 1), self._neighbor_left(r, -1)):
                    if peer != r:
                        self.rc_ring[(r, peer)] = RCEndpoint(fabric, r, peer)

        slot = config.chunk_size if config.transport == "UC" else config.mtu
        for r in self.ranks:
            leaf = LeafState(r, config.queue_depth, slot)
            for s in self.sources:
                if s == r:
                    continue
                for b in self.block_map.blocks:
                    leaf.blocks[(s, b.subgroup_id)] = _BlockState(
                        s, b.subgroup_id, b.chunk_base, b.chunk_count)
            self.leaves[r] = leaf
            fabric.register_datagram_handler(r, self._on_datagram, leaf.queue)
            fabric.register_message_handler(r, self._on_message)
            if self.gather_layout:
                self.recv_buffers[r] = bytearray(config.buffer_bytes * p)
            else:
                self.recv_buffers[r] = bytearray(
                    0 if r in self.sources else config.buffer_bytes)

        for s in self.sources:
            self.roots[s] = RootState(s, self.send_buffers[s],
                                      {b.subgroup_id: b.chunk_base for b in self.block_map.blocks})
            ep_cls = UDEndpoint if config.transport == "UD" else UCEndpoint
            ep = ep_cls(fabric, s, self.leaves[s].queue)
            for b in self.block_map.blocks:
                ep.attach(b.subgroup_id, self.trees[(s, b.subgroup_id)])
            if config.transport == "UD":
                self._ud_endpoints[s] = ep
            else:
                self._uc_endpoints[s] = ep

        if self.gather_layout:
            for r in self.ranks:
                base = self.pos[r] * config.buffer_bytes
                self.recv_buffers[r][base:base + config.buffer_bytes] = self.send_buffers[r]

        hop = self.topology.hop_latency
        self.alpha = config.alpha if config.alpha is not None else default_alpha(p, hop)
        self.setup_step = (config.leaf_setup_time if config.leaf_setup_time is not None
                           else 10.0 * hop)
        self._n_done = 0

    # -- startup -----------------------------------------------------------

    def start(self) -> None:
        p = len(self.ranks)
        initial_roots = {chain[0] for chain in self.chains if chain}
        for r in self.ranks:
            self.leaves[r].advance_phase(RNR_SYNC)
        if self.cfg.rnr_barrier:
            for r in self.ranks:
                self._post_initial_credits(r)
            if p == 1:
                self._barrier_done(self.ranks[0], 0.0)
            else:
                for r in self.ranks:
                    self.barrier_round[r] = 0
                    self.barrier_seen[r] = set()
                for r in self.ranks:
                    self._send_barrier_token(r, 0)
        else:
            # root start forced early: sources begin immediately, every rank
            # becomes receive-ready only after its staggered setup delay
            for i, r in enumerate(self.ranks):
                if r in initial_roots:
                    self._post_initial_credits(r)
                    self._barrier_done(r, 0.0)
                else:
                    delay = self.setup_step * (i + 1)
                    self.fabric.schedule_at(delay, self._make_ready(r), "setup")

    def _make_ready(self, rank: int) -> Callable[[float], None]:
        def ready(t: float) -> None:
            self._post_initial_credits(rank)
            self._barrier_done(rank, t)
        return ready

    def _post_initial_credits(self, rank: int) -> None:
        leaf = self.leaves[rank]
        expected = sum(b.nchunks for b in leaf.blocks.values())
        credits = min(expected, leaf.queue.capacity)
        if credits > 0:
            post_credits(leaf.queue, credits)

    # -- RNR barrier (dissemination exchange over the reliable plane) -------

    def _send_barrier_token(self, rank: int, round_: int) -> None:
        p = len(self.ranks)
        partner = self.ranks[(self.pos[rank] + (1 << round_)) % p]
        self.barrier_messages += 1
        self._send_control(rank, partner, {"type": "barrier", "round": round_})

    def _on_barrier_token(self, rank: int, round_: int, t: float) -> None:
        seen = self.barrier_seen[rank]
        seen.add(round_)
        rounds = barrier_rounds(len(self.ranks))
        while self.barrier_round[rank] in seen:
            self.barrier_round[rank] += 1
            nxt = self.barrier_round[rank]
            if nxt < rounds:
                self._send_barrier_token(rank, nxt)
            else:
                self._barrier_done(rank, t)
                break

    def _barrier_done(self, rank: int, t: float) -> None:
        leaf = self.leaves[rank]
        leaf.advance_phase(RECEIVING)
        leaf.entered_receiving_at = t
        expected_bytes = sum(
            _block_bytes_len(self.block_map, b) for b in leaf.blocks.values())
        if expected_bytes > 0:
            bw = self.topology.node_downlink(rank).bandwidth
            leaf.cutoff_at = t + cutoff_deadline(expected_bytes, bw, self.alpha)
            self.fabric.schedule_at(leaf.cutoff_at, self._make_cutoff(rank), "cutoff")
        for chain in self.chains:
            if chain and chain[0] == rank:
                self._start_sending(rank, t)
        self._check_completion(rank)

    def _make_cutoff(self, rank: int) -> Callable[[float], None]:
        def fire(t: float) -> None:
            leaf = self.leaves[rank]
            if leaf.phase != RECEIVING or leaf.receive_complete:
                return
            leaf.advance_phase(RECOVERY)
            self.fabric._emit("recovery_start", node=rank)
            leaf.recovery_queue = [k for k in sorted(leaf.blocks)
                                   if not leaf.blocks[k].bitmap.complete]
            self._next_recovery_block(rank)
        return fire

    # -- send path -----------------------------------------------------------

    def _start_sending(self, rank: int, t: float) -> None:
        root = self.roots[rank]
        root.phase = "sending"
        root.start_time = t
        self.fabric._emit("root_start", node=rank)
        if len(self.ranks) == 1:
            # solo participant: nothing to deliver, zero traffic
            self.fabric.schedule_at(t, self._make_send_complete(rank), "send_complete")
            return
        cfg = self.cfg
        cid = self.cid_of_source[rank]
        buf = root.send_buffer
        inject_done = t
        for b in self.block_map.blocks:
            for i in range(b.chunk_count):
                psn = b.chunk_base + i
                off = psn * cfg.chunk_size
                payload = buf[off:off + chunk_len(cfg.buffer_bytes, cfg.chunk_size, psn)]
                imm = encode_immediate(psn, cid, cfg.immediate)
                if cfg.transport == "UD":
                    done = self._ud_endpoints[rank].send(b.subgroup_id, payload, imm, (rank, psn))
                else:
                    done = self._uc_endpoints[rank].write_with_imm(
                        b.subgroup_id, payload, imm, (rank, psn))
                self.injected_bytes[rank] += len(payload)
                root.next_psn[b.subgroup_id] = psn + 1
                inject_done = max(inject_done, done)
        self.fabric.schedule_at(inject_done, self._make_send_complete(rank), "send_complete")

    def _make_send_complete(self, rank: int) -> Callable[[float], None]:
        def done(t: float) -> None:
            root = self.roots[rank]
            root.phase = "done"
            root.finish_time = t
            self.fabric._emit("root_done", node=rank)
            succ = self.successor.get(rank)
            if succ is not None:
                self._send_control(rank, succ, {"type": "activation"})
            self._check_completion(rank)
        return done

    # -- receive path --------------------------------------------------------

    def _on_datagram(self, rank: int, dgram: Datagram, t: float) -> None:
        leaf = self.leaves[rank]
        try:
            psn, cid = decode_immediate(dgram.immediate, self.cfg.immediate)
            source = self.source_of_cid.get(cid)
            block = leaf.blocks.get((source, dgram.flow_id)) if source is not None else None
            if block is None or not block.chunk_base <= psn < block.chunk_base + block.nchunks:
                leaf.protocol_errors += 1
                self.fabric._emit("protocol_error", node=rank, imm=dgram.immediate)
                return
            if dgram.tag != (source, psn):
                raise SimInvariantError(
                    f"delivery tag {dgram.tag} does not match decoded ({source}, {psn})")
            leaf.recv_payload_bytes += dgram.payload_size
            if self.cfg.transport == "UD":
                slot = leaf.staging.put(dgram.payload)
                if block.bitmap.set(psn - block.chunk_base):
                    self._install_chunk(rank, source, psn, dgram.payload)
                leaf.staging.take(slot)
            else:
                if block.bitmap.set(psn - block.chunk_base):
                    self._install_chunk(rank, source, psn, dgram.payload)
        finally:
            post_credits(leaf.queue, 1)  # consumed by the fabric on delivery
        if block.bitmap.complete:
            self._check_completion(rank)

    def _dest_offset(self, rank: int, source: int, psn: int) -> int:
        base = self.pos[source] * self.cfg.buffer_bytes if self.gather_layout else 0
        return base + psn * self.cfg.chunk_size

    def _install_chunk(self, rank: int, source: int, psn: int, data: bytes) -> None:
        off = self._dest_offset(rank, source, psn)
        self.recv_buffers[rank][off:off + len(data)] = data

    def _read_chunk(self, holder: int, source: int, psn: int) -> bytes:
        """Bytes of (source, psn) as held by `holder` (serves RDMA reads)."""
        n = chunk_len(self.cfg.buffer_bytes, self.cfg.chunk_size, psn)
        if holder == source:
            off = psn * self.cfg.chunk_size
            return self.send_buffers[holder][off:off + n]
        off = self._dest_offset(holder, source, psn)
        return bytes(self.recv_buffers[holder][off:off + n])

    def _has_block(self, rank: int, key: Tuple[int, int]) -> bool:
        source = key[0]
        if rank == source:
            return True
        block = self.leaves[rank].blocks.get(key)
        return block is not None and block.bitmap.complete

    # -- recovery over the fetch ring ----------------------------------------

    def _next_recovery_block(self, rank: int) -> None:
        leaf = self.leaves[rank]
        while leaf.recovery_queue:
            key = leaf.recovery_queue[0]
            if leaf.blocks[key].bitmap.complete:
                leaf.recovery_queue.pop(0)
                continue
            leaf.recovery_block = key
            leaf.recovery_depth = 1
            leaf.max_recovery_depth = max(leaf.max_recovery_depth, 1)
            self._send_fetch_request(rank)
            return
        leaf.recovery_block = None
        self._check_completion(rank)

    def _neighbor_left(self, rank: int, distance: int) -> int:
        p = len(self.ranks)
        return self.ranks[(self.pos[rank] - distance) % p]

    def _send_fetch_request(self, rank: int) -> None:
        leaf = self.leaves[rank]
        target = self._neighbor_left(rank, leaf.recovery_depth)
        self._send_control(rank, target, {
            "type": "fetch_req", "block": leaf.recovery_block, "requester": rank})

    def _on_fetch_request(self, rank: int, meta: dict, t: float) -> None:
        key = tuple(meta["block"])
        requester = meta["requester"]
        kind = "fetch_ack" if self._has_block(rank, key) else "fetch_nack"
        self._send_control(rank, requester, {
            "type": kind, "block": key, "responder": rank})

    def _on_fetch_reply(self, rank: int, meta: dict, t: float) -> None:
        leaf = self.leaves[rank]
        key = tuple(meta["block"])
        if leaf.phase != RECOVERY or leaf.recovery_block != key:
            return  # stale reply; block finished by other means
        if meta["type"] == "fetch_nack":
            leaf.recovery_depth += 1
            leaf.max_recovery_depth = max(leaf.max_recovery_depth, leaf.recovery_depth)
            if leaf.recovery_depth >= len(self.ranks):
                raise SimInvariantError(
                    f"recovery walked the whole ring for block {key}")
            self._send_fetch_request(rank)
            return
        responder = meta["responder"]
        block = leaf.blocks[key]
        missing = block.missing_psns()
        if not missing:
            leaf.recovery_queue.pop(0)
            self._next_recovery_block(rank)
            return
        leaf.pending_reads = len(missing)
        path = route_unicast(self.topology, rank, responder)
        for psn in missing:
            n = chunk_len(self.cfg.buffer_bytes, self.cfg.chunk_size, psn)
            self.fabric.rdma_read(
                path, n,
                self._make_read_done(rank, responder, key, psn),
                request_bytes=self.cfg.control_bytes)

    def _make_read_done(self, rank: int, responder: int, key: Tuple[int, int],
                        psn: int) -> Callable[[float], None]:
        def done(t: float) -> None:
            leaf = self.leaves[rank]
            source = key[0]
            data = self._read_chunk(responder, source, psn)
            leaf.recovered_bytes += len(data)
            self.fabric._emit("recovered_chunk", node=rank, source=source,
                              subgroup=key[1], psn=psn)
            block = leaf.blocks[key]
            if block.bitmap.set(psn - block.chunk_base):
                self._install_chunk(rank, source, psn, data)
            leaf.pending_reads -= 1
            if leaf.pending_reads == 0 and leaf.phase == RECOVERY:
                if not block.bitmap.complete:
                    raise SimInvariantError("recovery reads finished but block incomplete")
                leaf.recovery_queue.pop(0)
                self._next_recovery_block(rank)
        return done

    # -- final handshake -------------------------------------------------------

    def _send_done(self, rank: int) -> bool:
        root = self.roots.get(rank)
        return root is None or root.phase == "done"

    def _check_completion(self, rank: int) -> None:
        leaf = self.leaves[rank]
        if leaf.phase not in (RECEIVING, RECOVERY):
            return
        if not (leaf.receive_complete and self._send_done(rank)):
            return
        leaf.advance_phase(HANDSHAKE)
        if len(self.ranks) == 1:
            self._finish(rank)
            return
        left = self._neighbor_left(rank, 1)
        self.final_messages += 1
        self._send_control(rank, left, {"type": "final"})
        leaf.final_sent = True
        if leaf.final_received:
            self._finish(rank)

    def _on_final(self, rank: int, t: float) -> None:
        leaf = self.leaves[rank]
        leaf.final_received = True
        if leaf.phase == HANDSHAKE and leaf.final_sent:
            self._finish(rank)

    def _finish(self, rank: int) -> None:
        leaf = self.leaves[rank]
        leaf.advance_phase(DONE)
        leaf.completion_time = self.fabric.now
        self._n_done += 1

    # -- control plane ---------------------------------------------------------

    def _send_control(self, src: int, dst: int, meta: dict) -> None:
        payload = b"\x00" * self.cfg.control_bytes
        ring = self.rc_ring.get((src, dst))
        if ring is not None:
            ring.send(payload, meta=meta)
            return
        # barrier partners and deep recovery targets sit beyond the ring
        path = route_unicast(self.topology, src, dst)
        self.fabric.unicast_send(path, payload, classification=CONTROL,
                                 source=src, meta=meta)

    def _on_message(self, rank: int, message: bytes, meta: dict, t: float) -> None:
        kind = meta.get("type")
        if kind == "barrier":
            self._on_barrier_token(rank, meta["round"], t)
        elif kind == "activation":
            self._start_sending(rank, t)
        elif kind == "fetch_req":
            self._on_fetch_request(rank, meta, t)
        elif kind in ("fetch_ack", "fetch_nack"):
            self._on_fetch_reply(rank, meta, t)
        elif kind == "final":
            self._on_final(rank, t)
        else:
            raise SimInvariantError(f"unknown control message {meta!r}")

    # -- run -----------------------------------------------------------------

    def run(self) -> CollectiveResult:
        self.start()
        self.fabric.run()
        if self._n_done != len(self.ranks):
            stuck = [r for r in self.ranks if self.leaves[r].phase != DONE]
            raise SimInvariantError(f"collective stalled; unfinished ranks {stuck}")
        return self._collect()

    def _collect(self) -> CollectiveResult:
        cfg = self.cfg
        ledger = self.fabric.ledger
        stats = RunStats(
            algorithm=self.algorithm,
            participants=len(self.ranks),
            buffer_bytes=cfg.buffer_bytes,
            mtu=cfg.mtu,
            subgroups=cfg.subgroups,
            chains=len(self.chains),
            root=self.sources[0] if len(self.sources) == 1 else None,
        )
        stats.fastpath_bytes = sum(self.injected_bytes.values())
        stats.per_rank_send_bytes = dict(self.injected_bytes)
        stats.per_rank_recv_bytes = {
            r: self.leaves[r].recv_payload_bytes + self.leaves[r].recovered_bytes
            for r in self.ranks}
        stats.recovery_bytes = ledger.kind_total("recovery")
        stats.control_bytes = ledger.kind_total("control")
        stats.payload_link_bytes = ledger.kind_total("payload")
        stats.total_link_bytes = ledger.total()
        stats.rnr_drops = self.fabric.rnr_drops
        stats.fabric_drops = self.fabric.fabric_drops
        stats.protocol_errors = sum(l.protocol_errors for l in self.leaves.values())
        stats.recovered_chunk_bytes = sum(l.recovered_bytes for l in self.leaves.values())
        stats.max_recovery_depth = max(
            (l.max_recovery_depth for l in self.leaves.values()), default=0)
        stats.barrier_messages = self.barrier_messages
        stats.final_messages = self.final_messages
        intervals = {
            s: (self.roots[s].start_time, self.roots[s].finish_time) for s in self.sources}
        stats.max_concurrent_roots = max_interval_overlap(list(intervals.values()))
        stats.sim_time = max(
            (l.completion_time for l in self.leaves.values() if l.completion_time is not None),
            default=0.0)
        return CollectiveResult(stats, dict(self.send_buffers), self.recv_buffers, intervals)


def _block_bytes_len(block_map: SubgroupMap, block: _BlockState) -> int:
    for b in block_map.blocks:
        if b.subgroup_id == block.subgroup:
            return b.byte_len
    raise KeyError(block.subgroup)


def broadcast(config: BroadcastConfig, fabric: Fabric,
              send_buffer: Optional[bytes] = None) -> CollectiveResult:
    """Run one reliable Broadcast; every leaf ends with the root's buffer.

    `send_buffer` defaults to a seeded pseudo-random pattern derived from
    the fabric seed and root rank.
    """
    if send_buffer is None:
        send_buffer = make_payload(fabric.seed, config.root, config.buffer_bytes)
    if len(send_buffer) != config.buffer_bytes:
        raise ValueError("send buffer length must equal buffer_bytes")
    engine = CollectiveEngine(
        config, fabric, sources=[config.root], chains=[[config.root]],
        send_buffers={config.root: bytes(send_buffer)}, algorithm="mc_broadcast")
    return engine.run()


def make_payload(seed: int, rank: int, nbytes: int) -> bytes:
    """Deterministic per-rank buffer contents for oracles."""
    import random as _random
    return _random.Random((seed << 20) ^ (rank * 0x9E3779B1)).randbytes(nbytes)


def run_rnr_barrier(fabric: Fabric, participants: Sequence[int],
                    control_bytes: int = 64) -> Dict[int, float]:
    """Standalone dissemination barrier over the reliable plane; returns the
    completion time of every rank.  ceil(log2 P) rounds, one message per
    rank per round."""
    ranks = list(participants)
    pos = {r: i for i, r in enumerate(ranks)}
    p = len(ranks)
    rounds = barrier_rounds(p)
    done: Dict[int, float] = {}
    if p == 1:
        return {ranks[0]: fabric.now}
    state = {r: {"round": 0, "seen": set()} for r in ranks}

    def send(rank: int, round_: int) -> None:
        partner = ranks[(pos[rank] + (1 << round_)) % p]
        path = route_unicast(fabric.topology, rank, partner)
        fabric.unicast_send(path, b"\x00" * control_bytes, classification=CONTROL,
                            source=rank, meta={"type": "rnr", "round": round_, "to": partner})

    def on_message(rank: int, message: bytes, meta: dict, t: float) -> None:
        st = state[rank]
        st["seen"].add(meta["round"])
        while st["round"] in st["seen"]:
            st["round"] += 1
            if st["round"] < rounds:
                send(rank, st["round"])
            else:
                done[rank] = t
                break

    for r in ranks:
        fabric.register_message_handler(r, on_message)
    for r in ranks:
        send(r, 0)
    fabric.run()
    if len(done) != p:
        raise SimInvariantError("barrier did not complete on all ranks")
    return done

"""Deterministic packet-level discrete-event fabric.

Store-and-forward timing: every link keeps a next-free time; a packet
occupies the link for payload/bandwidth seconds and arrives at the far end
after an extra hop latency.  Drops and reorder displacements are drawn from
one PRNG stream per link, seeded from (global seed, link id), so fault
decisions do not depend on event interleaving.

Two delivery planes exist per rank:
  * the datagram plane (unreliable multicast/UC traffic) which consumes
    receive credits and suffers RNR drops, and
  * the message plane (reliable connected traffic) which always delivers.
"""

from __future__ import annotations

import heapq
import random
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

from .topology import (
    CONTROL,
    PAYLOAD,
    RECOVERY,
    Link,
    MulticastTree,
    Topology,
    TrafficLedger,
    node_name,
    parse_node,
)

RELIABLE = "reliable"
UNRELIABLE_MULTI_PACKET = "unreliable-multi-packet"


class SimInvariantError(RuntimeError):
    """An internal simulation invariant was violated (harness exit code 4)."""


@dataclass(frozen=True)
class Datagram:
    """One MTU-bounded multicast/unicast packet.

    `immediate` carries the 32-bit PSN + collective-id word; `tag` is the
    logical (sender rank, chunk index) used for ledger attribution and
    delivery verification.
    """

    flow_id: int
    payload: bytes
    immediate: int
    source: int
    tag: Tuple[int, int]

    @property
    def payload_size(self) -> int:
        return len(self.payload)


@dataclass
class FaultModel:
    """Per-link Bernoulli loss plus bounded-displacement reorder.

    `link_drop_overrides` pins the drop probability of specific links,
    which tests use to force deterministic drops.
    """

    drop_prob: float = 0.0
    reorder_prob: float = 0.0
    reorder_max_displacement: int = 8
    link_drop_overrides: Dict[int, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for p in (self.drop_prob, self.reorder_prob, *self.link_drop_overrides.values()):
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"probability {p} outside [0, 1]")
        if self.reorder_max_displacement < 1:
            raise ValueError("reorder_max_displacement must be >= 1")

    def drop_prob_for(self, link_id: int) -> float:
        return self.link_drop_overrides.get(link_id, self.drop_prob)


class ReceiveQueue:
    """Posted receive credits of one endpoint; a delivery consumes one."""

    def __init__(self, owner: int, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.owner = owner
        self.capacity = capacity
        self.credits = 0

    def post(self, n: int) -> None:
        if n < 1:
            raise ValueError("must post at least one credit")
        if self.credits + n > self.capacity:
            raise ValueError(
                f"posting {n} credits exceeds capacity {self.capacity} "
                f"(currently {self.credits})"
            )
        self.credits += n

    def consume(self) -> bool:
        if self.credits == 0:
            return False
        self.credits -= 1
        return True


def post_credits(queue: ReceiveQueue, n: int) -> None:
    queue.post(n)


@dataclass
class Event:
    time: float
    seq: int
    kind: str
    fn: Callable[["Event"], None]
    info: dict


class EventQueue:
    """Pending events ordered by (time, insertion sequence)."""

    def __init__(self) -> None:
        self._heap: List[Tuple[float, int, Event]] = []
        self._seq = 0

    def schedule(self, time: float, fn: Callable[[Event], None], kind: str, **info) -> Event:
        ev = Event(time, self._seq, kind, fn, info)
        heapq.heappush(self._heap, (time, self._seq, ev))
        self._seq += 1
        return ev

    def pop(self) -> Optional[Event]:
        if not self._heap:
            return None
        return heapq.heappop(self._heap)[2]

    def __len__(self) -> int:
        return len(self._heap)


class Fabric:
    """Single-threaded deterministic event loop plus the wire model.

    Protocol code registers per-rank handlers and schedules timers; all
    traffic flows through multicast_send / unicast_send / rdma_read, which
    charge the ledger as a side effect.
    """

    def __init__(self, topology: Topology, fault: Optional[FaultModel] = None,
                 seed: int = 0, mtu: int = 4096, header_bytes: int = 0,
                 trace: Optional[list] = None):
        if mtu < 1:
            raise ValueError("mtu must be >= 1")
        if header_bytes < 0:
            raise ValueError("header_bytes must be >= 0")
        self.topology = topology
        self.fault = fault or FaultModel()
        self.seed = seed
        self.mtu = mtu
        self.header_bytes = header_bytes
        self.ledger = TrafficLedger(topology)
        self.events = EventQueue()
        self.now = 0.0
        self.trace = trace
        self.rnr_drops = 0
        self.fabric_drops = 0
        self._link_free: Dict[int, float] = {}
        self._link_rng: Dict[int, random.Random] = {}
        self._dgram_handlers: Dict[int, Callable] = {}
        self._msg_handlers: Dict[int, Callable] = {}
        self.queues: Dict[int, ReceiveQueue] = {}

    # -- registration ------------------------------------------------------

    def register_datagram_handler(self, rank: int, handler: Callable,
                                  queue: ReceiveQueue) -> None:
        self._dgram_handlers[rank] = handler
        self.queues[rank] = queue

    def register_message_handler(self, rank: int, handler: Callable) -> None:
        self._msg_handlers[rank] = handler

    # -- internals ---------------------------------------------------------

    def _rng(self, link_id: int) -> random.Random:
        rng = self._link_rng.get(link_id)
        if rng is None:
            rng = random.Random(self.seed * 2654435761 + link_id)
            self._link_rng[link_id] = rng
        return rng

    def _emit(self, type_: str, **fields) -> None:
        if self.trace is not None:
            rec = {"time": self.now, "type": type_}
            rec.update(fields)
            self.trace.append(rec)

    def _traverse(self, link: Link, nbytes: int, ready_at: float) -> Tuple[float, float]:
        """Reserve the link for one packet; returns (tx done, arrival)."""
        start = max(ready_at, self._link_free.get(link.link_id, 0.0))
        tx = (nbytes + self.header_bytes) / link.bandwidth
        self._link_free[link.link_id] = start + tx
        return start + tx, start + tx + link.latency

    def _should_drop(self, link_id: int) -> bool:
        p = self.fault.drop_prob_for(link_id)
        if p <= 0.0:
            return False
        return self._rng(link_id).random() < p

    def _reorder_delay(self, link: Link, nbytes: int) -> float:
        if self.fault.reorder_prob <= 0.0:
            return 0.0
        rng = self._rng(link.link_id)
        if rng.random() >= self.fault.reorder_prob:
            return 0.0
        d = rng.randint(1, self.fault.reorder_max_displacement)
        return d * (nbytes + self.header_bytes) / link.bandwidth

    def _deliver_datagram(self, ev: Event) -> None:
        rank = ev.info["rank"]
        dgram: Datagram = ev.info["datagram"]
        queue = self.queues.get(rank)
        if queue is None or not queue.consume():
            self.rnr_drops += 1
            self._emit("rnr_drop", node=rank, flow=dgram.flow_id,
                       imm=dgram.immediate, tag=list(dgram.tag))
            return
        self._emit("deliver", node=rank, flow=dgram.flow_id,
                   imm=dgram.immediate, tag=list(dgram.tag))
        self._dgram_handlers[rank](rank, dgram, self.now)

    # -- operations --------------------------------------------------------

    def multicast_send(self, tree: MulticastTree, datagram: Datagram,
                       _collector: Optional[Dict[int, list]] = None) -> float:
        """Fan one datagram out over the tree.

        Charges the ledger once per traversed link, prunes subtrees below a
        dropped hop, and schedules one credit-checked delivery per surviving
        member.  Returns the time the sender's first-hop transmission ends
        (the injection-complete instant).
        """
        if not 1 <= datagram.payload_size <= self.mtu:
            raise ValueError(f"datagram payload {datagram.payload_size} outside [1, {self.mtu}]")
        inject_done = self.now
        arrivals = {node_name(tree.root): self.now}
        for link in tree.links:
            ready = arrivals.get(link.src)
            if ready is None:
                continue  # upstream hop dropped this datagram
            tx_done, arrive = self._traverse(link, datagram.payload_size, ready)
            self.ledger.charge(link.link_id, datagram.payload_size, PAYLOAD,
                               source=datagram.source, header_bytes=self.header_bytes)
            if link.src == node_name(tree.root):
                inject_done = tx_done
            if self._should_drop(link.link_id):
                self.fabric_drops += 1
                self._emit("fabric_drop", link=link.link_id, flow=datagram.flow_id,
                           imm=datagram.immediate, tag=list(datagram.tag))
                continue
            arrivals[link.dst] = arrive
            rank = parse_node(link.dst)
            if rank is not None and rank in tree.members:
                when = arrive + self._reorder_delay(link, datagram.payload_size)
                if _collector is not None:
                    _collector[rank].append(when)
                else:
                    self.events.schedule(when, self._deliver_datagram, "deliver",
                                         rank=rank, datagram=datagram)
        return inject_done

    def multicast_send_collect(self, tree: MulticastTree, datagram: Datagram,
                               collector: Dict[int, list], segment: int) -> float:
        """multicast_send variant that records surviving per-member arrival
        times into `collector` instead of delivering; used by multi-packet
        writes to assemble per-member all-or-nothing completions."""
        del segment  # arrival lists are positional; count suffices
        return self.multicast_send(tree, datagram, _collector=collector)

    def unicast_send(self, path: Sequence[Link], message: bytes, kind: str = RELIABLE,
                     classification: str = PAYLOAD, source: Optional[int] = None,
                     on_delivered: Optional[Callable[[bytes, float], None]] = None,
                     meta: Optional[dict] = None) -> None:
        """Send one message along a fixed path.

        Reliable messages always arrive (hardware retransmission is
        abstracted away; links are charged once, the lossless common case).
        Unreliable multi-packet messages segment at the MTU, draw per-packet
        per-link drops, and deliver all-or-nothing.
        """
        if len(message) < 1:
            raise ValueError("message must be at least 1 byte")
        if kind not in (RELIABLE, UNRELIABLE_MULTI_PACKET):
            raise ValueError(f"unknown unicast kind {kind!r}")
        dst = parse_node(path[-1].dst)
        if dst is None:
            raise ValueError("unicast path must end at a node")
        sizes = [min(self.mtu, len(message) - off) for off in range(0, len(message), self.mtu)]
        last_arrival = self.now
        message_alive = True
        for size in sizes:
            ready = self.now
            for link in path:
                _, ready = self._traverse(link, size, ready)
                self.ledger.charge(link.link_id, size, classification,
                                   source=source, header_bytes=self.header_bytes)
                if kind == UNRELIABLE_MULTI_PACKET and self._should_drop(link.link_id):
                    self.fabric_drops += 1
                    self._emit("fabric_drop", link=link.link_id,
                               meta=meta or {}, outcome="packet_lost")
                    message_alive = False
                    break  # packet dies here; downstream links untouched
            else:
                last_arrival = max(last_arrival, ready)
        if message_alive:
            self.events.schedule(
                last_arrival, self._deliver_message, "message",
                rank=dst, message=message, on_delivered=on_delivered, meta=meta or {})
        else:
            self._emit("message_dropped", node=dst, meta=meta or {})

    def _deliver_message(self, ev: Event) -> None:
        rank = ev.info["rank"]
        self._emit("message", node=rank, meta=ev.info["meta"])
        cb = ev.info["on_delivered"]
        if cb is not None:
            cb(ev.info["message"], self.now)
        else:
            handler = self._msg_handlers.get(rank)
            if handler is not None:
                handler(rank, ev.info["message"], ev.info["meta"], self.now)

    def rdma_read(self, path: Sequence[Link], size: int,
                  on_complete: Callable[[float], None],
                  request_bytes: int = 64) -> None:
        """One-sided read of `size` bytes from the node at the end of `path`.

        The forward path carries a fixed-size request (control bytes); the
        reverse path carries the payload, attributed to recovery counters.
        Reads ride the reliable connection and never drop.
        """
        if size < 1:
            raise ValueError("read size must be >= 1")
        reverse = tuple(
            self.topology.link_between(l.dst, l.src) for l in reversed(path)
        )

        def _at_responder(ev: Event) -> None:
            ready0 = ev.time
            last = ready0
            for off in range(0, size, self.mtu):
                seg = min(self.mtu, size - off)
                ready = ready0
                for link in reverse:
                    _, ready = self._traverse(link, seg, ready)
                    self.ledger.charge(link.link_id, seg, RECOVERY,
                                       header_bytes=self.header_bytes)
                last = max(last, ready)
            self.events.schedule(last, lambda e: on_complete(e.time), "read_complete")

        ready = self.now
        for link in path:
            _, ready = self._traverse(link, request_bytes, ready)
            self.ledger.charge(link.link_id, request_bytes, CONTROL,
                               header_bytes=self.header_bytes)
        self.events.schedule(ready, _at_responder, "read_request")

    def schedule_at(self, time: float, fn: Callable[[float], None], kind: str = "timer") -> Event:
        return self.events.schedule(time, lambda ev: fn(ev.time), kind)

    def advance(self) -> Optional[Event]:
        """Pop and dispatch the minimum-time event; None signals end of run."""
        ev = self.events.pop()
        if ev is None:
            return None
        if ev.time < self.now - 1e-15:
            raise SimInvariantError(f"time went backwards: {ev.time} < {self.now}")
        self.now = max(self.now, ev.time)
        ev.fn(ev)
        return ev

    def run(self) -> int:
        """Drain the event queue; returns the number of events dispatched."""
        n = 0
        while self.advance() is not None:
            n += 1
        return n

"""Endpoint service models and the 32-bit immediate-data encoding.

Three service models are exposed: unreliable datagrams with multicast (UD),
unreliable connected multi-packet writes with an optional multicast
extension (UC), and reliable connected operations (RC).  The immediate
word packs the chunk sequence number into its low bits and the collective
id into the remaining high bits.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, Optional, Tuple

from .fabric import Datagram, Fabric, ReceiveQueue, RELIABLE
from .topology import CONTROL, MulticastTree, route_unicast


@dataclass(frozen=True)
class ImmediateLayout:
    """Bit split of the 32-bit immediate word (PSN low, collective id high)."""

    psn_bits: int = 24
    collective_id_bits: int = 8

    def __post_init__(self) -> None:
        if self.psn_bits < 1 or self.collective_id_bits < 0:
            raise ValueError("psn_bits must be >= 1 and collective_id_bits >= 0")
        if self.psn_bits + self.collective_id_bits != 32:
            raise ValueError("psn_bits + collective_id_bits must equal 32")

    @property
    def max_psn(self) -> int:
        return (1 << self.psn_bits) - 1

    @property
    def max_collective_id(self) -> int:
        return (1 << self.collective_id_bits) - 1


def encode_immediate(psn: int, collective_id: int, layout: ImmediateLayout) -> int:
    if not 0 <= psn <= layout.max_psn:
        raise ValueError(f"psn {psn} does not fit in {layout.psn_bits} bits")
    if not 0 <= collective_id <= layout.max_collective_id:
        raise ValueError(
            f"collective id {collective_id} does not fit in {layout.collective_id_bits} bits")
    return (collective_id << layout.psn_bits) | psn


def decode_immediate(value: int, layout: ImmediateLayout) -> Tuple[int, int]:
    if not 0 <= value < (1 << 32):
        raise ValueError(f"immediate {value} is not a 32-bit value")
    return value & layout.max_psn, value >> layout.psn_bits


class UDEndpoint:
    """Connection-less datagram endpoint attached to multicast subgroups.

    Sends and receives only MTU-bounded datagrams; received chunks land in
    the owner's staging area (handled by the protocol layer).
    """

    def __init__(self, fabric: Fabric, node: int, queue: ReceiveQueue):
        self.fabric = fabric
        self.node = node
        self.queue = queue
        self._trees: Dict[int, MulticastTree] = {}

    def attach(self, subgroup_id: int, tree: MulticastTree) -> None:
        self._trees[subgroup_id] = tree

    @property
    def subgroups(self) -> Tuple[int, ...]:
        return tuple(sorted(self._trees))

    def send(self, subgroup_id: int, payload: bytes, immediate: int,
             tag: Tuple[int, int]) -> float:
        """Multicast one datagram; returns the injection-complete time."""
        tree = self._trees.get(subgroup_id)
        if tree is None:
            raise ValueError(f"node {self.node} is not attached to subgroup {subgroup_id}")
        if len(payload) > self.fabric.mtu:
            raise ValueError(f"UD payload {len(payload)} exceeds MTU {self.fabric.mtu}")
        dgram = Datagram(flow_id=subgroup_id, payload=payload, immediate=immediate,
                         source=self.node, tag=tag)
        return self.fabric.multicast_send(tree, dgram)


class UCEndpoint:
    """Unreliable connected endpoint: arbitrary-length all-or-nothing writes.

    The multicast variant models the proposed next-generation extension and
    is only used when the collective is configured for UC transport.  A
    delivered write lands directly at its destination offset (no staging).
    """

    def __init__(self, fabric: Fabric, node: int, queue: ReceiveQueue):
        self.fabric = fabric
        self.node = node
        self.queue = queue
        self._trees: Dict[int, MulticastTree] = {}

    def attach(self, subgroup_id: int, tree: MulticastTree) -> None:
        self._trees[subgroup_id] = tree

    def write_with_imm(self, subgroup_id: int, message: bytes, immediate: int,
                       tag: Tuple[int, int]) -> float:
        """Multicast one multi-packet write; per-member all-or-nothing.

        Each MTU segment is fanned out over the tree independently; a member
        sees the write complete (one immediate, one credit) only if every
        segment survived on its path.  Returns injection-complete time.
        """
        tree = self._trees.get(subgroup_id)
        if tree is None:
            raise ValueError(f"node {self.node} is not attached to subgroup {subgroup_id}")
        if len(message) < 1:
            raise ValueError("message must be at least 1 byte")
        fabric = self.fabric
        mtu = fabric.mtu
        segments = [message[off:off + mtu] for off in range(0, len(message), mtu)]
        # Collect per-member segment arrivals by intercepting datagram-plane
        # deliveries of the individual segments, then emit one completion.
        pending: Dict[int, list] = {m: [] for m in tree.members if m != tree.root}
        inject_done = fabric.now
        n_segs = len(segments)

        for si, seg in enumerate(segments):
            dgram = Datagram(flow_id=subgroup_id, payload=seg, immediate=immediate,
                             source=self.node, tag=tag)
            done = fabric.multicast_send_collect(
                tree, dgram, collector=pending, segment=si)
            inject_done = max(inject_done, done)
        for member, arrivals in pending.items():
            if len(arrivals) == n_segs:
                fabric.events.schedule(
                    max(arrivals), fabric._deliver_datagram, "deliver",
                    rank=member,
                    datagram=Datagram(flow_id=subgroup_id, payload=message,
                                      immediate=immediate, source=self.node, tag=tag))
        return inject_done


class RCEndpoint:
    """Reliable connection between two nodes (slow-path ring neighbor).

    Operations always complete exactly once; reliability is treated as
    hardware-offloaded, so no retransmissions are simulated.
    """

    def __init__(self, fabric: Fabric, node: int, peer: int):
        self.fabric = fabric
        self.node = node
        self.peer = peer
        self._path = route_unicast(fabric.topology, node, peer)

    def send(self, message: bytes, classification: str = CONTROL,
             on_delivered: Optional[Callable[[bytes, float], None]] = None,
             meta: Optional[dict] = None) -> None:
        self.fabric.unicast_send(self._path, message, RELIABLE,
                                 classification=classification, source=self.node,
                                 on_delivered=on_delivered, meta=meta)

    def rdma_read(self, size: int, on_complete: Callable[[float], None],
                  request_bytes: int = 64) -> None:
        self.fabric.rdma_read(self._path, size, on_complete, request_bytes=request_bytes)

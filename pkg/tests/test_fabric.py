import json

import pytest

from mcastcoll.fabric import (
    Datagram,
    EventQueue,
    Fabric,
    FaultModel,
    ReceiveQueue,
    RELIABLE,
    SimInvariantError,
    UNRELIABLE_MULTI_PACKET,
    post_credits,
)
from mcastcoll.topology import compute_multicast_tree, route_unicast

from conftest import clos16, make_fabric


def dgram(payload=b"x" * 4096, flow=0, imm=0, source=0, tag=(0, 0)):
    return Datagram(flow_id=flow, payload=payload, immediate=imm, source=source, tag=tag)


def attach_sink(fabric, ranks, credits=64):
    """Register a counting datagram handler on each rank; returns the log."""
    log = []
    for r in ranks:
        q = ReceiveQueue(r, 8192)
        if credits:
            q.post(credits)
        fabric.register_datagram_handler(
            r, lambda rank, d, t: log.append((rank, d.tag, t)), q)
    return log


class TestEventQueue:
    def test_equal_time_dispatch_in_insertion_order(self):
        q = EventQueue()
        order = []
        q.schedule(1.0, lambda ev: order.append("a"), "t")
        q.schedule(1.0, lambda ev: order.append("b"), "t")
        q.schedule(0.5, lambda ev: order.append("c"), "t")
        while True:
            ev = q.pop()
            if ev is None:
                break
            ev.fn(ev)
        assert order == ["c", "a", "b"]

    def test_advance_on_empty_signals_end(self, fabric):
        assert fabric.advance() is None

    def test_time_never_decreases(self, fabric):
        times = []
        fabric.events.schedule(2.0, lambda ev: times.append(ev.time), "t")
        fabric.events.schedule(1.0, lambda ev: times.append(ev.time), "t")
        fabric.run()
        assert times == [1.0, 2.0]


class TestMulticastSend:
    def test_lossless_accounting_and_deliveries(self, topo):
        fabric = make_fabric(topo)
        log = attach_sink(fabric, range(16))
        tree = compute_multicast_tree(topo, 0, range(16), 0)
        fabric.multicast_send(tree, dgram())
        fabric.run()
        assert fabric.ledger.total() == 20 * 4096
        assert len(log) == 15
        assert {r for r, _, _ in log} == set(range(1, 16))

    def test_uncontended_arrival_time_formula(self, topo):
        fabric = make_fabric(topo)
        log = attach_sink(fabric, range(16))
        tree = compute_multicast_tree(topo, 0, range(16), 0)
        fabric.multicast_send(tree, dgram())
        fabric.run()
        per_hop = 1e-6 + 4096 / 25e9
        arrivals = {r: t for r, _, t in log}
        assert arrivals[1] == pytest.approx(2 * per_hop, rel=1e-12)   # same leaf
        assert arrivals[15] == pytest.approx(4 * per_hop, rel=1e-12)  # via core

    def test_forced_drop_suppresses_subtree(self, topo):
        tree = compute_multicast_tree(topo, 0, range(16), 0)
        # core0 -> leaf3 serves members 12..15
        victim = topo.link_between("core0", "leaf3")
        fabric = make_fabric(topo, fault=FaultModel(link_drop_overrides={victim.link_id: 1.0}))
        log = attach_sink(fabric, range(16))
        fabric.multicast_send(tree, dgram())
        fabric.run()
        assert {r for r, _, _ in log} == set(range(1, 12))
        # charged for traversed links up to and including the dropping one
        assert fabric.ledger.total() == (20 - 4) * 4096
        assert fabric.ledger.link_total(victim.link_id) == 4096
        assert fabric.fabric_drops == 1
        for member in (12, 13, 14, 15):
            assert fabric.ledger.link_total(topo.node_downlink(member).link_id) == 0

    def test_no_credits_is_rnr_drop(self, topo):
        fabric = make_fabric(topo)
        log = attach_sink(fabric, range(16), credits=0)
        tree = compute_multicast_tree(topo, 0, range(16), 0)
        fabric.multicast_send(tree, dgram())
        fabric.run()
        assert log == []
        assert fabric.rnr_drops == 15
        assert fabric.ledger.total() == 20 * 4096  # traffic still flowed

    def test_delivery_consumes_exactly_one_credit(self, topo):
        fabric = make_fabric(topo)
        queues = {}
        for r in range(16):
            q = ReceiveQueue(r, 8192)
            q.post(2)
            queues[r] = q
            fabric.register_datagram_handler(r, lambda rank, d, t: None, q)
        tree = compute_multicast_tree(topo, 0, range(16), 0)
        fabric.multicast_send(tree, dgram())
        fabric.run()
        assert all(queues[r].credits == 1 for r in range(1, 16))

    def test_oversized_payload_rejected(self, topo):
        fabric = make_fabric(topo)
        tree = compute_multicast_tree(topo, 0, range(16), 0)
        with pytest.raises(ValueError):
            fabric.multicast_send(tree, dgram(payload=b"x" * 8192))
        with pytest.raises(ValueError):
            fabric.multicast_send(tree, dgram(payload=b""))

    def test_fifo_per_member_without_reorder(self, topo):
        fabric = make_fabric(topo)
        log = attach_sink(fabric, range(16))
        tree = compute_multicast_tree(topo, 0, range(16), 0)
        for i in range(32):
            fabric.multicast_send(tree, dgram(tag=(0, i)))
        fabric.run()
        per_member = {}
        for r, tag, _ in log:
            per_member.setdefault(r, []).append(tag[1])
        for seq in per_member.values():
            assert seq == sorted(seq)

    def test_reorder_displaces_but_delivers_all(self, topo):
        fabric = make_fabric(topo, fault=FaultModel(reorder_prob=0.5), seed=3)
        log = attach_sink(fabric, range(16))
        tree = compute_multicast_tree(topo, 0, range(16), 0)
        for i in range(64):
            fabric.multicast_send(tree, dgram(tag=(0, i)))
        fabric.run()
        per_member = {}
        for r, tag, _ in log:
            per_member.setdefault(r, []).append(tag[1])
        assert all(len(seq) == 64 for seq in per_member.values())
        assert any(seq != sorted(seq) for seq in per_member.values())


class TestUnicastSend:
    def test_reliable_charges_per_link_per_byte(self, topo):
        fabric = make_fabric(topo)
        path = route_unicast(topo, 0, 15)
        got = []
        fabric.unicast_send(path, b"m" * (1 << 20), RELIABLE,
                            on_delivered=lambda m, t: got.append(len(m)))
        fabric.run()
        assert got == [1 << 20]
        assert fabric.ledger.total() == 4 * (1 << 20)

    def test_unreliable_drop_kills_whole_message(self, topo):
        path = route_unicast(topo, 0, 15)
        last = path[-1]
        fabric = make_fabric(topo, fault=FaultModel(link_drop_overrides={last.link_id: 1.0}))
        got = []
        fabric.unicast_send(path, b"m" * (3 * 4096), UNRELIABLE_MULTI_PACKET,
                            on_delivered=lambda m, t: got.append(len(m)))
        fabric.run()
        assert got == []
        # all three packets transmitted on the first three hops, died on the last
        assert fabric.ledger.total() == 3 * 4096 * 4
        assert fabric.fabric_drops == 3

    def test_unreliable_all_or_nothing_under_fuzz(self, topo):
        path = route_unicast(topo, 0, 15)
        for seed in range(30):
            fabric = make_fabric(clos16(), fault=FaultModel(drop_prob=0.2), seed=seed)
            got = []
            fabric.unicast_send(route_unicast(fabric.topology, 0, 15),
                                b"m" * (3 * 4096), UNRELIABLE_MULTI_PACKET,
                                on_delivered=lambda m, t: got.append(len(m)))
            fabric.run()
            if fabric.fabric_drops == 0:
                assert got == [3 * 4096]
            else:
                assert got == []

    def test_zero_byte_message_rejected(self, topo):
        fabric = make_fabric(topo)
        with pytest.raises(ValueError):
            fabric.unicast_send(route_unicast(topo, 0, 1), b"", RELIABLE)

    def test_unknown_kind_rejected(self, topo):
        fabric = make_fabric(topo)
        with pytest.raises(ValueError):
            fabric.unicast_send(route_unicast(topo, 0, 1), b"x", "datagram")


class TestRdmaRead:
    def test_accounting_split(self, topo):
        fabric = make_fabric(topo)
        done = []
        fabric.rdma_read(route_unicast(topo, 0, 15), 4096, lambda t: done.append(t))
        fabric.run()
        assert len(done) == 1
        assert fabric.ledger.kind_total("recovery") == 4 * 4096
        assert fabric.ledger.kind_total("control") == 4 * 64

    def test_zero_read_rejected(self, topo):
        fabric = make_fabric(topo)
        with pytest.raises(ValueError):
            fabric.rdma_read(route_unicast(topo, 0, 15), 0, lambda t: None)

    def test_two_concurrent_reads_both_complete(self, topo):
        fabric = make_fabric(topo)
        done = []
        path = route_unicast(topo, 0, 15)
        fabric.rdma_read(path, 4096, lambda t: done.append(("a", t)))
        fabric.rdma_read(path, 8192, lambda t: done.append(("b", t)))
        fabric.run()
        assert {x for x, _ in done} == {"a", "b"}


class TestReceiveQueue:
    def test_capacity_bound(self):
        q = ReceiveQueue(0, 8192)
        post_credits(q, 8192)
        with pytest.raises(ValueError):
            post_credits(q, 1)

    def test_consume_and_refill(self):
        q = ReceiveQueue(0, 4)
        q.post(4)
        assert all(q.consume() for _ in range(4))
        assert not q.consume()
        q.post(1)
        assert q.consume()

    def test_zero_capacity_rejected(self):
        with pytest.raises(ValueError):
            ReceiveQueue(0, 0)


class TestDeterminism:
    def run_once(self, seed):
        trace = []
        fabric = make_fabric(clos16(), fault=FaultModel(drop_prob=0.05, reorder_prob=0.3),
                             seed=seed, trace=trace)
        log = attach_sink(fabric, range(16))
        tree = compute_multicast_tree(fabric.topology, 0, range(16), 0)
        for i in range(64):
            fabric.multicast_send(tree, dgram(tag=(0, i)))
        fabric.run()
        ledger = [fabric.ledger.link_total(l) for l in sorted(fabric.ledger.counters)]
        return json.dumps(trace, sort_keys=True), ledger, log

    def test_same_seed_identical_trace_ledger_deliveries(self):
        a = self.run_once(9)
        b = self.run_once(9)
        assert a == b

    def test_different_seed_differs(self):
        a = self.run_once(9)
        c = self.run_once(10)
        assert a[0] != c[0]

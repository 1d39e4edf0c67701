import pytest

from mcastcoll.allgather import AllgatherConfig, allgather, verify_allgather
from mcastcoll.baselines import (
    binary_tree_bcast,
    knomial_bcast,
    knomial_children,
    linear_allgather,
    ring_allgather,
)
from mcastcoll.broadcast import BroadcastConfig, broadcast, make_payload
from mcastcoll.fabric import FaultModel

from conftest import clos16, make_fabric


class TestRingAllgather:
    def test_per_rank_send_equals_recv_equals_n_time_p_minus_1(self):
        n = 65536
        result = ring_allgather(list(range(16)), n, make_fabric(clos16()))
        for r in range(16):
            assert result.stats.per_rank_send_bytes[r] == n * 15 == 983040
            assert result.stats.per_rank_recv_bytes[r] == n * 15

    def test_two_ranks_one_exchange_each_way(self):
        n = 8192
        result = ring_allgather([0, 1], n, make_fabric(clos16()))
        assert result.stats.per_rank_send_bytes == {0: n, 1: n}
        expected = result.send_buffers[0] + result.send_buffers[1]
        assert bytes(result.recv_buffers[0]) == expected
        assert bytes(result.recv_buffers[1]) == expected

    def test_total_link_bytes_closed_form(self):
        # ascending ring on the two-level Clos: 2N(P-1)(P+L)
        n, p, l = 65536, 16, 4
        result = ring_allgather(list(range(p)), n, make_fabric(clos16()))
        assert result.stats.total_link_bytes == 2 * n * (p - 1) * (p + l)

    def test_needs_two_ranks(self):
        with pytest.raises(ValueError):
            ring_allgather([0], 4096, make_fabric(clos16()))

    def test_result_identical_to_multicast_allgather(self):
        n = 32768
        bufs = {r: make_payload(99, r, n) for r in range(8)}
        ring = ring_allgather(list(range(8)), n, make_fabric(clos16()), send_buffers=bufs)
        mc = allgather(AllgatherConfig(participants=list(range(8)), buffer_bytes=n),
                       make_fabric(clos16()), send_buffers=dict(bufs))
        for r in range(8):
            assert bytes(ring.recv_buffers[r]) == bytes(mc.recv_buffers[r])


class TestLinearAllgather:
    def test_twelve_transfers_for_four_ranks(self):
        n = 16384
        result = linear_allgather(list(range(4)), n, make_fabric(clos16()))
        assert result.stats.fastpath_bytes == 12 * n  # P(P-1) transfers
        assert all(result.stats.per_rank_send_bytes[r] == 3 * n for r in range(4))
        assert verify_allgather(result)[0]

    def test_single_rank_sends_nothing(self):
        result = linear_allgather([0], 4096, make_fabric(clos16()))
        assert result.stats.fastpath_bytes == 0
        assert result.stats.total_link_bytes == 0

    def test_matches_multicast_result(self):
        n = 16384
        bufs = {r: make_payload(5, r, n) for r in range(4)}
        lin = linear_allgather(list(range(4)), n, make_fabric(clos16()), send_buffers=bufs)
        mc = allgather(AllgatherConfig(participants=list(range(4)), buffer_bytes=n),
                       make_fabric(clos16()), send_buffers=dict(bufs))
        for r in range(4):
            assert bytes(lin.recv_buffers[r]) == bytes(mc.recv_buffers[r])


class TestTreeBroadcasts:
    def test_binary_tree_seven_transfers_of_n(self):
        n = 65536
        result = binary_tree_bcast(0, list(range(8)), n, make_fabric(clos16()))
        assert sum(result.stats.per_rank_send_bytes.values()) == 7 * n
        for r in range(1, 8):
            assert bytes(result.recv_buffers[r]) == result.send_buffers[0]

    def test_single_rank_no_transfers(self):
        result = binary_tree_bcast(0, [0], 4096, make_fabric(clos16()))
        assert result.stats.total_link_bytes == 0

    def test_nonzero_root(self):
        n = 16384
        result = binary_tree_bcast(5, list(range(8)), n, make_fabric(clos16()))
        for r in range(8):
            assert bytes(result.recv_buffers[r]) == result.send_buffers[5]

    def test_knomial_transfer_count(self):
        n = 32768
        for k in (2, 3, 4):
            result = knomial_bcast(0, list(range(9)), n, make_fabric(clos16()), k=k)
            assert sum(result.stats.per_rank_send_bytes.values()) == 8 * n
            for r in range(1, 9):
                assert bytes(result.recv_buffers[r]) == result.send_buffers[0]

    def test_k_equals_p_degenerates_to_star(self):
        n = 16384
        p = 8
        result = knomial_bcast(0, list(range(p)), n, make_fabric(clos16()), k=p)
        assert result.stats.per_rank_send_bytes[0] == (p - 1) * n
        assert all(result.stats.per_rank_send_bytes[r] == 0 for r in range(1, p))

    def test_k_below_two_rejected(self):
        with pytest.raises(ValueError):
            knomial_bcast(0, list(range(4)), 4096, make_fabric(clos16()), k=1)

    def test_children_cover_every_rank_once(self):
        for p in (1, 2, 5, 8, 9, 13, 16, 27):
            for k in (2, 3, 4, p if p >= 2 else 2):
                reached = {0}
                frontier = [0]
                edges = 0
                while frontier:
                    v = frontier.pop()
                    for c in knomial_children(v, p, k):
                        assert c not in reached, (p, k, c)
                        reached.add(c)
                        frontier.append(c)
                        edges += 1
                assert reached == set(range(p))
                assert edges == p - 1

    def test_tree_matches_multicast_broadcast(self):
        n = 65536
        buf = make_payload(77, 0, n)
        fabric = make_fabric(clos16())
        cfg = BroadcastConfig(root=0, participants=list(range(16)), buffer_bytes=n)
        mc = broadcast(cfg, fabric, send_buffer=buf)
        tree = binary_tree_bcast(0, list(range(16)), n, make_fabric(clos16()), send_buffer=buf)
        kn = knomial_bcast(0, list(range(16)), n, make_fabric(clos16()), k=4, send_buffer=buf)
        for r in range(1, 16):
            assert mc.buffer_for(r) == bytes(tree.recv_buffers[r]) == bytes(kn.recv_buffers[r])

    def test_baselines_ignore_fault_model(self):
        # reliable transport: loss never applies to the P2P reference runs
        fabric = make_fabric(clos16(), fault=FaultModel(drop_prob=0.5), seed=3)
        result = binary_tree_bcast(0, list(range(8)), 16384, fabric)
        assert fabric.fabric_drops == 0
        for r in range(1, 8):
            assert bytes(result.recv_buffers[r]) == result.send_buffers[0]

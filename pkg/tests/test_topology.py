import json
import random

import pytest

from mcastcoll.topology import (
    CONTROL,
    PAYLOAD,
    RECOVERY,
    Topology,
    TrafficLedger,
    build_clos,
    compute_multicast_tree,
    node_name,
    parse_node,
    route_unicast,
)

from conftest import clos16


def expected_link_count(leaves, per_leaf, cores):
    # independent count: every node link and every leaf-core link, both ways
    return 2 * (leaves * per_leaf) + 2 * (leaves * cores)


class TestBuildClos:
    def test_desk_scale_counts(self):
        topo = build_clos(4, 4, 2, 25e9, 1e-6)
        assert topo.num_nodes == 16
        assert len(topo.links) == expected_link_count(4, 4, 2) == 48

    def test_minimal_two_node(self):
        topo = build_clos(1, 2, 1, 1e9, 1e-6)
        assert topo.num_nodes == 2
        assert len(topo.links) == expected_link_count(1, 2, 1)

    @pytest.mark.parametrize("bad", [(0, 4, 2), (4, 0, 2), (4, 4, 0), (-1, 4, 2)])
    def test_rejects_bad_counts(self, bad):
        with pytest.raises(ValueError):
            build_clos(*bad, 25e9, 1e-6)

    def test_rejects_bad_bandwidth(self):
        with pytest.raises(ValueError):
            build_clos(4, 4, 2, 0.0, 1e-6)

    def test_link_ids_unique_with_reverse(self):
        topo = build_clos(3, 2, 2, 25e9, 1e-6)
        ids = [l.link_id for l in topo.links.values()]
        assert len(ids) == len(set(ids))
        endpoints = {(l.src, l.dst) for l in topo.links.values()}
        for src, dst in endpoints:
            assert (dst, src) in endpoints

    def test_every_node_attaches_to_one_leaf(self):
        topo = build_clos(4, 4, 2, 25e9, 1e-6)
        for r in topo.nodes:
            up = topo.node_uplink(r)
            assert up.src == node_name(r)
            assert up.dst == topo.leaf_name(r // 4)

    def test_json_round_trip(self):
        topo = build_clos(4, 4, 2, 25e9, 1e-6)
        clone = Topology.from_json(topo.to_json())
        assert clone.to_json() == topo.to_json()
        assert len(clone.links) == len(topo.links)

    def test_json_dict_fields(self):
        doc = build_clos(2, 3, 1, 1e9, 2e-6).to_json_dict()
        assert doc == {"leaf_switches": 2, "nodes_per_leaf": 3, "core_switches": 1,
                       "link_bandwidth": 1e9, "hop_latency": 2e-6}


def tree_member_paths(topo, tree):
    """Oracle: walk the tree link set from the root; returns hop paths."""
    out_links = {}
    for link in tree.links:
        out_links.setdefault(link.src, []).append(link)
    paths = {}

    def walk(entity, path):
        rank = parse_node(entity)
        if rank is not None and rank in tree.members and rank != tree.root:
            assert rank not in paths, "member reached twice"
            paths[rank] = list(path)
        for link in out_links.get(entity, []):
            walk(link.dst, path + [link])

    walk(node_name(tree.root), [])
    return paths


class TestMulticastTree:
    def test_full_membership_link_count(self):
        topo = clos16()
        tree = compute_multicast_tree(topo, 0, range(16), 0)
        # 1 uplink + 1 leaf->core + 3 core->leaf + 15 downlinks
        assert len(tree.links) == 20

    def test_single_member_tree_is_empty(self):
        topo = clos16()
        tree = compute_multicast_tree(topo, 3, {3}, 0)
        assert tree.links == ()

    def test_same_leaf_members_skip_core(self):
        topo = clos16()
        tree = compute_multicast_tree(topo, 0, {0, 1, 2}, 0)
        names = {l.src for l in tree.links} | {l.dst for l in tree.links}
        assert not any(n.startswith("core") for n in names)
        assert len(tree.links) == 3  # uplink + 2 downlinks

    def test_subgroup_id_changes_only_core(self):
        topo = clos16()
        t0 = compute_multicast_tree(topo, 0, range(16), 0)
        t1 = compute_multicast_tree(topo, 0, range(16), 1)
        assert t0.link_ids() != t1.link_ids()
        node_links = lambda t: {l.link_id for l in t.links
                                if parse_node(l.src) is not None or parse_node(l.dst) is not None}
        assert node_links(t0) == node_links(t1)
        # same core every full cycle of the modulus
        t2 = compute_multicast_tree(topo, 0, range(16), 2)
        assert t2.link_ids() == t0.link_ids()

    def test_rejects_unknown_member_and_foreign_root(self):
        topo = clos16()
        with pytest.raises(ValueError):
            compute_multicast_tree(topo, 0, {0, 99}, 0)
        with pytest.raises(ValueError):
            compute_multicast_tree(topo, 5, {0, 1}, 0)
        with pytest.raises(ValueError):
            compute_multicast_tree(topo, 0, set(), 0)

    def test_each_member_reachable_by_exactly_one_path(self):
        topo = clos16()
        rng = random.Random(42)
        for trial in range(25):
            members = set(rng.sample(range(16), rng.randint(1, 16)))
            root = rng.choice(sorted(members))
            tree = compute_multicast_tree(topo, root, members, trial)
            paths = tree_member_paths(topo, tree)
            assert set(paths) == members - {root}
            used = [l.link_id for l in tree.links]
            assert len(used) == len(set(used))
            # every tree link lies on some root-to-member path
            on_paths = {l.link_id for p in paths.values() for l in p}
            assert on_paths == set(used)


class TestRouteUnicast:
    def test_co_located_two_hops(self, topo):
        path = route_unicast(topo, 0, 1)
        assert len(path) == 2
        assert path[0].src == "n0" and path[-1].dst == "n1"

    def test_cross_leaf_four_hops(self, topo):
        path = route_unicast(topo, 0, 15)
        assert len(path) == 4
        assert path[1].dst.startswith("core")

    def test_same_node_rejected(self, topo):
        with pytest.raises(ValueError):
            route_unicast(topo, 4, 4)

    def test_unknown_node_rejected(self, topo):
        with pytest.raises(ValueError):
            route_unicast(topo, 0, 16)

    def test_deterministic_and_symmetric_length(self, topo):
        for src in range(16):
            for dst in range(16):
                if src == dst:
                    continue
                p1 = route_unicast(topo, src, dst)
                p2 = route_unicast(topo, src, dst)
                assert [l.link_id for l in p1] == [l.link_id for l in p2]
                back = route_unicast(topo, dst, src)
                assert len(back) == len(p1)


class TestTrafficLedger:
    def test_charge_and_totals(self, topo):
        ledger = TrafficLedger(topo)
        ledger.charge(0, 4096, PAYLOAD, source=0)
        ledger.charge(0, 100, CONTROL)
        ledger.charge(1, 512, RECOVERY)
        assert ledger.link_total(0) == 4196
        assert ledger.kind_total(PAYLOAD) == 4096
        assert ledger.kind_total(RECOVERY) == 512
        assert ledger.total() == 4708
        assert ledger.attributed(0, 0) == 4096
        assert ledger.attributed(0, 1) == 0

    def test_header_bytes_counted_but_not_attributed(self, topo):
        ledger = TrafficLedger(topo)
        ledger.charge(0, 4096, PAYLOAD, source=2, header_bytes=64)
        assert ledger.link_total(0) == 4160
        assert ledger.attributed(0, 2) == 4096

    def test_rejects_unknown_kind_and_negative(self, topo):
        ledger = TrafficLedger(topo)
        with pytest.raises(ValueError):
            ledger.charge(0, 10, "bogus")
        with pytest.raises(ValueError):
            ledger.charge(0, -1, PAYLOAD)

    def test_csv_export(self, topo, tmp_path):
        ledger = TrafficLedger(topo)
        ledger.charge(5, 1000, PAYLOAD, source=1)
        out = tmp_path / "ledger.csv"
        ledger.write_csv(str(out))
        lines = out.read_text().strip().splitlines()
        assert lines[0] == "link_id,src,dst,payload_bytes,recovery_bytes,control_bytes"
        assert len(lines) == 1 + len(topo.links)
        row5 = lines[1 + 5].split(",")
        assert row5[0] == "5" and row5[3] == "1000"

"""Two-level folded Clos topologies, multicast trees, and per-link traffic accounting.

Entity naming: compute nodes are integer ranks 0..P-1; switches are named
"leaf<i>" and "core<j>".  Every node attaches to exactly one leaf switch
(rank r sits on leaf r // nodes_per_leaf) and every leaf connects to every
core switch.

Directed link IDs are assigned deterministically:
  node r uplink   (n<r> -> leaf)   id = 2*r
  node r downlink (leaf -> n<r>)   id = 2*r + 1
  leaf l -> core k                 id = 2*P + 2*(l*c + k)
  core k -> leaf l                 id = 2*P + 2*(l*c + k) + 1
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Set, Tuple

# Traffic classes tracked by the ledger.
PAYLOAD = "payload"
RECOVERY = "recovery"
CONTROL = "control"
TRAFFIC_KINDS = (PAYLOAD, RECOVERY, CONTROL)


def node_name(rank: int) -> str:
    return f"n{rank}"


def parse_node(name: str) -> Optional[int]:
    """Rank for a node entity name, or None for switches."""
    if name.startswith("n") and name[1:].isdigit():
        return int(name[1:])
    return None


@dataclass(frozen=True)
class Link:
    """One directed link (node<->leaf or leaf<->core)."""

    link_id: int
    src: str
    dst: str
    bandwidth: float  # bytes/sec
    latency: float    # sec per hop


class Topology:
    """Two-level folded Clos with P = leaf_switches * nodes_per_leaf nodes."""

    def __init__(self, leaf_switches: int, nodes_per_leaf: int, core_switches: int,
                 link_bandwidth: float, hop_latency: float):
        if leaf_switches < 1 or nodes_per_leaf < 1 or core_switches < 1:
            raise ValueError("leaf_switches, nodes_per_leaf and core_switches must all be >= 1")
        if link_bandwidth <= 0:
            raise ValueError("link_bandwidth must be positive")
        if hop_latency < 0:
            raise ValueError("hop_latency must be >= 0")
        self.leaf_switches = leaf_switches
        self.nodes_per_leaf = nodes_per_leaf
        self.core_switches = core_switches
        self.link_bandwidth = link_bandwidth
        self.hop_latency = hop_latency
        self.num_nodes = leaf_switches * nodes_per_leaf
        self.nodes = list(range(self.num_nodes))
        self.links: Dict[int, Link] = {}
        self._by_endpoints: Dict[Tuple[str, str], Link] = {}
        self._build_links()

    def _add_link(self, link_id: int, src: str, dst: str) -> None:
        link = Link(link_id, src, dst, self.link_bandwidth, self.hop_latency)
        self.links[link_id] = link
        self._by_endpoints[(src, dst)] = link

    def _build_links(self) -> None:
        for r in self.nodes:
            leaf = self.leaf_name(self.leaf_of(r))
            self._add_link(2 * r, node_name(r), leaf)
            self._add_link(2 * r + 1, leaf, node_name(r))
        base = 2 * self.num_nodes
        for l in range(self.leaf_switches):
            for k in range(self.core_switches):
                lid = base + 2 * (l * self.core_switches + k)
                self._add_link(lid, self.leaf_name(l), self.core_name(k))
                self._add_link(lid + 1, self.core_name(k), self.leaf_name(l))

    def leaf_of(self, rank: int) -> int:
        if rank not in range(self.num_nodes):
            raise ValueError(f"unknown node {rank}")
        return rank // self.nodes_per_leaf

    @staticmethod
    def leaf_name(index: int) -> str:
        return f"leaf{index}"

    @staticmethod
    def core_name(index: int) -> str:
        return f"core{index}"

    def link_between(self, src: str, dst: str) -> Link:
        try:
            return self._by_endpoints[(src, dst)]
        except KeyError:
            raise ValueError(f"no directed link {src} -> {dst}") from None

    def node_uplink(self, rank: int) -> Link:
        return self.links[2 * rank]

    def node_downlink(self, rank: int) -> Link:
        return self.links[2 * rank + 1]

    def to_json_dict(self) -> dict:
        return {
            "leaf_switches": self.leaf_switches,
            "nodes_per_leaf": self.nodes_per_leaf,
            "core_switches": self.core_switches,
            "link_bandwidth": self.link_bandwidth,
            "hop_latency": self.hop_latency,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), sort_keys=True)

    @classmethod
    def from_json_dict(cls, doc: dict) -> "Topology":
        return cls(
            leaf_switches=int(doc["leaf_switches"]),
            nodes_per_leaf=int(doc["nodes_per_leaf"]),
            core_switches=int(doc["core_switches"]),
            link_bandwidth=float(doc["link_bandwidth"]),
            hop_latency=float(doc["hop_latency"]),
        )

    @classmethod
    def from_json(cls, text: str) -> "Topology":
        return cls.from_json_dict(json.loads(text))


def build_clos(leaf_switches: int, nodes_per_leaf: int, core_switches: int,
               link_bandwidth: float, hop_latency: float) -> Topology:
    """Build a two-level folded Clos (see module docstring for link IDs)."""
    return Topology(leaf_switches, nodes_per_leaf, core_switches, link_bandwidth, hop_latency)


@dataclass(frozen=True)
class MulticastTree:
    """Directed link set fanning one sender's datagrams out to a member set.

    `links` is ordered root-to-leaf so a single forward pass visits every
    link after its upstream hop.
    """

    subgroup_id: int
    root: int
    members: frozenset
    links: Tuple[Link, ...]

    def link_ids(self) -> Set[int]:
        return {l.link_id for l in self.links}


def compute_multicast_tree(topology: Topology, root: int, members: Iterable[int],
                           subgroup_id: int) -> MulticastTree:
    """Distribution tree for one subgroup: up from the root's leaf switch to
    core (subgroup_id mod core_switches, spreading parallel trees), down to
    every other leaf hosting members, then down to the member nodes.  If all
    members share the root's leaf, no core link is used.
    """
    member_set = frozenset(members)
    if not member_set:
        raise ValueError("members must be non-empty")
    for m in member_set:
        if m not in range(topology.num_nodes):
            raise ValueError(f"unknown node {m}")
    if root not in member_set:
        raise ValueError(f"root {root} must be a member")

    links: List[Link] = []
    others = member_set - {root}
    if not others:
        return MulticastTree(subgroup_id, root, member_set, ())

    root_leaf = topology.leaf_of(root)
    leaves = sorted({topology.leaf_of(m) for m in member_set})
    links.append(topology.link_between(node_name(root), topology.leaf_name(root_leaf)))
    if leaves != [root_leaf]:
        core = subgroup_id % topology.core_switches
        links.append(topology.link_between(topology.leaf_name(root_leaf),
                                           topology.core_name(core)))
        for l in leaves:
            if l != root_leaf:
                links.append(topology.link_between(topology.core_name(core),
                                                   topology.leaf_name(l)))
    for m in sorted(others):
        leaf = topology.leaf_of(m)
        links.append(topology.link_between(topology.leaf_name(leaf), node_name(m)))

    seen = set()
    for l in links:
        if l.link_id in seen:
            raise ValueError("tree construction produced a duplicate link")
        seen.add(l.link_id)
    return MulticastTree(subgroup_id, root, member_set, tuple(links))


def route_unicast(topology: Topology, src: int, dst: int) -> Tuple[Link, ...]:
    """Deterministic unicast path: 2 hops via the shared leaf when co-located,
    else 4 hops via core switch (src + dst) mod core_switches."""
    if src not in range(topology.num_nodes) or dst not in range(topology.num_nodes):
        raise ValueError(f"unknown node in pair ({src}, {dst})")
    if src == dst:
        raise ValueError("src and dst must differ")
    src_leaf, dst_leaf = topology.leaf_of(src), topology.leaf_of(dst)
    if src_leaf == dst_leaf:
        return (
            topology.link_between(node_name(src), topology.leaf_name(src_leaf)),
            topology.link_between(topology.leaf_name(src_leaf), node_name(dst)),
        )
    core = (src + dst) % topology.core_switches
    return (
        topology.link_between(node_name(src), topology.leaf_name(src_leaf)),
        topology.link_between(topology.leaf_name(src_leaf), topology.core_name(core)),
        topology.link_between(topology.core_name(core), topology.leaf_name(dst_leaf)),
        topology.link_between(topology.leaf_name(dst_leaf), node_name(dst)),
    )


class TrafficLedger:
    """Per-directed-link byte counters, the measurement instrument of a run.

    Three classes are tracked per link: fast-path payload, recovery payload
    and control bytes.  Fast-path payload is additionally attributed per
    (link, sender rank) so per-sender link bounds can be checked.  Counters
    only ever grow during a run.
    """

    def __init__(self, topology: Topology):
        self.topology = topology
        self.counters: Dict[int, Dict[str, int]] = {
            lid: {k: 0 for k in TRAFFIC_KINDS} for lid in topology.links
        }
        self.attribution: Dict[Tuple[int, int], int] = {}

    def charge(self, link_id: int, nbytes: int, kind: str, source: Optional[int] = None,
               header_bytes: int = 0) -> None:
        if kind not in TRAFFIC_KINDS:
            raise ValueError(f"unknown traffic kind {kind!r}")
        if nbytes < 0 or header_bytes < 0:
            raise ValueError("byte counts must be non-negative")
        self.counters[link_id][kind] += nbytes + header_bytes
        if source is not None and kind == PAYLOAD:
            key = (link_id, source)
            self.attribution[key] = self.attribution.get(key, 0) + nbytes

    def link_total(self, link_id: int) -> int:
        return sum(self.counters[link_id].values())

    def kind_total(self, kind: str) -> int:
        return sum(c[kind] for c in self.counters.values())

    def total(self) -> int:
        return sum(self.link_total(lid) for lid in self.counters)

    def attributed(self, link_id: int, source: int) -> int:
        return self.attribution.get((link_id, source), 0)

    def attribution_by_source(self, source: int) -> Dict[int, int]:
        return {lid: n for (lid, s), n in self.attribution.items() if s == source}

    def csv_rows(self) -> List[List[object]]:
        rows = []
        for lid in sorted(self.counters):
            link = self.topology.links[lid]
            c = self.counters[lid]
            rows.append([lid, link.src, link.dst, c[PAYLOAD], c[RECOVERY], c[CONTROL]])
        return rows

    def write_csv(self, path: str) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["link_id", "src", "dst", "payload_bytes", "recovery_bytes", "control_bytes"])
            w.writerows(self.csv_rows())

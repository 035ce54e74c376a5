"""Chain topology: nodes, links, memory partition and mirror pairing.

A chain is oriented source -> destination. Node 0 is the source end, node
n_repeaters + 1 the destination end, link i joins nodes (i, i + 1). The
upstream endpoint of a link owns its Master cell group, the downstream
endpoint the mirrored Slave group; mirrored groups always have equal size.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

from ebitsim.core import ConfigurationError, PhysicalParams


class Role(Enum):
    MASTER = "master"
    SLAVE = "slave"

    def opposite(self) -> "Role":
        return Role.SLAVE if self is Role.MASTER else Role.MASTER


@dataclass
class Link:
    """One fibre segment with a pair source at its midpoint."""

    link_id: int
    upstream: int
    downstream: int
    length_m: float
    latency_s: float          # one-way classical latency between the endpoints
    arrival_delay_s: float    # generation to absorption at both endpoints (half length)
    next_pair_seq: int = 0    # both endpoints count arrivals with this shared counter

    def other_end(self, node: int) -> int:
        if node == self.upstream:
            return self.downstream
        if node == self.downstream:
            return self.upstream
        raise ValueError(f"node {node} is not an endpoint of link {self.link_id}")


@dataclass(frozen=True)
class CellAssignment:
    """One memory cell bound to a (link, role) group, with its peer cell."""

    node: int
    cell_index: int
    link_id: int
    role: Role
    mirror: tuple[int, int] | None = None  # (node, cell_index) on the far side


def classical_latency(length_m: float, signal_speed_m_s: float) -> float:
    """Seconds for a classical message to cross length_m of fibre."""
    if length_m <= 0:
        raise ConfigurationError(f"link length must be > 0, got {length_m}")
    if signal_speed_m_s <= 0:
        raise ConfigurationError(f"signal speed must be > 0, got {signal_speed_m_s}")
    return length_m / signal_speed_m_s


def partition_memory(node: int, incident: Sequence[tuple[int, Role]],
                     cells: int) -> list[CellAssignment]:
    """Split a node's cells across its (link, role) groups.

    Contiguous index ranges in the order the links are listed; when the split
    is uneven the spare cells go to Slave-role groups first (the upstream side
    of a chain repeater). Every cell is assigned; mirrors are filled in later
    by build_chain once both sides of each link are known.
    """
    if not incident:
        raise ConfigurationError(f"node {node} has no incident links")
    if cells < len(incident):
        raise ConfigurationError(
            f"node {node} has {cells} cells but must host {len(incident)} "
            f"link groups (one cell each at minimum)"
        )
    base, extra = divmod(cells, len(incident))
    # slave groups absorb the remainder first, in listing order
    order = sorted(range(len(incident)), key=lambda i: (incident[i][1] is not Role.SLAVE, i))
    shares = [base] * len(incident)
    for i in order[:extra]:
        shares[i] += 1
    out: list[CellAssignment] = []
    next_index = 0
    for (link_id, role), share in zip(incident, shares):
        for _ in range(share):
            out.append(CellAssignment(node, next_index, link_id, role))
            next_index += 1
    return out


@dataclass
class Topology:
    """Static description of one chain scenario."""

    n_repeaters: int
    cells_per_node: int
    params: PhysicalParams
    nodes: list[int] = field(default_factory=list)
    links: list[Link] = field(default_factory=list)
    # (node, link_id, role) -> assignments ordered by cell index, post-trim
    groups: dict[tuple[int, int, Role], list[CellAssignment]] = field(default_factory=dict)
    mirror: dict[tuple[int, int], tuple[int, int]] = field(default_factory=dict)

    @property
    def source(self) -> int:
        return 0

    @property
    def destination(self) -> int:
        return self.n_repeaters + 1

    def group(self, node: int, link_id: int, role: Role) -> list[CellAssignment]:
        return self.groups[(node, link_id, role)]

    def group_size(self, node: int, link_id: int, role: Role) -> int:
        return len(self.groups.get((node, link_id, role), ()))

    def lane_count(self) -> int:
        """Cells per link direction usable as synchronized lanes (min over links)."""
        return min(
            len(self.group(link.upstream, link.link_id, Role.MASTER))
            for link in self.links
        )

    def hop_latency(self, link_id: int) -> float:
        return self.links[link_id].latency_s

    def path_latency(self, a: int, b: int) -> float:
        """One-way classical latency along the chain between two nodes."""
        lo, hi = sorted((a, b))
        return sum(self.links[i].latency_s for i in range(lo, hi))


def build_chain(n_repeaters: int, link_length_m: float, cells_per_node: int,
                params: PhysicalParams) -> Topology:
    """Topology for a source, n_repeaters swapping nodes and a destination."""
    if n_repeaters < 0:
        raise ConfigurationError(f"n_repeaters must be >= 0, got {n_repeaters}")
    if link_length_m <= 0:
        raise ConfigurationError(f"link_length_m must be > 0, got {link_length_m}")
    if n_repeaters >= 1 and cells_per_node < 2:
        raise ConfigurationError(
            f"cells_per_node = {cells_per_node} cannot host both directions at a repeater"
        )
    if cells_per_node < 1:
        raise ConfigurationError(f"cells_per_node must be >= 1, got {cells_per_node}")

    topo = Topology(n_repeaters, cells_per_node, params)
    topo.nodes = list(range(n_repeaters + 2))
    latency = classical_latency(link_length_m, params.signal_speed_m_s)
    for i in range(n_repeaters + 1):
        topo.links.append(Link(
            link_id=i, upstream=i, downstream=i + 1,
            length_m=link_length_m, latency_s=latency,
            arrival_delay_s=(link_length_m / 2.0) / params.signal_speed_m_s,
        ))

    per_node: dict[int, list[CellAssignment]] = {}
    for node in topo.nodes:
        incident: list[tuple[int, Role]] = []
        if node > 0:
            incident.append((node - 1, Role.SLAVE))      # upstream link
        if node < topo.destination:
            incident.append((node, Role.MASTER))         # downstream link
        per_node[node] = partition_memory(node, incident, cells_per_node)

    # pair each link's two groups index-by-index; trim the larger side so the
    # mirror relation is a bijection (spare end-node cells simply stay idle)
    for link in topo.links:
        masters = [a for a in per_node[link.upstream]
                   if a.link_id == link.link_id and a.role is Role.MASTER]
        slaves = [a for a in per_node[link.downstream]
                  if a.link_id == link.link_id and a.role is Role.SLAVE]
        size = min(len(masters), len(slaves))
        kept_m, kept_s = [], []
        for m, s in zip(masters[:size], slaves[:size]):
            kept_m.append(CellAssignment(m.node, m.cell_index, m.link_id, m.role,
                                         (s.node, s.cell_index)))
            kept_s.append(CellAssignment(s.node, s.cell_index, s.link_id, s.role,
                                         (m.node, m.cell_index)))
            topo.mirror[(m.node, m.cell_index)] = (s.node, s.cell_index)
            topo.mirror[(s.node, s.cell_index)] = (m.node, m.cell_index)
        topo.groups[(link.upstream, link.link_id, Role.MASTER)] = kept_m
        topo.groups[(link.downstream, link.link_id, Role.SLAVE)] = kept_s
    return topo


def shortest_path(topo: Topology, src: int, dst: int) -> list[int]:
    """Node sequence from src to dst (BFS; on a chain, the obvious walk)."""
    if src not in topo.nodes or dst not in topo.nodes:
        raise ConfigurationError(f"no such endpoints: {src} -> {dst}")
    adjacency: dict[int, list[int]] = {n: [] for n in topo.nodes}
    for link in topo.links:
        adjacency[link.upstream].append(link.downstream)
        adjacency[link.downstream].append(link.upstream)
    prev: dict[int, int] = {src: src}
    queue = deque([src])
    while queue:
        node = queue.popleft()
        if node == dst:
            path = [node]
            while path[-1] != src:
                path.append(prev[path[-1]])
            return path[::-1]
        for nxt in adjacency[node]:
            if nxt not in prev:
                prev[nxt] = node
                queue.append(nxt)
    raise ConfigurationError(f"no path between {src} and {dst}")

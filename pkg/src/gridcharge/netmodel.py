"""Radial distribution network model: parsing, validation, indexing.

All types here are immutable after construction and safe to share across
concurrently executing simulation runs.

Networks are stored as CSV edge lists with a header comment declaring the
feeder (root) node and the nominal voltage:

    # root=1 voltage=1.0
    # nodes=1,2,3          (optional: declares isolated nodes explicitly)
    # prune=13,17          (optional: nodes flagged for removal, e.g. generators)
    from,to,resistance,reactance

All electrical quantities are per-unit.  Edges may be listed in either
orientation; `validate_tree` re-orients them away from the root.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping

__all__ = [
    "EdgeSpec",
    "NetworkSpec",
    "RootedTree",
    "SubtreeIndex",
    "NetworkParseError",
    "TreeValidationError",
    "parse_network",
    "serialize_network",
    "load_network",
    "validate_tree",
    "prune_nodes",
    "subtree_index",
]


class NetworkParseError(ValueError):
    """Raised for malformed network files; carries the offending line number."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class TreeValidationError(ValueError):
    """Raised when an edge list does not describe a tree rooted at the feeder."""


@dataclass(frozen=True)
class EdgeSpec:
    """One branch of the network with series impedance R + iX (per-unit)."""

    from_node: int
    to_node: int
    resistance: float
    reactance: float

    def __post_init__(self):
        for name in ("resistance", "reactance"):
            value = getattr(self, name)
            if not math.isfinite(value):
                raise ValueError(f"{name} must be finite, got {value!r}")
            if value < 0:
                raise ValueError(f"{name} must be non-negative, got {value!r}")
        if self.resistance == 0 and self.reactance == 0:
            raise ValueError(
                f"zero-impedance edge {self.from_node}-{self.to_node} rejected"
            )
        if self.from_node == self.to_node:
            raise ValueError(f"self-loop on node {self.from_node} rejected")

    @property
    def pair(self) -> frozenset:
        return frozenset((self.from_node, self.to_node))


@dataclass(frozen=True)
class NetworkSpec:
    """Parsed network prior to topology validation."""

    nodes: frozenset
    edges: tuple
    root: int
    nominal_voltage: float = 1.0
    prune_hint: tuple = ()

    def __post_init__(self):
        if self.root not in self.nodes:
            raise ValueError(f"root {self.root} not among nodes")
        if self.nominal_voltage <= 0 or not math.isfinite(self.nominal_voltage):
            raise ValueError(f"nominal voltage must be positive, got {self.nominal_voltage}")
        for e in self.edges:
            if e.from_node not in self.nodes or e.to_node not in self.nodes:
                raise ValueError(f"edge {e.from_node}-{e.to_node} references unknown node")


@dataclass(frozen=True)
class RootedTree:
    """Validated tree with every edge oriented away from the root."""

    spec: NetworkSpec
    parent: Mapping          # node -> parent node (root absent)
    depth: Mapping           # node -> hops from root
    order: tuple             # nodes in breadth-first order from root
    children: Mapping        # node -> tuple of children
    edges: tuple             # EdgeSpec oriented parent -> child, in `order` of child

    @property
    def root(self) -> int:
        return self.spec.root

    @property
    def nominal_voltage(self) -> float:
        return self.spec.nominal_voltage

    @property
    def nodes(self) -> frozenset:
        return self.spec.nodes

    @property
    def non_root_nodes(self) -> tuple:
        return tuple(n for n in self.order if n != self.root)

    def edge(self, parent: int, child: int) -> EdgeSpec:
        return self._edge_map[(parent, child)]

    def __post_init__(self):
        object.__setattr__(
            self, "_edge_map", {(e.from_node, e.to_node): e for e in self.edges}
        )

    def path_to_root(self, node: int) -> tuple:
        """Nodes from `node` up to and including the root."""
        path = [node]
        while path[-1] != self.root:
            path.append(self.parent[path[-1]])
        return tuple(path)


@dataclass(frozen=True)
class SubtreeIndex:
    """Per-node subtree node and edge sets, built in one post-order pass."""

    nodes: Mapping   # node -> frozenset of subtree nodes (inclusive)
    edges: Mapping   # node -> tuple of (parent, child) pairs inside the subtree


def _parse_header_fields(text: str, line_no: int) -> dict:
    fields = {}
    for token in text.split():
        if "=" not in token:
            raise NetworkParseError(f"malformed header token {token!r}", line_no)
        key, _, value = token.partition("=")
        fields[key] = value
    return fields


def parse_network(source) -> NetworkSpec:
    """Parse a network edge-list file.

    `source` may be a string, an iterable of lines, or a file-like object.
    Performs per-record validation only; topology checks live in
    `validate_tree`.
    """
    if isinstance(source, str):
        lines = source.splitlines()
    elif hasattr(source, "read"):
        lines = source.read().splitlines()
    else:
        lines = [str(line).rstrip("\n") for line in source]

    root = None
    voltage = 1.0
    declared_nodes: set = set()
    prune: tuple = ()
    edges: list = []
    seen_pairs: dict = {}
    header_seen = False

    for line_no, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            body = line.lstrip("#").strip()
            if body.startswith("root="):
                fields = _parse_header_fields(body, line_no)
                try:
                    root = int(fields["root"])
                except ValueError as exc:
                    raise NetworkParseError(f"bad root id {fields['root']!r}", line_no) from exc
                if "voltage" in fields:
                    try:
                        voltage = float(fields["voltage"])
                    except ValueError as exc:
                        raise NetworkParseError(
                            f"bad voltage {fields['voltage']!r}", line_no
                        ) from exc
                header_seen = True
            elif body.startswith("nodes="):
                try:
                    declared_nodes.update(int(t) for t in body[len("nodes="):].split(",") if t)
                except ValueError as exc:
                    raise NetworkParseError("bad node list in metadata", line_no) from exc
            elif body.startswith("prune="):
                try:
                    prune = tuple(int(t) for t in body[len("prune="):].split(",") if t)
                except ValueError as exc:
                    raise NetworkParseError("bad prune list in metadata", line_no) from exc
            continue
        if not header_seen:
            raise NetworkParseError("missing '# root=<id> voltage=<float>' header", line_no)
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 4:
            raise NetworkParseError(
                f"expected 'from,to,resistance,reactance', got {line!r}", line_no
            )
        try:
            u, v = int(parts[0]), int(parts[1])
            r, x = float(parts[2]), float(parts[3])
        except ValueError as exc:
            raise NetworkParseError(f"malformed edge record {line!r}", line_no) from exc
        if u <= 0 or v <= 0:
            raise NetworkParseError(f"node ids must be positive, got {u},{v}", line_no)
        if r < 0 or x < 0:
            raise NetworkParseError(f"negative impedance on edge {u}-{v}", line_no)
        pair = frozenset((u, v))
        if pair in seen_pairs:
            raise NetworkParseError(
                f"duplicate edge {u}-{v} (first seen on line {seen_pairs[pair]})", line_no
            )
        seen_pairs[pair] = line_no
        try:
            edges.append(EdgeSpec(u, v, r, x))
        except ValueError as exc:
            raise NetworkParseError(str(exc), line_no) from exc

    if not header_seen:
        raise NetworkParseError("missing '# root=<id> voltage=<float>' header")

    nodes = set(declared_nodes)
    nodes.add(root)
    for e in edges:
        nodes.add(e.from_node)
        nodes.add(e.to_node)
    return NetworkSpec(
        nodes=frozenset(nodes),
        edges=tuple(edges),
        root=root,
        nominal_voltage=voltage,
        prune_hint=prune,
    )


def serialize_network(spec: NetworkSpec) -> str:
    """Inverse of `parse_network`: emits the documented CSV format."""
    out = [f"# root={spec.root} voltage={spec.nominal_voltage!r}"]
    endpoint_nodes = {spec.root}
    for e in spec.edges:
        endpoint_nodes.add(e.from_node)
        endpoint_nodes.add(e.to_node)
    isolated = sorted(spec.nodes - endpoint_nodes)
    if isolated:
        out.append("# nodes=" + ",".join(str(n) for n in isolated))
    if spec.prune_hint:
        out.append("# prune=" + ",".join(str(n) for n in spec.prune_hint))
    for e in spec.edges:
        out.append(f"{e.from_node},{e.to_node},{e.resistance!r},{e.reactance!r}")
    return "\n".join(out) + "\n"


def load_network(path) -> NetworkSpec:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_network(fh)


def validate_tree(spec: NetworkSpec) -> RootedTree:
    """Check the edge list is a tree containing the root and orient it.

    Edges may be supplied in either direction; the result has every edge
    pointing from parent to child.
    """
    adjacency: dict = {n: [] for n in spec.nodes}
    for e in spec.edges:
        adjacency[e.from_node].append((e.to_node, e))
        adjacency[e.to_node].append((e.from_node, e))

    parent: dict = {}
    depth: dict = {spec.root: 0}
    order: list = [spec.root]
    oriented: list = []
    queue = deque([spec.root])
    while queue:
        node = queue.popleft()
        for neighbor, e in adjacency[node]:
            if neighbor == parent.get(node):
                continue
            if neighbor in depth:
                raise TreeValidationError(
                    f"cycle detected: edge {e.from_node}-{e.to_node} closes a loop "
                    f"(node {neighbor} already has a parent)"
                )
            parent[neighbor] = node
            depth[neighbor] = depth[node] + 1
            order.append(neighbor)
            if e.from_node == node:
                oriented.append(e)
            else:
                oriented.append(EdgeSpec(node, neighbor, e.resistance, e.reactance))
            queue.append(neighbor)

    unreachable = sorted(spec.nodes - set(depth))
    if unreachable:
        raise TreeValidationError(
            f"disconnected: nodes {unreachable} are not reachable from root {spec.root}"
        )
    if len(spec.edges) != len(spec.nodes) - 1:
        # reachable with surplus edges would have triggered the cycle branch
        raise TreeValidationError(
            f"edge count {len(spec.edges)} != node count - 1 ({len(spec.nodes) - 1})"
        )

    children: dict = {n: [] for n in spec.nodes}
    for child, par in parent.items():
        children[par].append(child)
    children = {n: tuple(sorted(c)) for n, c in children.items()}

    return RootedTree(
        spec=spec,
        parent=parent,
        depth=depth,
        order=tuple(order),
        children=children,
        edges=tuple(oriented),
    )


def prune_nodes(spec: NetworkSpec, remove: Iterable[int]) -> NetworkSpec:
    """Drop the given nodes and their incident edges.

    The root is never removable, and the removal must not cut any retained
    node off from the root.
    """
    remove = frozenset(remove)
    if not remove:
        return spec
    if spec.root in remove:
        raise ValueError(f"cannot remove root node {spec.root}")
    unknown = remove - spec.nodes
    if unknown:
        raise ValueError(f"cannot remove unknown nodes {sorted(unknown)}")

    kept_nodes = spec.nodes - remove
    kept_edges = tuple(
        e for e in spec.edges if e.from_node in kept_nodes and e.to_node in kept_nodes
    )

    adjacency: dict = {n: [] for n in kept_nodes}
    for e in kept_edges:
        adjacency[e.from_node].append(e.to_node)
        adjacency[e.to_node].append(e.from_node)
    reached = {spec.root}
    queue = deque([spec.root])
    while queue:
        node = queue.popleft()
        for neighbor in adjacency[node]:
            if neighbor not in reached:
                reached.add(neighbor)
                queue.append(neighbor)
    orphaned = sorted(kept_nodes - reached)
    if orphaned:
        raise ValueError(
            f"removing {sorted(remove)} disconnects retained nodes {orphaned}"
        )

    return replace(
        spec,
        nodes=frozenset(kept_nodes),
        edges=kept_edges,
        prune_hint=tuple(n for n in spec.prune_hint if n not in remove),
    )


def subtree_index(tree: RootedTree) -> SubtreeIndex:
    """Node and edge sets of every rooted subtree, by one post-order pass."""
    nodes: dict = {}
    edges: dict = {}
    for node in reversed(tree.order):
        sub_nodes = {node}
        sub_edges: list = []
        for child in tree.children[node]:
            sub_nodes.update(nodes[child])
            sub_edges.append((node, child))
            sub_edges.extend(edges[child])
        nodes[node] = frozenset(sub_nodes)
        edges[node] = tuple(sub_edges)
    return SubtreeIndex(nodes=nodes, edges=edges)

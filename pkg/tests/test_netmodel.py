import math

import pytest
from hypothesis import given, settings, strategies as st

from gridcharge import netmodel
from gridcharge.netmodel import (
    EdgeSpec,
    NetworkParseError,
    TreeValidationError,
    parse_network,
    prune_nodes,
    serialize_network,
    subtree_index,
    validate_tree,
)

from conftest import data_path
from oracles import subtree_sizes_by_bfs

MINIMAL = "# root=1 voltage=1.0\n1,2,0.01,0.01\n"


class TestEdgeSpec:
    def test_rejects_negative_impedance(self):
        with pytest.raises(ValueError, match="non-negative"):
            EdgeSpec(1, 2, -0.01, 0.01)

    def test_rejects_zero_impedance(self):
        with pytest.raises(ValueError, match="zero-impedance"):
            EdgeSpec(1, 2, 0.0, 0.0)

    def test_rejects_nan(self):
        with pytest.raises(ValueError, match="finite"):
            EdgeSpec(1, 2, math.nan, 0.01)

    def test_single_zero_component_allowed(self):
        assert EdgeSpec(1, 2, 0.01, 0.0).reactance == 0.0


class TestParse:
    def test_minimal_file(self):
        spec = parse_network(MINIMAL)
        assert spec.nodes == frozenset({1, 2})
        assert len(spec.edges) == 1
        assert spec.root == 1
        assert spec.nominal_voltage == 1.0

    def test_missing_header(self):
        with pytest.raises(NetworkParseError, match="header"):
            parse_network("1,2,0.01,0.01\n")

    def test_negative_impedance_names_line(self):
        with pytest.raises(NetworkParseError, match="line 2"):
            parse_network("# root=1 voltage=1.0\n1,2,-0.01,0.01\n")

    def test_duplicate_edge(self):
        text = MINIMAL + "2,1,0.02,0.02\n"
        with pytest.raises(NetworkParseError, match="duplicate"):
            parse_network(text)

    def test_malformed_line_reports_number(self):
        text = "# root=1 voltage=1.0\n\n1,2,0.01\n"
        with pytest.raises(NetworkParseError, match="line 3"):
            parse_network(text)

    def test_comments_and_blanks_skipped(self):
        text = "# root=1 voltage=1.0\n\n# a comment\n1,2,0.01,0.01\n"
        assert len(parse_network(text).edges) == 1

    def test_prune_metadata(self):
        text = "# root=1 voltage=1.0\n# prune=2\n1,2,0.01,0.01\n"
        assert parse_network(text).prune_hint == (2,)

    def test_declared_isolated_node(self):
        text = "# root=1 voltage=1.0\n# nodes=9\n1,2,0.01,0.01\n"
        assert 9 in parse_network(text).nodes

    def test_header_voltage(self):
        text = "# root=1 voltage=2.5\n1,2,0.01,0.01\n"
        assert parse_network(text).nominal_voltage == 2.5

    def test_file_loading(self):
        spec = netmodel.load_network(data_path("synthetic_tree12.csv"))
        assert len(spec.nodes) == 12

    def test_roundtrip_identity(self):
        spec = netmodel.load_network(data_path("synthetic_tree12.csv"))
        again = parse_network(serialize_network(spec))
        assert again == spec

    @given(st.lists(
        st.tuples(st.floats(0.001, 10.0), st.floats(0.0, 10.0)),
        min_size=1, max_size=8,
    ))
    @settings(max_examples=40, deadline=None)
    def test_roundtrip_random_paths(self, impedances):
        edges = tuple(
            EdgeSpec(i + 1, i + 2, r, x) for i, (r, x) in enumerate(impedances)
        )
        nodes = frozenset(range(1, len(impedances) + 2))
        spec = netmodel.NetworkSpec(nodes=nodes, edges=edges, root=1, nominal_voltage=1.0)
        assert parse_network(serialize_network(spec)) == spec


class TestValidateTree:
    def test_path_depths(self):
        spec = parse_network("# root=1 voltage=1.0\n1,2,0.01,0.01\n2,3,0.01,0.01\n")
        tree = validate_tree(spec)
        assert tree.depth == {1: 0, 2: 1, 3: 2}
        assert tree.order[0] == 1

    def test_cycle(self):
        spec = parse_network(
            "# root=1 voltage=1.0\n1,2,0.01,0.01\n2,3,0.01,0.01\n3,1,0.01,0.01\n"
        )
        with pytest.raises(TreeValidationError, match="cycle"):
            validate_tree(spec)

    def test_disconnected(self):
        spec = parse_network("# root=1 voltage=1.0\n# nodes=9\n1,2,0.01,0.01\n")
        with pytest.raises(TreeValidationError, match="disconnected"):
            validate_tree(spec)

    def test_reorients_edges(self):
        spec = parse_network("# root=1 voltage=1.0\n3,2,0.05,0.01\n2,1,0.01,0.01\n")
        tree = validate_tree(spec)
        assert [(e.from_node, e.to_node) for e in tree.edges] == [(1, 2), (2, 3)]
        assert tree.edge(2, 3).resistance == 0.05

    @given(st.integers(0, 255))
    @settings(max_examples=64, deadline=None)
    def test_orientation_insensitive(self, mask):
        base = [(1, 2), (2, 3), (2, 4), (4, 5), (1, 6), (6, 7), (7, 8)]
        lines = ["# root=1 voltage=1.0"]
        for i, (u, v) in enumerate(base):
            if mask & (1 << i):
                u, v = v, u
            lines.append(f"{u},{v},0.0{i + 1},0.01")
        tree = validate_tree(parse_network("\n".join(lines)))
        reference = validate_tree(parse_network(
            "\n".join(["# root=1 voltage=1.0"] +
                      [f"{u},{v},0.0{i + 1},0.01" for i, (u, v) in enumerate(base)])
        ))
        assert tree.parent == reference.parent
        assert tree.depth == reference.depth
        assert tree.edges == reference.edges


class TestPrune:
    def test_remove_leaf(self):
        spec = parse_network("# root=1 voltage=1.0\n1,2,0.01,0.01\n2,3,0.01,0.01\n")
        pruned = prune_nodes(spec, {3})
        assert pruned.nodes == frozenset({1, 2})
        assert len(pruned.edges) == 1

    def test_remove_nothing_is_identity(self):
        spec = parse_network(MINIMAL)
        assert prune_nodes(spec, set()) is spec

    def test_remove_root_fails(self):
        spec = parse_network(MINIMAL)
        with pytest.raises(ValueError, match="root"):
            prune_nodes(spec, {1})

    def test_orphaning_removal_fails(self):
        spec = parse_network("# root=1 voltage=1.0\n1,2,0.01,0.01\n2,3,0.01,0.01\n")
        with pytest.raises(ValueError, match="disconnects"):
            prune_nodes(spec, {2})

    def test_cascaded_removal(self):
        spec = parse_network("# root=1 voltage=1.0\n1,2,0.01,0.01\n2,3,0.01,0.01\n")
        pruned = prune_nodes(spec, {2, 3})
        assert pruned.nodes == frozenset({1})

    def test_prune_metadata_flow(self):
        """A file carrying generator nodes in its prune metadata reduces to
        the bare consumption network."""
        text = (
            "# root=1 voltage=1.0\n# prune=4,5\n"
            "1,2,0.01,0.01\n2,3,0.01,0.01\n1,4,0.01,0.01\n4,5,0.01,0.01\n"
        )
        spec = parse_network(text)
        pruned = prune_nodes(spec, spec.prune_hint)
        assert pruned.nodes == frozenset({1, 2, 3})
        assert pruned.prune_hint == ()
        validate_tree(pruned)

    def test_bundled_generator_file_prunes_to_calibration_tree(self):
        """The shipped 14-node file with generator metadata reduces to the
        12-node calibration topology."""
        with_pv = netmodel.load_network(data_path("synthetic_tree14_pv.csv"))
        assert len(with_pv.nodes) == 14
        pruned = prune_nodes(with_pv, with_pv.prune_hint)
        reference = netmodel.load_network(data_path("synthetic_tree12.csv"))
        assert pruned.nodes == reference.nodes
        assert validate_tree(pruned).edges == validate_tree(reference).edges


class TestSubtreeIndex:
    def test_path(self, path3_tree, path3_index):
        assert path3_index.nodes[2] == frozenset({2, 3})
        assert path3_index.edges[2] == ((2, 3),)

    def test_leaf(self, star5_tree, star5_index):
        assert star5_index.nodes[3] == frozenset({3})
        assert star5_index.edges[3] == ()

    def test_root_covers_everything(self, tree12, tree12_index):
        assert tree12_index.nodes[1] == tree12.nodes

    def test_sizes_match_bfs_oracle(self, tree12, tree12_index):
        oracle = subtree_sizes_by_bfs(tree12)
        assert {n: len(s) for n, s in tree12_index.nodes.items()} == oracle
        assert sum(len(s) for s in tree12_index.nodes.values()) == sum(oracle.values())

    def test_disjoint_union_property(self, tree12, tree12_index):
        for node in tree12.order:
            union = {node}
            total = 1
            for child in tree12.children[node]:
                union |= tree12_index.nodes[child]
                total += len(tree12_index.nodes[child])
            assert union == tree12_index.nodes[node]
            assert total == len(tree12_index.nodes[node])

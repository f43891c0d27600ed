import numpy as np
import pytest

from ontograft.ontology import (
    CycleError,
    DuplicateIdError,
    OboSyntaxError,
    OntologyClass,
    OntologyError,
    OntologyGraph,
    UnknownClassError,
    parse_obo,
    serialize_obo,
)

from conftest import make_graph, random_dag

FENTIN = """\
[Term]
id: CHEBI:38962
name: organotin compound

[Term]
id: CHEBI:24651
name: hydroxides

[Term]
id: CHEBI:38964
name: fentin hydroxide
is_a: CHEBI:38962 ! organotin compound
is_a: CHEBI:24651
property_value: http://purl.obolibrary.org/obo/chebi/smiles "O[Sn](c1ccccc1)(c1ccccc1)c1ccccc1" xsd:string
"""


def bfs_ancestors(graph, start):
    """Independent oracle: breadth-first traversal over parent edges."""
    seen = set()
    frontier = [start]
    while frontier:
        nxt = []
        for node in frontier:
            for parent in graph[node].parents:
                if parent not in seen:
                    seen.add(parent)
                    nxt.append(parent)
        frontier = nxt
    return seen


def dfs_has_cycle(edges: dict[str, list[str]]) -> bool:
    """Independent oracle: recursive depth-first cycle search."""
    state = {}

    def visit(node):
        if state.get(node) == "active":
            return True
        if state.get(node) == "done":
            return False
        state[node] = "active"
        if any(visit(p) for p in edges.get(node, [])):
            return True
        state[node] = "done"
        return False

    return any(visit(n) for n in edges)


class TestParse:
    def test_minimal_stanza(self):
        graph = parse_obo("[Term]\nid: X\nname: x\n")
        assert len(graph) == 1
        assert graph["X"].name == "x"
        assert graph["X"].parents == frozenset()
        assert graph.is_leaf("X")

    def test_fentin_hydroxide_parents(self):
        graph = parse_obo(FENTIN)
        assert graph["CHEBI:38964"].parents == {"CHEBI:38962", "CHEBI:24651"}
        assert graph["CHEBI:38964"].smiles == "O[Sn](c1ccccc1)(c1ccccc1)c1ccccc1"

    def test_two_node_cycle_reported(self):
        text = "[Term]\nid: A\nis_a: B\n\n[Term]\nid: B\nis_a: A\n"
        assert dfs_has_cycle({"A": ["B"], "B": ["A"]})
        with pytest.raises(CycleError) as err:
            parse_obo(text)
        assert set(err.value.cycle) == {"A", "B"}

    def test_comment_stripped(self):
        graph = parse_obo("[Term]\nid: A\n\n[Term]\nid: B\nis_a: A ! parent label\n")
        assert graph["B"].parents == {"A"}

    def test_syntax_error_has_line_number(self):
        with pytest.raises(OboSyntaxError) as err:
            parse_obo("[Term]\nid: A\nthis line has no tag\n")
        assert err.value.line == 3

    def test_duplicate_id(self):
        with pytest.raises(DuplicateIdError):
            parse_obo("[Term]\nid: A\n\n[Term]\nid: A\n")

    def test_dangling_is_a(self):
        with pytest.raises(OboSyntaxError) as err:
            parse_obo("[Term]\nid: A\nis_a: MISSING\n")
        assert "MISSING" in str(err.value)
        assert err.value.line == 3

    def test_obsolete_parsed_but_not_leaf(self):
        text = (
            "[Term]\nid: A\n\n"
            "[Term]\nid: B\nis_a: A\nis_obsolete: true\n"
            'property_value: http://purl.obolibrary.org/obo/chebi/smiles "CC" xsd:string\n'
        )
        graph = parse_obo(text)
        assert graph["B"].obsolete
        assert graph.leaves() == set()
        assert graph.structured_leaves() == set()

    def test_unknown_lines_preserved(self):
        text = "[Term]\nid: A\nname: a\ndef: \"something\" []\nxref: CAS:1234\n"
        graph = parse_obo(text)
        assert graph["A"].extra_lines == ('def: "something" []', "xref: CAS:1234")

    def test_empty_smiles_rejected(self):
        text = '[Term]\nid: A\nproperty_value: http://purl.obolibrary.org/obo/chebi/smiles "" xsd:string\n'
        with pytest.raises(OboSyntaxError):
            parse_obo(text)


class TestRoundTrip:
    def test_parse_serialize_identity(self):
        header = "format-version: 1.2\nontology: demo\n"
        text = header + "\n" + FENTIN + "\n[Typedef]\nid: has_part\nname: has part\n"
        graph = parse_obo(text)
        again = parse_obo(serialize_obo(graph))
        assert again == graph
        assert again.header_lines == graph.header_lines
        assert again.trailing_stanzas == graph.trailing_stanzas

    def test_smiles_escaping_round_trip(self):
        # E/Z bonds put backslashes in SMILES; OBO quotes must escape them
        cls = OntologyClass(id="A", name="a", smiles='C/C=C\\C')
        graph = OntologyGraph({"A": cls})
        again = parse_obo(serialize_obo(graph))
        assert again["A"].smiles == 'C/C=C\\C'

    def test_stanzas_sorted_by_id(self):
        graph = parse_obo("[Term]\nid: Z\n\n[Term]\nid: A\n")
        text = serialize_obo(graph)
        assert text.index("id: A") < text.index("id: Z")

    def test_random_graphs_round_trip(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            graph = random_dag(rng, int(rng.integers(2, 30)))
            assert parse_obo(serialize_obo(graph)) == graph


class TestQueries:
    def test_root_has_no_ancestors(self):
        graph = make_graph({"R": {}, "A": {"parents": ["R"]}})
        assert graph.ancestors("R") == set()

    def test_chain_ancestors(self):
        graph = make_graph({"C": {}, "B": {"parents": ["C"]}, "A": {"parents": ["B"]}})
        assert graph.ancestors("A") == {"B", "C"}
        assert graph.ancestors("A") == bfs_ancestors(graph, "A")

    def test_fentin_ancestors(self):
        graph = parse_obo(FENTIN)
        assert graph.ancestors("CHEBI:38964") == {"CHEBI:38962", "CHEBI:24651"}

    def test_ancestors_match_bfs_oracle_on_random_dags(self):
        rng = np.random.default_rng(17)
        for _ in range(10):
            graph = random_dag(rng, 40)
            for cid in graph.ids():
                assert graph.ancestors(cid) == bfs_ancestors(graph, cid)

    def test_ancestors_monotone_over_edges(self):
        rng = np.random.default_rng(23)
        graph = random_dag(rng, 60)
        for cid in graph.ids():
            for parent in graph[cid].parents:
                anc = graph.ancestors(cid)
                assert graph.ancestors(parent) | {parent} <= anc

    def test_unknown_id(self):
        graph = make_graph({"A": {}})
        with pytest.raises(UnknownClassError):
            graph.ancestors("nope")

    def test_structured_leaves_empty_graph(self):
        assert OntologyGraph({}).structured_leaves() == set()

    def test_structured_leaves_smiles_only_on_internal(self):
        graph = make_graph({"R": {"smiles": "CC"}, "A": {"parents": ["R"]}})
        assert graph.structured_leaves() == set()

    def test_structured_leaves_chain(self):
        graph = make_graph(
            {"C": {}, "B": {"parents": ["C"]}, "A": {"parents": ["B"], "smiles": "CC"}}
        )
        # oracle: exhaustive child-count check
        children = {cid: 0 for cid in graph.ids()}
        for cid in graph.ids():
            for parent in graph[cid].parents:
                children[parent] += 1
        expected = {
            cid for cid in graph.ids()
            if children[cid] == 0 and graph[cid].smiles is not None
        }
        assert graph.structured_leaves() == expected == {"A"}


class TestInsert:
    def base(self):
        return make_graph({"R": {}, "A": {"parents": ["R"]}, "B": {"parents": ["R"]}})

    def test_empty_additions_is_identity(self):
        graph = self.base()
        assert graph.insert_subsumptions([]) == graph

    def test_add_under_two_superclasses(self):
        graph = self.base()
        new = OntologyClass(id="N", name="new", smiles="CC")
        out = graph.insert_subsumptions([(new, ["A", "B"])])
        assert out["N"].parents == {"A", "B"}
        assert len(out.leaves()) == len(graph.leaves()) + 1 - 2  # A, B stop being leaves
        assert out.is_leaf("N")
        # functional: the original graph is untouched
        assert "N" not in graph

    def test_duplicate_new_id(self):
        graph = self.base()
        with pytest.raises(DuplicateIdError):
            graph.insert_subsumptions([(OntologyClass(id="A"), ["R"])])

    def test_unknown_superclass(self):
        graph = self.base()
        with pytest.raises(UnknownClassError):
            graph.insert_subsumptions([(OntologyClass(id="N"), ["missing"])])

    def test_addition_can_reference_earlier_addition(self):
        graph = self.base()
        out = graph.insert_subsumptions(
            [(OntologyClass(id="N1"), ["A"]), (OntologyClass(id="N2"), ["N1"])]
        )
        assert out["N2"].parents == {"N1"}

    def test_self_superclass_rejected(self):
        graph = self.base()
        with pytest.raises(OntologyError):
            graph.insert_subsumptions([(OntologyClass(id="N"), ["N"])])


class TestValidation:
    def test_cycle_error_from_constructor(self):
        a = OntologyClass(id="A", parents=frozenset(["B"]))
        b = OntologyClass(id="B", parents=frozenset(["A"]))
        with pytest.raises(CycleError):
            OntologyGraph({"A": a, "B": b})

    def test_missing_parent_rejected(self):
        a = OntologyClass(id="A", parents=frozenset(["nope"]))
        with pytest.raises(UnknownClassError):
            OntologyGraph({"A": a})

    def test_self_parent_rejected(self):
        with pytest.raises(OntologyError):
            OntologyClass(id="A", parents=frozenset(["A"]))

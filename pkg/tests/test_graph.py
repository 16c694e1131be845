import json

import pytest

from graphrbm.graph import (Edge, GraphError, MetricGraph, build_paper_graph, check, graph_to_dict,
                            interval_graph, load_graph, paper_groups, save_graph, validate,
                            with_groups)


def test_paper_graph_topology():
    g = build_paper_graph(1.0)
    assert len(g.edges) == 10
    assert len(g.interior) == 3 and len(g.boundary) == 8
    assert [g.degree(v) for v in (1, 2, 3)] == [4, 5, 3]
    assert validate(g) == []


def test_incidence_signs_at_first_junction():
    g = build_paper_graph()
    assert g.sign(1, 1) == +1
    assert [g.sign(e, 1) for e in (2, 3, 4)] == [-1, -1, -1]


def test_length_parameter():
    g = build_paper_graph(2.0)
    assert all(e.length == 2.0 for e in g.edges)
    assert [(e.tail, e.head) for e in g.edges] == [(e.tail, e.head) for e in build_paper_graph().edges]


def test_nonpositive_length_rejected():
    with pytest.raises(GraphError):
        build_paper_graph(0.0)


def test_unknown_vertex_reported():
    g = MetricGraph(edges=(Edge(1, 1, 2, 1.0), Edge(2, 2, 9, 1.0)),
                    interior=frozenset({2}), boundary=frozenset({1}))
    assert any("unknown vertex" in p for p in validate(g))


def test_disconnected_reported():
    tri = lambda off: [Edge(off + i, off + i, off + (i + 1) % 3, 1.0) for i in range(3)]
    edges = tuple(tri(0)) + tuple(Edge(e.id + 10, e.tail + 10, e.head + 10, 1.0) for e in tri(0))
    verts = frozenset({0, 1, 2, 10, 11, 12})
    g = MetricGraph(edges=edges, interior=verts, boundary=frozenset())
    assert any("not connected" in p for p in validate(g))


def test_dangling_edge_named():
    # vertex 3 is declared interior but only touches one edge
    g = MetricGraph(edges=(Edge(1, 1, 2, 1.0), Edge(2, 2, 3, 1.0), Edge(7, 2, 4, 1.0)),
                    interior=frozenset({2, 3}), boundary=frozenset({1, 4}))
    problems = validate(g)
    assert any("dangling edge 2" in p for p in problems)
    with pytest.raises(GraphError):
        check(g)


def test_group_plans_cover_every_edge():
    g = build_paper_graph()
    for style in ("overlapping", "non_overlapping"):
        assert validate(with_groups(g, paper_groups(style))) == []


def test_group_with_one_shared_member_is_reported():
    groups = list(paper_groups("overlapping"))
    groups[2] = type(groups[2])("B3", groups[2].members[1:])
    problems = validate(with_groups(build_paper_graph(), groups))
    assert any("shared edge 8" in p for p in problems)


def test_round_trip_json(tmp_path):
    g = with_groups(build_paper_graph(), paper_groups("overlapping"))
    save_graph(g, tmp_path / "g.json")
    back = load_graph(tmp_path / "g.json")
    assert graph_to_dict(back) == graph_to_dict(g)
    assert back.host(1) == 4


def test_malformed_description(tmp_path):
    (tmp_path / "bad.json").write_text(json.dumps({"edges": []}))
    with pytest.raises(GraphError):
        load_graph(tmp_path / "bad.json")


def test_interval_graph():
    g = interval_graph(2.5)
    assert validate(g) == [] and g.edges[0].length == 2.5

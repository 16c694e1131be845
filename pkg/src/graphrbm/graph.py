"""Oriented metric graphs and edge groupings.

Edges are identified with intervals ``(0, l_e)``: ``x = 0`` sits at the tail
vertex and ``x = l_e`` at the head vertex.  Incidence signs are stored
explicitly (``+1`` at the head, ``-1`` at the tail) so that nothing downstream
has to re-derive the orientation convention.
"""
from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

PORTIONS = ("whole", "first_half", "second_half", "shared")


class GraphError(ValueError):
    """Raised when a graph or group description cannot be used."""


@dataclass(frozen=True)
class Edge:
    id: int
    tail: int
    head: int
    length: float


@dataclass(frozen=True)
class GroupMember:
    edge: int
    portion: str = "whole"


@dataclass(frozen=True)
class EdgeGroup:
    label: str
    members: tuple[GroupMember, ...]

    def edges(self) -> list[int]:
        return [m.edge for m in self.members]

    def portion_of(self, edge: int) -> str | None:
        for m in self.members:
            if m.edge == edge:
                return m.portion
        return None


@dataclass(frozen=True)
class MetricGraph:
    edges: tuple[Edge, ...]
    interior: frozenset[int]
    boundary: frozenset[int]
    groups: tuple[EdgeGroup, ...] = ()
    incidence: Mapping[tuple[int, int], int] = field(default_factory=dict)
    # interior vertex -> edge whose coefficient block stores the vertex value
    hosts: Mapping[int, int] = field(default_factory=dict)

    def __post_init__(self):
        if not self.incidence:
            inc = {}
            for e in self.edges:
                inc[(e.id, e.tail)] = -1
                inc[(e.id, e.head)] = +1
            object.__setattr__(self, "incidence", inc)

    @property
    def vertices(self) -> frozenset[int]:
        return self.interior | self.boundary

    def edge(self, edge_id: int) -> Edge:
        for e in self.edges:
            if e.id == edge_id:
                return e
        raise KeyError(f"unknown edge {edge_id}")

    def incident(self, v: int) -> list[Edge]:
        return [e for e in self.edges if v in (e.tail, e.head)]

    def degree(self, v: int) -> int:
        return sum((e.tail == v) + (e.head == v) for e in self.edges)

    def sign(self, edge_id: int, v: int) -> int:
        return self.incidence[(edge_id, v)]

    def host(self, v: int) -> int:
        """Edge that carries the coefficient of interior vertex ``v``.

        Defaults to the last outgoing edge of ``v`` (or the last incident one
        when ``v`` has no outgoing edge).
        """
        if v in self.hosts:
            return self.hosts[v]
        outgoing = [e.id for e in self.edges if e.tail == v]
        if outgoing:
            return outgoing[-1]
        return [e.id for e in self.incident(v)][-1]

    def group(self, label: str) -> EdgeGroup:
        for g in self.groups:
            if g.label == label:
                return g
        raise KeyError(f"unknown group {label!r}")


# (tail, head) in the order e_1..e_10; vertices v_1..v_3 interior
_PAPER_EDGES = [(4, 1), (1, 5), (1, 6), (1, 2), (2, 7),
                (2, 8), (2, 9), (3, 2), (10, 3), (3, 11)]


def build_paper_graph(L: float = 1.0) -> MetricGraph:
    """Ten-edge, eleven-vertex reference network with all lengths ``L``.

    Vertex 1 is the head of edge 1 and the tail of edges 2-4; vertex 2 is
    the head of edges 4 and 8 and the tail of edges 5-7; vertex 3 is the
    head of edge 9 and the tail of edges 8 and 10.
    """
    if not L > 0:
        raise GraphError(f"length must be positive, got {L}")
    edges = tuple(Edge(i + 1, t, h, float(L)) for i, (t, h) in enumerate(_PAPER_EDGES))
    return MetricGraph(edges=edges,
                       interior=frozenset({1, 2, 3}),
                       boundary=frozenset(range(4, 12)),
                       hosts={1: 4, 2: 6, 3: 10})


def interval_graph(L: float = 1.0) -> MetricGraph:
    """A single edge between two boundary vertices."""
    return MetricGraph(edges=(Edge(1, 1, 2, float(L)),),
                       interior=frozenset(), boundary=frozenset({1, 2}))


def validate(graph: MetricGraph) -> list[str]:
    """Return every invariant violation found; an empty list means valid."""
    problems = []
    declared = graph.vertices
    overlap = graph.interior & graph.boundary
    if overlap:
        problems.append(f"vertices declared both interior and boundary: {sorted(overlap)}")
    ids = [e.id for e in graph.edges]
    if len(set(ids)) != len(ids):
        problems.append("duplicate edge ids")
    if not graph.edges:
        problems.append("graph has no edges")
    for e in graph.edges:
        for v in (e.tail, e.head):
            if v not in declared:
                problems.append(f"edge {e.id}: unknown vertex {v}")
        if e.tail == e.head:
            problems.append(f"edge {e.id}: self-loop at vertex {e.tail}")
        if not e.length > 0:
            problems.append(f"edge {e.id}: nonpositive length {e.length}")
    for v in sorted(graph.boundary):
        d = graph.degree(v)
        if d != 1:
            problems.append(f"boundary vertex {v} has degree {d}, expected 1")
    for v in sorted(graph.interior):
        d = graph.degree(v)
        if d == 1:
            problems.append(f"dangling edge {graph.incident(v)[0].id}: interior vertex {v} has degree 1")
        elif d < 2:
            problems.append(f"interior vertex {v} has degree {d}, expected >= 2")
    for v, eid in graph.hosts.items():
        if v not in graph.interior or eid not in {e.id for e in graph.incident(v)}:
            problems.append(f"host edge {eid} is not incident to interior vertex {v}")
    if graph.edges and not _connected(graph):
        problems.append("graph is not connected")
    problems.extend(_validate_groups(graph))
    return problems


def _connected(graph: MetricGraph) -> bool:
    adj: dict[int, set[int]] = {v: set() for v in graph.vertices}
    for e in graph.edges:
        adj.setdefault(e.tail, set()).add(e.head)
        adj.setdefault(e.head, set()).add(e.tail)
    start = graph.edges[0].tail
    seen = {start}
    queue = deque([start])
    while queue:
        v = queue.popleft()
        for w in adj[v] - seen:
            seen.add(w)
            queue.append(w)
    return seen == set(adj)


def _validate_groups(graph: MetricGraph) -> list[str]:
    if not graph.groups:
        return []
    problems = []
    edge_ids = {e.id for e in graph.edges}
    counts: dict[tuple[int, str], int] = {}
    for g in graph.groups:
        for m in g.members:
            if m.portion not in PORTIONS:
                problems.append(f"group {g.label}: unknown portion {m.portion!r}")
            if m.edge not in edge_ids:
                problems.append(f"group {g.label}: unknown edge {m.edge}")
            counts[(m.edge, m.portion)] = counts.get((m.edge, m.portion), 0) + 1
    for eid in sorted(edge_ids):
        portions = {p: counts.get((eid, p), 0) for p in PORTIONS}
        if not any(portions.values()):
            problems.append(f"edge {eid} is not covered by any group")
            continue
        if portions["shared"] not in (0, 2):
            problems.append(f"shared edge {eid} appears in {portions['shared']} groups, expected 2")
        halves = portions["first_half"], portions["second_half"]
        if halves != (0, 0) and halves != (1, 1):
            problems.append(f"split edge {eid} needs exactly one first_half and one second_half")
    return problems


def check(graph: MetricGraph) -> MetricGraph:
    problems = validate(graph)
    if problems:
        raise GraphError("; ".join(problems))
    return graph


def with_groups(graph: MetricGraph, groups: Iterable[EdgeGroup]) -> MetricGraph:
    return MetricGraph(edges=graph.edges, interior=graph.interior,
                       boundary=graph.boundary, groups=tuple(groups),
                       incidence=graph.incidence, hosts=graph.hosts)


def paper_groups(style: str) -> tuple[EdgeGroup, ...]:
    """Three-group plans of the reference network.

    ``overlapping`` shares edges 4 and 8 whole between neighbouring groups;
    ``non_overlapping`` splits them, each half going to the group that owns
    the junction at that end.
    """
    if style == "overlapping":
        layout = [("B1", [(1, "whole"), (2, "whole"), (3, "whole"), (4, "shared")]),
                ("B2", [(4, "shared"), (5, "whole"), (6, "whole"), (7, "whole"), (8, "shared")]),
                ("B3", [(8, "shared"), (9, "whole"), (10, "whole")])]
    elif style == "non_overlapping":
        layout = [("B1", [(1, "whole"), (2, "whole"), (3, "whole"), (4, "first_half")]),
                ("B2", [(4, "second_half"), (5, "whole"), (6, "whole"), (7, "whole"),
                        (8, "second_half")]),
                ("B3", [(8, "first_half"), (9, "whole"), (10, "whole")])]
    else:
        raise GraphError(f"unknown style {style!r}")
    return tuple(EdgeGroup(label, tuple(GroupMember(e, p) for e, p in members))
                 for label, members in layout)


# -- description files -----------------------------------------------------

def graph_from_dict(doc: Mapping) -> MetricGraph:
    """Build a graph from the ``vertices`` / ``edges`` / ``groups`` layout.

    Only structural problems that prevent construction raise here; use
    :func:`validate` for the invariant report.
    """
    try:
        interior, boundary = set(), set()
        for v in doc["vertices"]:
            vid = int(v["id"])
            (boundary if v.get("boundary", False) else interior).add(vid)
        edges = tuple(Edge(int(e["id"]), int(e["tail"]), int(e["head"]), float(e["length"]))
                      for e in doc["edges"])
        groups = tuple(
            EdgeGroup(str(g["label"]),
                      tuple(GroupMember(int(m["edge"]), str(m.get("portion", "whole")))
                            for m in g["members"]))
            for g in doc.get("groups", ()))
        hosts = {int(v["id"]): int(v["host"]) for v in doc["vertices"] if "host" in v}
    except (KeyError, TypeError, ValueError) as exc:
        raise GraphError(f"malformed graph description: {exc!r}") from exc
    return MetricGraph(edges=edges, interior=frozenset(interior),
                       boundary=frozenset(boundary), groups=groups, hosts=hosts)


def graph_to_dict(graph: MetricGraph) -> dict:
    return {
        "vertices": [dict({"id": v, "boundary": v in graph.boundary},
                          **({"host": graph.hosts[v]} if v in graph.hosts else {}))
                     for v in sorted(graph.vertices)],
        "edges": [{"id": e.id, "tail": e.tail, "head": e.head, "length": e.length}
                  for e in graph.edges],
        "groups": [{"label": g.label,
                    "members": [{"edge": m.edge, "portion": m.portion} for m in g.members]}
                   for g in graph.groups],
    }


def load_graph(path: str | Path) -> MetricGraph:
    path = Path(path)
    text = path.read_text()
    if path.suffix in (".yaml", ".yml"):
        import yaml
        doc = yaml.safe_load(text)
    else:
        doc = json.loads(text)
    return graph_from_dict(doc)


def save_graph(graph: MetricGraph, path: str | Path) -> None:
    Path(path).write_text(json.dumps(graph_to_dict(graph), indent=2))


def degrees(graph: MetricGraph, vertices: Sequence[int]) -> list[int]:
    return [graph.degree(v) for v in vertices]

"""Stiffness splittings built from edge groups.

Every element contribution of ``R`` is handed to one or more groups:

* entries in a junction row/column belong wholly to the junction's owner;
* entries between interior nodes of a ``whole`` edge go to its group;
* on a ``shared`` edge they are halved between the two groups;
* on a split edge, elements left of the interface node go to the
  ``first_half`` group and the rest to the ``second_half`` group, so the
  interface diagonal ``2/h`` ends up as ``1/h + 1/h``.

Because the parts are scattered from the very element entries that build
``R``, the parts add up to ``R`` exactly.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .fem import FemSystem, coo_to_csr, local_to_coo, _STIFF_LOCAL, element_arrays
from .graph import EdgeGroup, GroupMember, MetricGraph, paper_groups, PORTIONS
from .rbm import Decomposition, make_decomposition, trivial_decomposition

PRESETS = ("paper_overlap_3", "paper_nonoverlap_3", "single")


class PlanError(ValueError):
    pass


@dataclass(frozen=True)
class GroupPlan:
    groups: tuple[EdgeGroup, ...]
    style: str                      # "overlapping" | "non_overlapping"
    owners: Mapping[int, str] = field(default_factory=dict)

    @property
    def labels(self) -> list[str]:
        return [g.label for g in self.groups]


def split_index(N: int) -> int:
    """Interface node of a split edge, counted from the tail (1-based)."""
    s = N // 2 - 1
    if s < 1:
        raise PlanError(f"non-overlapping split needs N >= 4, got N={N}")
    return s


def paper_plan(style: str) -> GroupPlan:
    return GroupPlan(paper_groups(style), style, {1: "B1", 2: "B2", 3: "B3"})


def plan_from_dict(doc: Mapping, graph: MetricGraph | None = None) -> GroupPlan:
    """Read ``style``, ``owners`` and ``groups`` (falling back to the graph's)."""
    style = doc.get("style")
    if style not in ("overlapping", "non_overlapping"):
        raise PlanError(f"plan style must be overlapping or non_overlapping, got {style!r}")
    if "groups" in doc:
        groups = tuple(EdgeGroup(str(g["label"]),
                                 tuple(GroupMember(int(m["edge"]), str(m.get("portion", "whole")))
                                       for m in g["members"]))
                       for g in doc["groups"])
    elif graph is not None and graph.groups:
        groups = graph.groups
    else:
        raise PlanError("plan has no groups")
    owners = {int(v): str(g) for v, g in doc.get("owners", {}).items()}
    return GroupPlan(groups, style, owners)


def load_plan(path: str | Path, graph: MetricGraph | None = None) -> GroupPlan:
    path = Path(path)
    if path.suffix in (".yaml", ".yml"):
        import yaml
        doc = yaml.safe_load(path.read_text())
    else:
        doc = json.loads(path.read_text())
    return plan_from_dict(doc, graph)


class _Ownership:
    """Resolved group weights for edge pieces and junctions."""

    def __init__(self, system: FemSystem, plan: GroupPlan, style: str):
        if plan.style != style:
            raise PlanError(f"plan style is {plan.style!r}, builder expects {style!r}")
        self.graph = graph = system.graph
        self.N = system.N
        self.index = {g.label: i for i, g in enumerate(plan.groups)}
        if len(self.index) != len(plan.groups):
            raise PlanError("duplicate group labels")

        self.pieces: dict[int, dict[str, list[int]]] = {e.id: {} for e in graph.edges}
        for g in plan.groups:
            for m in g.members:
                if m.edge not in self.pieces:
                    raise PlanError(f"group {g.label} names unknown edge {m.edge}")
                if m.portion not in PORTIONS:
                    raise PlanError(f"unknown portion {m.portion!r}")
                self.pieces[m.edge].setdefault(m.portion, []).append(self.index[g.label])
        allowed = {"whole", "shared"} if style == "overlapping" else {"whole", "first_half", "second_half"}
        for eid, by in self.pieces.items():
            if not by:
                raise PlanError(f"edge {eid} is not covered by any group")
            if set(by) - allowed:
                raise PlanError(f"edge {eid}: portions {sorted(by)} not allowed in {style} plans")
            if "shared" in by and (len(by["shared"]) != 2 or len(by) != 1):
                raise PlanError(f"shared edge {eid} must belong to exactly two groups")
            if "whole" in by and (len(by["whole"]) != 1 or len(by) != 1):
                raise PlanError(f"edge {eid} must be whole in exactly one group")
            if ("first_half" in by or "second_half" in by) and not (
                    len(by.get("first_half", ())) == 1 and len(by.get("second_half", ())) == 1):
                raise PlanError(f"split edge {eid} needs one first_half and one second_half")
        self.split = split_index(self.N) if any("first_half" in by for by in self.pieces.values()) else None

        self.owner: dict[int, int] = {}
        for v in sorted(graph.interior):
            if v in plan.owners:
                if plan.owners[v] not in self.index:
                    raise PlanError(f"vertex {v} owned by unknown group {plan.owners[v]!r}")
                self.owner[v] = self.index[plan.owners[v]]
            else:
                cands = [gi for gi in range(len(plan.groups))
                         if all(gi in self.end_groups(e.id, v) for e in graph.incident(v))]
                if len(cands) != 1:
                    raise PlanError(f"interior vertex {v} has no unique owner; "
                                    f"candidate groups {[plan.groups[c].label for c in cands]}")
                self.owner[v] = cands[0]
            for e in graph.incident(v):
                if self.owner[v] not in self.end_groups(e.id, v):
                    raise PlanError(
                        f"vertex {v} is owned by group {plan.groups[self.owner[v]].label} "
                        f"but the adjacent piece of edge {e.id} is not in that group")

    def end_groups(self, eid: int, v: int) -> list[int]:
        """Groups holding the piece of edge ``eid`` that touches vertex ``v``."""
        by = self.pieces[eid]
        if "whole" in by:
            return by["whole"]
        if "shared" in by:
            return by["shared"]
        e = self.graph.edge(eid)
        return by["first_half"] if v == e.tail else by["second_half"]

    def element_groups(self, eid: int, k: int) -> list[tuple[int, float]]:
        by = self.pieces[eid]
        if "whole" in by:
            return [(by["whole"][0], 1.0)]
        if "shared" in by:
            return [(g, 0.5) for g in by["shared"]]
        side = "first_half" if k < self.split else "second_half"
        return [(by[side][0], 1.0)]

    def node_groups(self, eid: int, j: int) -> list[tuple[int, float]]:
        by = self.pieces[eid]
        if "whole" in by:
            return [(by["whole"][0], 1.0)]
        if "shared" in by:
            return [(g, 0.5) for g in by["shared"]]
        if j == self.split:
            return [(by["first_half"][0], 0.5), (by["second_half"][0], 0.5)]
        side = "first_half" if j < self.split else "second_half"
        return [(by[side][0], 1.0)]


def _build(system: FemSystem, plan: GroupPlan, style: str, subsets=None) -> Decomposition:
    own = _Ownership(system, plan, style)
    G = len(plan.groups)
    n = system.n_dof
    eids, ks, a, b = element_arrays(system)
    vertex_of = {d: v for v, d in system.dofs.vertex_dof.items()}

    rows = [[] for _ in range(G)]
    cols = [[] for _ in range(G)]
    vals = [[] for _ in range(G)]
    r, c, v = local_to_coo(a, b, _STIFF_LOCAL, 1.0 / system.h)
    # local_to_coo emits the four local blocks in order; recover element ids
    elem = np.arange(len(a))
    blocks = []
    for ri in (a, b):
        for cj in (a, b):
            keep = (ri >= 0) & (cj >= 0)
            blocks.append(elem[keep])
    elem_of_entry = np.concatenate(blocks)

    cache: dict[tuple[int, int], list[tuple[int, float]]] = {}
    for idx in range(len(v)):
        i, j, val = int(r[idx]), int(c[idx]), v[idx]
        if i in vertex_of or j in vertex_of:
            vtx = vertex_of.get(i, vertex_of.get(j))
            targets = [(own.owner[vtx], 1.0)]
        else:
            el = elem_of_entry[idx]
            key = (int(eids[el]), int(ks[el]))
            if key not in cache:
                cache[key] = own.element_groups(*key)
            targets = cache[key]
        for g, wgt in targets:
            rows[g].append(i)
            cols[g].append(j)
            vals[g].append(val * wgt)
    parts = [coo_to_csr(np.array(rows[g], dtype=int), np.array(cols[g], dtype=int),
                        np.array(vals[g]), n) for g in range(G)]
    for P in parts:
        P.eliminate_zeros()

    weights = np.zeros((G, n))
    for vtx, d in system.dofs.vertex_dof.items():
        weights[own.owner[vtx], d] = 1.0
    for e in system.graph.edges:
        dofs = system.dofs.edge_interior[e.id]
        for j, d in enumerate(dofs, start=1):
            for g, wgt in own.node_groups(e.id, j):
                weights[g, d] += wgt
    return make_decomposition(parts, weights, subsets, R=system.R, labels=plan.labels)


def build_overlapping(system: FemSystem, plan: GroupPlan, subsets=None) -> Decomposition:
    """Groups share whole edges; each shared edge block is halved."""
    return _build(system, plan, "overlapping", subsets)


def build_nonoverlapping(system: FemSystem, plan: GroupPlan, subsets=None) -> Decomposition:
    """Split edges share only their interface node."""
    return _build(system, plan, "non_overlapping", subsets)


def preset(name: str, system: FemSystem) -> Decomposition:
    if name == "paper_overlap_3":
        return build_overlapping(system, paper_plan("overlapping"))
    if name == "paper_nonoverlap_3":
        return build_nonoverlapping(system, paper_plan("non_overlapping"))
    if name == "single":
        return trivial_decomposition(system.R)
    raise PlanError(f"unknown decomposition preset {name!r}; choose from {PRESETS}")


def group_blocks(dec: Decomposition) -> list[np.ndarray]:
    """Dofs in the support of each part."""
    out = []
    for P in dec.parts:
        C = P.tocoo()
        out.append(np.unique(np.concatenate([C.row, C.col])))
    return out

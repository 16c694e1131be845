import json

import numpy as np
import pytest

from graphrbm.decompose import (GroupPlan, PlanError, build_nonoverlapping, build_overlapping,
                                group_blocks, load_plan, paper_plan, plan_from_dict, preset,
                                split_index)
from graphrbm.graph import EdgeGroup, GroupMember, paper_groups
from graphrbm.verification import paper_system


def _rel_sum_error(system, dec):
    total = dec.parts[0]
    for P in dec.parts[1:]:
        total = total + P
    return abs(total - system.R).max() / abs(system.R).max()


@pytest.mark.parametrize("N", [4, 8, 300])
@pytest.mark.parametrize("name", ["paper_overlap_3", "paper_nonoverlap_3"])
def test_parts_and_loads_sum_to_full(N, name):
    system = paper_system(N)
    dec = preset(name, system)
    assert _rel_sum_error(system, dec) < 1e-12
    np.testing.assert_allclose(dec.force_weights.sum(axis=0), 1.0, atol=1e-12)


def test_overlap_block_sizes_at_300():
    system = paper_system(300)
    sizes = [b.size for b in group_blocks(preset("paper_overlap_3", system))]
    assert sizes == [1201, 1501, 901]


def test_split_index_at_300():
    assert split_index(300) == 149
    system = paper_system(300)
    dec = preset("paper_nonoverlap_3", system)
    e4 = set(system.dofs.edge_interior[4])
    blocks = group_blocks(dec)
    assert len(e4 & set(blocks[0])) == 149
    assert len(e4 & set(blocks[1])) == 300 - 149 + 1


def test_split_needs_four_nodes():
    with pytest.raises(PlanError):
        split_index(3)
    with pytest.raises(PlanError):
        preset("paper_nonoverlap_3", paper_system(3))


def test_shared_edge_block_is_halved(paper_small):
    system, ov, _ = paper_small
    e4 = np.array(system.dofs.edge_interior[4])
    R = system.R.toarray()[np.ix_(e4, e4)]
    for m in (0, 1):
        np.testing.assert_allclose(ov.parts[m].toarray()[np.ix_(e4, e4)], R / 2, rtol=1e-15)
    assert not ov.parts[2].toarray()[np.ix_(e4, e4)].any()


def test_interface_diagonal_split(paper_small):
    system, _, nov = paper_small
    h = system.h
    for eid, (a, b) in ((4, (0, 1)), (8, (2, 1))):
        d = system.dofs.edge_interior[eid][split_index(4) - 1]
        vals = [nov.parts[m][d, d] for m in (a, b)]
        assert vals == pytest.approx([1 / h, 1 / h], rel=1e-14)
        assert sum(vals) == pytest.approx(system.R[d, d], rel=1e-14)


def test_block_intersections(paper_small):
    system, ov, nov = paper_small
    b = [set(x) for x in group_blocks(nov)]
    s = split_index(4) - 1
    assert b[0] & b[1] == {system.dofs.edge_interior[4][s]}
    assert b[1] & b[2] == {system.dofs.edge_interior[8][s]}
    assert not b[0] & b[2]
    o = [set(x) for x in group_blocks(ov)]
    assert o[0] & o[1] == set(system.dofs.edge_interior[4])
    assert not o[0] & o[2]


def test_rank_one_mass_coupling_across_interface(paper_small):
    system, _, _ = paper_small
    s = split_index(4)
    dofs = list(system.dofs.edge_interior[4])
    first, rest = dofs[:s], dofs[s:]
    C = system.E.toarray()[np.ix_(first, rest)]
    assert np.linalg.matrix_rank(C) == 1
    assert np.count_nonzero(C) == 1 and C[-1, 0] == pytest.approx(system.h / 6)


def test_junctions_belong_to_owner(paper_small):
    system, ov, nov = paper_small
    for dec in (ov, nov):
        for v, m in ((1, 0), (2, 1), (3, 2)):
            d = system.dofs.vertex_dof[v]
            assert dec.force_weights[m, d] == 1.0
            assert dec.parts[m][d, d] == system.R[d, d]


def test_owner_inference_matches_paper_plan(paper_small):
    system, ov, _ = paper_small
    plan = GroupPlan(paper_groups("overlapping"), "overlapping")
    inferred = build_overlapping(system, plan)
    for a, b in zip(inferred.parts, ov.parts):
        assert abs(a - b).max() == 0


def test_ambiguous_owner_rejected(paper_small):
    system = paper_small[0]
    groups = paper_groups("overlapping")
    # moving edge 1 to B2 leaves vertex 1 with no group holding all its pieces
    g1 = EdgeGroup("B1", tuple(m for m in groups[0].members if m.edge != 1))
    g2 = EdgeGroup("B2", groups[1].members + (GroupMember(1, "whole"),))
    with pytest.raises(PlanError, match="vertex 1"):
        build_overlapping(system, GroupPlan((g1, g2, groups[2]), "overlapping"))


def test_style_mismatch_and_bad_portions(paper_small):
    system = paper_small[0]
    with pytest.raises(PlanError):
        build_nonoverlapping(system, paper_plan("overlapping"))
    bad = GroupPlan(paper_groups("non_overlapping"), "overlapping")
    with pytest.raises(PlanError, match="not allowed"):
        build_overlapping(system, bad)
    with pytest.raises(PlanError):
        preset("nope", system)


def test_uncovered_edge(paper_small):
    system = paper_small[0]
    groups = list(paper_groups("overlapping"))
    groups[1] = EdgeGroup("B2", tuple(m for m in groups[1].members if m.edge != 7))
    with pytest.raises(PlanError, match="edge 7"):
        build_overlapping(system, GroupPlan(tuple(groups), "overlapping", {1: "B1", 2: "B2", 3: "B3"}))


def test_plan_files(tmp_path, paper_small):
    system, _, nov = paper_small
    doc = {"style": "non_overlapping", "owners": {"1": "B1", "2": "B2", "3": "B3"},
           "groups": [{"label": g.label, "members": [{"edge": m.edge, "portion": m.portion}
                                                     for m in g.members]}
                      for g in paper_groups("non_overlapping")]}
    (tmp_path / "p.json").write_text(json.dumps(doc))
    import yaml
    (tmp_path / "p.yaml").write_text(yaml.safe_dump(doc))
    for name in ("p.json", "p.yaml"):
        dec = build_nonoverlapping(system, load_plan(tmp_path / name))
        for a, b in zip(dec.parts, nov.parts):
            assert abs(a - b).max() == 0
    with pytest.raises(PlanError):
        plan_from_dict({"style": "diagonal"})
    with pytest.raises(PlanError):
        plan_from_dict({"style": "overlapping"})


def test_single_preset(paper_small):
    system = paper_small[0]
    dec = preset("single", system)
    assert dec.M == 1 and dec.is_degenerate

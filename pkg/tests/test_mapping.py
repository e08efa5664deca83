import pytest
from hypothesis import given, strategies as st

from hetplan.cluster import DeviceId
from hetplan.errors import SpecError
from hetplan.grouping import GroupingProblem, make_tp_units, solve_grouping
from hetplan.grouping import _solution_from_groups
from hetplan.mapping import classify_links, map_nodes_and_stages

from conftest import make_spec


def grouping_of(spec, tp, groups, K=8):
    prob = GroupingProblem(make_tp_units(spec, tp), tp, K, 0.0)
    return _solution_from_groups(prob, groups, True, "fixed")


def types_per_stage(mapping):
    return [[s.gpu_type for s in g] for g in mapping.groups]


def test_pipeline_with_standalone_h800():
    spec = make_spec([(0, 2, "A100"), (1, 1, "H800")])
    m = map_nodes_and_stages(spec, grouping_of(spec, 1, [[0, 1], [2]]), 1)
    assert types_per_stage(m) == [["A100", "A100"], ["H800"]]
    assert [[s.stage_index for s in g] for g in m.groups] == [[1, 2], [1]]
    assert m.halt_reason is not None


def test_single_device():
    spec = make_spec([(0, 1, "A100")])
    m = map_nodes_and_stages(spec, grouping_of(spec, 1, [[0]]), 1)
    assert m.groups[0][0].devices == (DeviceId(0, 0),)
    assert m.groups[0][0].stage_index == 1


def test_weakest_type_first_in_every_group():
    spec = make_spec([(0, 2, "A100"), (1, 2, "H800")])
    m = map_nodes_and_stages(spec, grouping_of(spec, 1, [[0, 2], [1, 3]]), 1)
    assert types_per_stage(m) == [["A100", "H800"], ["A100", "H800"]]
    assert m.joint_rounds == 2 and m.halt_reason is None
    # the joint rounds place the two stage-1 A100s on one node, so that DP link is NVLink
    rep = classify_links(spec, m)
    assert rep["dp_nvlink_pairs"] == 2


def test_unknown_device_rejected():
    spec = make_spec([(0, 2, "A100")])
    other = make_spec([(0, 4, "A100")])
    g = grouping_of(other, 1, [[0, 1, 2, 3]])
    with pytest.raises(SpecError):
        map_nodes_and_stages(spec, g, 1)


def test_links_tp_intra_and_pp_inter():
    spec = make_spec([(0, 4, "A100"), (1, 2, "H800")])
    g = grouping_of(spec, 2, [[0, 2], [1]])
    m = map_nodes_and_stages(spec, g, 2)
    rep = classify_links(spec, m)
    assert rep["tp_violations"] == []
    tp_pairs = [p for p in rep["pairs"] if p["role"] == "TP"]
    assert tp_pairs and all(p["link"] == "nvlink" for p in tp_pairs)
    pp = [p for p in rep["pairs"] if p["role"] == "PP"]
    assert pp and all(p["link"] == "inter_node" for p in pp)


def test_dp_replicas_on_one_node_labeled_nvlink():
    spec = make_spec([(0, 2, "A100")])
    m = map_nodes_and_stages(spec, grouping_of(spec, 1, [[0], [1]]), 1)
    rep = classify_links(spec, m)
    assert rep["pairs"] == [{"a": [0, 0], "b": [0, 1], "roles": ["DP"], "role": "DP", "link": "nvlink"}]


cluster_shapes = st.lists(st.tuples(st.sampled_from(["A100", "H800", "H20"]), st.sampled_from([2, 4])),
                          min_size=1, max_size=3)


def _spec_from(shape):
    return make_spec([(i, c, t) for i, (t, c) in enumerate(shape)])


@given(cluster_shapes, st.sampled_from([1, 2]), st.integers(1, 8))
def test_mapping_invariants(shape, tp, K):
    spec = _spec_from(shape)
    sol = solve_grouping(GroupingProblem.for_cluster(spec, tp, K, 0.0))
    m = map_nodes_and_stages(spec, sol, tp)
    devs = m.all_devices()
    assert sorted(devs) == sorted(spec.devices())
    for g in m.groups:
        assert [s.stage_index for s in g] == list(range(1, len(g) + 1))
        for s in g:
            assert len({d.node_id for d in s.devices}) == 1
    assert classify_links(spec, m)["tp_violations"] == []
    # locality swaps only trade same-type units, so each group's type mix is kept
    for g, want in zip(m.groups, sol.groups):
        assert sorted(s.gpu_type for s in g) == sorted(sol.units[u].gpu_type for u in want)


@given(st.integers(1, 3), st.integers(1, 3))
def test_weakest_first_when_joint_conditions_hold(n_groups, per_group):
    # each group gets per_group A100 units and one H800 unit, all groups alike
    spec = make_spec([(0, n_groups * per_group, "A100"), (1, n_groups, "H800")])
    units = make_tp_units(spec, 1)
    groups = [[j * per_group + k for k in range(per_group)] + [n_groups * per_group + j] for j in range(n_groups)]
    m = map_nodes_and_stages(spec, grouping_of(spec, 1, groups), 1)
    assert m.halt_reason is None
    for g in m.groups:
        powers = [s.unit.device_power for s in g]
        assert powers == sorted(powers)
    assert len(units) == len(m.all_devices())


def test_node_listing_order_irrelevant():
    a = make_spec([(0, 2, "A100"), (1, 2, "H800")])
    b = make_spec([(1, 2, "H800"), (0, 2, "A100")])
    ma = map_nodes_and_stages(a, solve_grouping(GroupingProblem.for_cluster(a, 1, 8, 0.0)), 1)
    mb = map_nodes_and_stages(b, solve_grouping(GroupingProblem.for_cluster(b, 1, 8, 0.0)), 1)
    assert [[s.devices for s in g] for g in ma.groups] == [[s.devices for s in g] for g in mb.groups]

import pytest
from hypothesis import given, settings, strategies as st

from hetplan.errors import InfeasibleError, SpecError
from hetplan.plan import dump_plan, load_plan
from hetplan.planner import candidate_tp_dims, explain, plan
from hetplan.profile import ModelConfig, synth_profile

from conftest import make_spec

PROFILE = synth_profile({"A100": 1.0, "H800": 2.0, "H20": 1.5}, [1, 2, 4, 8], 64)


def small_cfg(n_layers=8, K=8, param=1e8, act=1e7, opt=3.0):
    return ModelConfig(n_layers, param, act, opt, K)


def test_one_gpu_trivial_plan():
    spec = make_spec([(0, 1, "A100")])
    p = plan(spec, small_cfg(), PROFILE)
    assert p.tp_dim == 1 and len(p.groups) == 1 and len(p.groups[0]) == 1
    assert p.groups[0][0].layer_range == (0, 8)


def test_two_identical_gpus_prefer_pure_dp():
    spec = make_spec([(0, 2, "A100")])
    p = plan(spec, small_cfg(K=32), PROFILE, tp_dims=[1])
    assert [len(g) for g in p.groups] == [1, 1]


def test_selected_is_cheapest_candidate():
    spec = make_spec([(0, 4, "A100"), (1, 4, "H800")])
    p = plan(spec, small_cfg(), PROFILE)
    costs = [c["cost"] for c in p.candidates if "cost" in c]
    assert p.cost.T_star == min(costs)
    assert [c["tp_dim"] for c in p.candidates if c["status"] == "selected"] == [p.tp_dim]


def test_six_gpu_nodes_reject_tp4():
    spec = make_spec([(0, 6, "A100"), (1, 6, "A100")])
    assert 4 in candidate_tp_dims(spec)
    p = plan(spec, small_cfg(), PROFILE)
    rejected = {c["tp_dim"]: c["reason"] for c in p.candidates if c["status"] == "rejected"}
    assert rejected[4] == "divisibility"
    report = explain(p)
    assert "tp=4" in report and "divisibility" in report


def test_tp_dims_override():
    spec = make_spec([(0, 4, "A100"), (1, 4, "H800")])
    p = plan(spec, small_cfg(), PROFILE, tp_dims=[1])
    assert p.tp_dim == 1
    assert [c["tp_dim"] for c in p.candidates] == [1]


def test_infeasible_reports_each_tp():
    spec = make_spec([(0, 2, "A100")])
    with pytest.raises(InfeasibleError) as exc:
        plan(spec, small_cfg(param=1e12), PROFILE)
    assert exc.value.reasons == {1: "memory (3b)", 2: "memory (3b)"}
    assert exc.value.exit_code == 3


def test_profile_gaps_are_rejections():
    spec = make_spec([(0, 2, "A100")])
    thin = synth_profile({"A100": 1.0}, [1], 4)
    with pytest.raises(InfeasibleError) as exc:
        plan(spec, small_cfg(), thin)
    assert exc.value.reasons[1] == "profile"
    with pytest.raises(SpecError):
        plan(spec, small_cfg(), PROFILE, power_source="magic")


def test_determinism_and_round_trip():
    spec = make_spec([(0, 4, "A100"), (1, 2, "H800"), (2, 2, "H20")])
    a = dump_plan(plan(spec, small_cfg(12), PROFILE))
    b = dump_plan(plan(spec, small_cfg(12), PROFILE))
    assert a == b
    assert dump_plan(load_plan(a)) == a


@settings(max_examples=15)
@given(st.sampled_from([2, 4, 8]), st.integers(1, 3), st.integers(4, 40), st.sampled_from([1, 4, 16]))
def test_homogeneous_layer_counts_within_one(count, nodes, n_layers, K):
    spec = make_spec([(n, count, "H20") for n in range(nodes)])
    p = plan(spec, small_cfg(n_layers, K), PROFILE)
    for g in p.groups:
        sizes = [s.n_layers for s in g]
        assert max(sizes) - min(sizes) <= 1
        assert sum(sizes) == n_layers


def test_explain_lists_layer_totals():
    spec = make_spec([(0, 2, "A100"), (1, 1, "H800")])
    cfg = small_cfg()
    p = plan(spec, cfg, PROFILE)
    text = explain(p, spec, cfg, PROFILE)
    for j, g in enumerate(p.groups):
        assert f"group {j}: {len(g)} stage(s), layers total 8" in text


def test_validate_sim_records_divergence():
    spec = make_spec([(0, 2, "A100"), (1, 2, "H800")])
    p = plan(spec, small_cfg(), PROFILE, validate_sim=True)
    assert p.flags["sim_divergence"] >= 0
    assert p.flags["sim_iteration_time"] > 0


def test_profiled_power_source_matches_spec_powers():
    spec = make_spec([(0, 2, "A100"), (1, 2, "H800")])
    a = plan(spec, small_cfg(), PROFILE)
    b = plan(spec, small_cfg(), PROFILE, power_source="profile")
    assert [[s.devices for s in g] for g in a.groups] == [[s.devices for s in g] for g in b.groups]

import json
import logging

import pytest
from hypothesis import given, strategies as st

from hetplan.cluster import DeviceId, GpuType, load_cluster_spec
from hetplan.errors import SpecError

from conftest import make_spec

SPEC_YAML = """
gpu_types:
  A100: {compute_power: 1.0, memory_bytes: 80.0e9}
  H800: {compute_power: 2.0, memory_bytes: 80.0e9}
nodes:
  - {node_id: 0, count: 8, type: A100}
  - {node_id: 1, count: 4, type: H800}
bandwidths: {intra_node: 600.0e9, inter_node: 50.0e9, cloud: 1.2e9, local_disk: 3.5e9}
"""


def test_load_two_node_spec():
    spec = load_cluster_spec(SPEC_YAML)
    assert spec.n_gpus == 12
    assert sorted(spec.gpu_types) == ["A100", "H800"]
    assert spec.devices()[0] == DeviceId(0, 0)
    assert spec.devices()[-1] == DeviceId(1, 3)
    assert spec.cloud_bw == 1.2e9


def test_json_document_accepted():
    doc = {"gpu_types": {"X": {"compute_power": 1, "memory_bytes": 1e9}},
           "nodes": [{"node_id": 3, "count": 1, "type": "X"}]}
    spec = load_cluster_spec(json.dumps(doc))
    assert spec.n_gpus == 1
    assert spec.devices() == [DeviceId(3, 0)]


def test_duplicate_node_rejected():
    with pytest.raises(SpecError):
        make_spec([(0, 2, "A100"), (0, 2, "A100")])


def test_unknown_type_rejected():
    with pytest.raises(SpecError):
        load_cluster_spec("gpu_types: {A: {compute_power: 1, memory_bytes: 1}}\n"
                          "nodes: [{node_id: 0, count: 1, type: B}]\n")


@pytest.mark.parametrize("power,mem", [(0, 1e9), (-1, 1e9), (1, 0)])
def test_nonpositive_type_rejected(power, mem):
    with pytest.raises(SpecError):
        GpuType("X", power, mem)


def test_malformed_document():
    with pytest.raises(SpecError):
        load_cluster_spec("nodes: [")
    with pytest.raises(SpecError):
        load_cluster_spec("- just a list")


def test_slow_intra_node_warns(caplog):
    with caplog.at_level(logging.WARNING):
        make_spec([(0, 2, "A100")], bandwidths={"intra_node": 1e9, "inter_node": 5e9,
                                               "cloud": 1e9, "local_disk": 1e9})
    assert "below inter-node" in caplog.text


def test_link_bandwidth_classes():
    spec = make_spec([(0, 2, "A100"), (1, 2, "H800")])
    a, b, c = DeviceId(0, 0), DeviceId(0, 1), DeviceId(1, 0)
    assert spec.link_bandwidth(a, b) == spec.intra_node_bw
    assert spec.link_bandwidth(a, c) == spec.inter_node_bw
    assert spec.link_bandwidth(a, a) == spec.intra_node_bw
    with pytest.raises(SpecError):
        spec.link_bandwidth(a, DeviceId(0, 9))


@given(st.lists(st.integers(1, 6), min_size=1, max_size=5))
def test_rank_enumeration_bijection(counts):
    spec = make_spec([(n * 3, c, "A100") for n, c in enumerate(counts)])
    assert spec.n_gpus == sum(counts)
    for r in range(spec.n_gpus):
        assert spec.global_rank(spec.device_at(r)) == r


@given(st.lists(st.integers(1, 4), min_size=2, max_size=4), st.data())
def test_link_bandwidth_symmetric_two_valued(counts, data):
    spec = make_spec([(n, c, "A100") for n, c in enumerate(counts)])
    devs = spec.devices()
    a = data.draw(st.sampled_from(devs))
    b = data.draw(st.sampled_from(devs))
    assert spec.link_bandwidth(a, b) == spec.link_bandwidth(b, a)
    if a != b:
        assert spec.link_bandwidth(a, b) in (spec.intra_node_bw, spec.inter_node_bw)


def test_round_trip_through_dict():
    spec = load_cluster_spec(SPEC_YAML)
    again = load_cluster_spec(json.dumps(spec.to_dict()))
    assert again == spec

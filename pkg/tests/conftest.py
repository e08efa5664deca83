import pytest
from hypothesis import settings

from hetplan.cluster import DeviceId, cluster_from_dict
from hetplan.plan import ParallelPlan, PlanStage

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")

BANDWIDTHS = {"intra_node": 600e9, "inter_node": 50e9, "cloud": 1200e6, "local_disk": 3500e6}


def make_spec(nodes, types=None, bandwidths=None):
    """nodes: list of (node_id, count, type_name)."""
    types = types or {"A100": (1.0, 80e9), "H800": (2.0, 80e9), "H20": (1.5, 96e9)}
    used = {t for _, _, t in nodes}
    return cluster_from_dict({
        "gpu_types": {k: {"compute_power": g, "memory_bytes": m} for k, (g, m) in types.items() if k in used},
        "nodes": [{"node_id": n, "count": c, "type": t} for n, c, t in nodes],
        "bandwidths": dict(bandwidths or BANDWIDTHS),
    })


def layout_plan(tp, n_layers, n_micro, groups):
    """groups: list of stages, each (gpu_type, node, ranks, (lo, hi))."""
    out = []
    for g in groups:
        stages = []
        for i, (t, node, ranks, rng) in enumerate(g, 1):
            stages.append(PlanStage(i, tuple(DeviceId(node, r) for r in ranks), t, tuple(rng)))
        out.append(stages)
    return ParallelPlan(tp, n_layers, n_micro, out).validate()


@pytest.fixture
def a100_h800_spec():
    return make_spec([(0, 4, "A100"), (1, 2, "H800")])


# one line per acceptance criterion, printed after the run
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(ACCEPTANCE, key=lambda l: int(l.split()[2].rstrip(":"))):
        terminalreporter.write_line(line)

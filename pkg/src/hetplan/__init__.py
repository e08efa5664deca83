"""Planning and elastic recovery for 3D-parallel training on heterogeneous GPU clusters."""
from ._accel import backend_name
from .cluster import ClusterSpec, DeviceId, GpuType, NodeSpec, load_cluster_spec
from .cost import estimate_iteration, estimate_sync, simulate_1f1b
from .errors import (DigestMismatch, HetplanError, InfeasibleError, InvariantViolation, ProfileError,
                     SpecError, UnrecoverableError)
from .grouping import GroupingProblem, effective_power, enumerate_tp_dims, solve_grouping
from .mapping import map_nodes_and_stages
from .partition import PartitionProblem, balance_workload
from .plan import ParallelPlan, dump_plan, load_plan
from .planner import explain, plan
from .profile import (MemoryModel, ModelConfig, ProfileTable, estimate_memory, estimate_stage_time,
                      load_model_config, load_profile_table, synth_profile)

__version__ = "0.1.0"

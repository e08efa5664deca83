"""Layer-wise checkpoints, TP resharding and local-first recovery."""
from .recovery import (Fetch, RecoveryPlan, ReshardOp, execute_recovery, plan_recovery,
                       tier_bandwidths)
from .shard import (SPLIT_COLS, SPLIT_NONE, SPLIT_ROWS, LayerShard, Tensor, decode_shard, digest,
                    encode_shard, merge_layer, reshard, reshard_rank, shard_layer, shard_name,
                    source_ranks, synthetic_layer, synthetic_model_state)
from .store import (CheckpointManifest, LayerBitmap, Location, TieredStore, bitmap_from_manifest,
                    save_layerwise, scan_store)

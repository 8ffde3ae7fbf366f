"""Architecture search over one localized block."""
from .repair import LEVELS, RepairConfig, RepairReport, repair, repair_sets
from .search import SearchConfig, SearchHistory, alternate_optimize, finetune, supernet_loss
from .space import NUM_OPS, OP_NAMES, OperationKind, make_edge, op_layers, slot_of
from .supernet import (
    Discretized, MixedEdge, SuperBlock, block_input, choose_ops, discretize, install_block, mixed_edge_forward,
    one_hot_superblock, relax_block, superblock_forward, supernet_forward,
)

__all__ = [
    "LEVELS", "NUM_OPS", "OP_NAMES", "Discretized", "MixedEdge", "OperationKind", "RepairConfig", "RepairReport",
    "SearchConfig", "SearchHistory", "SuperBlock", "alternate_optimize", "block_input", "choose_ops", "discretize",
    "finetune", "install_block", "make_edge", "mixed_edge_forward", "one_hot_superblock", "op_layers", "relax_block",
    "repair", "repair_sets", "slot_of", "superblock_forward", "supernet_forward", "supernet_loss",
]

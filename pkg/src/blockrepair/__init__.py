"""Block-level repair of convolutional classifiers.

Locate the block whose neurons look most responsible for a model's failures,
relax that block into a small searchable graph, optimize its architecture and
weights, then discretize and fine-tune.
"""
__version__ = "0.1.0"

from .data import CorruptionSpec, Dataset, corrupt, gen_synthetic, load_dataset, save_dataset
from .errors import RepairError
from .modelio import load_model, save_model
from .network import Network, build_mini_resnet

__all__ = [
    "__version__", "CorruptionSpec", "Dataset", "Network", "RepairError", "build_mini_resnet", "corrupt",
    "gen_synthetic", "load_dataset", "load_model", "save_dataset", "save_model",
]

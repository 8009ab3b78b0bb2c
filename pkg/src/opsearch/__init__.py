"""Energy-aware per-layer operator and compute-mode search on a small numpy autodiff core."""

from .data import Dataset, load_dataset
from .energy import EnergyReport, EnergyTable, Mode, OperatorChoice, assignment_energy, total_loss
from .network import LayerSpec, Network, NetworkSpec, build_network, mini_cnn, mini_mlp, mini_squeeze
from .operators import OperatorKind, apply_operator, op_binary, op_mulfree, op_typical
from .search import SearchConfig, SearchOutcome, search, train_fixed
from .tensor import Tensor

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "EnergyReport",
    "EnergyTable",
    "LayerSpec",
    "Mode",
    "Network",
    "NetworkSpec",
    "OperatorChoice",
    "OperatorKind",
    "SearchConfig",
    "SearchOutcome",
    "Tensor",
    "apply_operator",
    "assignment_energy",
    "build_network",
    "load_dataset",
    "mini_cnn",
    "mini_mlp",
    "mini_squeeze",
    "op_binary",
    "op_mulfree",
    "op_typical",
    "search",
    "total_loss",
    "train_fixed",
]

"""Progressive differentiable cell search on a small numpy autodiff core."""

__version__ = "0.1.0"

from .data import DatasetSpec, generate_synthetic, load_binary_dataset, write_binary_dataset
from .evaluation import EvalConfig, build_eval_network, train_eval
from .genotype import (AlphaSnapshot, Genotype, count_parameters, derive, export_graph,
                       load_genotype, load_snapshot, refine_skip_count, save_genotype, save_snapshot)
from .search import (OptimizerConfig, SearchData, StagePlan, StageSpec, approximate_space,
                     dropout_schedule, run_progressive_search, run_stage)
from .supernet import SearchNetwork
from .tensor import Tape, Tensor

__all__ = [
    "AlphaSnapshot", "DatasetSpec", "EvalConfig", "Genotype", "OptimizerConfig", "SearchData",
    "SearchNetwork", "StagePlan", "StageSpec", "Tape", "Tensor", "approximate_space",
    "build_eval_network", "count_parameters", "derive", "dropout_schedule", "export_graph",
    "generate_synthetic", "load_binary_dataset", "load_genotype", "load_snapshot",
    "refine_skip_count", "run_progressive_search", "run_stage", "save_genotype", "save_snapshot",
    "train_eval", "write_binary_dataset",
]

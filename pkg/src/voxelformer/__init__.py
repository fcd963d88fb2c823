"""VoxelFormer: token-merging voxel encoder, query distillation and contrastive decoding heads."""

from .autograd import Tensor, gradcheck, no_grad
from .config import TrainConfig, load_config, parse_config
from .data import (
    SynthConfig,
    SyntheticDataset,
    batch_iterator,
    generate,
    load_dataset,
    write_dataset,
)
from .errors import (
    ConfigError,
    ContractError,
    GraphError,
    NonFiniteError,
    ShapeError,
    VoxelFormerError,
)
from .model import ModelConfig, VoxelFormer, build_model
from .retrieval import RetrievalReport, evaluate
from .train import count_params, train

__all__ = [
    "ConfigError", "ContractError", "GraphError", "ModelConfig", "NonFiniteError", "RetrievalReport",
    "ShapeError", "SynthConfig", "SyntheticDataset", "Tensor", "TrainConfig", "VoxelFormer",
    "VoxelFormerError", "batch_iterator", "build_model", "count_params", "evaluate", "generate", "gradcheck",
    "load_config", "load_dataset", "no_grad", "parse_config", "train", "write_dataset",
]

"""Dilated residual retrieval embeddings trained with online triplet mining."""

from .data import Dataset, ImageRecord, SynthSpec, generate_groups, generate_synthetic, load_dataset, save_dataset
from .miner import MiningStrategy, brute_force_oracle, mine_and_loss, mined_loss
from .model import MiniDRN, ModelConfig, build_model, embed, embed_batch, five_crop_embed, load_checkpoint, param_count, save_checkpoint
from .retrieval import EmbeddingIndex, build_index, cosine_distance, mp_at_k, query_topk, recall_at_4
from .tensor import ConfigError, ShapeError, Tensor, UsageError, conv2d, grad_check
from .trainer import PRESETS, TrainConfig, TrainingDiverged, preset, train

__all__ = [
    "ConfigError",
    "Dataset",
    "EmbeddingIndex",
    "ImageRecord",
    "MiniDRN",
    "MiningStrategy",
    "ModelConfig",
    "PRESETS",
    "ShapeError",
    "SynthSpec",
    "Tensor",
    "TrainConfig",
    "TrainingDiverged",
    "UsageError",
    "brute_force_oracle",
    "build_index",
    "build_model",
    "conv2d",
    "cosine_distance",
    "embed",
    "embed_batch",
    "five_crop_embed",
    "generate_groups",
    "generate_synthetic",
    "grad_check",
    "load_checkpoint",
    "load_dataset",
    "mine_and_loss",
    "mined_loss",
    "mp_at_k",
    "param_count",
    "preset",
    "query_topk",
    "recall_at_4",
    "save_checkpoint",
    "save_dataset",
    "train",
]

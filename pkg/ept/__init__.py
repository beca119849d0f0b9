"""Efficient prototype tuning for few-shot class-incremental learning on frozen embeddings."""
from ept.config import AblationConfig, CliConfig, NepConfig, PoolConfig, ProtocolSpec, TrainConfig
from ept.embedding_store import EmbeddingDataset, generate_synthetic, load_embeddings, split_protocol
from ept.errors import EptError
from ept.nep_classifier import NepModel, classify_nep
from ept.protocol_runner import RunReport, compare_baselines, run_protocol

__all__ = [
    "AblationConfig",
    "CliConfig",
    "EmbeddingDataset",
    "EptError",
    "NepConfig",
    "NepModel",
    "PoolConfig",
    "ProtocolSpec",
    "RunReport",
    "TrainConfig",
    "classify_nep",
    "compare_baselines",
    "generate_synthetic",
    "load_embeddings",
    "run_protocol",
    "split_protocol",
]

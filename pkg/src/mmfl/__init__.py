"""Multimodal federated learning under missing modalities with shareable data-missing profiles."""

from .dataset import MultimodalDataset, generate_synthetic, load_dataset, save_dataset
from .errors import MMFLError
from .federation import FederationConfig, prepare_federated_data, run_federation
from .fusion import ClientModel, PlainMultimodalClassifier, build_model
from .masking import MissingMask, MissingStats, apply_mask, make_missing_mask

__version__ = "0.1.0"

__all__ = [
    "ClientModel",
    "FederationConfig",
    "MMFLError",
    "MissingMask",
    "MissingStats",
    "MultimodalDataset",
    "PlainMultimodalClassifier",
    "apply_mask",
    "build_model",
    "generate_synthetic",
    "load_dataset",
    "make_missing_mask",
    "prepare_federated_data",
    "run_federation",
    "save_dataset",
]

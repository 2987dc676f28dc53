"""Federated learning mechanics: data, local training, aggregation, screening."""

from .data import (
    BadMagic, CountMismatch, Dataset, Honest, InsufficientData, InvalidDims, Lazy,
    LengthMismatch, Poisoner, TruncatedFile, Unreliable, WorkerProfile, emd, gen_synthetic,
    label_distribution, load_idx, partition, poison, rng_for,
)
from .defenses import ElapsedVerdict, RoniVerdict, elapsed_check, roni_filter
from .model import (
    EmptyAccepted, EmptyShard, LocalUpdate, ModelState, aggregate, evaluate, init_model,
    local_sgd, loss_and_grad,
)

__all__ = [
    "BadMagic", "CountMismatch", "Dataset", "ElapsedVerdict", "EmptyAccepted", "EmptyShard",
    "Honest", "InsufficientData", "InvalidDims", "Lazy", "LengthMismatch", "LocalUpdate",
    "ModelState", "Poisoner", "RoniVerdict", "TruncatedFile", "Unreliable", "WorkerProfile",
    "aggregate", "elapsed_check", "emd", "evaluate", "gen_synthetic", "init_model",
    "label_distribution", "load_idx", "local_sgd", "loss_and_grad", "partition", "poison",
    "rng_for", "roni_filter",
]

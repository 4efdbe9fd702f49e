"""Desk-scale workbench for federated and split learning architectures."""

from .model import SequentialModel, WeightVector, cut, fed_avg, ser_avg, memory_demand
from .tensor import Tensor

__version__ = "0.1.0"

__all__ = ["SequentialModel", "Tensor", "WeightVector", "cut", "fed_avg", "ser_avg", "memory_demand"]

"""Permutation-invariant variational graph autoencoder.

Encoder/permuter/decoder built from self-attention on directed messages,
with a SoftSort-relaxed permutation head, trained by gradient descent on a
numpy-backed reverse-mode autodiff engine.
"""

__version__ = "0.1.0"

from .autodiff import Tensor
from .graphs import Graph, PaddedBatch, Permutation
from .model import ModelConfig

__all__ = ["Tensor", "Graph", "PaddedBatch", "Permutation", "ModelConfig", "__version__"]

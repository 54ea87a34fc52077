"""Vector-neuron networks: rotation-equivariant point-cloud learning.

Layers keep features as lists of 3D vectors (shape ``N x C x 3``) so that a
rotation of the input maps to the same rotation of every latent feature.
The package bundles the layer zoo, PointNet/DGCNN/occupancy assemblies on a
small built-in autodiff engine, synthetic shape datasets, a training loop,
and a property-based verification suite (equivariance, invariance,
gradient checks, parameter audits) exposed through the ``vnn`` CLI.
"""

from ._kernels import BACKEND
from .autodiff import Rng, Tensor, backward, no_grad, tensor, zero_grads

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "Rng", "Tensor", "backward", "no_grad", "tensor",
    "zero_grads", "__version__",
]

"""Subspace-parameterized attention neural operator for PDE surrogates.

The public surface: an sklearn-style estimator (:class:`SupraRegressor`) for
array-in/array-out use, the lower-level library modules (autodiff, mesh,
basis, attention, model, data, training), and the ``supra`` command line.
"""

from .autodiff import Tape, Tensor, backward, grad_check
from .basis import Basis, chebyshev_basis_2d, fourier_basis_2d, laplacian_eigenbasis
from .data import Sample, gen_dataset
from .estimator import SupraRegressor
from .mesh import TriMesh, generate_annulus_mesh, generate_grid_mesh, load_off
from .model import ModelConfig, SupraOperator, load_model, save_model
from .training import TrainConfig, evaluate, fit, rel_l2

__version__ = "0.1.0"

__all__ = [
    "Tape",
    "Tensor",
    "backward",
    "grad_check",
    "Basis",
    "fourier_basis_2d",
    "chebyshev_basis_2d",
    "laplacian_eigenbasis",
    "Sample",
    "gen_dataset",
    "TriMesh",
    "load_off",
    "generate_grid_mesh",
    "generate_annulus_mesh",
    "ModelConfig",
    "SupraOperator",
    "save_model",
    "load_model",
    "TrainConfig",
    "fit",
    "evaluate",
    "rel_l2",
    "SupraRegressor",
    "__version__",
]

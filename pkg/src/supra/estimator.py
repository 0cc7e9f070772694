"""Scikit-learn style front end: fit on stacked field arrays, predict fields.

``SupraRegressor`` wraps basis construction, normalization, and the training
loop behind the usual estimator protocol (``get_params``/``set_params``/
``fit``/``predict``), so the operator drops into sklearn pipelines, clones,
and searches.  Inputs are arrays of sampled functions, one row per sample:
``X`` with shape (n_samples, in_channels, n_points) and ``y`` with shape
(n_samples, out_channels, n_points); single-channel data may drop the channel
axis.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .basis import chebyshev_basis_2d, fourier_basis_2d, laplacian_eigenbasis
from .data import Sample
from .mesh import TriMesh
from .model import ModelConfig, SupraOperator
from .training import Normalizer, TrainConfig, fit_samples, rel_l2

__all__ = ["SupraRegressor", "check_field_array"]


def check_field_array(arr, name: str, n_points: int | None = None,
                      n_channels: int | None = None) -> np.ndarray:
    """Validate a (n_samples, channels, points) stack of sampled functions.

    A 2-d array is promoted to a single channel.  Values must be finite
    float-convertible; channel/point counts are enforced when given.
    """
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, None, :]
    if arr.ndim != 3:
        raise ValueError(f"{name} must be (n_samples, channels, points) or "
                         f"(n_samples, points), got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    if n_channels is not None and arr.shape[1] != n_channels:
        raise ValueError(f"{name} has {arr.shape[1]} channels, expected {n_channels}")
    if n_points is not None and arr.shape[2] != n_points:
        raise ValueError(f"{name} has {arr.shape[2]} points, expected {n_points}")
    return arr


class SupraRegressor(BaseEstimator, RegressorMixin):
    """Neural operator regressor mapping input fields to output fields.

    Parameters
    ----------
    basis : "fourier" | "chebyshev" | "laplacian"
        Subspace family.  Grid bases need ``grid``; the Laplacian eigenbasis
        needs ``mesh``.
    n_basis : int
        Subspace dimension.  Fourier needs 4*m*m (m modes per direction),
        Chebyshev (d+1)^2; the Laplacian family accepts any count.
    grid : (H, W) tuple or None
        Regular grid shape; required for the grid bases.
    mesh : TriMesh or None
        Triangle mesh; required for the Laplacian basis.
    hidden, layers, heads, norm, mlp_ratio, use_coords
        Operator architecture knobs.
    epochs, batch_size, max_lr, weight_decay, loss, h1_weight, augment
        Training knobs (``loss`` is "l2" or "l2_h1").
    seed : int
        Controls initialization and batch order; fits are reproducible.
    """

    def __init__(self, basis: str = "fourier", n_basis: int = 64,
                 grid: tuple[int, int] | None = None, mesh: TriMesh | None = None,
                 hidden: int = 32, layers: int = 4, heads: int = 4,
                 norm: str = "instance", mlp_ratio: int = 2, use_coords: bool = True,
                 epochs: int = 30, batch_size: int = 4, max_lr: float = 1e-3,
                 weight_decay: float = 1e-4, loss: str = "l2", h1_weight: float = 0.1,
                 augment: bool = False, seed: int = 0):
        self.basis = basis
        self.n_basis = n_basis
        self.grid = grid
        self.mesh = mesh
        self.hidden = hidden
        self.layers = layers
        self.heads = heads
        self.norm = norm
        self.mlp_ratio = mlp_ratio
        self.use_coords = use_coords
        self.epochs = epochs
        self.batch_size = batch_size
        self.max_lr = max_lr
        self.weight_decay = weight_decay
        self.loss = loss
        self.h1_weight = h1_weight
        self.augment = augment
        self.seed = seed

    def _build_basis(self):
        if self.basis in ("fourier", "chebyshev"):
            if self.grid is None:
                raise ValueError(f"basis {self.basis!r} needs the grid parameter")
            if self.basis == "fourier":
                modes = int(round(np.sqrt(self.n_basis / 4)))
                if 4 * modes * modes != self.n_basis:
                    raise ValueError(
                        f"fourier basis size must be 4*m^2, got {self.n_basis}")
                return fourier_basis_2d(modes, modes, tuple(self.grid))
            deg = int(round(np.sqrt(self.n_basis))) - 1
            if (deg + 1) ** 2 != self.n_basis:
                raise ValueError(
                    f"chebyshev basis size must be a square, got {self.n_basis}")
            return chebyshev_basis_2d(deg, deg, tuple(self.grid))
        if self.basis == "laplacian":
            if self.mesh is None:
                raise ValueError("basis 'laplacian' needs the mesh parameter")
            return laplacian_eigenbasis(self.mesh, self.n_basis)
        raise ValueError(f"unknown basis {self.basis!r}")

    def fit(self, X, y):
        X = check_field_array(X, "X")
        y = check_field_array(y, "y")
        if X.shape[0] != y.shape[0]:
            raise ValueError(f"X has {X.shape[0]} samples but y has {y.shape[0]}")
        basis = self._build_basis()
        if X.shape[2] != basis.num_points:
            raise ValueError(f"X sampled at {X.shape[2]} points but the basis has "
                             f"{basis.num_points}")

        config = ModelConfig(in_channels=X.shape[1], out_channels=y.shape[1],
                             hidden=self.hidden, layers=self.layers,
                             n_basis=self.n_basis, heads=self.heads, norm=self.norm,
                             mlp_ratio=self.mlp_ratio, seed=self.seed,
                             use_coords=self.use_coords)
        model = SupraOperator(config, basis)
        train_config = TrainConfig(epochs=self.epochs, batch_size=self.batch_size,
                                   max_lr=self.max_lr, weight_decay=self.weight_decay,
                                   loss=self.loss, h1_weight=self.h1_weight,
                                   seed=self.seed, augment=self.augment)
        geometry = basis.geometry_ref()
        samples = [Sample(X[i], y[i], geometry) for i in range(X.shape[0])]
        result = fit_samples(model, samples, [], train_config, out_dir=None)

        self.basis_ = basis
        self.model_ = model
        self.result_ = result
        self.in_norm_ = Normalizer.from_json(result.normalizers["inputs"])
        self.out_norm_ = Normalizer.from_json(result.normalizers["targets"])
        self.n_features_in_ = X.shape[1] * X.shape[2]
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = check_field_array(X, "X", n_points=self.basis_.num_points,
                              n_channels=self.model_.config.in_channels)
        preds = [self.out_norm_.unapply(self.model_.predict(self.in_norm_.apply(x)))
                 for x in X]
        return np.stack(preds)

    def score(self, X, y, sample_weight=None) -> float:
        """Negative mean relative L2 error (greater is better)."""
        y = check_field_array(y, "y")
        preds = self.predict(X)
        errors = [rel_l2(p, t) for p, t in zip(preds, y)]
        return -float(np.mean(errors))

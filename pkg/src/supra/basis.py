"""Orthonormal function-space bases and the sample/coordinate maps.

A basis is an M x N evaluation matrix plus per-point quadrature weights; the
Gram matrix under those weights is the identity, so projecting a sampled
function onto coordinates is a plain weighted sum and reconstruction is a
linear combination of the columns.

Three families are provided: tensor-product Fourier modes and Chebyshev
polynomials on regular grids, and Laplacian eigenfunctions on triangle meshes
(the natural generalization of the Fourier family to irregular domains).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.polynomial import chebyshev as npcheb

from . import autodiff as ad
from .mesh import TriMesh, assemble_lumped_mass, assemble_stiffness, smallest_eigenpairs
from .ndbin import read_ndbin, write_ndbin

__all__ = [
    "Basis",
    "BasisError",
    "grid_points",
    "fourier_basis_2d",
    "chebyshev_basis_2d",
    "laplacian_eigenbasis",
    "save_basis",
    "load_basis",
]

GRAM_TOL_ANALYTIC = 1e-12
GRAM_TOL_NUMERIC = 1e-8


class BasisError(ValueError):
    """Invalid basis construction request."""


@dataclass
class Basis:
    """N orthonormal functions evaluated at M sample points."""

    kind: str                 # fourier | chebyshev | laplacian
    phi: np.ndarray           # (M, N) evaluation matrix
    weights: np.ndarray       # (M,) quadrature weights
    points: np.ndarray        # (M, 2) sample locations
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        # projection matrix diag(weights) @ phi, cached for the hot path
        self._phi_weighted = self.weights[:, None] * self.phi

    @property
    def num_points(self) -> int:
        return self.phi.shape[0]

    @property
    def size(self) -> int:
        return self.phi.shape[1]

    def gram(self) -> np.ndarray:
        return self.phi.T @ (self.weights[:, None] * self.phi)

    def gram_deviation(self) -> float:
        return float(np.max(np.abs(self.gram() - np.eye(self.size))))

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(self.kind.encode())
        h.update(np.ascontiguousarray(self.phi).tobytes())
        h.update(np.ascontiguousarray(self.weights).tobytes())
        return h.hexdigest()[:16]

    def geometry_ref(self) -> str:
        """Stable identifier of the sample geometry this basis lives on."""
        if "grid" in self.meta:
            h, w = self.meta["grid"]
            return f"grid:{h}x{w}"
        return f"mesh:{self.meta['mesh_hash']}"

    def project(self, fields):
        """Map C x M sampled functions to C x N subspace coordinates.

        Accepts a plain array or a taped tensor; the taped form keeps the
        operation differentiable.
        """
        if isinstance(fields, ad.Tensor):
            if fields.value.shape[1] != self.num_points:
                raise BasisError(
                    f"project: fields have {fields.value.shape[1]} points, basis has {self.num_points}")
            return ad.matmul(fields, fields.tape.constant(self._phi_weighted))
        fields = np.asarray(fields, dtype=np.float64)
        if fields.shape[-1] != self.num_points:
            raise BasisError(
                f"project: fields have {fields.shape[-1]} points, basis has {self.num_points}")
        return fields @ self._phi_weighted

    def reconstruct(self, coords):
        """Map C x N subspace coordinates back to C x M point samples."""
        if isinstance(coords, ad.Tensor):
            if coords.value.shape[1] != self.size:
                raise BasisError(
                    f"reconstruct: got {coords.value.shape[1]} coordinates, basis has {self.size}")
            return ad.matmul(coords, coords.tape.constant(self.phi.T.copy()))
        coords = np.asarray(coords, dtype=np.float64)
        if coords.shape[-1] != self.size:
            raise BasisError(
                f"reconstruct: got {coords.shape[-1]} coordinates, basis has {self.size}")
        return coords @ self.phi.T


def grid_points(height: int, width: int) -> np.ndarray:
    """Sample locations (i/H, j/W), i=1..H, j=1..W, flattened row-major."""
    xs = np.arange(1, height + 1) / height
    ys = np.arange(1, width + 1) / width
    xx, yy = np.meshgrid(xs, ys, indexing="ij")
    return np.column_stack([xx.reshape(-1), yy.reshape(-1)])


def fourier_basis_2d(modes_x: int, modes_y: int, grid: tuple[int, int]) -> Basis:
    """Tensor-product sine/cosine basis on the unit square, 4*m*n functions.

    Each 1-d factor sqrt(2)*cos(2 pi i x) / sqrt(2)*sin(2 pi i x) has unit
    continuum norm; the uniform grid weight 1/(H*W) makes the discrete Gram
    exactly the identity for mode counts below the Nyquist limit.  Ordering is
    pinned: blocks cos*cos, cos*sin, sin*cos, sin*sin, each by (i, j)
    lexicographic.
    """
    height, width = grid
    if modes_x < 1 or modes_y < 1:
        raise BasisError("mode counts must be >= 1")
    if 2 * modes_x > height - 1 or 2 * modes_y > width - 1:
        raise BasisError(
            f"modes ({modes_x}, {modes_y}) at or above Nyquist for grid {height}x{width}")
    xs = np.arange(1, height + 1) / height
    ys = np.arange(1, width + 1) / width
    cos_x = np.sqrt(2.0) * np.cos(2 * np.pi * np.outer(np.arange(1, modes_x + 1), xs))  # (m, H)
    sin_x = np.sqrt(2.0) * np.sin(2 * np.pi * np.outer(np.arange(1, modes_x + 1), xs))
    cos_y = np.sqrt(2.0) * np.cos(2 * np.pi * np.outer(np.arange(1, modes_y + 1), ys))  # (n, W)
    sin_y = np.sqrt(2.0) * np.sin(2 * np.pi * np.outer(np.arange(1, modes_y + 1), ys))

    columns = []
    for fx, fy in ((cos_x, cos_y), (cos_x, sin_y), (sin_x, cos_y), (sin_x, sin_y)):
        # outer product per (i, j), flattened to H*W row-major
        block = np.einsum("ih,jw->ijhw", fx, fy).reshape(modes_x * modes_y, height * width)
        columns.append(block)
    phi = np.concatenate(columns, axis=0).T
    weights = np.full(height * width, 1.0 / (height * width))
    return Basis("fourier", phi, weights, grid_points(height, width),
                 meta={"grid": [height, width], "modes": [modes_x, modes_y]})


def chebyshev_basis_2d(deg_x: int, deg_y: int, grid: tuple[int, int]) -> Basis:
    """Tensor-product Chebyshev polynomials T_p(2x-1) T_q(2y-1), orthonormalized.

    The raw tensor products are not orthogonal under the uniform grid measure,
    so a thin QR against the weighted inner product rebuilds the columns into
    an exactly orthonormal family spanning the same space; (p, q) ordering is
    lexicographic.
    """
    height, width = grid
    n_funcs = (deg_x + 1) * (deg_y + 1)
    if n_funcs > height * width:
        raise BasisError(f"{n_funcs} functions exceed {height * width} grid points")
    pts = grid_points(height, width)
    vand_x = npcheb.chebvander(2 * pts[:, 0] - 1, deg_x)   # (M, deg_x+1)
    vand_y = npcheb.chebvander(2 * pts[:, 1] - 1, deg_y)
    raw = np.einsum("mp,mq->mpq", vand_x, vand_y).reshape(height * width, n_funcs)

    weights = np.full(height * width, 1.0 / (height * width))
    sw = np.sqrt(weights)
    q, r = np.linalg.qr(sw[:, None] * raw, mode="reduced")
    diag = np.diag(r)
    bad = np.flatnonzero(np.abs(diag) < 1e-10 * np.abs(diag[0]))
    if bad.size:
        p, qdeg = divmod(int(bad[0]), deg_y + 1)
        raise BasisError(f"rank deficiency at degree pair ({p}, {qdeg})")
    signs = np.sign(diag)
    phi = (q * signs) / sw[:, None]
    return Basis("chebyshev", phi, weights, pts,
                 meta={"grid": [height, width], "degrees": [deg_x, deg_y]})


def laplacian_eigenbasis(mesh: TriMesh, count: int) -> Basis:
    """Smallest Neumann Laplacian eigenfunctions on a triangle mesh.

    Quadrature weights are the lumped mass normalized to total 1, and the
    eigenvectors are rescaled accordingly so the Gram matrix stays the
    identity; ordering is by ascending eigenvalue.
    """
    stiffness = assemble_stiffness(mesh)
    lumped = assemble_lumped_mass(mesh)
    eigvals, eigvecs = smallest_eigenpairs(stiffness, lumped, count, bc="neumann")
    total = lumped.sum()
    weights = lumped / total
    phi = eigvecs * np.sqrt(total)
    return Basis("laplacian", phi, weights, mesh.vertices.copy(),
                 meta={"mesh_hash": mesh.content_hash(),
                       "eigenvalues": [float(v) for v in eigvals]})


# ---------------------------------------------------------------------------
# cache files: ndbin tensors plus a JSON sidecar


def save_basis(basis: Basis, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_ndbin(directory / "phi.ndbin", basis.phi)
    write_ndbin(directory / "weights.ndbin", basis.weights)
    write_ndbin(directory / "points.ndbin", basis.points)
    sidecar = {"kind": basis.kind, "size": basis.size, "meta": basis.meta,
               "fingerprint": basis.fingerprint()}
    (directory / "basis.json").write_text(json.dumps(sidecar, indent=2))


def load_basis(directory) -> Basis:
    directory = Path(directory)
    sidecar = json.loads((directory / "basis.json").read_text())
    basis = Basis(sidecar["kind"],
                  read_ndbin(directory / "phi.ndbin"),
                  read_ndbin(directory / "weights.ndbin"),
                  read_ndbin(directory / "points.ndbin"),
                  meta=sidecar["meta"])
    if basis.fingerprint() != sidecar["fingerprint"]:
        raise BasisError(f"{directory}: basis payload does not match its sidecar fingerprint")
    return basis

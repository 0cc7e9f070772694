"""Synthetic PDE datasets: Darcy-like flow on grids, Poisson on triangle meshes.

Coefficient fields come from a spectral Gaussian random field generator;
solutions come from a conservative finite-difference scheme (grids) or P1
finite elements (meshes), both solved by conjugate gradients to a tight
residual.  Samples are written one ndbin file each, described by a JSON
manifest; generation is bit-reproducible from the seeds recorded there.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .mesh import TriMesh, assemble_lumped_mass, assemble_stiffness, load_off, \
    generate_annulus_mesh, save_off, smallest_eigenpairs
from .ndbin import read_ndbin, write_ndbin

__all__ = [
    "Sample",
    "DataError",
    "SolverError",
    "grf_sample",
    "darcy_coefficient",
    "darcy_solve_fd",
    "poisson_fem_solve",
    "augment_flip",
    "flip_sample",
    "gen_dataset",
    "load_manifest",
    "load_split",
]

DARCY_A_HI = 12.0
DARCY_A_LO = 3.0
GRF_TAU = 3.0
GRF_ALPHA = 2.0
CG_REL_TOL = 1e-10


class DataError(ValueError):
    """Invalid dataset request or corrupt dataset directory."""


class SolverError(RuntimeError):
    """Linear solve failed to converge; carries the residual history."""

    def __init__(self, message: str, history: list[float]):
        super().__init__(message)
        self.history = history


@dataclass
class Sample:
    """One training record: input fields, target field, geometry tag."""

    inputs: np.ndarray    # (in_channels, M)
    target: np.ndarray    # (out_channels, M)
    geometry: str         # "grid:HxW" or "mesh:<hash>"

    def grid_shape(self) -> tuple[int, int]:
        if not self.geometry.startswith("grid:"):
            raise DataError(f"sample geometry {self.geometry!r} is not a regular grid")
        h, w = self.geometry.split(":", 1)[1].split("x")
        return int(h), int(w)


# ---------------------------------------------------------------------------
# field generation


def grf_sample(grid: tuple[int, int], seed: int,
               tau: float = GRF_TAU, alpha: float = GRF_ALPHA) -> np.ndarray:
    """Gaussian random field by spectral synthesis.

    White noise is filtered in Fourier space by (|k|^2 + tau^2)^(-alpha/2)
    with integer wavenumbers; larger alpha damps high frequencies harder,
    larger tau shortens the correlation length.
    """
    height, width = grid
    if height < 8 or width < 8:
        raise DataError(f"grid {grid} too small for the spectral sampler")
    rng = np.random.default_rng(seed)
    white = rng.standard_normal((height, width))
    kx = np.fft.fftfreq(height) * height
    ky = np.fft.fftfreq(width) * width
    k2 = kx[:, None] ** 2 + ky[None, :] ** 2
    filt = (k2 + tau ** 2) ** (-alpha / 2.0)
    return np.real(np.fft.ifft2(np.fft.fft2(white) * filt))


def darcy_coefficient(field: np.ndarray, a_hi: float = DARCY_A_HI,
                      a_lo: float = DARCY_A_LO) -> np.ndarray:
    """Two-valued permeability: a_hi where the field is nonnegative, else a_lo."""
    if not np.all(np.isfinite(field)):
        raise DataError("coefficient field has non-finite entries")
    return np.where(field >= 0.0, a_hi, a_lo)


# ---------------------------------------------------------------------------
# solvers


def _cg(apply_op, rhs: np.ndarray, rel_tol: float, max_iters: int,
        context: str) -> np.ndarray:
    """Conjugate gradients on a flat vector; raises with history on stall."""
    x = np.zeros_like(rhs)
    r = rhs.copy()
    p = r.copy()
    rs = float(r @ r)
    norm_b = np.sqrt(float(rhs @ rhs))
    if norm_b == 0.0:
        return x
    history = [np.sqrt(rs) / norm_b]
    for _ in range(max_iters):
        if history[-1] <= rel_tol:
            return x
        ap = apply_op(p)
        alpha = rs / float(p @ ap)
        x = x + alpha * p
        r = r - alpha * ap
        rs_new = float(r @ r)
        history.append(np.sqrt(rs_new) / norm_b)
        p = r + (rs_new / rs) * p
        rs = rs_new
    if history[-1] <= rel_tol:
        return x
    raise SolverError(
        f"{context}: CG stalled at relative residual {history[-1]:.3e} "
        f"after {max_iters} iterations", history)


def darcy_solve_fd(coeff: np.ndarray, force: np.ndarray,
                   face_mean: str = "harmonic") -> np.ndarray:
    """Solve -div(a grad u) = f on the unit square with u = 0 on the boundary.

    Conservative 5-point scheme on the H x W node grid (spacing 1/(H-1),
    1/(W-1)); face coefficients are harmonic means of the two adjacent cell
    values, the conservative choice for discontinuous a (arithmetic means are
    available for smooth manufactured solutions).  CG runs to relative
    residual 1e-10.
    """
    a = np.asarray(coeff, dtype=np.float64)
    f = np.asarray(force, dtype=np.float64)
    if a.shape != f.shape or a.ndim != 2:
        raise DataError(f"coefficient {a.shape} and force {f.shape} must be equal 2-d grids")
    if np.any(a <= 0):
        raise DataError("coefficient must be strictly positive")
    height, width = a.shape
    hx = 1.0 / (height - 1)
    hy = 1.0 / (width - 1)
    if face_mean == "harmonic":
        ax = 2.0 * a[:-1, :] * a[1:, :] / (a[:-1, :] + a[1:, :])   # faces along x
        ay = 2.0 * a[:, :-1] * a[:, 1:] / (a[:, :-1] + a[:, 1:])   # faces along y
    elif face_mean == "arithmetic":
        ax = 0.5 * (a[:-1, :] + a[1:, :])
        ay = 0.5 * (a[:, :-1] + a[:, 1:])
    else:
        raise DataError(f"unknown face mean {face_mean!r}")

    def apply_op(vec: np.ndarray) -> np.ndarray:
        u = np.zeros((height, width))
        u[1:-1, 1:-1] = vec.reshape(height - 2, width - 2)
        flux = (ax[1:, 1:-1] * (u[1:-1, 1:-1] - u[2:, 1:-1])
                + ax[:-1, 1:-1] * (u[1:-1, 1:-1] - u[:-2, 1:-1])) / hx ** 2 \
             + (ay[1:-1, 1:] * (u[1:-1, 1:-1] - u[1:-1, 2:])
                + ay[1:-1, :-1] * (u[1:-1, 1:-1] - u[1:-1, :-2])) / hy ** 2
        return flux.reshape(-1)

    rhs = f[1:-1, 1:-1].reshape(-1)
    sol = _cg(apply_op, rhs, CG_REL_TOL, 10 * height * width, "darcy_solve_fd")
    u = np.zeros((height, width))
    u[1:-1, 1:-1] = sol.reshape(height - 2, width - 2)
    return u


def poisson_fem_solve(mesh: TriMesh, force: np.ndarray,
                      stiffness=None, lumped=None) -> np.ndarray:
    """Solve -lap(u) = f on a mesh with u = 0 on the boundary (P1, lumped mass).

    Pass precomputed ``stiffness``/``lumped`` when solving many right-hand
    sides on the same mesh.
    """
    f = np.asarray(force, dtype=np.float64)
    if f.shape != (mesh.num_vertices,):
        raise DataError(f"force must have one value per vertex, got {f.shape}")
    if not mesh.boundary_flags.any():
        raise DataError("mesh has no boundary to pin the Dirichlet condition on")
    stiffness = assemble_stiffness(mesh) if stiffness is None else stiffness
    lumped = assemble_lumped_mass(mesh) if lumped is None else lumped
    interior = ~mesh.boundary_flags

    def apply_op(vec: np.ndarray) -> np.ndarray:
        full = np.zeros(mesh.num_vertices)
        full[interior] = vec
        return stiffness.matvec(full)[interior]

    rhs = (lumped * f)[interior]
    sol = _cg(apply_op, rhs, CG_REL_TOL, 10 * mesh.num_vertices, "poisson_fem_solve")
    u = np.zeros(mesh.num_vertices)
    u[interior] = sol
    return u


# ---------------------------------------------------------------------------
# augmentation


def flip_sample(sample: Sample, flip_x: bool, flip_y: bool) -> Sample:
    """Mirror a grid sample along the chosen axes, every channel alike."""
    height, width = sample.grid_shape()
    if not (flip_x or flip_y):
        return sample

    def flip(fields: np.ndarray) -> np.ndarray:
        grids = fields.reshape(fields.shape[0], height, width)
        if flip_x:
            grids = grids[:, ::-1, :]
        if flip_y:
            grids = grids[:, :, ::-1]
        return np.ascontiguousarray(grids).reshape(fields.shape[0], -1)

    return Sample(flip(sample.inputs), flip(sample.target), sample.geometry)


def augment_flip(sample: Sample, rng: np.random.Generator) -> Sample:
    """Flip a grid sample along each axis with probability 1/2."""
    return flip_sample(sample, bool(rng.integers(2)), bool(rng.integers(2)))


# ---------------------------------------------------------------------------
# dataset generation and loading


def _mesh_grf(eigvals: np.ndarray, eigvecs: np.ndarray, seed: int,
              tau: float = GRF_TAU, alpha: float = GRF_ALPHA) -> np.ndarray:
    """Spectral-synthesis field on a mesh: filtered noise over eigenfunctions."""
    rng = np.random.default_rng(seed)
    weights = (eigvals + tau ** 2) ** (-alpha / 2.0)
    return eigvecs @ (weights * rng.standard_normal(eigvals.size))


def _worker_count() -> int:
    raw = os.environ.get("SUPRA_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def gen_dataset(task: str, counts: tuple[int, int], seed: int, out_dir,
                grid: tuple[int, int] = (32, 32),
                annulus_resolution: tuple[int, int] = (16, 64),
                force: bool = False) -> dict:
    """Generate a dataset directory: one ndbin file per sample plus manifest.json.

    Train and test samples draw from disjoint seed ranges derived from
    ``seed``; rerunning with the same arguments reproduces every byte.
    """
    out_dir = Path(out_dir)
    if out_dir.exists() and any(out_dir.iterdir()) and not force:
        raise DataError(f"{out_dir} exists and is not empty (use force to overwrite)")
    (out_dir / "samples").mkdir(parents=True, exist_ok=True)

    n_train, n_test = counts
    total = n_train + n_test
    seeds = [seed + k for k in range(total)]

    if task == "darcy":
        geometry = {"type": "grid", "shape": list(grid)}
        geom_ref = f"grid:{grid[0]}x{grid[1]}"
        forcing = np.ones(grid)

        def make(sample_seed: int) -> np.ndarray:
            coeff = darcy_coefficient(grf_sample(grid, sample_seed))
            solution = darcy_solve_fd(coeff, forcing)
            return np.stack([coeff, solution])

    elif task == "annulus_poisson":
        mesh = generate_annulus_mesh(0.25, 1.0, annulus_resolution)
        save_off(mesh, out_dir / "mesh.off")
        geometry = {"type": "mesh", "file": "mesh.off", "hash": mesh.content_hash()}
        geom_ref = f"mesh:{mesh.content_hash()}"
        stiffness = assemble_stiffness(mesh)
        lumped = assemble_lumped_mass(mesh)
        n_modes = min(64, mesh.num_vertices)
        eigvals, eigvecs = smallest_eigenpairs(stiffness, lumped, n_modes)

        def make(sample_seed: int) -> np.ndarray:
            f = _mesh_grf(eigvals, eigvecs, sample_seed)
            u = poisson_fem_solve(mesh, f, stiffness=stiffness, lumped=lumped)
            return np.stack([f, u])

    else:
        raise DataError(f"unknown task {task!r}")

    workers = _worker_count()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            arrays = list(pool.map(make, seeds))
    else:
        arrays = [make(s) for s in seeds]

    files = []
    for k, (sample_seed, arr) in enumerate(zip(seeds, arrays)):
        rel = f"samples/sample_{k:05d}.ndbin"
        if task == "darcy":
            arr = arr.reshape(2, grid[0], grid[1])
        write_ndbin(out_dir / rel, arr)
        files.append({"path": rel, "split": "train" if k < n_train else "test",
                      "seed": sample_seed})

    manifest = {
        "task": task,
        "geometry": geometry,
        "geometry_ref": geom_ref,
        "counts": {"train": n_train, "test": n_test},
        "in_channels": 1,
        "out_channels": 1,
        "seed": seed,
        "files": files,
        "normalization": None,
        "generator": {"tau": GRF_TAU, "alpha": GRF_ALPHA,
                      "a_hi": DARCY_A_HI, "a_lo": DARCY_A_LO,
                      "forcing": "constant 1" if task == "darcy" else "mesh spectral field"},
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return manifest


def load_manifest(dataset_dir) -> dict:
    """Read and validate a dataset manifest; every referenced file must parse."""
    dataset_dir = Path(dataset_dir)
    path = dataset_dir / "manifest.json"
    if not path.exists():
        raise DataError(f"{dataset_dir}: no manifest.json")
    manifest = json.loads(path.read_text())
    for entry in manifest["files"]:
        fp = dataset_dir / entry["path"]
        if not fp.exists():
            raise DataError(f"{dataset_dir}: missing sample file {entry['path']}")
    if manifest["geometry"]["type"] == "mesh":
        mesh_path = dataset_dir / manifest["geometry"]["file"]
        mesh = load_off(mesh_path)
        if mesh.content_hash() != manifest["geometry"]["hash"]:
            raise DataError(f"{dataset_dir}: mesh file does not match manifest hash")
    return manifest


def load_split(dataset_dir, split: str) -> list[Sample]:
    dataset_dir = Path(dataset_dir)
    manifest = load_manifest(dataset_dir)
    if split not in ("train", "test"):
        raise DataError(f"unknown split {split!r}")
    n_in = manifest["in_channels"]
    geom_ref = manifest["geometry_ref"]
    samples = []
    for entry in manifest["files"]:
        if entry["split"] != split:
            continue
        arr = read_ndbin(dataset_dir / entry["path"])
        flat = arr.reshape(arr.shape[0], -1)
        samples.append(Sample(flat[:n_in], flat[n_in:], geom_ref))
    return samples


def load_mesh_for(dataset_dir, manifest: dict) -> TriMesh:
    if manifest["geometry"]["type"] != "mesh":
        raise DataError("dataset geometry is not a mesh")
    return load_off(Path(dataset_dir) / manifest["geometry"]["file"])

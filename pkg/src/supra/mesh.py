"""Triangle meshes, P1 finite-element assembly, and the Laplacian eigensolver.

Meshes are flat 2-d triangulations; the stiffness matrix uses the standard
P1 cotangent weights and the mass matrix is lumped (one third of the incident
triangle area per vertex), which keeps the discrete inner product a plain
weighted sum and reduces the generalized eigenproblem to a dense symmetric one.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "MeshError",
    "TriMesh",
    "SparseSym",
    "load_off",
    "save_off",
    "make_mesh",
    "generate_grid_mesh",
    "generate_annulus_mesh",
    "refine_mesh",
    "assemble_stiffness",
    "assemble_lumped_mass",
    "smallest_eigenpairs",
]

MAX_EIG_VERTICES = 4096  # dense eigensolver guard


class MeshError(ValueError):
    """Malformed mesh input or invalid mesh operation."""


def _cross_z(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]


@dataclass(frozen=True)
class TriMesh:
    """Connected 2-d triangle mesh with consistently oriented triangles."""

    vertices: np.ndarray       # (V, 2) float64
    triangles: np.ndarray      # (T, 3) int64, positive signed area
    boundary_flags: np.ndarray  # (V,) bool

    @property
    def num_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def num_triangles(self) -> int:
        return self.triangles.shape[0]

    def triangle_areas(self) -> np.ndarray:
        p0 = self.vertices[self.triangles[:, 0]]
        p1 = self.vertices[self.triangles[:, 1]]
        p2 = self.vertices[self.triangles[:, 2]]
        return 0.5 * _cross_z(p1 - p0, p2 - p0)

    def edges(self) -> np.ndarray:
        """Unique undirected edges, each row (i, j) with i < j."""
        t = self.triangles
        e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        e.sort(axis=1)
        return np.unique(e, axis=0)

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.vertices).tobytes())
        h.update(np.ascontiguousarray(self.triangles).tobytes())
        return h.hexdigest()[:16]


@dataclass
class SparseSym:
    """Symmetric sparse matrix in CSR form with sorted column indices."""

    row_offsets: np.ndarray
    col_indices: np.ndarray
    values: np.ndarray
    size: int = field(default=0)

    def matvec(self, x: np.ndarray) -> np.ndarray:
        # no empty rows in assembled matrices, so reduceat segments are valid
        prod = self.values * x[self.col_indices]
        return np.add.reduceat(prod, self.row_offsets[:-1])

    def to_dense(self) -> np.ndarray:
        dense = np.zeros((self.size, self.size))
        rows = np.repeat(np.arange(self.size), np.diff(self.row_offsets))
        dense[rows, self.col_indices] = self.values
        return dense

    def row_sums(self) -> np.ndarray:
        return np.add.reduceat(self.values, self.row_offsets[:-1])


def _csr_from_coo(rows, cols, vals, size: int) -> SparseSym:
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    vals = np.asarray(vals, dtype=np.float64)
    order = np.lexsort((cols, rows))
    rows, cols, vals = rows[order], cols[order], vals[order]
    # merge duplicate (row, col) entries
    key = rows * size + cols
    uniq, start = np.unique(key, return_index=True)
    merged = np.add.reduceat(vals, start)
    urows, ucols = uniq // size, uniq % size
    offsets = np.zeros(size + 1, dtype=np.int64)
    np.add.at(offsets, urows + 1, 1)
    offsets = np.cumsum(offsets)
    mat = SparseSym(offsets, ucols, merged, size)
    _assert_symmetric(mat)
    return mat


def _assert_symmetric(mat: SparseSym, tol: float = 1e-12) -> None:
    dense_ok = mat.size <= 512
    if dense_ok:
        d = mat.to_dense()
        dev = np.max(np.abs(d - d.T))
    else:
        # sample-based check keeps large assemblies cheap
        rng = np.random.default_rng(0)
        x = rng.standard_normal(mat.size)
        y = rng.standard_normal(mat.size)
        dev = abs(x @ mat.matvec(y) - y @ mat.matvec(x))
    scale = max(1.0, float(np.max(np.abs(mat.values))))
    if dev > tol * scale:
        raise MeshError(f"matrix not symmetric: deviation {dev:.3e}")


# ---------------------------------------------------------------------------
# mesh construction


def make_mesh(vertices: np.ndarray, triangles: np.ndarray) -> TriMesh:
    """Validate raw arrays into a TriMesh: orient, flag boundary, check connectivity."""
    vertices = np.asarray(vertices, dtype=np.float64)
    triangles = np.asarray(triangles, dtype=np.int64)
    if vertices.ndim != 2 or vertices.shape[1] != 2:
        raise MeshError(f"vertices must be (V, 2), got {vertices.shape}")
    if triangles.ndim != 2 or triangles.shape[1] != 3:
        raise MeshError(f"triangles must be (T, 3), got {triangles.shape}")
    nv = vertices.shape[0]
    if triangles.min(initial=0) < 0 or triangles.max(initial=-1) >= nv:
        raise MeshError("triangle vertex index out of range")

    p0 = vertices[triangles[:, 0]]
    p1 = vertices[triangles[:, 1]]
    p2 = vertices[triangles[:, 2]]
    signed = 0.5 * _cross_z(p1 - p0, p2 - p0)
    span = np.ptp(vertices, axis=0).max()
    if np.any(np.abs(signed) < 1e-14 * max(span, 1.0) ** 2):
        raise MeshError("zero-area (degenerate) triangle")
    flipped = triangles.copy()
    neg = signed < 0
    flipped[neg] = flipped[neg][:, [0, 2, 1]]

    boundary = _boundary_flags(flipped, nv)
    _check_connected(flipped, nv)
    verts = vertices.copy()
    verts.setflags(write=False)
    flipped.setflags(write=False)
    return TriMesh(verts, flipped, boundary)


def _boundary_flags(triangles: np.ndarray, nv: int) -> np.ndarray:
    e = np.concatenate([triangles[:, [0, 1]], triangles[:, [1, 2]], triangles[:, [2, 0]]])
    e.sort(axis=1)
    uniq, counts = np.unique(e, axis=0, return_counts=True)
    flags = np.zeros(nv, dtype=bool)
    boundary_edges = uniq[counts == 1]
    flags[boundary_edges.reshape(-1)] = True
    flags.setflags(write=False)
    return flags


def _check_connected(triangles: np.ndarray, nv: int) -> None:
    parent = np.arange(nv)

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for tri in triangles:
        a = find(tri[0])
        for v in tri[1:]:
            b = find(v)
            parent[b] = a
    roots = {find(i) for i in range(nv)}
    if len(roots) != 1:
        raise MeshError(f"mesh is not connected: {len(roots)} components")


def load_off(path) -> TriMesh:
    """Read an ASCII OFF file (triangles only; z coordinates are ignored)."""
    with open(path, "r", encoding="ascii") as fh:
        tokens: list[str] = []
        for line in fh:
            body = line.split("#", 1)[0].strip()
            if body:
                tokens.extend(body.split())
    if not tokens or tokens[0] != "OFF":
        raise MeshError(f"{path}: malformed OFF header")
    try:
        nv, nf = int(tokens[1]), int(tokens[2])
        pos = 4  # skip edge count
        verts = np.empty((nv, 2))
        for i in range(nv):
            verts[i, 0] = float(tokens[pos])
            verts[i, 1] = float(tokens[pos + 1])
            pos += 3  # x y z; z ignored
        tris = np.empty((nf, 3), dtype=np.int64)
        for i in range(nf):
            k = int(tokens[pos])
            if k != 3:
                raise MeshError(f"{path}: face {i} has {k} vertices, only triangles supported")
            tris[i] = [int(tokens[pos + 1]), int(tokens[pos + 2]), int(tokens[pos + 3])]
            pos += 4
    except MeshError:
        raise
    except (ValueError, IndexError) as exc:
        raise MeshError(f"{path}: truncated or non-numeric OFF data") from exc
    return make_mesh(verts, tris)


def save_off(mesh: TriMesh, path) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write("OFF\n")
        fh.write(f"{mesh.num_vertices} {mesh.num_triangles} 0\n")
        for x, y in mesh.vertices:
            fh.write(f"{x:.17g} {y:.17g} 0\n")
        for a, b, c in mesh.triangles:
            fh.write(f"3 {a} {b} {c}\n")


def generate_grid_mesh(nx: int, ny: int) -> TriMesh:
    """Uniform right-triangle mesh of the unit square with nx*ny vertices."""
    if nx < 2 or ny < 2:
        raise MeshError("grid mesh needs at least 2 vertices per side")
    xs = np.linspace(0.0, 1.0, nx)
    ys = np.linspace(0.0, 1.0, ny)
    xx, yy = np.meshgrid(xs, ys, indexing="ij")
    verts = np.column_stack([xx.reshape(-1), yy.reshape(-1)])
    tris = []
    for i in range(nx - 1):
        for j in range(ny - 1):
            v00 = i * ny + j
            v01 = v00 + 1
            v10 = v00 + ny
            v11 = v10 + 1
            tris.append((v00, v10, v11))
            tris.append((v00, v11, v01))
    return make_mesh(verts, np.array(tris))


def generate_annulus_mesh(r_inner: float, r_outer: float,
                          resolution: tuple[int, int] = (16, 64)) -> TriMesh:
    """Structured polar triangulation of an annulus; the angular seam is welded.

    ``resolution`` is (radial rings, angular segments); the mesh has exactly
    rings * segments vertices and the topology of an annulus (Euler number 0).
    """
    if not (0 < r_inner < r_outer):
        raise MeshError(f"invalid radii: inner={r_inner}, outer={r_outer}")
    n_rad, n_ang = resolution
    if n_rad < 2 or n_ang < 3:
        raise MeshError(f"annulus resolution too small: {resolution}")
    radii = np.linspace(r_inner, r_outer, n_rad)
    angles = 2.0 * np.pi * np.arange(n_ang) / n_ang
    verts = np.empty((n_rad * n_ang, 2))
    for k, r in enumerate(radii):
        verts[k * n_ang:(k + 1) * n_ang, 0] = r * np.cos(angles)
        verts[k * n_ang:(k + 1) * n_ang, 1] = r * np.sin(angles)
    tris = []
    for k in range(n_rad - 1):
        for j in range(n_ang):
            jn = (j + 1) % n_ang
            a = k * n_ang + j
            b = k * n_ang + jn
            c = (k + 1) * n_ang + j
            d = (k + 1) * n_ang + jn
            tris.append((a, d, c))
            tris.append((a, b, d))
    return make_mesh(verts, np.array(tris))


def refine_mesh(mesh: TriMesh) -> TriMesh:
    """Uniform 1-to-4 refinement by edge midpoint insertion."""
    edges = mesh.edges()
    edge_id = {(int(a), int(b)): i for i, (a, b) in enumerate(edges)}
    mids = 0.5 * (mesh.vertices[edges[:, 0]] + mesh.vertices[edges[:, 1]])
    verts = np.vstack([mesh.vertices, mids])
    nv = mesh.num_vertices

    def mid(a, b):
        return nv + edge_id[(min(a, b), max(a, b))]

    tris = []
    for a, b, c in mesh.triangles:
        a, b, c = int(a), int(b), int(c)
        ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
        tris.extend([(a, ab, ca), (ab, b, bc), (ca, bc, c), (ab, bc, ca)])
    return make_mesh(verts, np.array(tris))


# ---------------------------------------------------------------------------
# P1 assembly


def assemble_stiffness(mesh: TriMesh) -> SparseSym:
    """P1 stiffness matrix (cotangent weights); rows sum to zero.

    Per triangle with corner points p0, p1, p2 and area A the local matrix is
    K_ij = (e_i . e_j) / (4A) with e_i the edge opposite corner i, which is
    the integral of grad(phi_i) . grad(phi_j) over the triangle.
    """
    areas = mesh.triangle_areas()
    span = np.ptp(mesh.vertices, axis=0).max()
    if np.any(areas < 1e-14 * max(span, 1.0) ** 2):
        raise MeshError("degenerate triangle in assembly")
    p = mesh.vertices[mesh.triangles]          # (T, 3, 2)
    e = np.empty_like(p)
    e[:, 0] = p[:, 2] - p[:, 1]
    e[:, 1] = p[:, 0] - p[:, 2]
    e[:, 2] = p[:, 1] - p[:, 0]
    local = np.einsum("tic,tjc->tij", e, e) / (4.0 * areas)[:, None, None]

    t = mesh.triangles
    rows = np.repeat(t, 3, axis=1).reshape(-1)          # i index per 3x3 block
    cols = np.tile(t, (1, 3)).reshape(-1)               # j index per 3x3 block
    vals = local.reshape(-1)
    return _csr_from_coo(rows, cols, vals, mesh.num_vertices)


def assemble_lumped_mass(mesh: TriMesh) -> np.ndarray:
    """Diagonal lumped mass: each vertex gets one third of its incident area."""
    areas = mesh.triangle_areas()
    span = np.ptp(mesh.vertices, axis=0).max()
    if np.any(areas < 1e-14 * max(span, 1.0) ** 2):
        raise MeshError("degenerate triangle in assembly")
    m = np.zeros(mesh.num_vertices)
    np.add.at(m, mesh.triangles.reshape(-1), np.repeat(areas / 3.0, 3))
    return m


# ---------------------------------------------------------------------------
# eigensolver


def smallest_eigenpairs(stiffness: SparseSym, lumped_mass: np.ndarray, count: int,
                        bc: str = "neumann",
                        boundary_flags: np.ndarray | None = None):
    """Smallest eigenpairs of K phi = lambda M phi with diagonal M.

    The diagonal mass makes M^{-1/2} trivial, so the generalized problem is
    reduced to a dense standard symmetric one and solved with a classical
    dense solver.  Returns ascending eigenvalues and M-orthonormal eigenvectors
    (columns), each scaled so its largest-magnitude entry is positive.  For
    ``bc="dirichlet"`` boundary rows/columns are eliminated and eigenvectors
    are extended by zeros.
    """
    n = stiffness.size
    if n > MAX_EIG_VERTICES:
        raise MeshError(f"mesh has {n} vertices; dense eigensolver capped at {MAX_EIG_VERTICES}")
    if bc not in ("neumann", "dirichlet"):
        raise ValueError(f"unknown boundary condition {bc!r}")

    if bc == "dirichlet":
        if boundary_flags is None:
            raise ValueError("dirichlet eigenproblem needs boundary_flags")
        keep = np.flatnonzero(~boundary_flags)
    else:
        keep = np.arange(n)
    if count > keep.size:
        raise MeshError(f"requested {count} eigenpairs but only {keep.size} dofs available")

    dense = stiffness.to_dense()[np.ix_(keep, keep)]
    mass = lumped_mass[keep]
    inv_sqrt_m = 1.0 / np.sqrt(mass)
    sym = dense * inv_sqrt_m[:, None] * inv_sqrt_m[None, :]
    sym = 0.5 * (sym + sym.T)
    eigvals, eigvecs = np.linalg.eigh(sym)

    lam = eigvals[:count]
    phi_kept = eigvecs[:, :count] * inv_sqrt_m[:, None]
    phi = np.zeros((n, count))
    phi[keep] = phi_kept
    # eigenvectors are sign-ambiguous; pin the largest-magnitude entry positive
    peak = np.argmax(np.abs(phi), axis=0)
    signs = np.sign(phi[peak, np.arange(count)])
    signs[signs == 0] = 1.0
    return lam.copy(), phi * signs

"""Structured hexahedral meshes for soft-body simulation.

The mesh model is deliberately grid-like: nodes live on a regular
``(nx, ny, nz)`` lattice with uniform spacing per axis, and cells are the
unit hexahedra between adjacent lattice planes.  Irregular bodies are
represented by an *occupancy* mask over the lattice rather than by
unstructured connectivity, which keeps node indexing trivial for the
convolutional models that consume these fields downstream.

Conventions used throughout the package:

* node ``(i, j, k)`` maps to flat index ``(i * ny + j) * nz + k``
  (C order over the grid axes);
* cell corners are numbered x-fastest: corner ``c`` has lattice offsets
  ``(c & 1, (c >> 1) & 1, (c >> 2) & 1)``;
* nodal fields are arrays of shape ``(nx, ny, nz, 3)`` and must be zero
  on inactive lattice slots;
* lengths are millimetres, so volumes come out in mm^3.

Deformed volume is computed by splitting every hexahedron into six
tetrahedra around a body diagonal and summing signed tetrahedron volumes;
the signed sum is taken per cell *before* the absolute value so that a
cleanly inverted cell reports negative content instead of folding back to
a positive number.  The same decomposition is available through the
autodiff engine so volume terms can sit inside training losses.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, NamedTuple, Sequence

import numpy as np


class MeshError(ValueError):
    """Raised for inconsistent mesh definitions or malformed fields."""


# Corner c of a cell sits at lattice offset (c & 1, c>>1 & 1, c>>2 & 1).
CORNER_OFFSETS: tuple[tuple[int, int, int], ...] = tuple(
    (c & 1, (c >> 1) & 1, (c >> 2) & 1) for c in range(8)
)

# Six-tetrahedron split of the unit hex around the 0-7 body diagonal.
# Every tet is positively oriented on the reference cell (signed volume
# +1/6 each), so the signed sum of determinants recovers the cell volume.
TETS_MAIN: tuple[tuple[int, int, int, int], ...] = (
    (0, 1, 3, 7),
    (0, 3, 2, 7),
    (0, 2, 6, 7),
    (0, 6, 4, 7),
    (0, 4, 5, 7),
    (0, 5, 1, 7),
)

# Mirrored split around the 1-6 diagonal: relabel corners through a
# reflection in x and swap one vertex pair per tet to restore positive
# orientation.  Used to probe decomposition sensitivity on warped cells.
_MIRROR = (1, 0, 3, 2, 5, 4, 7, 6)
TETS_MIRROR: tuple[tuple[int, int, int, int], ...] = tuple(
    (_MIRROR[a], _MIRROR[c], _MIRROR[b], _MIRROR[d]) for (a, b, c, d) in TETS_MAIN
)

_TET_SCHEMES = {"main": TETS_MAIN, "mirror": TETS_MIRROR}


class HexCell(NamedTuple):
    """One hexahedral cell: flat node indices in canonical corner order."""

    node_indices: tuple[int, int, int, int, int, int, int, int]


class GridMesh:
    """A lattice mesh with occupancy and Dirichlet (fixed) node masks.

    Parameters
    ----------
    dims:
        Node counts ``(nx, ny, nz)`` per axis; every axis needs at least
        two planes so at least one cell layer exists.
    spacing:
        Node spacing per axis in mm.
    occupancy:
        Boolean ``(nx, ny, nz)`` mask of lattice slots that carry a node.
        ``None`` means fully occupied.
    dirichlet:
        Boolean mask of nodes with all displacement components pinned to
        zero.  Must be a subset of the occupancy.
    offset:
        World position of lattice slot ``(0, 0, 0)``.
    """

    def __init__(
        self,
        dims: Sequence[int],
        spacing: Sequence[float] = (1.0, 1.0, 1.0),
        occupancy: np.ndarray | None = None,
        dirichlet: np.ndarray | None = None,
        offset: Sequence[float] = (0.0, 0.0, 0.0),
    ) -> None:
        dims = tuple(int(d) for d in dims)
        if len(dims) != 3 or any(d < 2 for d in dims):
            raise MeshError(f"dims must be three counts >= 2, got {dims}")
        if np.isscalar(spacing):
            spacing = (spacing,) * 3
        spacing = tuple(float(s) for s in spacing)
        if len(spacing) != 3 or any(s <= 0.0 for s in spacing):
            raise MeshError(f"spacing must be three positive lengths, got {spacing}")

        self.dims = dims
        self.spacing = spacing
        self.offset = tuple(float(v) for v in offset)

        if occupancy is None:
            occupancy = np.ones(dims, dtype=bool)
        else:
            occupancy = np.ascontiguousarray(occupancy, dtype=bool)
            if occupancy.shape != dims:
                raise MeshError(
                    f"occupancy shape {occupancy.shape} does not match dims {dims}"
                )
        if dirichlet is None:
            dirichlet = np.zeros(dims, dtype=bool)
        else:
            dirichlet = np.ascontiguousarray(dirichlet, dtype=bool)
            if dirichlet.shape != dims:
                raise MeshError(
                    f"dirichlet shape {dirichlet.shape} does not match dims {dims}"
                )
        if np.any(dirichlet & ~occupancy):
            raise MeshError("dirichlet mask marks nodes outside the occupancy")

        self.occupancy = occupancy
        self.dirichlet = dirichlet

        nx, ny, nz = dims
        grid = np.stack(
            np.meshgrid(
                self.offset[0] + spacing[0] * np.arange(nx),
                self.offset[1] + spacing[1] * np.arange(ny),
                self.offset[2] + spacing[2] * np.arange(nz),
                indexing="ij",
            ),
            axis=-1,
        )
        self.rest_positions = np.ascontiguousarray(grid, dtype=np.float64)

        self.node_count = nx * ny * nz
        self.active_flat = occupancy.reshape(-1)
        self.n_active = int(self.active_flat.sum())
        if self.n_active == 0:
            raise MeshError("mesh has no active nodes")

        self.cells, self.cell_ijk = self._build_cells()
        if len(self.cells) == 0:
            raise MeshError("occupancy admits no complete hexahedral cell")
        self._tet_nodes: dict[str, np.ndarray] = {}
        self._rest_volume: float | None = None

    # ------------------------------------------------------------------
    # construction helpers
    # ------------------------------------------------------------------

    def _build_cells(self) -> tuple[np.ndarray, np.ndarray]:
        nx, ny, nz = self.dims
        occ = self.occupancy
        # A cell exists iff all eight corner slots are occupied.
        full = np.ones((nx - 1, ny - 1, nz - 1), dtype=bool)
        for dx, dy, dz in CORNER_OFFSETS:
            full &= occ[dx : dx + nx - 1, dy : dy + ny - 1, dz : dz + nz - 1]
        ci, cj, ck = np.nonzero(full)
        cell_ijk = np.stack([ci, cj, ck], axis=1).astype(np.int32)
        corners = []
        for dx, dy, dz in CORNER_OFFSETS:
            corners.append(((ci + dx) * ny + (cj + dy)) * nz + (ck + dz))
        cells = np.stack(corners, axis=1).astype(np.int32)
        return np.ascontiguousarray(cells), cell_ijk

    # ------------------------------------------------------------------
    # basic queries
    # ------------------------------------------------------------------

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    def flat_index(self, i: int, j: int, k: int) -> int:
        return (i * self.dims[1] + j) * self.dims[2] + k

    def hex_cells(self) -> Iterator[HexCell]:
        for row in self.cells:
            yield HexCell(tuple(int(v) for v in row))

    def tet_nodes(self, scheme: str = "main") -> np.ndarray:
        """Flat node indices of the tet split, shape ``(n_cells, 6, 4)``."""
        if scheme not in _TET_SCHEMES:
            raise MeshError(f"unknown tet scheme {scheme!r}")
        cached = self._tet_nodes.get(scheme)
        if cached is None:
            pattern = np.asarray(_TET_SCHEMES[scheme], dtype=np.int64)  # (6, 4)
            cached = np.ascontiguousarray(self.cells[:, pattern])
            self._tet_nodes[scheme] = cached
        return cached

    @property
    def rest_volume(self) -> float:
        """Total volume of the undeformed body in mm^3."""
        if self._rest_volume is None:
            self._rest_volume = total_volume(self, np.zeros(self.dims + (3,)))
        return self._rest_volume

    def validate_field(self, values: np.ndarray, name: str = "field") -> np.ndarray:
        arr = np.asarray(values)
        if arr.shape != self.dims + (3,):
            raise MeshError(
                f"{name} has shape {arr.shape}, expected {self.dims + (3,)}"
            )
        return arr

    # ------------------------------------------------------------------
    # masks
    # ------------------------------------------------------------------

    def free_mask(self) -> np.ndarray:
        """Active nodes that are not pinned, shape ``(nx, ny, nz)``."""
        return self.occupancy & ~self.dirichlet

    def free_surface_mask(self) -> np.ndarray:
        """Unpinned nodes on the exposed boundary of the body.

        A node is on the free surface when it is active, not Dirichlet,
        and at least one of its six lattice neighbours is missing (either
        out of the grid or an unoccupied slot).  These are the nodes that
        external contact forces may touch.
        """
        occ = self.occupancy
        exposed = np.zeros(self.dims, dtype=bool)
        padded = np.zeros((self.dims[0] + 2, self.dims[1] + 2, self.dims[2] + 2), bool)
        padded[1:-1, 1:-1, 1:-1] = occ
        for axis in range(3):
            for shift in (-1, 1):
                neighbour = np.roll(padded, shift, axis=axis)[1:-1, 1:-1, 1:-1]
                exposed |= occ & ~neighbour
        return exposed & ~self.dirichlet


def build_box_mesh(
    dims: Sequence[int],
    spacing: Sequence[float] = (1.0, 1.0, 1.0),
    fixed: str = "sides+bottom",
) -> GridMesh:
    """Build a fully occupied box mesh with a standard support pattern.

    ``fixed`` selects which boundary nodes are pinned:

    * ``"sides+bottom"`` - bottom plane (k = 0) and all four lateral
      faces are fixed, only the top face and interior move.  This mirrors
      a tissue slab sitting in a rigid tray.
    * ``"bottom"`` - only the bottom plane is fixed.
    * ``"none"`` - free-floating body (useful for momentum checks).
    """
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3:
        raise MeshError(f"dims must have three entries, got {dims}")
    dirichlet = np.zeros(dims, dtype=bool)
    if fixed == "sides+bottom":
        dirichlet[:, :, 0] = True
        dirichlet[0, :, :] = True
        dirichlet[-1, :, :] = True
        dirichlet[:, 0, :] = True
        dirichlet[:, -1, :] = True
    elif fixed == "bottom":
        dirichlet[:, :, 0] = True
    elif fixed == "none":
        pass
    else:
        raise MeshError(f"unknown fixed pattern {fixed!r}")
    return GridMesh(dims, spacing=spacing, dirichlet=dirichlet)


# ----------------------------------------------------------------------
# volume
# ----------------------------------------------------------------------


def _signed_cell_volumes(corners: np.ndarray) -> np.ndarray:
    """Signed cell volumes from tet corner positions.

    ``corners`` has shape ``(..., n_cells, 6, 4, 3)``; the result is
    ``(..., n_cells)``.  Each tet contributes ``det(e1, e2, e3) / 6`` with
    edges taken from its first vertex; tets of one cell are summed signed.
    """
    e = corners[..., 1:, :] - corners[..., :1, :]
    e1, e2, e3 = e[..., 0, :], e[..., 1, :], e[..., 2, :]
    det = (
        e1[..., 0] * (e2[..., 1] * e3[..., 2] - e2[..., 2] * e3[..., 1])
        - e1[..., 1] * (e2[..., 0] * e3[..., 2] - e2[..., 2] * e3[..., 0])
        + e1[..., 2] * (e2[..., 0] * e3[..., 1] - e2[..., 1] * e3[..., 0])
    )
    return det.sum(axis=-1) / 6.0


def deformed_volumes(
    mesh: GridMesh, displacements: np.ndarray, scheme: str = "main"
) -> np.ndarray:
    """Total body volume for a batch of displacement fields.

    ``displacements`` is ``(batch, nx, ny, nz, 3)`` (or a single field);
    the result is ``(batch,)`` in mm^3.  Inverted cells contribute their
    signed content before per-cell rectification, so partial inversion
    shows up as shrinkage rather than phantom growth.
    """
    u = np.asarray(displacements, dtype=np.float64)
    single = u.ndim == 4
    if single:
        u = u[None]
    if u.shape[1:] != mesh.dims + (3,):
        raise MeshError(
            f"displacement batch shape {u.shape} incompatible with mesh dims {mesh.dims}"
        )
    tet = mesh.tet_nodes(scheme)  # (n_cells, 6, 4)
    pos = mesh.rest_positions.reshape(-1, 3)[None] + u.reshape(len(u), -1, 3)
    corners = pos[:, tet, :]  # (batch, n_cells, 6, 4, 3)
    vol = np.abs(_signed_cell_volumes(corners)).sum(axis=-1)
    return vol


def total_volume(mesh: GridMesh, displacement, scheme: str = "main"):
    """Deformed body volume in mm^3.

    Accepts either a plain ``(nx, ny, nz, 3)`` array (returns ``float``)
    or an autodiff tensor of the same shape, batched with a leading axis
    or not, in which case the result stays on the tape (scalar or
    ``(batch,)`` tensor) and gradients flow back to the displacements.
    """
    from . import tensorad as ta

    if isinstance(displacement, ta.Tensor):
        return _total_volume_ad(mesh, displacement, scheme)
    u = np.asarray(displacement)
    if u.ndim == 4:
        return float(deformed_volumes(mesh, u, scheme)[0])
    raise MeshError(
        f"expected a ({mesh.dims[0]}, {mesh.dims[1]}, {mesh.dims[2]}, 3) field, "
        f"got shape {u.shape}; use deformed_volumes() for batches"
    )


def _total_volume_ad(mesh: GridMesh, displacement, scheme: str):
    from . import tensorad as ta

    single = displacement.data.ndim == 4
    shape = displacement.data.shape[-4:]
    if shape != mesh.dims + (3,):
        raise MeshError(
            f"displacement shape {displacement.data.shape} incompatible with mesh "
            f"dims {mesh.dims}"
        )
    u = displacement.reshape((-1,) + shape) if single else displacement
    batch = u.data.shape[0]
    u_flat = u.reshape((batch, mesh.node_count, 3))
    rest = ta.Tensor(mesh.rest_positions.reshape(1, -1, 3).astype(u.data.dtype))
    pos = u_flat + rest
    tet = mesh.tet_nodes(scheme)
    corners = ta.take(pos, tet, axis=1)  # (batch, n_cells, 6, 4, 3)
    e = corners[:, :, :, 1:, :] - corners[:, :, :, :1, :]
    e1 = e[:, :, :, 0, :]
    e2 = e[:, :, :, 1, :]
    e3 = e[:, :, :, 2, :]
    det = (
        e1[..., 0] * (e2[..., 1] * e3[..., 2] - e2[..., 2] * e3[..., 1])
        - e1[..., 1] * (e2[..., 0] * e3[..., 2] - e2[..., 2] * e3[..., 0])
        + e1[..., 2] * (e2[..., 0] * e3[..., 1] - e2[..., 1] * e3[..., 0])
    )
    cell = ta.sum(det, axis=-1) / 6.0
    vol = ta.sum(ta.absolute(cell), axis=-1)
    if single:
        return ta.sum(vol)
    return vol


# ----------------------------------------------------------------------
# depth binning
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class DepthLayer:
    """Active nodes of one lattice plane with their normalized depth."""

    normalized_depth: float
    node_indices: np.ndarray  # flat indices, sorted


def depth_layers(mesh: GridMesh) -> list[DepthLayer]:
    """Partition active nodes into horizontal layers by lattice height.

    Layer ``k`` collects every active node on plane ``z = k``; its
    normalized depth is ``(height - z_k) / height`` with ``height`` the
    total body height, so the top plane maps to 0 and the bottom plane to
    1.  Layers are returned top-first and always cover all active nodes
    exactly once.
    """
    nx, ny, nz = mesh.dims
    height = mesh.spacing[2] * (nz - 1)
    occ = mesh.occupancy
    layers = []
    for k in range(nz - 1, -1, -1):
        ii, jj = np.nonzero(occ[:, :, k])
        flat = (ii * ny + jj) * nz + k
        depth = (height - mesh.spacing[2] * k) / height
        layers.append(DepthLayer(float(depth), np.sort(flat.astype(np.int64))))
    return layers


# ----------------------------------------------------------------------
# nodal fields
# ----------------------------------------------------------------------


class Field3:
    """A 3-vector field over the mesh lattice.

    Thin wrapper used at API boundaries; the numerical kernels all work
    on the underlying ``(nx, ny, nz, 3)`` array, which must carry zeros
    on inactive slots.
    """

    __slots__ = ("mesh", "values")

    def __init__(self, mesh: GridMesh, values: np.ndarray | None = None):
        if values is None:
            values = np.zeros(mesh.dims + (3,), dtype=np.float64)
        else:
            values = mesh.validate_field(values).astype(np.float64, copy=True)
            values[~mesh.occupancy] = 0.0
        self.mesh = mesh
        self.values = values

    @classmethod
    def zeros(cls, mesh: GridMesh) -> "Field3":
        return cls(mesh)

    def __array__(self, dtype=None):
        return self.values if dtype is None else self.values.astype(dtype)

    def magnitudes(self) -> np.ndarray:
        return np.linalg.norm(self.values, axis=-1)

    def copy(self) -> "Field3":
        out = Field3(self.mesh)
        out.values = self.values.copy()
        return out


def as_field_array(mesh: GridMesh, field) -> np.ndarray:
    """Coerce a ``Field3`` or raw array into a validated nodal array."""
    if isinstance(field, Field3):
        if field.mesh is not mesh:
            raise MeshError("field belongs to a different mesh")
        return field.values
    return mesh.validate_field(np.asarray(field, dtype=np.float64))

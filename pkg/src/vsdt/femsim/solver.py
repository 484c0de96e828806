"""Explicit dynamic FEM for the QLV Neo-Hookean solid.

Space: trilinear hexahedral elements on the structured mesh, 2x2x2 Gauss
quadrature (full integration, so no hourglass stabilization is needed).
Time: central-difference stepping with a lumped (row-sum) mass matrix
and mass-proportional damping,

    a_n = M^{-1} (f_ext - f_int(u_n, history)) - alpha * v_n
    v_{n+1} = v_n + dt * a_n
    u_{n+1} = u_n + dt * v_{n+1}

with Dirichlet degrees of freedom re-zeroed after every update.  The
internal force uses the first Piola-Kirchhoff stress P = F S, where S is
the viscoelastic stress from the recursive Prony convolution.

The stable step follows the usual dilatational-wave bound
``dt = safety * h_min / c_d`` with ``c_d = sqrt((K + 4 mu_lin / 3) / rho)``.
All state arrays are float64; recorded dataset frames are cast down to
float32 at the boundary.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..meshkit import GridMesh
from .material import (
    ElementInversionError,
    Material,
    QLVState,
    det3x3,
    elastic_stress,
    inv3x3,
    qlv_update,
)


class SolverError(RuntimeError):
    """Explicit integration failed (blow-up, NaN, or misuse)."""


class NumericalBlowupError(SolverError):
    """Non-finite values appeared in the state."""


_GP = 1.0 / math.sqrt(3.0)
# Corner reference coordinates, x-fastest ordering (matches meshkit).
_XI_CORNERS = np.array(
    [[(c & 1) * 2 - 1, ((c >> 1) & 1) * 2 - 1, ((c >> 2) & 1) * 2 - 1] for c in range(8)],
    dtype=np.float64,
)
_XI_GAUSS = _XI_CORNERS * _GP  # 8 Gauss points, same ordering


def shape_gradients(spacing: tuple[float, float, float]) -> tuple[np.ndarray, float]:
    """Physical shape-function gradients at the 8 Gauss points.

    Returns ``(dndx, detj)`` with ``dndx`` of shape (8 gauss, 8 nodes, 3)
    and ``detj`` the constant Jacobian determinant ``hx hy hz / 8``.
    """
    hx, hy, hz = spacing
    dndx = np.empty((8, 8, 3), dtype=np.float64)
    for g, xi in enumerate(_XI_GAUSS):
        for a, xa in enumerate(_XI_CORNERS):
            fx = 0.5 * (1.0 + xa[0] * xi[0])
            fy = 0.5 * (1.0 + xa[1] * xi[1])
            fz = 0.5 * (1.0 + xa[2] * xi[2])
            # d/dX = d/dxi * (2 / h) on an axis-aligned box cell
            dndx[g, a, 0] = 0.5 * xa[0] * fy * fz * (2.0 / hx)
            dndx[g, a, 1] = fx * 0.5 * xa[1] * fz * (2.0 / hy)
            dndx[g, a, 2] = fx * fy * 0.5 * xa[2] * (2.0 / hz)
    detj = hx * hy * hz / 8.0
    return dndx, detj


def stable_timestep(mesh: GridMesh, material: Material, safety: float = 0.5) -> float:
    """CFL-style bound for the explicit integrator."""
    if not 0.0 < safety <= 1.0:
        raise SolverError(f"safety factor must be in (0, 1], got {safety}")
    mu_lin = 2.0 * material.c1
    c_d = math.sqrt((material.K + 4.0 * mu_lin / 3.0) / material.rho)
    h_min = min(mesh.spacing)
    return safety * h_min / c_d


@dataclass
class BodyState:
    """Snapshot of the integrated body."""

    u: np.ndarray  # (nx, ny, nz, 3) mm
    v: np.ndarray  # mm / s
    a: np.ndarray  # mm / s^2
    history: QLVState  # per cell x gauss point
    time: float = 0.0

    @classmethod
    def zeros(cls, mesh: GridMesh, material: Material) -> "BodyState":
        shape = mesh.dims + (3,)
        return cls(
            u=np.zeros(shape),
            v=np.zeros(shape),
            a=np.zeros(shape),
            history=QLVState.zeros(material, (mesh.n_cells, 8)),
            time=0.0,
        )


class ExplicitSolver:
    """Precomputed assembly context for one (mesh, material, damping)."""

    def __init__(self, mesh: GridMesh, material: Material, damping: float = 5.0):
        if damping < 0.0:
            raise SolverError(f"damping must be non-negative, got {damping}")
        self.mesh = mesh
        self.material = material
        self.damping = float(damping)

        self.dndx, self.detj = shape_gradients(mesh.spacing)
        self.cells = mesh.cells.astype(np.int64)

        # Row-sum lumped mass: every corner of a cell receives 1/8 of the
        # cell mass (exact for the constant-metric trilinear element).
        mass = np.zeros(mesh.node_count, dtype=np.float64)
        cell_mass = material.rho * mesh.spacing[0] * mesh.spacing[1] * mesh.spacing[2]
        np.add.at(mass, self.cells.reshape(-1), cell_mass / 8.0)
        mass[~mesh.active_flat] = 1.0  # never divided into a real force
        self.mass = mass

        self.fixed_flat = mesh.dirichlet.reshape(-1) | ~mesh.active_flat
        self._cells_flat = self.cells.reshape(-1)
        self._eye = np.eye(3, dtype=np.float64)

    # -- internal forces ----------------------------------------------

    def internal_forces(
        self, u_flat: np.ndarray, history: QLVState, dt: float
    ) -> tuple[np.ndarray, QLVState]:
        """Assembled nodal internal forces and the advanced QLV history."""
        u_cells = u_flat[self.cells]  # (nc, 8, 3)
        # F_ij = delta_ij + sum_a u_a,i dN_a/dX_j  at each Gauss point;
        # contract over the corner axis, then reorder to (cell, gauss, i, j).
        F = np.tensordot(u_cells, self.dndx, axes=([1], [1])).transpose(0, 2, 1, 3)
        F = np.ascontiguousarray(F)
        F += self._eye
        j = det3x3(F)
        if np.any(j <= 0.0) or not np.all(np.isfinite(j)):
            bad = np.argwhere((j <= 0.0) | ~np.isfinite(j))
            cell = int(bad[0][0]) if len(bad) else -1
            raise ElementInversionError(
                f"element inversion in cell {cell}: min det F = {float(np.nanmin(j)):.5g}"
            )
        C = np.matmul(np.swapaxes(F, -1, -2), F)
        c_inv = inv3x3(C, det=j * j)
        vol = (self.material.K * j * (j - 1.0))[..., None, None]
        s_e = 2.0 * self.material.c1 * (self._eye - c_inv) + vol * c_inv
        s_total, new_history = qlv_update(history, self.material, s_e, dt)
        p = np.matmul(F, s_total)
        contrib = np.tensordot(p, self.dndx, axes=([1, 3], [0, 2]))  # (nc, i, a)
        contrib = contrib.transpose(0, 2, 1) * self.detj
        f_int = np.empty((self.mesh.node_count, 3), dtype=np.float64)
        for d in range(3):
            f_int[:, d] = np.bincount(
                self._cells_flat,
                weights=np.ascontiguousarray(contrib[..., d]).reshape(-1),
                minlength=self.mesh.node_count,
            )
        return f_int, new_history

    # -- time stepping -------------------------------------------------

    def step(self, state: BodyState, external_force: np.ndarray, dt: float) -> BodyState:
        """One central-difference step; returns a new BodyState."""
        if dt <= 0.0:
            raise SolverError(f"dt must be positive, got {dt}")
        mesh = self.mesh
        f_ext = np.asarray(external_force, dtype=np.float64).reshape(-1, 3)
        u = state.u.reshape(-1, 3)
        v = state.v.reshape(-1, 3).copy()

        f_int, new_history = self.internal_forces(u, state.history, dt)
        a = (f_ext - f_int) / self.mass[:, None] - self.damping * v
        a[self.fixed_flat] = 0.0
        v += dt * a
        v[self.fixed_flat] = 0.0
        u_new = u + dt * v
        u_new[self.fixed_flat] = 0.0

        if not np.all(np.isfinite(u_new)):
            raise NumericalBlowupError(
                f"non-finite displacement at t = {state.time + dt:.6g} s "
                f"(dt = {dt:.3g}; check the stability bound)"
            )
        shape = mesh.dims + (3,)
        return BodyState(
            u=u_new.reshape(shape),
            v=v.reshape(shape),
            a=a.reshape(shape),
            history=new_history,
            time=state.time + dt,
        )

    def advance(
        self, state: BodyState, force_at, t_end: float, dt: float
    ) -> BodyState:
        """Step until ``t_end``; ``force_at(t)`` supplies the load field."""
        while state.time < t_end - 1e-12:
            step_dt = min(dt, t_end - state.time)
            state = self.step(state, force_at(state.time), step_dt)
        return state


def explicit_step(
    body: BodyState,
    mesh: GridMesh,
    material: Material,
    external_force: np.ndarray,
    dt: float,
    damping: float = 5.0,
) -> BodyState:
    """Single-shot step helper; builds the assembly context on the fly."""
    return ExplicitSolver(mesh, material, damping=damping).step(
        body, external_force, dt
    )


def momentum(mesh: GridMesh, solver: ExplicitSolver, state: BodyState) -> np.ndarray:
    """Total linear momentum (mass-weighted velocity sum) in tonne mm/s."""
    v = state.v.reshape(-1, 3)
    m = solver.mass.copy()
    m[~mesh.active_flat] = 0.0
    return (m[:, None] * v).sum(axis=0)


__all__ = [
    "BodyState",
    "ExplicitSolver",
    "NumericalBlowupError",
    "SolverError",
    "elastic_stress",
    "explicit_step",
    "momentum",
    "shape_gradients",
    "stable_timestep",
]

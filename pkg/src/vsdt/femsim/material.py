"""Quasilinear viscoelastic Neo-Hookean material model.

The elastic backbone is a generalized Neo-Hookean solid with strain
energy

    W = C1 (I1 - 3 - 2 ln j) + (K / 2) (j - 1)^2,

where ``I1 = tr(C)``, ``C = F^T F`` and ``j = det F``.  Differentiating
twice w.r.t. C gives the second Piola-Kirchhoff stress used here:

    S_e = 2 C1 (I - C^{-1}) + K j (j - 1) C^{-1}.

In the small-strain limit this reduces to linear elasticity with shear
modulus ``mu_lin = 2 C1`` and bulk modulus K, so K is derived from a
nominal shear modulus ``mu`` and Poisson ratio ``nu`` through
``K = 2 mu (1 + nu) / (3 (1 - 2 nu))``.

Viscoelasticity is quasilinear: the stress response is the hereditary
convolution of the elastic stress history with a reduced relaxation
function given by a Prony series

    G(t) = g0 + sum_k g_k exp(-t / tau_k),      G(0) = 1.

``g0`` is fixed by the normalization ``g0 = 1 - sum g_k``: only the
branch weights are free parameters, and a material with ``sum g_k >= 1``
is rejected.  Time integration uses the standard recursive-convolution
(exponential internal variable) update, exact for stress histories that
are linear within a step.

Units: MPa for stress and moduli, mm for length, s for time, and
tonne/mm^3 for density, which makes forces come out in N.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np


class MaterialError(ValueError):
    """Invalid material parameters."""


class ElementInversionError(RuntimeError):
    """A deformation gradient with non-positive determinant was reached."""


def derive_bulk_modulus(mu: float, nu: float) -> float:
    """Bulk modulus K = 2 mu (1 + nu) / (3 (1 - 2 nu)), in MPa.

    ``nu`` must be below 0.5: the incompressible limit has no finite K.
    """
    if not 0.0 < nu < 0.5:
        raise MaterialError(
            f"Poisson ratio must lie in (0, 0.5) for a finite bulk modulus, got {nu}"
        )
    if mu <= 0.0:
        raise MaterialError(f"shear modulus must be positive, got {mu}")
    return 2.0 * mu * (1.0 + nu) / (3.0 * (1.0 - 2.0 * nu))


@dataclass(frozen=True)
class Material:
    """Material constants for the QLV Neo-Hookean model.

    ``prony`` holds ``(g_k, tau_k)`` pairs (dimensionless weight,
    relaxation time in seconds).  ``g0`` and ``K`` are derived.
    """

    c1: float = 0.0002  # MPa
    mu: float = 0.0004  # MPa
    nu: float = 0.42
    rho: float = 1.0e-9  # tonne / mm^3 (approximately water)
    prony: tuple[tuple[float, float], ...] = ((0.12, 330.0), (0.8, 11.0))

    def __post_init__(self):
        if self.c1 <= 0.0:
            raise MaterialError(f"C1 must be positive, got {self.c1}")
        if self.rho <= 0.0:
            raise MaterialError(f"density must be positive, got {self.rho}")
        derive_bulk_modulus(self.mu, self.nu)  # validates mu, nu
        for g, tau in self.prony:
            if g <= 0.0:
                raise MaterialError(f"Prony weight must be positive, got {g}")
            if tau <= 0.0:
                raise MaterialError(f"relaxation time must be positive, got {tau}")
        if self.g0 <= 0.0:
            raise MaterialError(
                f"Prony weights sum to {1.0 - self.g0:.6g} >= 1; the long-time "
                f"modulus g0 = 1 - sum(g_k) must stay positive"
            )

    @property
    def K(self) -> float:
        return derive_bulk_modulus(self.mu, self.nu)

    @property
    def g0(self) -> float:
        return 1.0 - sum(g for g, _ in self.prony)

    @property
    def prony_g(self) -> np.ndarray:
        return np.array([g for g, _ in self.prony], dtype=np.float64)

    @property
    def prony_tau(self) -> np.ndarray:
        return np.array([t for _, t in self.prony], dtype=np.float64)

    @classmethod
    def default_tissue(cls, tau_scale: float = 1.0) -> "Material":
        """Soft-tissue constants; ``tau_scale`` shrinks relaxation times
        so that desk-scale runs show the full relaxation within a second
        (0.01 maps {330 s, 11 s} onto {3.3 s, 0.11 s})."""
        base = cls()
        if tau_scale == 1.0:
            return base
        if tau_scale <= 0.0:
            raise MaterialError(f"tau_scale must be positive, got {tau_scale}")
        scaled = tuple((g, t * tau_scale) for g, t in base.prony)
        return replace(base, prony=scaled)

    def to_dict(self) -> dict:
        return {
            "c1": self.c1,
            "mu": self.mu,
            "nu": self.nu,
            "rho": self.rho,
            "prony": [[g, t] for g, t in self.prony],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Material":
        return cls(
            c1=float(d["c1"]),
            mu=float(d["mu"]),
            nu=float(d["nu"]),
            rho=float(d["rho"]),
            prony=tuple((float(g), float(t)) for g, t in d["prony"]),
        )


def relaxation_modulus(material: Material, t) -> float | np.ndarray:
    """Reduced relaxation function G(t) = g0 + sum g_k exp(-t/tau_k)."""
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < 0.0):
        raise MaterialError("relaxation_modulus needs t >= 0")
    g = material.prony_g
    tau = material.prony_tau
    vals = material.g0 + (g * np.exp(-t_arr[..., None] / tau)).sum(axis=-1)
    if np.isscalar(t) or np.asarray(t).ndim == 0:
        return float(vals)
    return vals


# ----------------------------------------------------------------------
# small batched 3x3 linear algebra (explicit cofactors, any leading shape)
# ----------------------------------------------------------------------


def det3x3(m: np.ndarray) -> np.ndarray:
    return (
        m[..., 0, 0] * (m[..., 1, 1] * m[..., 2, 2] - m[..., 1, 2] * m[..., 2, 1])
        - m[..., 0, 1] * (m[..., 1, 0] * m[..., 2, 2] - m[..., 1, 2] * m[..., 2, 0])
        + m[..., 0, 2] * (m[..., 1, 0] * m[..., 2, 1] - m[..., 1, 1] * m[..., 2, 0])
    )


def inv3x3(m: np.ndarray, det: np.ndarray | None = None) -> np.ndarray:
    if det is None:
        det = det3x3(m)
    adj = np.empty_like(m)
    adj[..., 0, 0] = m[..., 1, 1] * m[..., 2, 2] - m[..., 1, 2] * m[..., 2, 1]
    adj[..., 0, 1] = m[..., 0, 2] * m[..., 2, 1] - m[..., 0, 1] * m[..., 2, 2]
    adj[..., 0, 2] = m[..., 0, 1] * m[..., 1, 2] - m[..., 0, 2] * m[..., 1, 1]
    adj[..., 1, 0] = m[..., 1, 2] * m[..., 2, 0] - m[..., 1, 0] * m[..., 2, 2]
    adj[..., 1, 1] = m[..., 0, 0] * m[..., 2, 2] - m[..., 0, 2] * m[..., 2, 0]
    adj[..., 1, 2] = m[..., 0, 2] * m[..., 1, 0] - m[..., 0, 0] * m[..., 1, 2]
    adj[..., 2, 0] = m[..., 1, 0] * m[..., 2, 1] - m[..., 1, 1] * m[..., 2, 0]
    adj[..., 2, 1] = m[..., 0, 1] * m[..., 2, 0] - m[..., 0, 0] * m[..., 2, 1]
    adj[..., 2, 2] = m[..., 0, 0] * m[..., 1, 1] - m[..., 0, 1] * m[..., 1, 0]
    return adj / det[..., None, None]


def elastic_stress(material: Material, F: np.ndarray) -> np.ndarray:
    """Instantaneous second Piola-Kirchhoff stress for gradients ``F``.

    ``F`` may carry any leading batch shape ``(..., 3, 3)``.  Raises
    :class:`ElementInversionError` when any determinant is non-positive.
    """
    F = np.asarray(F, dtype=np.float64)
    if F.shape[-2:] != (3, 3):
        raise MaterialError(f"F must be (..., 3, 3), got {F.shape}")
    j = det3x3(F)
    if np.any(j <= 0.0) or not np.all(np.isfinite(j)):
        bad = float(np.min(j))
        raise ElementInversionError(
            f"deformation gradient inverted: min det F = {bad:.6g}"
        )
    C = np.einsum("...ki,...kj->...ij", F, F)
    C_inv = inv3x3(C, det=j * j)
    eye = np.eye(3, dtype=np.float64)
    vol = (material.K * j * (j - 1.0))[..., None, None]
    return 2.0 * material.c1 * (eye - C_inv) + vol * C_inv


# ----------------------------------------------------------------------
# hereditary-integral time stepping
# ----------------------------------------------------------------------


@dataclass
class QLVState:
    """Per-evaluation-point history of the Prony convolution.

    ``h`` stacks one internal stress per branch in front of the
    evaluation-point shape: ``(n_branches, ..., 3, 3)``; ``s_e_prev`` is
    the elastic stress of the previous step.
    """

    h: np.ndarray
    s_e_prev: np.ndarray

    @classmethod
    def zeros(cls, material: Material, point_shape: Sequence[int]) -> "QLVState":
        shape = tuple(point_shape) + (3, 3)
        return cls(
            h=np.zeros((len(material.prony),) + shape, dtype=np.float64),
            s_e_prev=np.zeros(shape, dtype=np.float64),
        )


def _branch_coefficients(material: Material, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Exponential decay and loading weights for one step of length dt.

    decay_k = exp(-dt/tau_k); load_k = g_k * (1 - exp(-dt/tau_k)) / (dt/tau_k),
    computed via expm1 so the dt -> 0 limit (load_k -> g_k) is exact to
    machine precision.
    """
    x = dt / material.prony_tau
    decay = np.exp(-x)
    load = material.prony_g * (-np.expm1(-x) / x)
    return decay, load


def qlv_update(
    state: QLVState, material: Material, s_e_new: np.ndarray, dt: float
) -> tuple[np.ndarray, QLVState]:
    """Advance the Prony history one step; returns (total stress, new state).

    Implements the recursive convolution

        H_k <- exp(-dt/tau_k) H_k
               + g_k (1 - exp(-dt/tau_k)) / (dt/tau_k) * (S_e_new - S_e_prev)
        S = g0 S_e_new + sum_k H_k
    """
    if dt <= 0.0:
        raise MaterialError(f"dt must be positive, got {dt}")
    s_e_new = np.asarray(s_e_new, dtype=np.float64)
    decay, load = _branch_coefficients(material, dt)
    delta = s_e_new - state.s_e_prev
    extra = (1,) * (s_e_new.ndim)
    h_new = decay.reshape((-1,) + extra) * state.h
    h_new += load.reshape((-1,) + extra) * delta[None]
    total = material.g0 * s_e_new + h_new.sum(axis=0)
    # The new state keeps a reference to s_e_new; callers must not mutate
    # the stress array after handing it over.
    return total, QLVState(h=h_new, s_e_prev=s_e_new)


def hereditary_stress_reference(
    material: Material, times: np.ndarray, s_e_history: np.ndarray
) -> np.ndarray:
    """Direct numerical evaluation of the hereditary integral (oracle).

    Computes S(t_n) = G(t_n) S_e(0) + sum over past intervals of
    G(t_n - t_mid) * (S_e step increment), i.e. midpoint quadrature of
    the Stieltjes convolution integral; O(T^2), for validation only.
    """
    times = np.asarray(times, dtype=np.float64)
    s_hist = np.asarray(s_e_history, dtype=np.float64)
    out = np.zeros_like(s_hist)
    for n in range(len(times)):
        t_n = times[n]
        total = relaxation_modulus(material, t_n - times[0]) * s_hist[0]
        for m in range(1, n + 1):
            t_mid = 0.5 * (times[m] + times[m - 1])
            dS = s_hist[m] - s_hist[m - 1]
            total = total + relaxation_modulus(material, t_n - t_mid) * dS
        out[n] = total
    return out


def small_strain_moduli(material: Material) -> tuple[float, float]:
    """Linearized (shear, Lame lambda) pair implied by the model.

    Expanding W around F = I gives W = mu_lin tr(eps^2) + (K/2)(tr eps)^2
    with ``mu_lin = 2 C1``: the C1 term is purely deviatoric at second
    order, and the volumetric penalty coefficient K plays the role of
    Lame lambda directly (the linearized bulk modulus is therefore
    ``K + 2 mu_lin / 3``, slightly above the nominal K).
    """
    mu_lin = 2.0 * material.c1
    lam = material.K
    return mu_lin, lam


def strain_energy_density(material: Material, F: np.ndarray) -> np.ndarray:
    """W(F); used by tests to cross-check the stress derivation."""
    F = np.asarray(F, dtype=np.float64)
    j = det3x3(F)
    if np.any(j <= 0.0):
        raise ElementInversionError("non-positive det F in strain energy")
    i1 = np.einsum("...ij,...ij->...", F, F)
    return material.c1 * (i1 - 3.0 - 2.0 * np.log(j)) + 0.5 * material.K * (j - 1.0) ** 2

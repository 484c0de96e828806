"""Constitutive-model checks.

The important oracles here are independent of the implementation under
test: the energy-gradient identity P = dW/dF for the elastic stress, the
O(T^2) hereditary-integral quadrature for the recursive Prony update,
and the closed-form relaxation curve G(t) for a held stretch.
"""

import numpy as np
import pytest

from vsdt.femsim import (
    ElementInversionError,
    Material,
    MaterialError,
    QLVState,
    derive_bulk_modulus,
    elastic_stress,
    hereditary_stress_reference,
    qlv_update,
    relaxation_modulus,
    small_strain_moduli,
    strain_energy_density,
)
from vsdt.femsim.material import det3x3, inv3x3


# ----------------------------------------------------------------------
# moduli
# ----------------------------------------------------------------------


def test_bulk_modulus_reference_value():
    assert derive_bulk_modulus(0.0004, 0.42) == pytest.approx(0.0023667, abs=1e-7)


def test_bulk_modulus_formula():
    mu, nu = 0.002, 0.3
    assert derive_bulk_modulus(mu, nu) == pytest.approx(
        2 * mu * (1 + nu) / (3 * (1 - 2 * nu)), rel=1e-15
    )


@pytest.mark.parametrize("mu,nu", [(0.0, 0.3), (-1.0, 0.3), (0.001, 0.5), (0.001, 0.0), (0.001, 0.7)])
def test_bulk_modulus_rejects_bad_inputs(mu, nu):
    with pytest.raises(MaterialError):
        derive_bulk_modulus(mu, nu)


def test_default_tissue_constants():
    m = Material.default_tissue()
    assert m.c1 == 0.0002
    assert m.mu == 0.0004
    assert m.nu == 0.42
    assert m.prony == ((0.12, 330.0), (0.8, 11.0))
    assert m.g0 == pytest.approx(0.08)
    assert m.K == pytest.approx(0.0023667, abs=1e-7)


def test_tau_scale_shrinks_only_times():
    m = Material.default_tissue(tau_scale=0.01)
    assert m.prony_tau == pytest.approx([3.3, 0.11])
    assert m.prony_g == pytest.approx([0.12, 0.8])
    assert m.g0 == pytest.approx(0.08)
    with pytest.raises(MaterialError):
        Material.default_tissue(tau_scale=0.0)


def test_material_validation():
    with pytest.raises(MaterialError):
        Material(c1=0.0)
    with pytest.raises(MaterialError):
        Material(rho=-1.0)
    with pytest.raises(MaterialError):
        Material(prony=((0.5, 10.0), (0.6, 1.0)))  # weights sum past 1
    with pytest.raises(MaterialError):
        Material(prony=((0.5, 0.0),))
    with pytest.raises(MaterialError):
        Material(prony=((-0.1, 5.0),))


def test_material_dict_roundtrip():
    m = Material.default_tissue(tau_scale=0.5)
    again = Material.from_dict(m.to_dict())
    assert again == m


def test_small_strain_moduli_match_energy_expansion():
    """W(I + h*eps) ~ h^2 (mu_lin tr(eps^2) + lam/2 tr(eps)^2)."""
    m = Material.default_tissue()
    mu_lin, lam = small_strain_moduli(m)
    rng = np.random.default_rng(0)
    eps = rng.normal(size=(3, 3))
    eps = 0.5 * (eps + eps.T)
    h = 1e-5
    w = float(strain_energy_density(m, np.eye(3) + h * eps))
    predicted = h * h * (mu_lin * np.trace(eps @ eps) + 0.5 * lam * np.trace(eps) ** 2)
    assert w == pytest.approx(predicted, rel=1e-3)


# ----------------------------------------------------------------------
# relaxation function
# ----------------------------------------------------------------------


def test_relaxation_limits_and_monotonicity():
    m = Material.default_tissue()
    assert relaxation_modulus(m, 0.0) == pytest.approx(1.0)
    assert relaxation_modulus(m, 1e9) == pytest.approx(m.g0)
    t = np.linspace(0.0, 2000.0, 400)
    g = relaxation_modulus(m, t)
    assert g.shape == t.shape
    assert (np.diff(g) < 0).all()
    assert (g >= m.g0).all()


def test_relaxation_rejects_negative_time():
    with pytest.raises(MaterialError):
        relaxation_modulus(Material.default_tissue(), -0.1)


# ----------------------------------------------------------------------
# 3x3 helpers
# ----------------------------------------------------------------------


def test_det_inv_match_numpy():
    rng = np.random.default_rng(1)
    m = rng.normal(size=(10, 3, 3)) + 2 * np.eye(3)
    np.testing.assert_allclose(det3x3(m), np.linalg.det(m), rtol=1e-10)
    np.testing.assert_allclose(inv3x3(m), np.linalg.inv(m), rtol=1e-9, atol=1e-12)


# ----------------------------------------------------------------------
# elastic stress
# ----------------------------------------------------------------------


def _random_gradients(rng, n=6, amp=0.08):
    return np.eye(3) + amp * rng.normal(size=(n, 3, 3))


def test_elastic_stress_vanishes_at_identity():
    s = elastic_stress(Material.default_tissue(), np.eye(3))
    np.testing.assert_allclose(s, np.zeros((3, 3)), atol=1e-15)


def test_elastic_stress_is_symmetric():
    rng = np.random.default_rng(2)
    s = elastic_stress(Material.default_tissue(), _random_gradients(rng))
    np.testing.assert_allclose(s, np.swapaxes(s, -1, -2), atol=1e-12)


def test_elastic_stress_is_energy_gradient():
    """First PK stress P = F S must equal dW/dF by central differences."""
    m = Material.default_tissue()
    rng = np.random.default_rng(3)
    F = _random_gradients(rng, n=1)[0]
    S = elastic_stress(m, F)
    P = F @ S
    eps = 1e-6
    fd = np.zeros((3, 3))
    for i in range(3):
        for j in range(3):
            fp, fmn = F.copy(), F.copy()
            fp[i, j] += eps
            fmn[i, j] -= eps
            fd[i, j] = (
                float(strain_energy_density(m, fp)) - float(strain_energy_density(m, fmn))
            ) / (2 * eps)
    np.testing.assert_allclose(P, fd, rtol=1e-5, atol=1e-10)


def test_elastic_stress_rejects_inversion():
    F = np.eye(3)
    F[0, 0] = -0.5
    with pytest.raises(ElementInversionError):
        elastic_stress(Material.default_tissue(), F)
    with pytest.raises(MaterialError):
        elastic_stress(Material.default_tissue(), np.zeros((3, 4)))


# ----------------------------------------------------------------------
# viscoelastic update
# ----------------------------------------------------------------------


def test_qlv_rejects_nonpositive_dt():
    m = Material.default_tissue()
    state = QLVState.zeros(m, ())
    with pytest.raises(MaterialError):
        qlv_update(state, m, np.zeros((3, 3)), 0.0)


def test_qlv_instantaneous_response_approaches_elastic():
    """As dt -> 0 the first-step stress tends to the full elastic stress."""
    m = Material.default_tissue()
    s_e = np.diag([1.0, -0.5, 0.25])
    prev_err = None
    for dt in (1.0, 0.1, 0.01):
        state = QLVState.zeros(m, ())
        total, _ = qlv_update(state, m, s_e, dt)
        err = np.abs(total - s_e).max()
        if prev_err is not None:
            assert err < prev_err
        prev_err = err
    assert prev_err < 1e-3


def test_qlv_matches_hereditary_integral_oracle():
    """Recursive convolution against direct O(T^2) quadrature."""
    m = Material.default_tissue(tau_scale=0.01)
    rng = np.random.default_rng(4)
    dt = 0.005
    n = 200
    times = dt * np.arange(n)
    # smooth random elastic stress history starting from zero
    coeffs = rng.normal(size=(4, 3, 3))
    coeffs = 0.5 * (coeffs + np.swapaxes(coeffs, -1, -2))
    s_hist = np.zeros((n, 3, 3))
    for k, c in enumerate(coeffs):
        s_hist += np.sin((k + 1) * times * 2.0)[:, None, None] * c
    reference = hereditary_stress_reference(m, times, s_hist)

    state = QLVState.zeros(m, ())
    got = np.zeros_like(s_hist)
    got[0] = s_hist[0]  # zero history, zero stress
    for i in range(1, n):
        got[i], state = qlv_update(state, m, s_hist[i], dt)
    scale = np.abs(reference).max()
    assert np.abs(got[1:] - reference[1:]).max() / scale < 2e-3


def test_held_stress_follows_relaxation_curve():
    """Step load held for several relaxation times tracks G(t) closely."""
    m = Material.default_tissue(tau_scale=0.01)  # tau = {3.3, 0.11} s
    tau_min = float(m.prony_tau.min())
    dt = tau_min / 20.0
    n = int(round(12.0 / dt))  # past 3x the longest time constant
    s_e = np.diag([1.0, 1.0, -2.0])
    state = QLVState.zeros(m, ())
    ratios = np.zeros(n)
    for i in range(n):
        total, state = qlv_update(state, m, s_e, dt)
        ratios[i] = total[0, 0] / s_e[0, 0]
    t = dt * (1 + np.arange(n))
    expected = relaxation_modulus(m, t)
    rms = float(np.sqrt(np.mean((ratios - expected) ** 2)))
    assert rms < 0.02


def test_qlv_batched_state_shapes():
    m = Material.default_tissue()
    state = QLVState.zeros(m, (5, 2))
    s_e = np.zeros((5, 2, 3, 3))
    total, new_state = qlv_update(state, m, s_e, 0.1)
    assert total.shape == (5, 2, 3, 3)
    assert new_state.h.shape == (len(m.prony), 5, 2, 3, 3)

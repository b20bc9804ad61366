"""Pointwise stress laws: plane-strain linear elasticity and Neo-Hookean.

Both laws map a displacement gradient and a local log-modulus m to the Cauchy
stress; the modulus is E = exp(m) so stress scales linearly with exp(m).

The component-wise functions accept either plain float64 arrays (broadcast
over elements/samples) or autodiff ``Var`` handles, so the identical code
path serves the forward FEM oracle and the tape-recorded inference engine.
"""

from __future__ import annotations

import numpy as np

from .autodiff import exp, value_of

LINEAR = "linear"
NEOHOOKEAN = "neohookean"


class NonInvertibleDeformationError(ValueError):
    """det(I + grad_u) <= 0: the deformation is not invertible."""


def lame_parameters(m, nu):
    """Plane-strain Lame parameters (mu, lam) from log-modulus m."""
    E = exp(m)
    mu = E / (2.0 * (1.0 + nu))
    lam = E * nu / ((1.0 + nu) * (1.0 - 2.0 * nu))
    return mu, lam


def neohookean_parameters(m, nu):
    """Constitutive scalars (C, D) of the Neo-Hookean law from log-modulus m."""
    E = exp(m)
    C = E / (4.0 * (1.0 + nu))
    D = E * nu / (2.0 * (1.0 + nu) * (1.0 - nu))
    return C, D


def stress_linear_components(g11, g12, g21, g22, m, nu):
    """Linear-elastic stress components from displacement-gradient components.

    Returns (s11, s22, s12); the stress is symmetric so s21 = s12.
    """
    mu, lam = lame_parameters(m, nu)
    tr = g11 + g22
    s11 = lam * tr + 2.0 * mu * g11
    s22 = lam * tr + 2.0 * mu * g22
    s12 = mu * (g12 + g21)
    return s11, s22, s12


def stress_neohookean_components(g11, g12, g21, g22, m, nu):
    """Neo-Hookean stress 2C/J (F F^T - I) + 2D (J - 1) I with F = I + grad_u.

    Raises NonInvertibleDeformationError when any det(F) <= 0 (checked on the
    current values, so it also fires while recording on a tape).
    """
    C, D = neohookean_parameters(m, nu)
    f11 = 1.0 + g11
    f22 = 1.0 + g22
    J = f11 * f22 - g12 * g21
    if np.any(value_of(J) <= 0.0):
        raise NonInvertibleDeformationError("det(I + grad_u) <= 0")
    # B = F F^T
    b11 = f11 * f11 + g12 * g12
    b22 = g21 * g21 + f22 * f22
    b12 = f11 * g21 + g12 * f22
    twoC_J = 2.0 * C / J
    p = 2.0 * D * (J - 1.0)
    s11 = twoC_J * (b11 - 1.0) + p
    s22 = twoC_J * (b22 - 1.0) + p
    s12 = twoC_J * b12
    return s11, s22, s12


_COMPONENT_LAWS = {
    LINEAR: stress_linear_components,
    NEOHOOKEAN: stress_neohookean_components,
}


def stress_components(kind, g11, g12, g21, g22, m, nu):
    return _COMPONENT_LAWS[kind](g11, g12, g21, g22, m, nu)


def _pointwise(fn, grad_u, m, nu):
    grad_u = np.asarray(grad_u, dtype=np.float64)
    if grad_u.shape != (2, 2):
        raise ValueError("grad_u must be a 2x2 tensor")
    if not (np.all(np.isfinite(grad_u)) and np.isfinite(m)):
        raise ValueError("non-finite input to stress law")
    s11, s22, s12 = fn(grad_u[0, 0], grad_u[0, 1], grad_u[1, 0], grad_u[1, 1],
                       float(m), float(nu))
    return np.array([[s11, s12], [s12, s22]], dtype=np.float64)


def stress_linear(grad_u, m, nu):
    """Plane-strain linear-elastic Cauchy stress for one point (2x2 in, 2x2 out)."""
    return _pointwise(stress_linear_components, grad_u, m, nu)


def stress_neohookean(grad_u, m, nu):
    """Neo-Hookean Cauchy stress for one point (2x2 in, 2x2 out)."""
    return _pointwise(stress_neohookean_components, grad_u, m, nu)


def equivalent_linear_moduli(m, nu):
    """Small-strain moduli (mu', lam') = (2C, 2D) of the Neo-Hookean law.

    At strain e the Neo-Hookean stress equals the linear law with these
    moduli up to O(e^2).
    """
    C, D = neohookean_parameters(m, nu)
    return 2.0 * C, 2.0 * D

"""Surface kinetics of ozone on the dyed catalyst bed.

The concentrated ("beta") model adsorbs O3 on dye sites at rate k1 and
decomposes the adsorbate at rate k2; desorption is neglected, so the
steady coverage has a closed form. The dilute ("alpha") model uses a
homogeneous first-order sink with an apparent constant k_app.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .properties import M_O3


@dataclass(frozen=True)
class KineticsParams:
    k1: float = 100.0            # 1/s, adsorption
    k2: float = 10.0             # 1/s, decomposition
    k_app: float = 256.15        # 1/s, alpha-model apparent constant
    gamma_dye: float = 0.03      # mol/m2 of geometric CL area (3 umol/cm2)
    c_o3_activity: float = 1.0   # activity-coefficient ratio, kept at 1

    def __post_init__(self):
        if self.k1 < 0 or self.k2 < 0 or self.k_app < 0:
            raise ValidationError("rate constants must be nonnegative")
        if self.gamma_dye <= 0:
            raise ValidationError("gamma_dye must be positive")


def specific_surface_area(epsilon_cl, r_p):
    """Bed surface area per unit volume, A_v = 3*eps/r_p [1/m]."""
    if r_p <= 0:
        raise ValidationError("r_p must be positive")
    if epsilon_cl < 0:
        raise ValidationError("epsilon_cl must be nonnegative")
    return 3.0 * epsilon_cl / r_p


def site_concentration(gamma_dye, t_cl, a_v):
    """Adsorption-site surface concentration Gamma* = Gamma_dye/(t_CL * A_v) [mol/m2]."""
    if gamma_dye <= 0 or t_cl <= 0 or a_v <= 0:
        raise ValidationError("gamma_dye, t_cl and a_v must be positive")
    return gamma_dye / (t_cl * a_v)


def coverage_steady_state(k1, k2, chi_o3, activity=1.0):
    """Steady surface coverage theta = k1*chi / (k1*chi + k2).

    Balances adsorption k1*chi*(1-theta) against decomposition k2*theta
    (desorption neglected, unit activity by default). Accepts arrays in
    ``chi_o3``. The degenerate k1 = k2 = 0 case returns zero coverage and
    emits a warning instead of failing.
    """
    chi = np.asarray(chi_o3, dtype=float)
    if k1 < 0 or k2 < 0:
        raise ValidationError("rate constants must be nonnegative")
    if k1 == 0.0 and k2 == 0.0:
        if np.any(chi > 0):
            warnings.warn("degenerate kinetics k1 = k2 = 0: coverage set to 0",
                          RuntimeWarning, stacklevel=2)
        theta = np.zeros_like(chi)
        return float(theta) if np.ndim(chi_o3) == 0 else theta
    num = k1 * activity * chi
    theta = num / (num + k2)
    return float(theta) if np.ndim(chi_o3) == 0 else theta


def beta_sink(theta, chi_o3, a_v, gamma_s, k1, m_o3=M_O3, activity=1.0):
    """Volumetric O3 mass sink on CL cells [kg/(m3 s)], negative.

    R = -M_O3 * A_v * Gamma* * k1 * chi * (1 - theta). At the steady-state
    coverage this equals -M_O3 * A_v * Gamma* * k2 * theta.
    """
    theta = np.asarray(theta, dtype=float)
    chi = np.asarray(chi_o3, dtype=float)
    r = -m_o3 * a_v * gamma_s * k1 * activity * chi * (1.0 - theta)
    return float(r) if np.ndim(r) == 0 else r


def decomposition_rate_density(theta, a_v, gamma_s, k2):
    """Volume-averaged decomposition rate A_v * Gamma* * k2 * theta [mol/(m3 s)]."""
    theta = np.asarray(theta, dtype=float)
    r = a_v * gamma_s * k2 * theta
    return float(r) if np.ndim(r) == 0 else r


def alpha_sink(conc_o3, k_app):
    """Homogeneous first-order molar sink R = -k_app * C [mol/(m3 s)] on CL cells."""
    c = np.asarray(conc_o3, dtype=float)
    r = -k_app * c
    return float(r) if np.ndim(r) == 0 else r

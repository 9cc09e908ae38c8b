"""Fluid and transport properties of the O3/air working gas.

Viscosity, ideal-gas densities, porous-media corrections, Knudsen
diffusivity and the schemes coupling it to molecular diffusion. All
functions are pure and accept scalars or numpy arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError

R_GAS = 8.314462618          # J/(mol K)
M_AIR = 28.96546e-3          # kg/mol, dry air
M_O3 = 47.9982e-3            # kg/mol, ozone
T_STD = 273.15               # K
P_STD = 101325.0             # Pa (1 atm)

# quartic fit for dry-air dynamic viscosity, T in K, result in Pa s
_MU_COEFFS = (-8.38278e-7, 8.35717342e-8, -7.69429583e-11,
              4.6437266e-14, -1.06585607e-17)

COUPLING_SCHEMES = (
    "correct_then_couple",    # default: porous correction first, then Knudsen in series
    "couple_then_correct",
    "free_only",
    "no_knudsen",
    "no_porous_correction",
)

CL_TORTUOSITY_MODELS = ("paper_sqrt", "mq_standard", "explicit")


def air_viscosity(T, t_min=200.0, t_max=1000.0):
    """Dynamic viscosity of dry air [Pa s] from a quartic fit in T [K].

    Raises ValidationError outside the fit window [t_min, t_max].
    """
    T = np.asarray(T, dtype=float)
    if np.any(T < t_min) or np.any(T > t_max):
        raise ValidationError(f"temperature outside viscosity fit window [{t_min}, {t_max}] K")
    c0, c1, c2, c3, c4 = _MU_COEFFS
    mu = c0 + c1 * T + c2 * T**2 + c3 * T**3 + c4 * T**4
    return float(mu) if np.ndim(mu) == 0 else mu


def mixture_density(P_abs, T, omega_o3, m_air=M_AIR, m_o3=M_O3):
    """Ideal-gas density [kg/m3] of the binary O3/air mixture.

    ``omega_o3`` is the O3 mass fraction; the mixture molar mass follows
    1/M = w/M_O3 + (1-w)/M_air.
    """
    P_abs = np.asarray(P_abs, dtype=float)
    w = np.asarray(omega_o3, dtype=float)
    m_mix = 1.0 / (w / m_o3 + (1.0 - w) / m_air)
    rho = P_abs * m_mix / (R_GAS * np.asarray(T, dtype=float))
    return float(rho) if np.ndim(rho) == 0 else rho


def mixture_molar_mass(omega_o3, m_air=M_AIR, m_o3=M_O3):
    """Molar mass [kg/mol] of the mixture at O3 mass fraction ``omega_o3``."""
    w = np.asarray(omega_o3, dtype=float)
    m = 1.0 / (w / m_o3 + (1.0 - w) / m_air)
    return float(m) if np.ndim(m) == 0 else m


def mass_to_mole_fraction(omega_o3, m_air=M_AIR, m_o3=M_O3):
    """O3 mole fraction from its mass fraction (two-species closure)."""
    w = np.asarray(omega_o3, dtype=float)
    chi = (w / m_o3) / (w / m_o3 + (1.0 - w) / m_air)
    return float(chi) if np.ndim(chi) == 0 else chi


def mole_to_mass_fraction(chi_o3, m_air=M_AIR, m_o3=M_O3):
    """O3 mass fraction from its mole fraction."""
    x = np.asarray(chi_o3, dtype=float)
    w = x * m_o3 / (x * m_o3 + (1.0 - x) * m_air)
    return float(w) if np.ndim(w) == 0 else w


def standard_density():
    """Density of dry air at 273.15 K and 1 atm [kg/m3]."""
    return P_STD * M_AIR / (R_GAS * T_STD)


def porous_correction(epsilon, tau):
    """Porous-media diffusion correction f = epsilon/tau."""
    if not 0.0 < epsilon <= 1.0:
        raise ValidationError("epsilon must lie in (0, 1]")
    if tau <= 0.0:
        raise ValidationError("tau must be positive")
    return epsilon / tau


def cl_tortuosity(model, epsilon, tau_explicit=None):
    """Catalyst-layer tortuosity under the selected closure.

    ``paper_sqrt`` uses tau = sqrt(epsilon) (the value < 1 is kept verbatim);
    ``mq_standard`` uses tau = epsilon**(-1/3); ``explicit`` passes
    ``tau_explicit`` through.
    """
    if not 0.0 < epsilon <= 1.0:
        raise ValidationError("epsilon must lie in (0, 1]")
    if model == "paper_sqrt":
        return math.sqrt(epsilon)
    if model == "mq_standard":
        return epsilon ** (-1.0 / 3.0)
    if model == "explicit":
        if tau_explicit is None or tau_explicit <= 0.0:
            raise ValidationError("explicit tortuosity model needs a positive tau")
        return float(tau_explicit)
    raise ValidationError(f"unknown CL tortuosity model {model!r}")


def knudsen_diffusivity(d_p, T, M):
    """Knudsen diffusivity D_K = (d_p/3) * sqrt(8RT/(pi M)) [m2/s]."""
    if d_p <= 0 or T <= 0 or M <= 0:
        raise ValidationError("d_p, T and M must all be positive")
    return (d_p / 3.0) * math.sqrt(8.0 * R_GAS * T / (math.pi * M))


def pore_diameter(epsilon, r_p, explicit=None):
    """Mean pore diameter of a particle bed [m].

    Default model is the hydraulic diameter of a bed of spheres,
    d_p = (2/3) * eps/(1-eps) * 2*r_p. ``explicit`` overrides the model.
    """
    if explicit is not None:
        if explicit <= 0:
            raise ValidationError("explicit pore diameter must be positive")
        return float(explicit)
    if not 0.0 < epsilon < 1.0:
        raise ValidationError("epsilon must lie in (0, 1) for the bed model")
    if r_p <= 0:
        raise ValidationError("r_p must be positive")
    return (2.0 / 3.0) * (epsilon / (1.0 - epsilon)) * (2.0 * r_p)


def coupled_diffusivity(d_free, f_pm, d_k, scheme="correct_then_couple"):
    """Effective diffusivity combining porous correction and Knudsen regime.

    ``d_k`` may be ``inf`` to switch the Knudsen resistance off. Schemes:

    - correct_then_couple: [1/(f*D) + 1/D_K]^-1  (default)
    - couple_then_correct: f * [1/D + 1/D_K]^-1
    - free_only:           D
    - no_knudsen:          f * D
    - no_porous_correction: [1/D + 1/D_K]^-1
    """
    if d_free <= 0 or (d_k <= 0 and not math.isinf(d_k)):
        raise ValidationError("diffusivities must be positive")
    if not 0.0 < f_pm <= 1.0:
        raise ValidationError("f_pm must lie in (0, 1]")
    inv_k = 0.0 if math.isinf(d_k) else 1.0 / d_k
    if scheme == "correct_then_couple":
        return 1.0 / (1.0 / (f_pm * d_free) + inv_k)
    if scheme == "couple_then_correct":
        return f_pm / (1.0 / d_free + inv_k)
    if scheme == "free_only":
        return d_free
    if scheme == "no_knudsen":
        return f_pm * d_free
    if scheme == "no_porous_correction":
        return 1.0 / (1.0 / d_free + inv_k)
    raise ValidationError(f"unknown coupling scheme {scheme!r}")


@dataclass(frozen=True)
class MaterialParams:
    """Material, transport and thermodynamic parameters of the device."""

    epsilon_mps: float = 0.801
    kappa_mps: float = 9.18e-12      # m2
    tau_mps: float = 1.199
    epsilon_cl: float = 0.497
    kappa_cl: float = 8.82e-11       # m2
    cl_tortuosity_model: str = "paper_sqrt"
    cl_tau_explicit: float | None = None
    d_free: float = 1.6e-5           # m2/s, O3 in the carrier gas
    r_p: float = 6.5e-6              # m, bed particle radius
    pore_diameter_explicit: float | None = None
    m_air: float = M_AIR
    m_o3: float = M_O3
    temperature: float = 298.15      # K; operating value, configurable
    p_ref: float = 1.027e5           # Pa, absolute reference for relative pressures
    coupling_scheme: str = "correct_then_couple"
    pressure_diffusion: bool = True  # keep the grad-P driving force in the species flux

    def __post_init__(self):
        for name in ("epsilon_mps", "epsilon_cl"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ValidationError(f"{name} must lie in (0, 1], got {v}")
        for name in ("kappa_mps", "kappa_cl", "tau_mps", "d_free", "r_p",
                     "m_air", "m_o3", "temperature", "p_ref"):
            v = getattr(self, name)
            if v <= 0:
                raise ValidationError(f"{name} must be positive, got {v}")
        if self.coupling_scheme not in COUPLING_SCHEMES:
            raise ValidationError(f"unknown coupling scheme {self.coupling_scheme!r}")
        if self.cl_tortuosity_model not in CL_TORTUOSITY_MODELS:
            raise ValidationError(f"unknown CL tortuosity model {self.cl_tortuosity_model!r}")

    @property
    def viscosity(self):
        return air_viscosity(self.temperature)

    @property
    def tau_cl(self):
        return cl_tortuosity(self.cl_tortuosity_model, self.epsilon_cl, self.cl_tau_explicit)

    @property
    def f_mps(self):
        return porous_correction(self.epsilon_mps, self.tau_mps)

    @property
    def f_cl(self):
        return porous_correction(self.epsilon_cl, self.tau_cl)

    @property
    def knudsen_cl(self):
        d_p = pore_diameter(self.epsilon_cl, self.r_p, self.pore_diameter_explicit)
        return knudsen_diffusivity(d_p, self.temperature, self.m_o3)

    def diffusivity_channel(self):
        return self.d_free

    def diffusivity_mps(self):
        # no pore-size information for the fibrous substrate: Knudsen off there
        return coupled_diffusivity(self.d_free, self.f_mps, math.inf, self.coupling_scheme)

    def diffusivity_cl(self):
        return coupled_diffusivity(self.d_free, self.f_cl, self.knudsen_cl, self.coupling_scheme)

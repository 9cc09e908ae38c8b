"""Steady species transport on a converged flow field.

Two formulations share one finite-volume core (upwind convection,
harmonic-mean central diffusion, implicit linearized sink):

- ``beta``: O3 mass fraction with the binary Maxwell-Stefan flux. For two
  species the mole-fraction driving force reduces exactly to a Fickian
  term in the mass fraction (J = -rho D grad(omega)); the pressure-
  diffusion part is kept as an explicit drift handled by Picard passes.
  The surface-coverage sink enters with the coverage field frozen by the
  caller (the segregated outer loop refreshes it).
- ``alpha``: dilute molar concentration with porous-corrected Fick
  diffusion and a homogeneous first-order sink, advected by volume
  fluxes.

Both discretize the conservative flux form, so the discrete species
balance (inflow - outflow = consumption) holds to linear-solver
precision.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse.linalg as spla

from .errors import DivergenceError, ValidationError
from .flow import FlowField, get_ops
from .geometry import CHANNEL, CL, MPS, Mesh
from .kinetics import KineticsParams, specific_surface_area, site_concentration
from .properties import MaterialParams, mass_to_mole_fraction, mole_to_mass_fraction

_DIRECT_LIMIT = 150_000   # above this, switch to ILU-preconditioned BiCGStab


@dataclass
class SpeciesState:
    formulation: str
    omega: np.ndarray            # mass fraction (beta) on fluid cells
    conc: np.ndarray             # molar concentration (alpha) or rho*omega/M (beta)
    chi: np.ndarray              # mole fraction (beta: from omega; alpha: C/C*)
    theta: np.ndarray            # coverage, zero off the CL
    sink_mass: np.ndarray        # R_O3 [kg/(m3 s)] (beta) on fluid cells
    r_dec: np.ndarray            # decomposition rate density [mol/(m3 s)] on fluid cells
    conv_flux: tuple             # per-axis face O3 molar fluxes [mol/s]
    diff_flux: tuple
    inlet_molar_flux: float      # mol/s in
    outlet_molar_flux: float     # mol/s out
    consumption_molar: float     # mol/s removed by the sink, scheme-consistent
    clip_violations: int
    iterations: int
    converged: bool
    chi_in: float


def binary_ms_flux(rho, omega, grad_chi, grad_p, p_abs, d_coupled,
                   m_air, m_o3):
    """Binary Maxwell-Stefan mass flux of O3 [kg/(m2 s)], elementwise.

    J = -rho (M_O3 M_air / M_mix^2) D [grad(chi) + (chi - omega) grad(P_A)/P_A];
    the air flux is the negative of the returned value.
    """
    rho = np.asarray(rho, dtype=float)
    w = np.asarray(omega, dtype=float)
    chi = mass_to_mole_fraction(w, m_air, m_o3)
    m_mix = 1.0 / (w / m_o3 + (1.0 - w) / m_air)
    pref = rho * (m_o3 * m_air / m_mix**2) * np.asarray(d_coupled, dtype=float)
    force = np.asarray(grad_chi, dtype=float) + \
        (chi - w) * np.asarray(grad_p, dtype=float) / np.asarray(p_abs, dtype=float)
    return -pref * force


def _region_diffusivity(ops, materials: MaterialParams, formulation: str):
    """Per-fluid-cell effective diffusivity for the requested formulation."""
    d = np.empty(ops.n_fluid)
    reg = ops.region
    if formulation == "beta":
        d[reg == CHANNEL] = materials.diffusivity_channel()
        d[reg == MPS] = materials.diffusivity_mps()
        d[reg == CL] = materials.diffusivity_cl()
    else:
        d[reg == CHANNEL] = materials.d_free
        d[reg == MPS] = materials.f_mps * materials.d_free
        d[reg == CL] = materials.f_cl * materials.d_free
    return d


def _harmonic_face(ops, per_cell):
    """Distance-weighted harmonic mean of a cell property on interior faces."""
    out = []
    for fs in ops.faces:
        w = fs.w_own
        res = w * fs.dist / per_cell[fs.own] + (1.0 - w) * fs.dist / per_cell[fs.nbr]
        out.append(fs.dist / res)
    return out


def _arith_face(ops, per_cell):
    out = []
    for fs in ops.faces:
        w = fs.w_own
        out.append(w * per_cell[fs.own] + (1.0 - w) * per_cell[fs.nbr])
    return out


def _solve_linear(a_csr, rhs, x0=None):
    n = a_csr.shape[0]
    if n <= _DIRECT_LIMIT:
        return spla.spsolve(a_csr.tocsc(), rhs)
    ilu = spla.spilu(a_csr.tocsc(), drop_tol=1e-5, fill_factor=12)
    prec = spla.LinearOperator((n, n), ilu.solve)
    x, info = spla.bicgstab(a_csr, rhs, x0=x0, rtol=1e-12, atol=1e-300,
                            maxiter=800, M=prec)
    if info != 0:
        x = spla.spsolve(a_csr.tocsc(), rhs)
    return x


class _TransportSystem:
    """Shared FV assembly for a scalar advected by face fluxes."""

    def __init__(self, mesh, flux_faces, inlet_flux, outlet_flux, gamma_faces,
                 gamma_cells, inlet_value):
        self.ops = get_ops(mesh)
        ops = self.ops
        self.flux = flux_faces                     # per-axis signed face fluxes
        self.inlet_flux = inlet_flux               # signed +y at inlet port faces
        self.outlet_flux = outlet_flux
        self.gamma_f = gamma_faces                 # per-axis face diffusion conductance * area/dist
        self.inlet_value = inlet_value

        n = ops.n_fluid
        diag = np.zeros(n)
        rhs = np.zeros(n)
        offdiags = []
        for fs, flux, gam in zip(ops.faces, self.flux, self.gamma_f):
            cond = gam * fs.area / fs.dist
            up = np.maximum(flux, 0.0)      # low-to-high flow: upwind at owner
            dn = np.maximum(-flux, 0.0)
            # row = own: outflow up goes in diag, inflow dn couples to nbr
            a_own_nbr = cond + dn
            a_nbr_own = cond + up
            diag += np.bincount(fs.own, weights=cond + up, minlength=n)
            diag += np.bincount(fs.nbr, weights=cond + dn, minlength=n)
            offdiags.append((-a_own_nbr, -a_nbr_own))

        # inlet port: Dirichlet value at the face (half-cell diffusion), upwind
        inl = ops.inlet
        into = inl.sign * inlet_flux               # > 0 when entering the domain
        gam_in = gamma_cells[inl.cells] * inl.area / inl.half_dist
        diag += np.bincount(inl.cells, weights=gam_in + np.maximum(-into, 0.0),
                            minlength=n)
        rhs += np.bincount(inl.cells, weights=(gam_in + np.maximum(into, 0.0)) * inlet_value,
                           minlength=n)
        self.gamma_f_inlet = gam_in

        # outlet port: advective only (zero diffusive flux), zero-gradient value
        out = ops.outlet
        outof = -out.sign * outlet_flux            # > 0 when leaving the domain
        diag += np.bincount(out.cells, weights=outof, minlength=n)

        self.diag0 = diag
        self.rhs0 = rhs
        self.offdiags = offdiags
        self._assemble, _ = ops.csr_template()

    def solve(self, sink_coeff, extra_rhs, x0=None):
        """Solve with implicit sink diag += sink_coeff*V and extra RHS."""
        ops = self.ops
        diag = self.diag0 + sink_coeff * ops.vol
        rhs = self.rhs0 + extra_rhs
        a = self._assemble(diag, self.offdiags)
        return _solve_linear(a, rhs, x0=x0)

    def face_fluxes(self, phi, drift_flux=None):
        """Scheme-consistent convective and diffusive face fluxes of phi."""
        ops = self.ops
        conv = []
        diff = []
        for fs, flux, gam, ax in zip(ops.faces, self.flux, self.gamma_f, range(3)):
            up = np.where(flux >= 0.0, phi[fs.own], phi[fs.nbr])
            conv.append(flux * up)
            d = -gam * fs.area / fs.dist * (phi[fs.nbr] - phi[fs.own])
            if drift_flux is not None:
                d = d + drift_flux[ax]
            diff.append(d)
        return conv, diff

    def port_fluxes(self, phi):
        """(inlet_in, outlet_out) advective+diffusive transport of phi [units of flux*phi]."""
        ops = self.ops
        inl = ops.inlet
        into = inl.sign * self.inlet_flux
        gam_in = self.gamma_f_inlet
        adv_in = np.where(into >= 0.0, into * self.inlet_value, into * phi[inl.cells])
        diff_in = gam_in * (self.inlet_value - phi[inl.cells])
        out = ops.outlet
        outof = -out.sign * self.outlet_flux
        adv_out = outof * phi[out.cells]
        return float(np.sum(adv_in + diff_in)), float(np.sum(adv_out))


@dataclass(frozen=True)
class SpeciesOptions:
    picard_tol: float = 1e-10
    max_picard: int = 12
    clip_tolerance: float = 1e-10


def solve_species_beta(mesh: Mesh, flow: FlowField, materials: MaterialParams,
                       kinetics: KineticsParams, theta=None, chi_in=1200e-6,
                       options: SpeciesOptions | None = None) -> SpeciesState:
    """Concentrated-species (mass fraction) transport with the coverage sink.

    ``theta`` is the frozen coverage field per fluid cell (zero off the
    CL); when omitted it is evaluated from the uniform inlet mole
    fraction. Returns the converged SpeciesState; raises DivergenceError
    if the Picard passes fail to settle.
    """
    from .kinetics import coverage_steady_state

    opts = options or SpeciesOptions()
    ops = get_ops(mesh)
    n = ops.n_fluid
    m1 = materials.m_o3
    m2 = materials.m_air

    omega_in = mole_to_mass_fraction(chi_in, m2, m1)
    a_v = specific_surface_area(materials.epsilon_cl, materials.r_p)
    gamma_s = site_concentration(kinetics.gamma_dye, mesh.spec.cl_thickness, a_v)
    cl_mask = ops.region_mask(CL)

    if theta is None:
        theta = np.where(cl_mask, coverage_steady_state(kinetics.k1, kinetics.k2, chi_in), 0.0)
    theta = np.asarray(theta, dtype=float)

    d_cell = _region_diffusivity(ops, materials, "beta")
    rho = flow.rho
    rho_d = rho * d_cell
    gamma_faces = _harmonic_face(ops, rho_d)
    system = _TransportSystem(mesh, (flow.flux_x, flow.flux_y, flow.flux_z),
                              flow.inlet_flux, flow.outlet_flux,
                              gamma_faces, rho_d, omega_in)

    # pressure-diffusion drift coefficients on faces (explicit)
    p_abs = flow.p + materials.p_ref
    drift_face_coef = None
    if materials.pressure_diffusion:
        d_face = _harmonic_face(ops, d_cell)
        rho_face = _arith_face(ops, rho)
        p_face = _arith_face(ops, p_abs)
        grad_p = []
        for fs in ops.faces:
            grad_p.append((p_abs[fs.nbr] - p_abs[fs.own]) / fs.dist)
        drift_face_coef = (d_face, rho_face, p_face, grad_p)

    omega = np.full(n, omega_in)
    clip_total = 0
    it = 0
    for it in range(1, opts.max_picard + 1):
        chi = mass_to_mole_fraction(omega, m2, m1)
        # implicit sink: R = -coef * omega with coef from the current chi/omega ratio
        ratio = np.where(omega > 0, chi / np.maximum(omega, 1e-300), m2 / m1)
        sink_coef = np.where(cl_mask,
                             m1 * a_v * gamma_s * kinetics.k1 * kinetics.c_o3_activity
                             * (1.0 - theta) * ratio,
                             0.0)
        extra = np.zeros(n)
        drift = None
        if drift_face_coef is not None:
            d_face, rho_face, p_face, grad_p = drift_face_coef
            m_mix = 1.0 / (omega / m1 + (1.0 - omega) / m2)
            coef_cell = rho * (m1 * m2 / m_mix**2) * (chi - omega) / p_abs
            coef_face = _arith_face(ops, coef_cell)
            drift = []
            for ax, fs in enumerate(ops.faces):
                drift.append(-d_face[ax] * coef_face[ax] * grad_p[ax] * fs.area)
            extra -= ops.divergence(*drift)
        new = system.solve(sink_coef, extra, x0=omega)
        clip_total += int(np.count_nonzero(new < -opts.clip_tolerance))
        new = np.clip(new, 0.0, None)
        delta = float(np.max(np.abs(new - omega))) / max(omega_in, 1e-300)
        # consumption as the scheme saw it (implicit coefficient * solution)
        consumed_mass = float(np.sum(sink_coef * new * ops.vol))
        omega = new
        if delta < opts.picard_tol:
            break
    else:
        raise DivergenceError(f"species Picard loop did not converge (last delta {delta:.2e})")

    chi = mass_to_mole_fraction(omega, m2, m1)
    sink = np.where(cl_mask,
                    -m1 * a_v * gamma_s * kinetics.k1 * kinetics.c_o3_activity
                    * chi * (1.0 - theta), 0.0)
    r_dec = np.where(cl_mask, a_v * gamma_s * kinetics.k2 * theta, 0.0)
    conv, diff = system.face_fluxes(omega, drift)
    n_in, n_out = system.port_fluxes(omega)
    conc = rho * omega / m1

    return SpeciesState(
        formulation="beta", omega=omega, conc=conc, chi=chi, theta=theta,
        sink_mass=sink, r_dec=r_dec,
        conv_flux=tuple(c / m1 for c in conv),
        diff_flux=tuple(d / m1 for d in diff),
        inlet_molar_flux=n_in / m1, outlet_molar_flux=n_out / m1,
        consumption_molar=consumed_mass / m1,
        clip_violations=clip_total, iterations=it, converged=True, chi_in=chi_in,
    )


def solve_species_alpha(mesh: Mesh, flow: FlowField, materials: MaterialParams,
                        k_app: float, c_in=1200e-6,
                        options: SpeciesOptions | None = None) -> SpeciesState:
    """Dilute-species transport: volume-flux advection, Fick diffusion, -k_app*C sink."""
    opts = options or SpeciesOptions()
    ops = get_ops(mesh)
    n = ops.n_fluid
    cl_mask = ops.region_mask(CL)

    d_cell = _region_diffusivity(ops, materials, "alpha")
    gamma_faces = _harmonic_face(ops, d_cell)

    # volume fluxes from the mass fluxes and frozen face densities
    rho = flow.rho
    rho_face = _arith_face(ops, rho)
    vol_flux = tuple(f / rf for f, rf in zip((flow.flux_x, flow.flux_y, flow.flux_z), rho_face))
    rho_in = rho[ops.inlet.cells]
    rho_out = rho[ops.outlet.cells]
    inlet_vflux = flow.inlet_flux / rho_in
    outlet_vflux = flow.outlet_flux / rho_out

    system = _TransportSystem(mesh, vol_flux, inlet_vflux, outlet_vflux,
                              gamma_faces, d_cell, c_in)

    sink_coef = np.where(cl_mask, k_app, 0.0)
    conc = system.solve(sink_coef, np.zeros(n))
    clip = int(np.count_nonzero(conc < -opts.clip_tolerance))
    consumed = float(np.sum(sink_coef * np.clip(conc, 0.0, None) * ops.vol))
    conc = np.clip(conc, 0.0, None)

    conv, diff = system.face_fluxes(conc)
    n_in, n_out = system.port_fluxes(conc)
    chi = conc / 1.0       # chi = C / C*, with C* = 1 mol/m3

    return SpeciesState(
        formulation="alpha", omega=np.zeros(n), conc=conc, chi=chi,
        theta=np.zeros(n), sink_mass=np.zeros(n),
        r_dec=np.where(cl_mask, k_app * conc, 0.0),
        conv_flux=conv, diff_flux=diff,
        inlet_molar_flux=n_in, outlet_molar_flux=n_out,
        consumption_molar=consumed,
        clip_violations=clip, iterations=1, converged=True, chi_in=c_in,
    )


def species_balance(state: SpeciesState):
    """|n_in - n_out - consumption| / n_in from the converged state."""
    n_in = state.inlet_molar_flux
    n_out = state.outlet_molar_flux
    return abs(n_in - n_out - state.consumption_molar) / max(abs(n_in), 1e-300)

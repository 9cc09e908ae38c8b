"""Response-variable extraction from converged solutions.

Scalars (reactant drop, apparent and total reaction rates, the K' ratio,
stoichiometries, pressure drops), line profiles and surface maps on the
catalyst-layer top, and the decomposition of the ozone molar flux into
convective and diffusive parts. Everything here is a pure function of
the Solution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields as dc_fields

import numpy as np

from .errors import GeometryError
from .flow import cell_centered_velocity, get_ops
from .geometry import CHANNEL, CL, MPS, Mesh
from .properties import R_GAS


@dataclass
class ResponseRecord:
    formulation: str
    q_ccm: float
    k1: float | None
    k2: float | None
    k_app: float | None
    dchi: float
    rprime_raw: float
    rprime_norm: float
    kprime: float | None          # absent when R' = 0
    r_total: float
    lam: float | None             # absent when R_total = 0
    lam_prime: float
    dp_pa: float
    pin_pa: float                 # absolute inlet pressure
    dp_over_pin: float
    converged: bool
    note: str = ""

    CSV_HEADER = ("formulation,Q_ccm,k1,k2,dchi,Rprime_raw,Rprime_norm,Kprime,"
                  "R_total,lambda,lambda_prime,dP_Pa,Pin_Pa,dP_over_Pin,converged")

    def csv_row(self):
        def fmt(v):
            if v is None:
                return ""
            if isinstance(v, bool):
                return "true" if v else "false"
            if isinstance(v, float):
                return repr(v)
            return str(v)
        # the k1/k2 columns carry the active constants: k_app sits in k1 for alpha
        k1 = self.k_app if self.formulation == "alpha" else self.k1
        k2 = None if self.formulation == "alpha" else self.k2
        cells = [self.formulation, fmt(self.q_ccm), fmt(k1), fmt(k2), fmt(self.dchi),
                 fmt(self.rprime_raw), fmt(self.rprime_norm), fmt(self.kprime),
                 fmt(self.r_total), fmt(self.lam), fmt(self.lam_prime), fmt(self.dp_pa),
                 fmt(self.pin_pa), fmt(self.dp_over_pin), fmt(self.converged)]
        return ",".join(cells)


@dataclass
class ResponseTable:
    records: list
    config: object = None

    def to_csv(self):
        lines = [ResponseRecord.CSV_HEADER]
        lines += [r.csv_row() for r in self.records]
        return "\n".join(lines) + "\n"

    def value(self, variable, predicate=None):
        rows = [r for r in self.records if predicate is None or predicate(r)]
        return [getattr(r, variable) for r in rows]


def failed_record(config, q_ccm, note) -> ResponseRecord:
    kin = config.kinetics
    alpha = config.formulation == "alpha"
    nan = float("nan")
    return ResponseRecord(
        formulation=config.formulation, q_ccm=q_ccm,
        k1=None if alpha else kin.k1, k2=None if alpha else kin.k2,
        k_app=kin.k_app if alpha else None,
        dchi=nan, rprime_raw=nan, rprime_norm=nan, kprime=None, r_total=nan,
        lam=None, lam_prime=nan, dp_pa=nan, pin_pa=nan, dp_over_pin=nan,
        converged=False, note=note)


def _port_area_mean(ops, port, cell_values):
    vals = cell_values[port.cells]
    return float(np.sum(vals * port.area) / np.sum(port.area))


def inlet_concentration(solution):
    """C_in used for normalizations: ideal gas at the inlet for beta,
    the configured dilute value for alpha."""
    cfg = solution.config
    if cfg.formulation == "alpha":
        return cfg.c_in
    ops = get_ops(solution.mesh)
    p_in_abs = _port_area_mean(ops, ops.inlet, solution.flow.p) + cfg.materials.p_ref
    return cfg.chi_in * p_in_abs / (R_GAS * cfg.materials.temperature)


def scalar_responses(solution) -> ResponseRecord:
    mesh = solution.mesh
    ops = get_ops(mesh)
    sp = solution.species
    fl = solution.flow
    cfg = solution.config
    alpha = cfg.formulation == "alpha"

    chi_in = sp.chi_in
    chi_out = _port_area_mean(ops, ops.outlet, sp.chi)
    dchi = chi_in - chi_out

    # apparent rate: decomposition density integrated over the CL top surface
    top = mesh.nz - 1
    cl_top = ops.cell_ijk[:, 2] == top
    r_top = sp.r_dec[cl_top]
    rprime_raw = float(np.sum(r_top) * mesh.dx * mesh.dy)
    c_in = inlet_concentration(solution)
    rprime_norm = rprime_raw / c_in

    r_total = float(np.sum(sp.r_dec * ops.vol))
    kprime = dchi / rprime_norm if rprime_norm != 0.0 else None

    n_dot_in = solution.q_std * c_in
    lam = n_dot_in / r_total if r_total != 0.0 else None
    lam_prime = dchi / chi_in

    p_in = _port_area_mean(ops, ops.inlet, fl.p)
    p_outb = _port_area_mean(ops, ops.outlet, fl.p)
    dp = p_in - p_outb
    pin_abs = p_in + cfg.materials.p_ref

    return ResponseRecord(
        formulation=cfg.formulation, q_ccm=solution.q_ccm,
        k1=None if alpha else cfg.kinetics.k1,
        k2=None if alpha else cfg.kinetics.k2,
        k_app=cfg.kinetics.k_app if alpha else None,
        dchi=dchi, rprime_raw=rprime_raw, rprime_norm=rprime_norm,
        kprime=kprime, r_total=r_total, lam=lam, lam_prime=lam_prime,
        dp_pa=dp, pin_pa=pin_abs, dp_over_pin=dp / pin_abs,
        converged=solution.converged)


# ----------------------------------------------------------------------
# profiles and surfaces

@dataclass
class ProfileData:
    x: np.ndarray                 # CL-top line coordinates
    p_o3: np.ndarray              # partial pressure along the line [Pa]
    r_bar: np.ndarray             # local/mean normalized decomposition rate
    u_x_coords: np.ndarray        # transverse coordinates of the U(x) profile
    u_x: np.ndarray               # speed across the third section, mid-height
    u_z_coords: np.ndarray
    u_z: np.ndarray               # speed along z at the third-section center
    line_y: float                 # physical y of the CL-top line


@dataclass
class SurfaceData:
    x: np.ndarray
    y: np.ndarray
    p_o3: np.ndarray              # (nx, ny)
    r_bar: np.ndarray


def _grid_fields(solution):
    ops = get_ops(solution.mesh)
    sp = solution.species
    fl = solution.flow
    p_abs = fl.p + solution.config.materials.p_ref
    po3 = ops.scatter_to_grid(sp.chi * p_abs)
    v_cl = _cl_volume(solution.mesh)
    r_total = float(np.sum(sp.r_dec * ops.vol))
    if r_total != 0.0:
        rbar = ops.scatter_to_grid(sp.r_dec * v_cl / r_total)
    else:
        rbar = ops.scatter_to_grid(np.zeros_like(sp.r_dec))
    return po3, rbar


def _cl_volume(mesh):
    return mesh.nx * mesh.ny * mesh.dx * mesh.dy * mesh.spec.cl_thickness


def _third_section_center(mesh):
    spec = mesh.spec
    if spec.n_sections < 3:
        raise GeometryError("speed profiles need at least 3 serpentine sections")
    mx, my = mesh.margin_cells
    cw = int(round(spec.channel_width / mesh.dx))
    lw = int(round(spec.land_width / mesh.dx))
    i_center = mx + 2 * (cw + lw) + cw // 2
    j_center = my + int(round(spec.section_length / mesh.dy)) // 2
    return i_center, j_center


def cl_top_line_j(mesh):
    """Cell row of the x-line atop the CL passing over the turn row."""
    spec = mesh.spec
    mx, my = mesh.margin_cells
    seclen = int(round(spec.section_length / mesh.dy))
    return my + seclen - mesh.sigma     # center of the channel-wide turn band


def profiles(solution) -> ProfileData:
    mesh = solution.mesh
    po3, rbar = _grid_fields(solution)
    j_line = cl_top_line_j(mesh)
    if not 0 <= j_line < mesh.ny:
        raise GeometryError("CL-top line falls outside the mesh")
    k_top = mesh.nz - 1
    x = mesh.x_centers
    p_line = po3[:, j_line, k_top].copy()
    r_line = rbar[:, j_line, k_top].copy()

    ui, uj = _third_section_center(mesh)
    k_mid = mesh.k_at_z(0.5 * mesh.spec.channel_depth)
    ux, uy, uz = cell_centered_velocity(mesh, solution.flow)
    speed = np.sqrt(ux**2 + uy**2 + uz**2)
    u_x = speed[:, uj, k_mid].copy()
    u_z = speed[ui, uj, :].copy()

    return ProfileData(x=x, p_o3=p_line, r_bar=r_line,
                       u_x_coords=x, u_x=u_x,
                       u_z_coords=mesh.z_centers.copy(), u_z=u_z,
                       line_y=(j_line + 0.5) * mesh.dy)


def surfaces(solution) -> SurfaceData:
    mesh = solution.mesh
    po3, rbar = _grid_fields(solution)
    k_top = mesh.nz - 1
    return SurfaceData(x=mesh.x_centers, y=mesh.y_centers,
                       p_o3=po3[:, :, k_top].copy(),
                       r_bar=rbar[:, :, k_top].copy())


# ----------------------------------------------------------------------
# molar flux decomposition

@dataclass
class FluxReport:
    conv_ch_mps: float            # z molar flow through the channel-substrate interface [mol/s]
    diff_ch_mps: float
    conv_mps_cl: float
    diff_mps_cl: float
    conv_mag_mps: float           # magnitude averages [mol/(m2 s)]
    diff_mag_mps: float
    conv_mag_cl: float
    diff_mag_cl: float

    def csv(self):
        names = [f.name for f in dc_fields(self)]
        head = ",".join(names)
        vals = ",".join(repr(getattr(self, n)) for n in names)
        return head + "\n" + vals + "\n"


def flux_decomposition(solution) -> FluxReport:
    mesh = solution.mesh
    ops = get_ops(mesh)
    sp = solution.species

    fz = ops.faces[2]
    reg = ops.region
    ch_mps = (reg[fz.own] == CHANNEL) & (reg[fz.nbr] == MPS)
    mps_cl = (reg[fz.own] == MPS) & (reg[fz.nbr] == CL)
    conv_z = sp.conv_flux[2]
    diff_z = sp.diff_flux[2]

    def mag_avg(mask_code):
        sel = reg == mask_code
        n = ops.n_fluid
        conv_mag = np.zeros((n, 3))
        diff_mag = np.zeros((n, 3))
        for ax, fs in enumerate(ops.faces):
            dens_c = sp.conv_flux[ax] / fs.area
            dens_d = sp.diff_flux[ax] / fs.area
            for arr, dens in ((conv_mag, dens_c), (diff_mag, dens_d)):
                s = np.bincount(fs.own, weights=dens, minlength=n)
                s += np.bincount(fs.nbr, weights=dens, minlength=n)
                arr[:, ax] = 0.5 * s
        cmag = np.linalg.norm(conv_mag[sel], axis=1)
        dmag = np.linalg.norm(diff_mag[sel], axis=1)
        return float(np.mean(cmag)), float(np.mean(dmag))

    conv_mag_mps, diff_mag_mps = mag_avg(MPS)
    conv_mag_cl, diff_mag_cl = mag_avg(CL)

    return FluxReport(
        conv_ch_mps=float(np.sum(conv_z[ch_mps])),
        diff_ch_mps=float(np.sum(diff_z[ch_mps])),
        conv_mps_cl=float(np.sum(conv_z[mps_cl])),
        diff_mps_cl=float(np.sum(diff_z[mps_cl])),
        conv_mag_mps=conv_mag_mps, diff_mag_mps=diff_mag_mps,
        conv_mag_cl=conv_mag_cl, diff_mag_cl=diff_mag_cl)

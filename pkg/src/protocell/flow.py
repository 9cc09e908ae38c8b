"""Steady Darcy-Brinkman flow on the staggered structured grid.

A single momentum operator covers the free channel (porosity 1, no drag)
and the porous layers (Darcy drag mu/kappa), solved with a SIMPLE-type
pressure-velocity coupling: first-order upwind convection, second-order
central diffusion, frozen density per solve (the segregated outer loop
refreshes it from the ideal-gas law), and an optional distributed mass
source from the reaction sink. Velocities live on faces, pressures and
densities at cell centers.

The inlet enforces a standard volumetric flow rate (mass flux
rho_std * Q); the outlet fixes the relative pressure. Interior faces
adjacent to solid land cells are no-slip walls.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import pyamg
import scipy.sparse.linalg as spla

from .errors import DivergenceError, ValidationError
from .geometry import CHANNEL, Mesh, SOLID
from .gridops import GridOps
from .properties import MaterialParams, standard_density

_EPS_BIG_KAPPA = np.inf   # channel permeability (no Darcy drag)


@dataclass(frozen=True)
class FlowBC:
    """Inlet standard volumetric flow rate [m3/s] and outlet relative pressure [Pa]."""

    q_std: float
    p_out: float = 7240.0    # 1.0994 bar back pressure minus the 1.027 bar reference

    def __post_init__(self):
        if self.q_std < 0:
            raise ValidationError("Q must be nonnegative")


@dataclass(frozen=True)
class FlowOptions:
    relax_u: float = 0.7
    relax_p: float = 1.0          # SIMPLEC-consistent d needs no pressure damping
    simplec: bool = True          # d = A/(a_P - sum a_nb); plain SIMPLE otherwise
    tol: float = 1e-5
    max_iter: int = 4000
    min_iter: int = 2
    momentum_rtol: float = 0.05   # loose inner tolerance; the outer loop iterates anyway
    momentum_maxiter: int = 120
    pressure_rtol: float = 1e-9
    amg_rebuild_every: int = 40
    slip_walls: bool = False      # drop tangential wall shear (verification cases)
    divergence_window: int = 10


@dataclass
class FlowField:
    """Converged staggered velocity/pressure state plus diagnostics."""

    u: np.ndarray
    v: np.ndarray
    w: np.ndarray
    p: np.ndarray                 # relative pressure on fluid cells (1-D)
    rho: np.ndarray               # frozen density on fluid cells (1-D)
    s_m: np.ndarray               # mass source used [kg/(m3 s)] on fluid cells
    flux_x: np.ndarray
    flux_y: np.ndarray
    flux_z: np.ndarray
    inlet_flux: np.ndarray        # signed +y mass flux per inlet port face
    outlet_flux: np.ndarray
    converged: bool
    iterations: int
    residual_history: list
    q_std: float
    p_out: float
    mass_balance_flag: bool = False

    def residual_csv(self):
        lines = ["iteration,continuity_residual,momentum_residual"]
        for it, rc, rm in self.residual_history:
            lines.append(f"{it},{rc!r},{rm!r}")
        return "\n".join(lines) + "\n"


def mass_source_from_sink(mesh: Mesh, sink, warn=None):
    """Mass source field S_M = R_O3 restricted to CL cells.

    ``sink`` is a per-fluid-cell array [kg/(m3 s)]; entries outside the CL
    are zeroed. Returns (s_m, n_masked).
    """
    ops = get_ops(mesh)
    sink = np.asarray(sink, dtype=float)
    if sink.shape != (ops.n_fluid,):
        raise ValidationError("sink must be a per-fluid-cell array")
    cl = ops.region_mask(3)
    masked = np.count_nonzero(sink[~cl])
    out = np.where(cl, sink, 0.0)
    if masked and warn is not None:
        warn(f"mass source defined on {masked} non-CL cells was masked to zero")
    return out, int(masked)


_OPS_CACHE = {}


def get_ops(mesh: Mesh) -> GridOps:
    ops = getattr(mesh, "_gridops", None)
    if ops is None:
        ops = GridOps(mesh)
        mesh._gridops = ops
    return ops


# ----------------------------------------------------------------------
# per-component momentum structure (precomputed once per mesh)

class _Link:
    __slots__ = ("rows", "cols", "geo")

    def __init__(self, rows, cols, geo):
        self.rows = rows
        self.cols = cols
        self.geo = geo


class _WallLink:
    __slots__ = ("rows", "geo")

    def __init__(self, rows, geo):
        self.rows = rows
        self.geo = geo


class _Direction:
    __slots__ = ("link", "wall", "dirichlet", "flux_a", "flux_b", "sign", "flux_axis")

    def __init__(self, link, wall, dirichlet, flux_a, flux_b, sign, flux_axis):
        self.link = link
        self.wall = wall
        self.dirichlet = dirichlet   # (_Link rows/cols-into-port, geo) or None
        self.flux_a = flux_a         # flat indices into the flux array of flux_axis
        self.flux_b = flux_b
        self.sign = sign             # outward normal sign along flux_axis
        self.flux_axis = flux_axis


class _Component:
    """Static index structure of one velocity component's momentum system."""

    def __init__(self, ops: GridOps, axis: int):
        mesh = ops.mesh
        self.axis = axis
        nx, ny, nz = mesh.nx, mesh.ny, mesh.nz
        shape = [nx, ny, nz]
        shape[axis] += 1
        self.shape = tuple(shape)

        fs = ops.faces[axis]
        ia, ja, ka = fs.index
        self.n_interior = ia.size
        self.own = fs.own.astype(np.int32)
        self.nbr = fs.nbr.astype(np.int32)
        self.area = fs.area * np.ones(self.n_interior)
        self.dist = fs.dist * np.ones(self.n_interior)

        # outlet port faces join the v system as extra trailing DOFs
        self.port_dofs = axis == 1
        self.n_port = ops.outlet.cells.size if self.port_dofs else 0
        self.n_dof = self.n_interior + self.n_port

        self.dof_of_face = -np.ones(self.shape, dtype=np.int64)
        self.dof_of_face[ia, ja, ka] = np.arange(self.n_interior)
        self.face_of_dof = (ia.astype(np.int32), ja.astype(np.int32), ka.astype(np.int32))
        if self.n_port:
            pi, pj, pk = ops.outlet.index
            self.dof_of_face[pi, pj, pk] = self.n_interior + np.arange(self.n_port)

        self.flat_of_dof = np.ravel_multi_index(self.face_of_dof, self.shape)
        if self.n_port:
            pflat = np.ravel_multi_index(ops.outlet.index, self.shape)
            self.flat_of_dof = np.concatenate([self.flat_of_dof, pflat]).astype(np.int64)

        self._build_directions(ops)
        self._build_port_rows(ops)

    # -- helpers --------------------------------------------------------
    def _face_flat(self, idx, flux_shape):
        return np.ravel_multi_index(idx, flux_shape).astype(np.int64)

    def _build_directions(self, ops: GridOps):
        mesh = ops.mesh
        dz = mesh.dz
        ia, ja, ka = self.face_of_dof
        axis = self.axis
        spac = (mesh.dx, mesh.dy, dz)

        # CV extents: along own axis the CV spans one cell pitch; transverse
        # extents equal the cell's. z-extent depends on k (and straddles two
        # layers for the w component).
        if axis == 2:
            cv_dz = 0.5 * (dz[ka - 1] + dz[ka])
        else:
            cv_dz = dz[ka]
        cv_dx = np.full(ia.shape, mesh.dx)
        cv_dy = np.full(ia.shape, mesh.dy)
        if axis == 0:
            cv_dx = np.full(ia.shape, mesh.dx)
        self.cv_vol = cv_dx * cv_dy * cv_dz

        flux_shapes = []
        for a in range(3):
            s = [mesh.nx, mesh.ny, mesh.nz]
            s[a] += 1
            flux_shapes.append(tuple(s))
        self.flux_shapes = flux_shapes

        self.directions = []
        for d_axis in range(3):
            for sgn in (-1, +1):
                self.directions.append(
                    self._one_direction(ops, d_axis, sgn, cv_dx, cv_dy, cv_dz))

    def _one_direction(self, ops, d_axis, sgn, cv_dx, cv_dy, cv_dz):
        """Neighbor links, wall links and CV-face flux gathers for one direction."""
        mesh = ops.mesh
        ia, ja, ka = (arr.astype(np.int64) for arr in self.face_of_dof)
        axis = self.axis
        dz = mesh.dz
        nz = mesh.nz

        # neighbor DOF position: same component, shifted along d_axis
        shift = np.array([0, 0, 0])
        shift[d_axis] = sgn
        ni = ia + shift[0]
        nj = ja + shift[1]
        nk = ka + shift[2]
        inside = ((0 <= ni) & (ni < self.shape[0]) &
                  (0 <= nj) & (nj < self.shape[1]) &
                  (0 <= nk) & (nk < self.shape[2]))
        nbr_dof = -np.ones(ia.size, dtype=np.int64)
        nbr_dof[inside] = self.dof_of_face[ni[inside], nj[inside], nk[inside]]

        # CV face area and DOF-to-neighbor distance for this direction
        if d_axis == 0:
            area = cv_dy * cv_dz
            dist_full = np.full(ia.size, mesh.dx)
        elif d_axis == 1:
            area = cv_dx * cv_dz
            dist_full = np.full(ia.size, mesh.dy)
        else:
            area = cv_dx * cv_dy
            if axis == 2:
                dist_full = dz[np.clip(ka + (0 if sgn > 0 else -1), 0, nz - 1)]
            else:
                k2 = np.clip(ka + sgn, 0, nz - 1)
                dist_full = 0.5 * (dz[ka] + dz[k2])

        has_nbr = nbr_dof >= 0
        link = _Link(np.nonzero(has_nbr)[0].astype(np.int32),
                     nbr_dof[has_nbr].astype(np.int32),
                     (area[has_nbr] / dist_full[has_nbr]))

        # no neighbor DOF: wall for transverse directions (half distance),
        # one-sided for the axis direction (no link; upstream port/walls
        # handled through Dirichlet entries below)
        dirichlet = None
        wall_rows = np.nonzero(~has_nbr)[0]
        if d_axis == axis:
            # axis-direction missing neighbor: the adjacent location is a
            # wall face (u = 0 Dirichlet at distance one pitch) or the inlet
            # port plane. Treat as Dirichlet neighbors at full distance.
            if axis == 1:
                # classify which of those sit on the inlet port plane
                pi, pj, pk = ops.mesh.inlet.j_face, None, None
                in_rows = []
                in_port_pos = []
                inlet_idx = ops.inlet.index
                port_lookup = {}
                for pos, (ii2, jj2, kk2) in enumerate(zip(*inlet_idx)):
                    port_lookup[(int(ii2), int(jj2), int(kk2))] = pos
                for r in wall_rows:
                    key = (int(ia[r] + shift[0]), int(ja[r] + shift[1]), int(ka[r] + shift[2]))
                    if key in port_lookup:
                        in_rows.append(r)
                        in_port_pos.append(port_lookup[key])
                in_rows = np.asarray(in_rows, dtype=np.int32)
                if in_rows.size:
                    mask = np.ones(wall_rows.size, dtype=bool)
                    sel = np.isin(wall_rows, in_rows)
                    mask[sel] = False
                    dirichlet = (in_rows,
                                 np.asarray(in_port_pos, dtype=np.int32),
                                 area[in_rows] / dist_full[in_rows])
                    wall_rows = wall_rows[mask]
            wall = _WallLink(wall_rows.astype(np.int32),
                             area[wall_rows] / dist_full[wall_rows])
        else:
            wall = _WallLink(wall_rows.astype(np.int32),
                             area[wall_rows] / (0.5 * dist_full[wall_rows]))

        # CV-face flux gather: average of the two cell-face fluxes of axis
        # d_axis bracketing the CV face
        fshape = self.flux_shapes[d_axis]

        def clipped_flat(di, dj, dk):
            fi = np.clip(ia + di, 0, fshape[0] - 1)
            fj = np.clip(ja + dj, 0, fshape[1] - 1)
            fk = np.clip(ka + dk, 0, fshape[2] - 1)
            return np.ravel_multi_index((fi, fj, fk), fshape).astype(np.int64)

        off = 1 if sgn > 0 else 0
        if d_axis == axis:
            # CV faces lie at cell centers: average faces (m-1, m) or (m, m+1)
            sh_a = np.zeros(3, dtype=int)
            sh_b = np.zeros(3, dtype=int)
            if sgn < 0:
                sh_a[axis] = -1
            else:
                sh_b[axis] = +1
            a_idx = clipped_flat(*sh_a)
            b_idx = clipped_flat(*sh_b)
        else:
            # CV face between this DOF's two cells in direction d_axis:
            # average the d_axis faces of both adjacent cells
            sh_d = np.zeros(3, dtype=int)
            sh_d[d_axis] = off
            sh_a = sh_d.copy()
            sh_a[axis] -= 1          # low-side cell of this face
            a_idx = clipped_flat(*sh_a)
            b_idx = clipped_flat(*sh_d)
        return _Direction(link, wall, dirichlet, a_idx, b_idx, sgn, d_axis)

    def _build_port_rows(self, ops: GridOps):
        """Half-CV momentum structure of the outlet port faces (v only)."""
        if not self.n_port:
            self.port = None
            return
        mesh = ops.mesh
        port = ops.outlet
        pi, pj, pk = (np.asarray(a, dtype=np.int64) for a in port.index)
        side = port.sign
        # the neighboring interior v face on the fluid side
        nj = pj + (1 if side > 0 else -1)
        nbr = self.dof_of_face[pi, nj, pk]
        if np.any(nbr < 0):
            # single-cell-long duct: no interior face; fall back to wall-free row
            nbr = np.where(nbr < 0, -1, nbr)
        area = mesh.dx * mesh.dz[pk]
        self.port = {
            "rows": (self.n_interior + np.arange(self.n_port)).astype(np.int32),
            "inner": nbr.astype(np.int32),
            "cells": port.cells.astype(np.int32),
            "area": area,
            "geo": area / mesh.dy,
            "half_vol": mesh.dx * mesh.dz[pk] * 0.5 * mesh.dy,
            "sign": side,
            # cell-center flux index: average of the port face and inner face
            "flux_a": np.ravel_multi_index((pi, pj, pk), self.flux_shapes[1]).astype(np.int64),
            "flux_b": np.ravel_multi_index((pi, nj, pk), self.flux_shapes[1]).astype(np.int64),
        }


_COMP_CACHE_ATTR = "_flow_components"


def _components(ops: GridOps):
    comps = getattr(ops, _COMP_CACHE_ATTR, None)
    if comps is None:
        comps = tuple(_Component(ops, axis) for axis in range(3))
        setattr(ops, _COMP_CACHE_ATTR, comps)
    return comps


# ----------------------------------------------------------------------

def _solve_momentum(n, diag, links, rhs, x0, rtol, maxiter):
    """Approximate momentum solve: reduce the current residual by ``rtol``.

    Solves A d = r0 for the correction (so the Krylov tolerance is
    relative to the actual residual, not to the relaxation-inflated RHS).
    """

    def matvec(x):
        ax = diag * x
        for rows, cols, coef in links:
            ax[rows] -= coef * x[cols]
        return ax

    r0 = rhs - matvec(x0)
    norm0 = np.linalg.norm(r0)
    if norm0 == 0.0:
        return x0
    op = spla.LinearOperator((n, n), matvec=matvec)
    inv_d = 1.0 / diag
    prec = spla.LinearOperator((n, n), matvec=lambda x: inv_d * x)
    d, info = spla.bicgstab(op, r0, rtol=rtol, atol=1e-300,
                            maxiter=maxiter, M=prec)
    if info < 0 or not np.all(np.isfinite(d)):
        d = np.zeros(n)
        for _ in range(30):
            d += 0.8 * inv_d * (r0 - matvec(d))
    return x0 + d


def _face_density(ops: GridOps, rho):
    """Arithmetic face densities for the three axes plus port densities."""
    out = []
    for fs in ops.faces:
        w = fs.w_own
        out.append(w * rho[fs.own] + (1.0 - w) * rho[fs.nbr])
    rho_in = rho[ops.inlet.cells]
    rho_out = rho[ops.outlet.cells]
    return out, rho_in, rho_out


def _cell_prop_on_faces(comp: _Component, prop):
    """Average a per-fluid-cell property onto a component's interior faces."""
    return 0.5 * (prop[comp.own] + prop[comp.nbr])


def solve_flow(mesh: Mesh, materials: MaterialParams, bc: FlowBC,
               mass_source=None, rho=None, initial: FlowField | None = None,
               options: FlowOptions | None = None) -> FlowField:
    """Solve steady Darcy-Brinkman momentum + continuity for one operating point.

    ``mass_source`` is the per-fluid-cell S_M [kg/(m3 s)] (zero if None);
    ``rho`` the frozen density per fluid cell (defaults to ideal-gas air at
    the outlet pressure); ``initial`` warm-starts from a previous field.

    Raises DivergenceError when residuals grow persistently; never returns
    an unconverged field silently.
    """
    opts = options or FlowOptions()
    ops = get_ops(mesh)
    comps = _components(ops)
    n = ops.n_fluid
    mu = materials.viscosity
    rho_std = standard_density()

    if rho is None:
        from .properties import mixture_density
        rho = np.full(n, mixture_density(bc.p_out + materials.p_ref,
                                         materials.temperature, 0.0))
    rho = np.asarray(rho, dtype=float)
    s_m = np.zeros(n) if mass_source is None else np.asarray(mass_source, dtype=float)

    # per-cell porosity and inverse permeability
    eps = np.ones(n)
    inv_kappa = np.zeros(n)
    reg = ops.region
    eps[reg == 2] = materials.epsilon_mps
    eps[reg == 3] = materials.epsilon_cl
    inv_kappa[reg == 2] = 1.0 / materials.kappa_mps
    inv_kappa[reg == 3] = 1.0 / materials.kappa_cl

    rho_faces, rho_in_faces, rho_out_faces = _face_density(ops, rho)

    # fields
    if initial is not None:
        u = [initial.u.copy(), initial.v.copy(), initial.w.copy()]
        p = initial.p.copy()
    else:
        u = [np.zeros(c.shape) for c in comps]
        p = np.full(n, bc.p_out)

    # static per-solve coefficient pieces per component
    static = []
    for comp in comps:
        eps_f = _cell_prop_on_faces(comp, eps)
        mu_eff = mu / eps_f
        invk_f = _cell_prop_on_faces(comp, inv_kappa)
        smf = _cell_prop_on_faces(comp, s_m)
        darcy = mu * invk_f * comp.cv_vol
        smdiag = np.maximum(-smf, 0.0) * comp.cv_vol / eps_f**2
        diff = []
        for d in comp.directions:
            dl = np.zeros(comp.n_interior)
            dl[d.link.rows] += mu_eff[d.link.rows] * d.link.geo
            # slip walls drop tangential shear; normal-direction closures stay
            keep_wall = (d.flux_axis == comp.axis) or not opts.slip_walls
            if keep_wall and d.wall.rows.size:
                dl[d.wall.rows] += mu_eff[d.wall.rows] * d.wall.geo
            if d.dirichlet is not None:
                rows, ppos, geo = d.dirichlet
                dl[rows] += mu_eff[rows] * geo
            diff.append(dl)
        entry = {"mu_eff": mu_eff, "darcy": darcy, "smdiag": smdiag,
                 "diff": diff, "eps_f": eps_f}
        if comp.port is not None and comp.n_port:
            pr = comp.port
            eps_c = eps[pr["cells"]]
            entry["port_mu"] = mu / eps_c
            entry["port_darcy"] = mu * inv_kappa[pr["cells"]] * pr["half_vol"]
            entry["port_smdiag"] = np.maximum(-s_m[pr["cells"]], 0.0) * pr["half_vol"] / eps_c**2
        static.append(entry)

    # rho * area per face (flux = rhoA * u), as full arrays
    rhoA = []
    for axis, comp in enumerate(comps):
        arr = np.zeros(comp.shape)
        fs = ops.faces[axis]
        arr[fs.index] = rho_faces[axis] * fs.area
        if axis == 1:
            arr[ops.inlet.index] = rho_in_faces * ops.inlet.area
            arr[ops.outlet.index] = rho_out_faces * ops.outlet.area
        rhoA.append(arr)

    # inlet Dirichlet velocity: sum(rho_f v A) = sign * rho_std * Q
    inlet_rhoA_tot = float(np.sum(rho_in_faces * ops.inlet.area))
    v_inlet = ops.inlet.sign * rho_std * bc.q_std / inlet_rhoA_tot
    inlet_values = np.full(ops.inlet.cells.size, v_inlet)
    u[1][ops.inlet.index] = v_inlet

    source_total = float(np.sum(s_m * ops.vol))
    scale_mass = max(rho_std * bc.q_std, abs(source_total), 1e-30)
    u_ref = abs(v_inlet) if bc.q_std > 0 else 1.0
    scale_mom = max(scale_mass * u_ref, 1e-30)

    vols = ops.vol
    assemble_p, _ = ops.csr_template()
    amg = None
    amg_age = 0
    p_prime = np.zeros(n)
    history = []
    grow = 0
    prev_res = math.inf
    best = math.inf
    converged = False
    apfaces = [None, None, None]

    def fluxes():
        fx = rhoA[0] * u[0]
        fy = rhoA[1] * u[1]
        fz = rhoA[2] * u[2]
        return fx, fy, fz

    it = 0
    for it in range(1, opts.max_iter + 1):
        fx, fy, fz = fluxes()
        flux_int = [fx[ops.faces[0].index], fy[ops.faces[1].index], fz[ops.faces[2].index]]
        in_flux = fy[ops.inlet.index]
        out_flux = fy[ops.outlet.index]
        div = ops.divergence(*flux_int, port_fluxes=((ops.inlet, in_flux), (ops.outlet, out_flux)))
        res_c = float(np.sum(np.abs(div - s_m * vols))) / scale_mass

        res_m = 0.0
        comp_sys = []
        fly = (fx.ravel(), fy.ravel(), fz.ravel())
        for axis, comp in enumerate(comps):
            st = static[axis]
            nint = comp.n_interior
            ndof = comp.n_dof
            diag = np.zeros(ndof)
            sum_anb = np.zeros(ndof)
            rhs = np.zeros(ndof)
            links = []
            for d_i, d in enumerate(comp.directions):
                f_cv = 0.5 * (fly[d.flux_axis][d.flux_a] + fly[d.flux_axis][d.flux_b])
                f_cv /= st["eps_f"] ** 2
                a_conv = np.maximum(-d.sign * f_cv, 0.0)
                dl = st["diff"][d_i]
                diag[:nint] += dl
                lr = d.link.rows
                if lr.size:
                    a_link = dl[lr] + a_conv[lr]
                    diag[:nint][lr] += a_conv[lr]
                    sum_anb[:nint][lr] += a_link
                    links.append((lr, d.link.cols, a_link))
                if d.dirichlet is not None:
                    rows, ppos, geo = d.dirichlet
                    a_dir = dl[rows] + a_conv[rows]
                    diag[:nint][rows] += a_conv[rows]
                    rhs[:nint][rows] += a_dir * inlet_values[ppos]
            diag[:nint] += st["darcy"] + st["smdiag"]
            rhs[:nint] += (p[comp.own] - p[comp.nbr]) * comp.area

            if comp.port is not None and comp.n_port:
                pr = comp.port
                prow = pr["rows"]
                f_port = fly[1][pr["flux_a"]]
                f_inner = fly[1][pr["flux_b"]]
                f_cv_in = 0.5 * (f_port + f_inner)
                side = pr["sign"]
                # outward axis direction is -side; inflow through the inner CV face
                a_in = np.maximum(-side * f_cv_in, 0.0)
                d_ax = st["port_mu"] * pr["geo"]
                diag[prow] = d_ax + a_in + st["port_darcy"] + st["port_smdiag"] \
                    + np.maximum(-side * f_port, 0.0)
                ok = pr["inner"] >= 0
                if np.any(ok):
                    links.append((prow[ok], pr["inner"][ok], (d_ax + a_in)[ok]))
                    sum_anb[prow[ok]] += (d_ax + a_in)[ok]
                # +y pressure force: ghost sits opposite the fluid side
                rhs[prow] += -side * (p[pr["cells"]] - bc.p_out) * pr["area"]

            diag_rel = diag / opts.relax_u
            uflat = u[axis].ravel()
            ucur = uflat[comp.flat_of_dof]
            rhs_rel = rhs + (diag_rel - diag) * ucur

            # residual of the unrelaxed system before smoothing
            ax = diag * ucur
            for rows, cols, coef in links:
                ax[rows] -= coef * ucur[cols]
            res_m += float(np.sum(np.abs(rhs - ax))) / scale_mom

            d_denom = (diag_rel - sum_anb) if opts.simplec else diag_rel
            comp_sys.append((diag_rel, links, rhs_rel, d_denom))

        history.append((it, res_c, res_m))
        res_tot = max(res_c, res_m)
        if it >= opts.min_iter and res_tot < opts.tol:
            converged = True
            break
        if not np.isfinite(res_tot):
            raise DivergenceError("flow solve produced non-finite residuals", history)
        if it > 2 and res_tot > 1.02 * prev_res and res_tot > 10.0 * opts.tol:
            grow += 1
            if grow >= opts.divergence_window:
                raise DivergenceError(
                    f"flow residuals grew over {grow} consecutive iterations "
                    f"(last {res_tot:.3e})", history)
        else:
            grow = 0
        best = min(best, res_tot)
        if it > 5 and res_tot > 1e5 * max(best, opts.tol):
            raise DivergenceError(
                f"flow residuals blew up to {res_tot:.3e} from best {best:.3e}", history)
        prev_res = res_tot

        # momentum solves (loose BiCGStab on the relaxed systems)
        for axis, comp in enumerate(comps):
            diag_rel, links, rhs_rel, d_denom = comp_sys[axis]
            uflat = u[axis].ravel()
            x0 = uflat[comp.flat_of_dof].copy()
            x = _solve_momentum(comp.n_dof, diag_rel, links, rhs_rel, x0,
                                opts.momentum_rtol, opts.momentum_maxiter)
            uflat[comp.flat_of_dof] = x
            u[axis] = uflat.reshape(comp.shape)
            apfaces[axis] = d_denom

        # pressure correction
        fx, fy, fz = fluxes()
        flux_int = [fx[ops.faces[0].index], fy[ops.faces[1].index], fz[ops.faces[2].index]]
        in_flux = fy[ops.inlet.index]
        out_flux = fy[ops.outlet.index]
        div = ops.divergence(*flux_int, port_fluxes=((ops.inlet, in_flux), (ops.outlet, out_flux)))
        rhs_p = -(div - s_m * vols)

        offdiags = []
        diag_p = np.zeros(n)
        d_face = []
        for axis, comp in enumerate(comps):
            dof_ids = comp.dof_of_face[ops.faces[axis].index]
            d_f = ops.faces[axis].area / apfaces[axis][dof_ids]
            coef = rho_faces[axis] * ops.faces[axis].area * d_f
            diag_p += np.bincount(comp.own, weights=coef, minlength=n)
            diag_p += np.bincount(comp.nbr, weights=coef, minlength=n)
            offdiags.append((-coef, -coef))
            d_face.append(d_f)
        # outlet port: ghost p' = 0
        vcomp = comps[1]
        if vcomp.port is not None and vcomp.n_port:
            pr = vcomp.port
            d_out = pr["area"] / apfaces[1][pr["rows"]]
            coef_out = rho_out_faces * pr["area"] * d_out
            diag_p += np.bincount(pr["cells"], weights=coef_out, minlength=n)
        a_p = assemble_p(diag_p, offdiags)

        if amg is None or amg_age >= opts.amg_rebuild_every:
            amg = pyamg.ruge_stuben_solver(a_p, max_coarse=50)
            amg_age = 0
        amg_age += 1
        mprec = amg.aspreconditioner(cycle="V")
        p_prime, info = spla.cg(a_p, rhs_p, x0=p_prime, rtol=opts.pressure_rtol,
                                atol=1e-300, maxiter=400, M=mprec)
        if info != 0:
            amg = pyamg.ruge_stuben_solver(a_p, max_coarse=50)
            mprec = amg.aspreconditioner(cycle="V")
            p_prime, info = spla.cg(a_p, rhs_p, x0=np.zeros(n), rtol=opts.pressure_rtol,
                                    atol=1e-300, maxiter=2000, M=mprec)
            if info != 0:
                raise DivergenceError("pressure-correction solve failed", history)

        # corrections
        for axis, comp in enumerate(comps):
            dof_ids = comp.dof_of_face[ops.faces[axis].index]
            corr = d_face[axis] * (p_prime[comp.own] - p_prime[comp.nbr])
            uflat = u[axis].ravel()
            flat = np.ravel_multi_index(ops.faces[axis].index, comp.shape)
            uflat[flat] += corr
            u[axis] = uflat.reshape(comp.shape)
        if vcomp.port is not None and vcomp.n_port:
            pr = vcomp.port
            d_out = pr["area"] / apfaces[1][pr["rows"]]
            side = pr["sign"]
            corr = d_out * (p_prime[pr["cells"]] if side < 0 else -p_prime[pr["cells"]])
            uflat = u[1].ravel()
            uflat[pr["flux_a"]] += corr
            u[1] = uflat.reshape(vcomp.shape)
        p += opts.relax_p * p_prime

    if not converged:
        raise DivergenceError(
            f"flow did not converge in {opts.max_iter} iterations "
            f"(last residual {prev_res:.3e})", history)

    fx, fy, fz = fluxes()
    in_flux = fy[ops.inlet.index]
    out_flux = fy[ops.outlet.index]
    balance = abs(float(np.sum(ops.inlet.sign * in_flux) - np.sum(-ops.outlet.sign * out_flux)
                        + source_total))
    flag = bc.q_std == 0.0 and abs(source_total) > 0 and balance / scale_mass > 1e-6

    return FlowField(
        u=u[0], v=u[1], w=u[2], p=p, rho=rho, s_m=s_m,
        flux_x=fx[ops.faces[0].index], flux_y=fy[ops.faces[1].index],
        flux_z=fz[ops.faces[2].index],
        inlet_flux=in_flux, outlet_flux=out_flux,
        converged=True, iterations=it, residual_history=history,
        q_std=bc.q_std, p_out=bc.p_out, mass_balance_flag=flag,
    )


def mass_balance(mesh: Mesh, fl: FlowField):
    """|inflow - outflow - total source| normalized by rho_std * Q."""
    ops = get_ops(mesh)
    rho_std = standard_density()
    inflow = float(np.sum(ops.inlet.sign * fl.inlet_flux))
    outflow = float(np.sum(-ops.outlet.sign * fl.outlet_flux))
    source = float(np.sum(fl.s_m * ops.vol))
    scale = max(rho_std * fl.q_std, abs(source), 1e-30)
    return abs(inflow - outflow + source) / scale


def cell_centered_velocity(mesh: Mesh, fl: FlowField):
    """Velocity components averaged to cell centers (full-grid arrays)."""
    ops = get_ops(mesh)
    out = []
    for axis, arr in enumerate((fl.u, fl.v, fl.w)):
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[axis] = slice(0, -1)
        hi[axis] = slice(1, None)
        cc = 0.5 * (arr[tuple(lo)] + arr[tuple(hi)])
        cc[~ops.fluid] = 0.0
        out.append(cc)
    return out

"""Index machinery for staggered finite-volume operators on a Mesh.

Precomputes, once per mesh, everything the flow and species solvers need
each iteration: linear ids of fluid cells, interior-face owner/neighbor
pairs per axis, geometric factors, port-face locations, and a reusable
CSR skeleton for cell-centered systems. All arrays are plain numpy so
per-iteration work is pure vectorized gathers and scatters.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .geometry import CHANNEL, CL, MPS, SOLID, Mesh


class FaceSet:
    """Interior faces of one axis between two fluid cells.

    ``own``/``nbr`` are linear fluid-cell indices on the low/high side,
    ``area`` the face areas, ``dist`` the center-to-center distances, and
    ``index`` the (i, j, k) face-array index of each face for staggered
    velocity lookup.
    """

    __slots__ = ("own", "nbr", "area", "dist", "index", "w_own")

    def __init__(self, own, nbr, area, dist, index, w_own):
        self.own = own
        self.nbr = nbr
        self.area = area
        self.dist = dist
        self.index = index
        self.w_own = w_own   # linear-interpolation weight of the owner cell


class PortFaces:
    """Port (inlet/outlet) faces: y-normal patches bounding one cell row."""

    __slots__ = ("cells", "area", "index", "sign", "half_dist")

    def __init__(self, cells, area, index, sign, half_dist):
        self.cells = cells           # adjacent fluid cell linear ids
        self.area = area
        self.index = index           # (i, j, k) into the v face array
        self.sign = sign             # +1 if inward flow has v > 0
        self.half_dist = half_dist   # cell center to face distance


class GridOps:
    def __init__(self, mesh: Mesh):
        self.mesh = mesh
        nx, ny, nz = mesh.nx, mesh.ny, mesh.nz
        ct = mesh.cell_type
        self.fluid = ct != SOLID
        self.n_fluid = int(np.count_nonzero(self.fluid))

        # linear ids: -1 for solid
        self.cell_id = -np.ones((nx, ny, nz), dtype=np.int64)
        self.cell_id[self.fluid] = np.arange(self.n_fluid)
        self.cell_ijk = np.argwhere(self.fluid)

        dz = mesh.dz
        self.vol = np.empty(self.n_fluid)
        self.vol[:] = (mesh.dx * mesh.dy * dz[None, None, :] * np.ones((nx, ny, nz)))[self.fluid]
        self.dz_cell = (dz[None, None, :] * np.ones((nx, ny, nz)))[self.fluid]

        self.region = ct[self.fluid]

        self._build_faces()
        self._build_ports()
        self._csr_template = None

    # ------------------------------------------------------------------
    def _build_faces(self):
        m = self.mesh
        cid = self.cell_id
        fl = self.fluid
        dz = m.dz

        # x faces between (i-1, j, k) and (i, j, k)
        ok = fl[:-1, :, :] & fl[1:, :, :]
        iw, j, k = np.nonzero(ok)
        own = cid[iw, j, k]
        nbr = cid[iw + 1, j, k]
        area = m.dy * dz[k]
        dist = np.full(own.shape, m.dx)
        self.fx = FaceSet(own, nbr, area, dist, (iw + 1, j, k), np.full(own.shape, 0.5))

        # y faces
        ok = fl[:, :-1, :] & fl[:, 1:, :]
        i, jw, k = np.nonzero(ok)
        own = cid[i, jw, k]
        nbr = cid[i, jw + 1, k]
        area = m.dx * dz[k]
        dist = np.full(own.shape, m.dy)
        self.fy = FaceSet(own, nbr, area, dist, (i, jw + 1, k), np.full(own.shape, 0.5))

        # z faces (spacing may vary layer to layer)
        ok = fl[:, :, :-1] & fl[:, :, 1:]
        i, j, kw = np.nonzero(ok)
        own = cid[i, j, kw]
        nbr = cid[i, j, kw + 1]
        area = np.full(own.shape, m.dx * m.dy)
        dist = 0.5 * (dz[kw] + dz[kw + 1])
        w_own = 0.5 * dz[kw + 1] / dist   # weight of owner in face interpolation
        self.fz = FaceSet(own, nbr, area, dist, (i, j, kw + 1), w_own)

        self.faces = (self.fx, self.fy, self.fz)

    # ------------------------------------------------------------------
    def _port_faces(self, port):
        m = self.mesh
        ii, kk = np.meshgrid(np.arange(port.i_lo, port.i_hi),
                             np.arange(port.k_lo, port.k_hi), indexing="ij")
        ii = ii.ravel()
        kk = kk.ravel()
        j_cell = port.j_face if port.fluid_side > 0 else port.j_face - 1
        cells = self.cell_id[ii, j_cell, kk]
        if np.any(cells < 0):
            raise ValueError("port patch touches solid cells")
        area = m.dx * m.dz[kk]
        return PortFaces(cells, area, (ii, np.full_like(ii, port.j_face), kk),
                         port.fluid_side, 0.5 * m.dy * np.ones(ii.shape))

    def _build_ports(self):
        self.inlet = self._port_faces(self.mesh.inlet)
        self.outlet = self._port_faces(self.mesh.outlet)

    # ------------------------------------------------------------------
    def csr_template(self):
        """Reusable CSR skeleton for cell-centered 7-point systems.

        Returns (assemble, n) where assemble(diag, offdiags) -> csr_matrix
        and offdiags is [(coef_low_to_high, coef_high_to_low), ...] per
        axis: the coefficient arrays are placed at precomputed positions,
        so repeated assembly costs one data-fill, no symbolic work.
        """
        if self._csr_template is not None:
            return self._csr_template
        n = self.n_fluid
        rows = [np.arange(n)]
        cols = [np.arange(n)]
        for fs in self.faces:
            rows.append(fs.own)
            cols.append(fs.nbr)
            rows.append(fs.nbr)
            cols.append(fs.own)
        rows = np.concatenate(rows)
        cols = np.concatenate(cols)
        order = np.lexsort((cols, rows))
        sorted_rows = rows[order]
        sorted_cols = cols[order]
        indptr = np.zeros(n + 1, dtype=np.int64)
        np.add.at(indptr, sorted_rows + 1, 1)
        indptr = np.cumsum(indptr)
        inverse = np.empty_like(order)
        inverse[order] = np.arange(order.size)

        nnz = rows.size

        def assemble(diag, offdiags):
            data_unsorted = np.empty(nnz)
            pos = 0
            data_unsorted[pos:pos + n] = diag
            pos += n
            for lo_hi, hi_lo in offdiags:
                m = lo_hi.size
                data_unsorted[pos:pos + m] = lo_hi
                pos += m
                data_unsorted[pos:pos + m] = hi_lo
                pos += m
            data = data_unsorted[order]
            return sp.csr_matrix((data, sorted_cols, indptr), shape=(n, n))

        self._csr_template = (assemble, n)
        return self._csr_template

    # ------------------------------------------------------------------
    def scatter_to_grid(self, values, fill=0.0):
        """Expand a fluid-cell vector to the full (nx, ny, nz) grid."""
        out = np.full(self.mesh.cell_type.shape, fill, dtype=float)
        out[self.fluid] = values
        return out

    def gather(self, grid_field):
        """Fluid-cell vector from a full-grid field."""
        return np.asarray(grid_field)[self.fluid]

    def region_mask(self, code):
        return self.region == code

    def divergence(self, flux_x, flux_y, flux_z, port_fluxes=()):
        """Net outflow per fluid cell of face-flux arrays (any units).

        ``flux_*`` are signed low-to-high fluxes on the interior face sets.
        ``port_fluxes`` pairs a PortFaces patch with its signed (+y) flux
        array; the outward contribution at the port cells is -side * flux.
        """
        n = self.n_fluid
        div = np.zeros(n)
        for fs, flux in zip(self.faces, (flux_x, flux_y, flux_z)):
            div += np.bincount(fs.own, weights=flux, minlength=n)
            div -= np.bincount(fs.nbr, weights=flux, minlength=n)
        for port, flux in port_fluxes:
            div -= port.sign * np.bincount(port.cells, weights=flux, minlength=n)
        return div

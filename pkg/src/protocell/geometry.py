"""Device geometry and structured Cartesian meshing.

The flow channel is a single serpentine machined into a solid plate:
``n_sections`` straight sections of length ``section_length`` run along
y, stacked along x with pitch ``channel_width + land_width`` and joined
by turn segments at alternating ends. Two porous layers (a macroporous
substrate and a catalyst layer) sit on top of the channel plate and
cover the whole footprint, which extends ``inlet_offset/2`` beyond the
serpentine on every side.

Meshing uses a tensor-product grid with in-plane spacing
``channel_width/(2*sigma)`` so the channel is always at least two cells
wide and the land is exactly representable. Each physical layer
(channel, substrate, catalyst) carries ``sigma`` cells in z; the channel
layer may be graded toward its top and bottom walls to emulate near-wall
boundary-layer refinement. The serpentine path length convention counts
``n_sections * section_length`` plus ``n_sections - 1`` turn segments of
length ``land_width`` (the gap each turn crosses), which makes the
analytic channel volume exactly representable on the grid for the stock
dimensions.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, replace, fields as dc_fields

import numpy as np

from .errors import BudgetError, GeometryError, ValidationError

SOLID, CHANNEL, MPS, CL = 0, 1, 2, 3
REGION_NAMES = {SOLID: "LAND_SOLID", CHANNEL: "CHANNEL", MPS: "MPS", CL: "CL"}

DEFAULT_CELL_BUDGET = 5_000_000
_GRADING_RATIO = 1.5
_GRADING_CELLS = 3


@dataclass(frozen=True)
class GeometrySpec:
    """Parameterized serpentine-over-porous-layers geometry (SI units)."""

    channel_width: float = 0.8e-3
    land_width: float = 1.6e-3
    channel_depth: float = 1.0e-3
    section_length: float = 22.4e-3
    n_sections: int = 10
    mps_thickness: float = 190e-6
    cl_thickness: float = 150e-6
    inlet_offset: float = 4.7752e-3

    def __post_init__(self):
        for f in dc_fields(self):
            v = getattr(self, f.name)
            if f.name == "n_sections":
                if not isinstance(v, int) or v < 2:
                    raise ValidationError(f"n_sections must be an integer >= 2, got {v!r}")
            elif v <= 0:
                raise ValidationError(f"{f.name} must be strictly positive, got {v!r}")

    @property
    def pitch(self):
        return self.channel_width + self.land_width

    @property
    def serpentine_span_x(self):
        n = self.n_sections
        return n * self.channel_width + (n - 1) * self.land_width

    @property
    def footprint_x(self):
        return self.serpentine_span_x + self.inlet_offset

    @property
    def footprint_y(self):
        return self.section_length + self.inlet_offset

    @property
    def path_length(self):
        """Centerline length: sections plus the land gaps the turns cross."""
        n = self.n_sections
        return n * self.section_length + (n - 1) * self.land_width

    @property
    def channel_volume(self):
        return self.path_length * self.channel_width * self.channel_depth


def build_geometry(kind, **overrides):
    """Stock geometry with 10 (``full``) or 4 (``reduced``) serpentine sections.

    Keyword overrides replace individual GeometrySpec fields and are
    validated like the defaults.
    """
    if kind not in ("reduced", "full"):
        raise ValidationError(f"geometry kind must be 'reduced' or 'full', got {kind!r}")
    spec = GeometrySpec(n_sections=4 if kind == "reduced" else 10)
    if overrides:
        spec = replace(spec, **overrides)
    return spec


def effective_refinement_factor(n_finer, n_coarser, dim=3):
    """(N_finer / N_coarser)**(1/dim), the effective refinement ratio.

    Also yields the normalized effective spacing of a mesh relative to a
    finer reference (h = 1 on the reference itself).
    """
    if dim not in (1, 2, 3):
        raise ValidationError("dim must be 1, 2 or 3")
    if n_coarser < 1 or n_finer < 1:
        raise ValidationError("cell counts must be >= 1")
    if n_finer < n_coarser:
        raise ValidationError("arguments swapped: n_finer must be >= n_coarser")
    return (n_finer / n_coarser) ** (1.0 / dim)


@dataclass(frozen=True)
class Port:
    """A rectangular inlet/outlet patch of y-normal faces.

    ``j_face`` indexes the face plane; the fluid sits at cell row
    ``j_face`` when ``fluid_side`` is +1 (port at the low-y end) and at
    ``j_face - 1`` when it is -1. ``i_lo:i_hi`` and ``k_lo:k_hi`` bound
    the patch.
    """

    j_face: int
    i_lo: int
    i_hi: int
    k_lo: int
    k_hi: int
    fluid_side: int


class Mesh:
    """Structured Cartesian mesh with per-cell region tags.

    Attributes of note: ``cell_type[nx, ny, nz]`` holding SOLID/CHANNEL/
    MPS/CL codes, uniform in-plane spacings ``dx``/``dy``, the per-layer
    ``dz`` array, and the inlet/outlet ``Port`` patches. ``n_fluid``
    counts non-solid cells (the meshed domains); solid land cells are
    carried only as tags.
    """

    def __init__(self, spec: GeometrySpec, sigma: int, wall_graded: bool,
                 cell_type: np.ndarray, dx: float, dy: float, dz: np.ndarray,
                 inlet: Port, outlet: Port, margins: tuple, layer_bounds=None):
        self.spec = spec
        self.sigma = int(sigma)
        self.wall_graded = bool(wall_graded)
        self.cell_type = cell_type
        self.nx, self.ny, self.nz = cell_type.shape
        self.dx = float(dx)
        self.dy = float(dy)
        self.dz = np.asarray(dz, dtype=float)
        self.inlet = inlet
        self.outlet = outlet
        self.margin_cells = margins           # (mx, my)
        # k-index ends of the channel and substrate layers
        self.layer_bounds = layer_bounds if layer_bounds is not None else (sigma, 2 * sigma)
        self.z_edges = np.concatenate([[0.0], np.cumsum(self.dz)])
        self.z_centers = 0.5 * (self.z_edges[:-1] + self.z_edges[1:])
        self.cell_type.setflags(write=False)
        self.dz.setflags(write=False)

    def __getstate__(self):
        # operator caches are per-process; never ship them across pickles
        state = self.__dict__.copy()
        state.pop("_gridops", None)
        return state

    # -- counting ------------------------------------------------------

    @property
    def n_cells_total(self):
        return self.nx * self.ny * self.nz

    @property
    def n_fluid(self):
        return int(np.count_nonzero(self.cell_type))

    def region_count(self, code):
        return int(np.count_nonzero(self.cell_type == code))

    @property
    def n_cells(self):
        """Cell count N used for refinement ratios (fluid cells only)."""
        return self.n_fluid

    # -- coordinates ----------------------------------------------------

    @property
    def x_centers(self):
        return (np.arange(self.nx) + 0.5) * self.dx

    @property
    def y_centers(self):
        return (np.arange(self.ny) + 0.5) * self.dy

    def i_at_x(self, x):
        i = int(x / self.dx)
        if not 0 <= i < self.nx:
            raise GeometryError(f"x = {x} falls outside the mesh")
        return i

    def j_at_y(self, y):
        j = int(y / self.dy)
        if not 0 <= j < self.ny:
            raise GeometryError(f"y = {y} falls outside the mesh")
        return j

    def k_at_z(self, z):
        if not 0.0 <= z <= self.z_edges[-1]:
            raise GeometryError(f"z = {z} falls outside the mesh")
        k = int(np.searchsorted(self.z_edges, z, side="right") - 1)
        return min(max(k, 0), self.nz - 1)

    # -- derived geometry ------------------------------------------------

    @property
    def channel_k(self):
        return slice(0, self.layer_bounds[0])

    @property
    def mps_k(self):
        return slice(self.layer_bounds[0], self.layer_bounds[1])

    @property
    def cl_k(self):
        return slice(self.layer_bounds[1], self.nz)

    @property
    def cell_volumes_z(self):
        """Per-layer cell volume (in-plane area is uniform)."""
        return self.dx * self.dy * self.dz

    def channel_volume_tagged(self):
        per_layer = np.count_nonzero(self.cell_type[:, :, self.channel_k] == CHANNEL, axis=(0, 1))
        return float(np.sum(per_layer * self.dz[self.channel_k] * self.dx * self.dy))

    def rasterized_path_length(self):
        """Channel footprint area divided by the channel width."""
        path_cells = np.count_nonzero(self.cell_type[:, :, 0] == CHANNEL)
        return path_cells * self.dx * self.dy / self.spec.channel_width

    def serpentine_origin(self):
        """Physical (x, y) of the serpentine bounding-box corner."""
        mx, my = self.margin_cells
        return mx * self.dx, my * self.dy

    # -- reporting --------------------------------------------------------

    def summary(self):
        lines = [
            f"sigma {self.sigma}",
            f"wall_graded {str(self.wall_graded).lower()}",
            f"dims {self.nx} {self.ny} {self.nz}",
            f"spacing_xy_m {self.dx!r}",
            f"dz_m {' '.join(repr(float(v)) for v in self.dz)}",
            f"cells_total {self.n_cells_total}",
            f"cells_fluid {self.n_fluid}",
        ]
        for code in (CHANNEL, MPS, CL, SOLID):
            lines.append(f"cells_{REGION_NAMES[code]} {self.region_count(code)}")
        lines.append(f"z_layers channel:{self.sigma} mps:{self.sigma} cl:{self.sigma}")
        return "\n".join(lines) + "\n"


def _cells(length, delta):
    """Length in grid cells, rounded (stock dimensions are exact multiples)."""
    return max(1, int(round(length / delta)))


def _graded_layer(thickness, n, ratio=_GRADING_RATIO, n_graded=_GRADING_CELLS):
    """Cell heights graded toward both ends of a layer, summing to ``thickness``.

    Cell i takes weight ratio**min(i, n-1-i, n_graded); with n <= 2 this
    degenerates to a uniform split.
    """
    idx = np.arange(n)
    expo = np.minimum(np.minimum(idx, n - 1 - idx), n_graded)
    w = ratio ** expo.astype(float)
    return thickness * w / w.sum()


def cell_budget_from_env(default=DEFAULT_CELL_BUDGET):
    raw = os.environ.get("PROTOCELL_CELL_BUDGET")
    if raw is None:
        return default
    try:
        return int(raw)
    except ValueError as exc:
        raise ValidationError(f"PROTOCELL_CELL_BUDGET must be an integer, got {raw!r}") from exc


def generate_mesh(spec: GeometrySpec, sigma: int, wall_graded: bool = False,
                  cell_budget: int | None = None) -> Mesh:
    """Rasterize ``spec`` at scaling factor ``sigma``.

    In-plane spacing is channel_width/(2*sigma); each physical layer gets
    ``sigma`` z-cells. Raises BudgetError before allocation if the fluid
    cell count would exceed the budget.
    """
    if sigma < 1 or not isinstance(sigma, int):
        raise ValidationError(f"sigma must be an integer >= 1, got {sigma!r}")
    budget = cell_budget if cell_budget is not None else cell_budget_from_env()

    delta = spec.channel_width / (2 * sigma)
    cw = _cells(spec.channel_width, delta)          # 2*sigma
    lw = _cells(spec.land_width, delta)
    seclen = _cells(spec.section_length, delta)
    margin = int(round(spec.inlet_offset / (2 * delta)))
    n = spec.n_sections
    pitch_c = cw + lw

    nx = 2 * margin + n * cw + (n - 1) * lw
    ny = 2 * margin + seclen
    nz = 3 * sigma

    path_cells = n * cw * seclen + (n - 1) * lw * cw
    n_fluid = nx * ny * 2 * sigma + path_cells * sigma
    if n_fluid > budget:
        raise BudgetError(n_fluid, budget)

    cell_type = np.zeros((nx, ny, nz), dtype=np.uint8)
    path = np.zeros((nx, ny), dtype=bool)
    for s in range(n):
        x0 = margin + s * pitch_c
        path[x0:x0 + cw, margin:margin + seclen] = True
    for s in range(n - 1):
        x0 = margin + s * pitch_c
        if s % 2 == 0:      # turn at the high-y end
            path[x0:x0 + 2 * cw + lw, margin + seclen - cw:margin + seclen] = True
        else:               # turn at the low-y end
            path[x0:x0 + 2 * cw + lw, margin:margin + cw] = True

    cell_type[:, :, 0:sigma][path] = CHANNEL
    cell_type[:, :, sigma:2 * sigma] = MPS
    cell_type[:, :, 2 * sigma:3 * sigma] = CL

    # z spacings per layer
    if wall_graded:
        dz_ch = _graded_layer(spec.channel_depth, sigma)
    else:
        dz_ch = np.full(sigma, spec.channel_depth / sigma)
    dz = np.concatenate([
        dz_ch,
        np.full(sigma, spec.mps_thickness / sigma),
        np.full(sigma, spec.cl_thickness / sigma),
    ])

    # ports: section 0 always enters at the low-y end (its first turn is at
    # high y); the last section exits at low y for even n, high y for odd n.
    inlet = Port(j_face=margin, i_lo=margin, i_hi=margin + cw,
                 k_lo=0, k_hi=sigma, fluid_side=+1)
    xo = margin + (n - 1) * pitch_c
    if n % 2 == 0:
        outlet = Port(j_face=margin, i_lo=xo, i_hi=xo + cw,
                      k_lo=0, k_hi=sigma, fluid_side=+1)
    else:
        outlet = Port(j_face=margin + seclen, i_lo=xo, i_hi=xo + cw,
                      k_lo=0, k_hi=sigma, fluid_side=-1)

    return Mesh(spec, sigma, wall_graded, cell_type, delta, delta, dz,
                inlet, outlet, (margin, margin))


def build_box_mesh(width, length, depth, nx, ny, nz, region=CHANNEL,
                   dz_grading=None):
    """Rectangular box mesh for verification problems (duct, porous slab).

    Flow axis is y: the inlet port spans the j = 0 face plane and the
    outlet the j = ny plane. All cells carry ``region``. ``dz_grading``
    optionally supplies explicit z spacings (must sum to ``depth``).
    """
    for name, v in (("width", width), ("length", length), ("depth", depth)):
        if v <= 0:
            raise ValidationError(f"{name} must be positive")
    cell_type = np.full((nx, ny, nz), region, dtype=np.uint8)
    if dz_grading is not None:
        dz = np.asarray(dz_grading, dtype=float)
        if dz.shape != (nz,) or not math.isclose(float(dz.sum()), depth, rel_tol=1e-9):
            raise ValidationError("dz_grading must have nz entries summing to depth")
    else:
        dz = np.full(nz, depth / nz)
    spec = GeometrySpec(channel_width=width, land_width=width, channel_depth=depth,
                        section_length=length, n_sections=2,
                        mps_thickness=depth, cl_thickness=depth, inlet_offset=width)
    inlet = Port(j_face=0, i_lo=0, i_hi=nx, k_lo=0, k_hi=nz, fluid_side=+1)
    outlet = Port(j_face=ny, i_lo=0, i_hi=nx, k_lo=0, k_hi=nz, fluid_side=-1)
    bounds = {CHANNEL: (nz, nz), MPS: (0, nz), CL: (0, 0)}[region]
    mesh = Mesh(spec, 1, False, cell_type, width / nx, length / ny, dz,
                inlet, outlet, (0, 0), layer_bounds=bounds)
    return mesh

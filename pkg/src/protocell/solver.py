"""Segregated outer iteration and parameter sweeps.

One operating point is solved by cycling (i) closed-form steady coverage
from the current mole fraction, (ii) flow with the mass source implied
by the sink and a density refreshed from the ideal-gas law, (iii)
species transport on that flow. The loop is judged converged on the
response-level scalars (reactant drop, pressure drop, total reaction
rate) rather than raw field norms. The ``alpha`` formulation skips the
coverage step.

``continuation_run`` walks the Q schedule warm-starting each point from
the previous solution. ``parametric_sweep`` evaluates a (k1, k2, Q) grid
with points kept independent (identical results in any order and with
any worker count); per distinct Q a kinetics-free base flow is computed
once and shared as the deterministic initial guess.
"""

from __future__ import annotations

import hashlib
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DivergenceError, ValidationError
from .flow import FlowBC, FlowField, FlowOptions, get_ops, mass_source_from_sink, solve_flow
from .geometry import CL, GeometrySpec, Mesh, build_geometry, generate_mesh
from .kinetics import KineticsParams, coverage_steady_state
from .properties import MaterialParams, mixture_density, standard_density
from .species import SpeciesOptions, SpeciesState, solve_species_alpha, solve_species_beta

log = logging.getLogger("protocell")

CCM_TO_M3S = 1e-6 / 60.0


@dataclass(frozen=True)
class SolverOptions:
    outer_tol: float = 1e-5
    max_outer: int = 200
    divergence_window: int = 10
    flow: FlowOptions = field(default_factory=FlowOptions)
    species: SpeciesOptions = field(default_factory=SpeciesOptions)


@dataclass(frozen=True)
class ModelConfig:
    formulation: str = "beta"                  # "alpha" | "beta"
    geometry_kind: str = "reduced"
    geometry: GeometrySpec | None = None       # overrides build_geometry(kind)
    sigma: int = 2
    wall_graded: bool = False
    cell_budget: int | None = None
    materials: MaterialParams = field(default_factory=MaterialParams)
    kinetics: KineticsParams = field(default_factory=KineticsParams)
    chi_in: float = 1200e-6                    # beta inlet mole fraction
    c_in: float = 1200e-6                      # alpha inlet concentration [mol/m3]
    p_out: float = 7240.0                      # relative outlet pressure [Pa]
    q_ccm: tuple = (200.0, 250.0, 300.0, 350.0, 400.0, 450.0)
    options: SolverOptions = field(default_factory=SolverOptions)

    def __post_init__(self):
        if self.formulation not in ("alpha", "beta"):
            raise ValidationError(f"formulation must be alpha or beta, got {self.formulation!r}")
        q = tuple(float(v) for v in self.q_ccm)
        if len(q) == 0:
            raise ValidationError("Q schedule must not be empty")
        if any(b <= a for a, b in zip(q, q[1:])):
            raise ValidationError("Q schedule must be strictly increasing")
        object.__setattr__(self, "q_ccm", q)
        if self.options.outer_tol <= 0:
            raise ValidationError("outer tolerance must be positive")

    def spec(self) -> GeometrySpec:
        return self.geometry if self.geometry is not None else build_geometry(self.geometry_kind)

    def fingerprint(self, q=None, k1=None, k2=None):
        parts = [repr(self)]
        for tag, v in (("Q", q), ("k1", k1), ("k2", k2)):
            if v is not None:
                parts.append(f"{tag}={v!r}")
        return hashlib.sha256("|".join(parts).encode()).hexdigest()[:16]


_MESH_CACHE: dict = {}


def mesh_for(config: ModelConfig) -> Mesh:
    key = (config.spec(), config.sigma, config.wall_graded, config.cell_budget)
    mesh = _MESH_CACHE.get(key)
    if mesh is None:
        mesh = generate_mesh(config.spec(), config.sigma, config.wall_graded,
                             cell_budget=config.cell_budget)
        _MESH_CACHE[key] = mesh
    return mesh


@dataclass
class Solution:
    """Converged coupled state at one (config, Q) point."""

    config: ModelConfig
    q_ccm: float
    mesh: Mesh
    flow: FlowField
    species: SpeciesState
    outer_iterations: int
    converged: bool
    outer_history: list
    fingerprint: str
    total_flow_iterations: int = 0

    @property
    def q_std(self):
        return self.q_ccm * CCM_TO_M3S


def _response_triplet(mesh, flow, species):
    """(dchi, dP, R_total-like) scalars used to judge outer convergence."""
    ops = get_ops(mesh)
    chi_out = float(np.mean(species.chi[ops.outlet.cells]))
    dchi = species.chi_in - chi_out
    p_in = float(np.mean(flow.p[ops.inlet.cells]))
    dp = p_in - float(np.mean(flow.p[ops.outlet.cells]))
    r_tot = float(np.sum(species.r_dec * ops.vol))
    return np.array([dchi, dp, r_tot])


def segregated_solve(config: ModelConfig, q_ccm: float,
                     initial: Solution | None = None,
                     max_outer: int | None = None) -> Solution:
    """Solve one operating point to the outer fixed point.

    Never returns an unconverged Solution: persistent residual growth or
    exhaustion of the outer budget raises DivergenceError carrying the
    history.
    """
    opts = config.options
    mesh = mesh_for(config)
    ops = get_ops(mesh)
    mat = config.materials
    kin = config.kinetics
    bc = FlowBC(q_std=q_ccm * CCM_TO_M3S, p_out=config.p_out)
    n = ops.n_fluid
    cl_mask = ops.region_mask(CL)
    beta = config.formulation == "beta"

    if initial is not None:
        flow = initial.flow
        species = initial.species
        chi = species.chi.copy()
        p_rel = flow.p.copy()
    else:
        flow = None
        species = None
        chi = np.full(n, config.chi_in if beta else config.c_in)
        p_rel = np.full(n, config.p_out)

    prev = None
    history = []
    grow = 0
    best = math.inf
    limit = max_outer if max_outer is not None else opts.max_outer
    total_flow_iters = 0
    converged = False
    it = 0

    for it in range(1, limit + 1):
        if beta:
            omega = species.omega if species is not None else \
                np.full(n, _omega_of_chi(config, chi))
            rho = mixture_density(p_rel + mat.p_ref, mat.temperature, omega,
                                  mat.m_air, mat.m_o3)
            theta = np.where(cl_mask, coverage_steady_state(kin.k1, kin.k2, chi), 0.0)
            from .kinetics import beta_sink, specific_surface_area, site_concentration
            a_v = specific_surface_area(mat.epsilon_cl, mat.r_p)
            gamma_s = site_concentration(kin.gamma_dye, mesh.spec.cl_thickness, a_v)
            sink = beta_sink(theta, chi, a_v, gamma_s, kin.k1, mat.m_o3, kin.c_o3_activity)
            s_m, _ = mass_source_from_sink(mesh, np.where(cl_mask, sink, 0.0))
        else:
            rho = mixture_density(p_rel + mat.p_ref, mat.temperature, 0.0,
                                  mat.m_air, mat.m_o3) * np.ones(n)
            theta = None
            s_m = None

        flow = solve_flow(mesh, mat, bc, mass_source=s_m, rho=rho,
                          initial=flow, options=opts.flow)
        total_flow_iters += flow.iterations

        if beta:
            species = solve_species_beta(mesh, flow, mat, kin, theta=theta,
                                         chi_in=config.chi_in, options=opts.species)
        else:
            species = solve_species_alpha(mesh, flow, mat, kin.k_app,
                                          c_in=config.c_in, options=opts.species)

        chi = species.chi
        p_rel = flow.p
        cur = _response_triplet(mesh, flow, species)
        if prev is not None:
            scale = np.maximum(np.abs(cur), np.abs(prev))
            scale = np.where(scale > 0, scale, 1.0)
            change = float(np.max(np.abs(cur - prev) / scale))
        else:
            change = math.inf
        history.append((it, change, tuple(cur)))
        log.info("outer %d change %.3e flow_iters %d", it, change, flow.iterations)
        if prev is not None and change < opts.outer_tol:
            converged = True
            break
        if change > 2.0 * best and change > 10 * opts.outer_tol:
            grow += 1
            if grow >= opts.divergence_window:
                raise DivergenceError(
                    f"outer iteration diverged at Q={q_ccm} ccm "
                    f"(k1={kin.k1}, k2={kin.k2}); change {change:.3e}", history)
        else:
            grow = 0
        best = min(best, change)
        prev = cur

    if not converged:
        raise DivergenceError(
            f"outer iteration did not converge in {limit} steps at Q={q_ccm} ccm "
            f"(k1={kin.k1}, k2={kin.k2})", history)

    return Solution(config=config, q_ccm=q_ccm, mesh=mesh, flow=flow,
                    species=species, outer_iterations=it, converged=True,
                    outer_history=history,
                    fingerprint=config.fingerprint(q=q_ccm, k1=kin.k1, k2=kin.k2),
                    total_flow_iterations=total_flow_iters)


def _omega_of_chi(config, chi):
    from .properties import mole_to_mass_fraction
    return mole_to_mass_fraction(np.asarray(chi),
                                 config.materials.m_air, config.materials.m_o3)


@dataclass
class ContinuationResult:
    solutions: list            # converged Solutions, in schedule order
    failed_q: float | None
    error: str | None

    @property
    def complete(self):
        return self.failed_q is None


def continuation_run(config: ModelConfig) -> ContinuationResult:
    """Walk the Q schedule, warm-starting each solve from the previous one."""
    sols = []
    prev = None
    for q in config.q_ccm:
        try:
            sol = segregated_solve(config, q, initial=prev)
        except DivergenceError as exc:
            log.error("continuation aborted at Q=%s ccm: %s", q, exc)
            return ContinuationResult(sols, q, str(exc))
        sols.append(sol)
        prev = sol
    return ContinuationResult(sols, None, None)


# ----------------------------------------------------------------------
# parametric sweep

@dataclass(frozen=True)
class SweepPoint:
    k1: float
    k2: float
    q_ccm: float


def _sweep_eval(args):
    config, point, base = args
    cfg = replace(config, kinetics=replace(config.kinetics, k1=point.k1, k2=point.k2),
                  q_ccm=(point.q_ccm,))
    from .response import scalar_responses
    try:
        sol = segregated_solve(cfg, point.q_ccm, initial=base)
        rec = scalar_responses(sol)
        log.info("point k1=%g k2=%g Q=%g: outer %d converged",
                 point.k1, point.k2, point.q_ccm, sol.outer_iterations)
        return point, rec, None
    except DivergenceError as exc:
        log.warning("point k1=%g k2=%g Q=%g: NOT converged (%s)",
                    point.k1, point.k2, point.q_ccm, exc)
        from .response import failed_record
        return point, failed_record(cfg, point.q_ccm, str(exc)), None


def _base_flow_solution(config: ModelConfig, q_ccm: float) -> Solution:
    """Kinetics-free solve at Q used as the shared initial guess for a sweep.

    Deterministic and independent of (k1, k2), so seeding every point with
    it keeps sweep results order- and worker-invariant.
    """
    if config.formulation == "beta":
        cfg = replace(config, kinetics=replace(config.kinetics, k1=0.0, k2=0.0),
                      q_ccm=(q_ccm,))
    else:
        cfg = replace(config, kinetics=replace(config.kinetics, k_app=0.0),
                      q_ccm=(q_ccm,))
    import warnings
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return segregated_solve(cfg, q_ccm)


def parametric_sweep(config: ModelConfig, k1_set, k2_set, q_set, workers: int = 1):
    """Evaluate the (k1, k2, Q) product grid; returns a ResponseTable.

    Failed points appear as explicit non-converged records. Points are
    evaluated independently (warm starts never cross points beyond the
    shared kinetics-free base flow per Q).
    """
    from .response import ResponseTable
    k1_set = list(k1_set)
    k2_set = list(k2_set)
    q_set = list(q_set)
    if not k1_set or not k2_set or not q_set:
        raise ValidationError("sweep sets must be nonempty")
    points = [SweepPoint(k1, k2, q) for k1 in k1_set for k2 in k2_set for q in q_set]

    bases = {q: _base_flow_solution(config, q) for q in sorted(set(q_set))}
    jobs = [(config, p, bases[p.q_ccm]) for p in points]

    if workers <= 1:
        results = [_sweep_eval(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_sweep_eval, jobs, chunksize=1))

    records = [rec for _, rec, _ in results]
    return ResponseTable(records=records, config=config)

"""Grid-convergence toolkit.

Effective refinement spacings, iterative observed order of accuracy,
generalized Richardson extrapolation with a GCI error band, mixed-order
(1-2 and 1-2-3) extrapolation, and the reduced-to-full geometry scaling
fit. Non-monotone series are handled through complex order exponents;
only the real part is used downstream and the result is flagged
oscillatory.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError

DEFAULT_SAFETY_FACTOR = 1.25


@dataclass(frozen=True)
class GridSeries:
    """A response value sampled on a family of meshes.

    ``n_cells`` and ``values`` are ordered coarse-to-fine or fine-to-coarse
    as given; accessors sort fine-first. ``h`` is the effective spacing
    normalized to 1 on the finest mesh.
    """

    n_cells: tuple
    values: tuple
    label: str = ""
    dim: int = 3

    def __post_init__(self):
        if len(self.n_cells) != len(self.values):
            raise ValidationError("n_cells and values must have equal length")
        if len(set(self.n_cells)) != len(self.n_cells):
            raise ValidationError("duplicate cell counts in grid series")

    def fine_first(self):
        order = np.argsort(self.n_cells)[::-1]
        n = np.asarray(self.n_cells, dtype=float)[order]
        f = np.asarray(self.values, dtype=float)[order]
        h = (n[0] / n) ** (1.0 / self.dim)
        return n, h, f

    @property
    def oscillatory(self):
        _, _, f = self.fine_first()
        d = np.diff(f)
        return bool(np.any(d[:-1] * d[1:] < 0.0))


@dataclass(frozen=True)
class ExtrapolationResult:
    method: str                      # GRE | MOE12 | MOE123
    f_extrapolated: float
    f_finest: float
    error_estimate: float            # F_s * |f_extrapolated - f_finest|
    safety_factor: float
    p_real: float | None = None      # GRE only
    p_imag: float | None = None
    oscillatory: bool = False
    coefficients: tuple = ()         # MOE power-series coefficients g1, g2[, g3]
    exact_agreement: bool = False

    @property
    def relative_error_percent(self):
        if self.f_finest == 0.0:
            return float("nan")
        return 100.0 * self.error_estimate / abs(self.f_finest)


def observed_order(h, f, tol=1e-10, max_iter=100, p0=2.0):
    """Observed order of accuracy from three (h, f) samples, finest first.

    Solves eps32/eps21 = r12^p (r23^p - 1)/(r12^p - 1) by fixed-point
    iteration in the exponent, valid for non-constant refinement ratios.
    A negative error ratio (non-monotone triplet) is handled through the
    complex logarithm; the returned order is then complex and the caller
    should treat the series as oscillatory.

    Returns (p, exact_agreement). ``p`` is complex (imag 0 for monotone
    data); ``exact_agreement`` is True when f1 == f2, in which case p is
    undefined and the extrapolate is simply f1.
    """
    h = np.asarray(h, dtype=float)
    f = np.asarray(f, dtype=float)
    if h.shape != (3,) or f.shape != (3,):
        raise ValidationError("observed_order needs exactly three (h, f) points")
    if len(set(h.tolist())) != 3:
        raise ValidationError("h values must be distinct")
    if not (h[0] < h[1] < h[2]):
        raise ValidationError("points must be ordered finest (smallest h) first")
    eps21 = f[1] - f[0]
    eps32 = f[2] - f[1]
    if eps21 == 0.0:
        return complex(p0), True
    r12 = h[1] / h[0]
    r23 = h[2] / h[1]
    beta = complex(eps32 / eps21)
    p = complex(p0)
    log_r12 = np.log(r12)
    for _ in range(max_iter):
        ratio = beta * (r12 ** p - 1.0) / (r23 ** p - 1.0)
        p_new = np.log(ratio) / log_r12   # complex log handles ratio < 0
        if abs(p_new - p) <= tol * max(1.0, abs(p_new)):
            return p_new, False
        p = p_new
    raise DidNotConverge(f"order iteration did not converge within {max_iter} steps (last p = {p})")


class DidNotConverge(RuntimeError):
    pass


def richardson_extrapolate(f1, f2, r12, p):
    """Estimated exact value f1 + (f2 - f1)/(1 - r12^p), finest-grid form."""
    if r12 <= 1.0:
        raise ValidationError("r12 must exceed 1")
    p = float(np.real(p))
    if not np.isfinite(p):
        raise ValidationError("order p must be finite")
    denom = 1.0 - r12 ** p
    if denom == 0.0:
        raise ValidationError("r12**p == 1 makes the extrapolation singular")
    return f1 + (f2 - f1) / denom


def gci(f_extrap, f1, safety_factor=DEFAULT_SAFETY_FACTOR):
    """Grid convergence index F_s * |f_extrap - f1| (an error band, not a sign)."""
    if safety_factor < 1.0:
        raise ValidationError("safety factor must be >= 1")
    return safety_factor * abs(f_extrap - f1)


def gre_extrapolate(series: GridSeries, safety_factor=DEFAULT_SAFETY_FACTOR,
                    tol=1e-10, max_iter=100) -> ExtrapolationResult:
    """Generalized Richardson extrapolation on the three finest members."""
    n, h, f = series.fine_first()
    if len(f) < 3:
        raise ValidationError("GRE needs at least three meshes")
    h3, f3 = h[:3], f[:3]
    p, exact = observed_order(h3, f3, tol=tol, max_iter=max_iter)
    oscill = series.oscillatory or abs(p.imag) > 0.0
    if exact:
        f_bar = f3[0]
        p_out = None
    else:
        f_bar = richardson_extrapolate(f3[0], f3[1], h3[1] / h3[0], p.real)
        p_out = p.real
    return ExtrapolationResult(
        method="GRE",
        f_extrapolated=float(f_bar),
        f_finest=float(f3[0]),
        error_estimate=gci(f_bar, f3[0], safety_factor),
        safety_factor=safety_factor,
        p_real=p_out,
        p_imag=None if exact else abs(p.imag),
        oscillatory=oscill,
        exact_agreement=exact,
    )


def mixed_order_extrapolate(series: GridSeries, orders=(1, 2),
                            safety_factor=DEFAULT_SAFETY_FACTOR) -> ExtrapolationResult:
    """Mixed-order extrapolation fitting f(h) = f_exact + sum_k g_k h^k.

    ``orders`` is (1, 2) for MOE-12 (3 meshes) or (1, 2, 3) for MOE-123
    (4 meshes); the series must supply exactly 1 + len(orders) members.
    """
    orders = tuple(orders)
    if orders not in ((1, 2), (1, 2, 3)):
        raise ValidationError("orders must be (1, 2) or (1, 2, 3)")
    n, h, f = series.fine_first()
    need = 1 + len(orders)
    if len(f) != need:
        raise ValidationError(f"MOE with orders {orders} needs exactly {need} meshes, got {len(f)}")
    if len(set(h.tolist())) != len(h):
        raise ValidationError("duplicated h values make the MOE system singular")
    a = np.column_stack([np.ones_like(h)] + [h ** k for k in orders])
    try:
        coeffs = np.linalg.solve(a, f)
    except np.linalg.LinAlgError as exc:
        raise ValidationError(f"MOE system is singular: {exc}") from exc
    f_bar = float(coeffs[0])
    return ExtrapolationResult(
        method="MOE12" if orders == (1, 2) else "MOE123",
        f_extrapolated=f_bar,
        f_finest=float(f[0]),
        error_estimate=gci(f_bar, f[0], safety_factor),
        safety_factor=safety_factor,
        oscillatory=series.oscillatory,
        coefficients=tuple(float(c) for c in coeffs[1:]),
    )


def geometry_scaling_fit(x, y):
    """Least-squares line y ~ a + b x pairing reduced (x) and full (y) responses.

    Returns (a, b, residual_norm). Needs at least two pairs and spread in x.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.size < 2:
        raise ValidationError("need at least two (x, y) pairs of equal length")
    if np.ptp(x) <= 1e-300 * max(1.0, np.max(np.abs(x))):
        raise ValidationError("x values are degenerate (no spread)")
    a_mat = np.column_stack([np.ones_like(x), x])
    coef, *_ = np.linalg.lstsq(a_mat, y, rcond=None)
    resid = float(np.linalg.norm(a_mat @ coef - y))
    return float(coef[0]), float(coef[1]), resid


def select_meshes(h_sorted_fine_first, method):
    """Index selection policy for a fine-first h array.

    GRE uses the three finest meshes; MOE-12 the finest plus two spanning
    coarse points; MOE-123 four spanning points. Returns indices into the
    fine-first ordering.
    """
    m = len(h_sorted_fine_first)
    if method == "GRE":
        if m < 3:
            raise ValidationError("GRE needs >= 3 meshes")
        return [0, 1, 2]
    if method == "MOE12":
        if m < 3:
            raise ValidationError("MOE-12 needs >= 3 meshes")
        if m == 3:
            return [0, 1, 2]
        return [0, (m - 1 + 1) // 2, m - 1]
    if method == "MOE123":
        if m < 4:
            raise ValidationError("MOE-123 needs >= 4 meshes")
        if m == 4:
            return [0, 1, 2, 3]
        return [0, m // 3, (2 * m) // 3, m - 1]
    raise ValidationError(f"unknown method {method!r}")


@dataclass
class StudyRow:
    variable: str
    q_ccm: float
    method: str
    f_finest: float
    f_extrapolated: float
    p_real: float | None
    p_imag: float | None
    oscillatory: bool
    error_band: float
    relative_error_percent: float


def analyze_series(series: GridSeries, q_ccm, safety_factor=DEFAULT_SAFETY_FACTOR):
    """Apply GRE / MOE-12 / MOE-123 (as arity allows) to one grid series."""
    rows = []
    n, h, f = series.fine_first()
    for method in ("GRE", "MOE12", "MOE123"):
        try:
            idx = select_meshes(h, method)
        except ValidationError:
            continue
        sub = GridSeries(tuple(int(v) for v in n[idx]), tuple(f[idx]),
                         label=series.label, dim=series.dim)
        try:
            if method == "GRE":
                res = gre_extrapolate(sub, safety_factor)
            else:
                res = mixed_order_extrapolate(sub, (1, 2) if method == "MOE12" else (1, 2, 3),
                                              safety_factor)
        except (ValidationError, DidNotConverge):
            continue
        rows.append(StudyRow(
            variable=series.label,
            q_ccm=q_ccm,
            method=method,
            f_finest=res.f_finest,
            f_extrapolated=res.f_extrapolated,
            p_real=res.p_real,
            p_imag=res.p_imag,
            oscillatory=res.oscillatory,
            error_band=res.error_estimate,
            relative_error_percent=res.relative_error_percent,
        ))
    return rows

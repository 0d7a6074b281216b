"""Benchmark problems, the refinement driver and convergence-history output.

The three test cases approximate known Alexandrov solutions on the unit
square.  Each registry entry carries the exact solution with derivatives,
the Monge-Ampere density ``det D2 u`` and the right-hand-side field
``f = 2 sqrt(det D2 u)`` consumed by the regularised operator (the operator
normalises the density as (f/2)^2 in two dimensions).
"""
from __future__ import annotations

import io
from dataclasses import dataclass, field, replace

import numpy as np

from . import envelope as env
from . import estimator as est
from .bfs import (
    BfsSpace,
    FeFunction,
    QuadRule,
    _cell_grid,
    count_free_dofs,
    interpolate_boundary,
    norms_vs_exact,
)
from .geometry import RectMesh, init_uniform, refine
from .hjb import HjbProblem, SolverError, solve

_TINY = 1e-300


@dataclass(frozen=True)
class ExactSolution:
    u: object
    grad: object
    hess: object


@dataclass(frozen=True)
class Experiment:
    """One benchmark: exact solution, data fields and default regularisation."""

    id: int
    name: str
    default_eps: float
    exact: ExactSolution
    f: object  # HJB right-hand side, 2 sqrt(det D2 u)
    ma_density: object  # det D2 u
    g: object
    grad_g: object
    notes: str = ""


def _experiment1() -> Experiment:
    # radial solution (2r)^{3/2}/3 of det D2u = 1/r; density singular at the
    # origin corner, which quadrature points never hit
    def u(x, y):
        return (2.0 * np.hypot(x, y)) ** 1.5 / 3.0

    def grad(x, y):
        r0 = np.hypot(x, y)
        r = np.where(r0 > 0, r0, 1.0)
        c = np.where(r0 > 0, np.sqrt(2.0 / r), 0.0)
        return c * x, c * y

    def hess(x, y):
        r0 = np.hypot(x, y)
        r = np.where(r0 > 0, r0, 1.0)
        a = 1.0 / np.sqrt(2.0 * r)  # radial curvature
        b = np.sqrt(2.0 / r)  # tangential curvature
        r2 = r * r
        zero = r0 <= 0
        return (
            np.where(zero, 0.0, (a * x**2 + b * y**2) / r2),
            np.where(zero, 0.0, (a - b) * x * y / r2),
            np.where(zero, 0.0, (a * y**2 + b * x**2) / r2),
        )

    def density(x, y):
        r0 = np.hypot(x, y)
        return 1.0 / np.where(r0 > 0, r0, _TINY)

    def f(x, y):
        r0 = np.hypot(x, y)
        return 2.0 / np.sqrt(np.where(r0 > 0, r0, _TINY))

    return Experiment(
        1,
        "radial",
        1e-3,
        ExactSolution(u, grad, hess),
        f,
        density,
        u,
        grad,
        notes="H^{5/2-} regularity; f blows up at the origin corner",
    )


def _experiment2() -> Experiment:
    # u = |x - 1/2| is the convex envelope of its boundary data; density 0
    def u(x, y):
        return np.abs(np.asarray(x, dtype=float) - 0.5) + 0.0 * np.asarray(y)

    def grad(x, y):
        x = np.asarray(x, dtype=float)
        return np.sign(x - 0.5), np.zeros_like(x + 0.0 * np.asarray(y))

    def hess(x, y):
        z = np.zeros_like(np.asarray(x, dtype=float) + 0.0 * np.asarray(y))
        return z, z.copy(), z.copy()

    def zero(x, y):
        return np.zeros_like(np.asarray(x, dtype=float) + 0.0 * np.asarray(y))

    return Experiment(
        2,
        "boundary-envelope",
        1e-3,
        ExactSolution(u, grad, hess),
        zero,
        zero,
        u,
        grad,
        notes="piecewise-affine exact solution; kink along x = 1/2",
    )


def _experiment3() -> Experiment:
    # u = -(1/sin(pi x) + 1/sin(pi y))^{-1}; the density pi^4 s^2 t^2 (2 - st)
    # / (s+t)^4 oscillates near the corners and vanishes on the edges
    def _st(x, y):
        return np.sin(np.pi * np.asarray(x, dtype=float)), np.sin(
            np.pi * np.asarray(y, dtype=float)
        )

    def u(x, y):
        s, t = _st(x, y)
        den = np.where(s + t > 0, s + t, 1.0)
        return np.where(s + t > 0, -s * t / den, 0.0)

    def grad(x, y):
        s, t = _st(x, y)
        cx = np.pi * np.cos(np.pi * np.asarray(x, dtype=float))
        cy = np.pi * np.cos(np.pi * np.asarray(y, dtype=float))
        ok = s + t > 0
        den2 = np.where(ok, (s + t) ** 2, 1.0)
        return (
            np.where(ok, -cx * t**2 / den2, 0.0),
            np.where(ok, -cy * s**2 / den2, 0.0),
        )

    def hess(x, y):
        s, t = _st(x, y)
        cx = np.cos(np.pi * np.asarray(x, dtype=float))
        cy = np.cos(np.pi * np.asarray(y, dtype=float))
        p2 = np.pi**2
        ok = s + t > 0
        den = np.where(ok, s + t, 1.0)
        uxx = p2 * s * t**2 / den**2 + 2 * p2 * cx**2 * t**2 / den**3
        uyy = p2 * t * s**2 / den**2 + 2 * p2 * cy**2 * s**2 / den**3
        uxy = -2 * p2 * cx * cy * s * t / den**3
        return np.where(ok, uxx, 0.0), np.where(ok, uxy, 0.0), np.where(ok, uyy, 0.0)

    def density(x, y):
        s, t = _st(x, y)
        den = np.where(s + t > 0, s + t, _TINY)
        return np.pi**4 * s**2 * t**2 * (2.0 - s * t) / den**4

    def f(x, y):
        s, t = _st(x, y)
        den = np.where(s + t > 0, s + t, _TINY)
        return 2.0 * np.pi**2 * s * t * np.sqrt(2.0 - s * t) / den**2

    def zero(x, y):
        return np.zeros_like(np.asarray(x, dtype=float) + 0.0 * np.asarray(y))

    def zgrad(x, y):
        z = np.zeros_like(np.asarray(x, dtype=float) + 0.0 * np.asarray(y))
        return z, z.copy()

    return Experiment(
        3,
        "oscillating-density",
        1e-4,
        ExactSolution(u, grad, hess),
        f,
        density,
        zero,
        zgrad,
        notes="homogeneous boundary data; density oscillates at the corners",
    )


EXPERIMENTS: dict[int, Experiment] = {
    1: _experiment1(),
    2: _experiment2(),
    3: _experiment3(),
}

DAT_COLUMNS = (
    "ndof",
    "hinv",
    "Linferr",
    "LHS",
    "L2error",
    "H1error",
    "H2error",
    "eta",
    "eta2",
    "niter",
)


@dataclass(frozen=True)
class HistoryRow:
    """One refinement step in the paper-compatible 10-column layout.

    ``eta2`` is the certified envelope bound, ``LHS`` the sampled envelope
    error it controls, ``eta`` the companion bound for the regularised
    problem.
    """

    ndof: int
    hinv: float
    Linferr: float
    LHS: float
    L2error: float
    H1error: float
    H2error: float
    eta: float
    eta2: float
    niter: int

    def column(self, name: str) -> float:
        return float(getattr(self, name))


@dataclass(frozen=True)
class RunConfig:
    experiment: int
    mode: str = "uniform"  # or "adaptive"
    eps: float | None = None
    max_ndof: int = 20000
    initial_level: int = 1
    quad_degree: int = 5
    boundary_density: float = 4.0  # boundary subdivisions per boundary edge
    linf_samples: int = 8
    max_iter: int = 50

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ValueError(f"unknown experiment {self.experiment}")
        if self.mode not in ("uniform", "adaptive"):
            raise ValueError(f"mode must be uniform or adaptive, got {self.mode!r}")

    def resolved_eps(self) -> float:
        return EXPERIMENTS[self.experiment].default_eps if self.eps is None else self.eps


class RunAborted(RuntimeError):
    """Solver failure mid-run; carries the rows finished so far."""

    def __init__(self, message: str, rows: list[HistoryRow]):
        super().__init__(message)
        self.rows = rows


@dataclass
class StepData:
    """Everything one refinement step produced (rows plus reusable pieces)."""

    row: HistoryRow
    mesh: RectMesh
    certificate: est.ErrorCertificate
    hjb_certificate: est.ErrorCertificate
    marked: set = field(default_factory=set)


def prolongate(v_h: FeFunction, fine_space: BfsSpace) -> np.ndarray:
    """Coefficients of v_h re-interpolated on a one-step-refined mesh.

    Every fine vertex is a corner, edge midpoint or centre of some coarse
    leaf, so the nodal data comes from a 3x3 lattice evaluation per coarse
    cell.  The mixed derivative may jump across coarse edges; either side is
    fine for a warm start.
    """
    coarse = v_h.space
    cells = np.arange(len(coarse.mesh.cell_ids))
    lattice = _cell_grid(3)
    what = ("N", "Nx", "Ny", "Nxy")
    vals = v_h.on_cells(cells, lattice, what=what, key="prolong-3x3")
    data: dict[tuple[int, int], tuple] = {}
    res = coarse.mesh.res
    for k, cid in enumerate(coarse.mesh.cell_ids):
        level, ix, iy = cid
        step = res >> (level + 1)  # half the cell in mesh-resolution units
        x0, y0 = 2 * ix * step, 2 * iy * step
        for p, (a, b) in enumerate((int(2 * s), int(2 * t)) for s, t in lattice):
            key = (x0 + a * step, y0 + b * step)
            data[key] = (
                vals["N"][k, p], vals["Nx"][k, p], vals["Ny"][k, p], vals["Nxy"][k, p]
            )
    fine_mesh = fine_space.mesh
    scale = fine_mesh.res // res  # fine keys live at a finer resolution
    coeffs = np.empty(fine_space.nfull)
    for vi, (kx, ky) in enumerate(fine_mesh.vertex_keys):
        v, dx, dy, dxy = data[(kx // scale, ky // scale)]
        coeffs[4 * vi : 4 * vi + 4] = (v, dx, dy, dxy)
    return coeffs


def run(config: RunConfig, collect_steps: bool = False):
    """Refinement loop: solve, certify, record, mark, refine until the budget.

    Returns the list of HistoryRow (and the per-step data when requested).
    Each solve after the first starts from the previous solution prolongated
    to the refined mesh.
    """
    exp = EXPERIMENTS[config.experiment]
    eps = config.resolved_eps()
    quad = QuadRule(config.quad_degree)
    problem = HjbProblem(eps, exp.f, exp.g, exp.grad_g)
    mesh = init_uniform(config.initial_level)
    rows: list[HistoryRow] = []
    steps: list[StepData] = []
    prev: FeFunction | None = None
    while True:
        if count_free_dofs(mesh) > config.max_ndof:
            break
        space = BfsSpace(mesh)
        reduction = space.reduction(interpolate_boundary(space, exp.g, exp.grad_g))
        initial = prolongate(prev, space) if prev is not None else None
        try:
            result = solve(
                space,
                problem,
                quad,
                max_iter=config.max_iter,
                reduction=reduction,
                initial=initial,
            )
        except SolverError as exc:
            raise RunAborted(f"solver failed at ndof {reduction.ndof}: {exc}", rows)
        v_h = result.u_h

        samples = env.build_samples(
            mesh, quad, per_edge=max(1, int(np.ceil(config.boundary_density)))
        )
        cells = np.arange(len(mesh.cell_ids))
        fields = v_h.on_cells(
            cells, quad.ref_points, what=("N", "Nxx", "Nxy", "Nyy"),
            key=("quad", quad.degree),
        )
        hessians = (
            fields["Nxx"].ravel(),
            fields["Nxy"].ravel(),
            fields["Nyy"].ravel(),
        )
        values = np.concatenate(
            [fields["N"].ravel(), v_h.value(samples.boundary)]
        )
        hull = env.lower_hull(samples, values)
        contact = env.contact_set(hull, v_h, hessians)
        cert = est.rhs0(v_h, exp.f, exp.g, hull, contact, hessians)
        edge_errors, boundary_err = est.max_boundary_trace_error(v_h, exp.g)
        cert_eps = est.rhs_eps(
            v_h, exp.f, exp.g, eps, samples, hessians, boundary_err=boundary_err
        )

        linf, l2, h1, h2 = norms_vs_exact(v_h, exp.exact, quad, config.linf_samples)
        lhs = _envelope_error(v_h, exp.exact, hull, quad, config.linf_samples)

        row = HistoryRow(
            ndof=reduction.ndof,
            hinv=1.0 / (np.sqrt(2.0) * mesh.max_cell_size()),
            Linferr=linf,
            LHS=lhs,
            L2error=l2,
            H1error=h1,
            H2error=h2,
            eta=cert_eps.rhs0,
            eta2=cert.rhs0,
            niter=result.niter,
        )
        rows.append(row)

        if config.mode == "uniform":
            marked = set(mesh.cell_ids)
        else:
            marked = est.indicators_and_mark(cert, edge_errors, mesh)
            if not marked:  # vanished indicator and boundary error: refine all
                marked = set(mesh.cell_ids)
        if collect_steps:
            steps.append(StepData(row, mesh, cert, cert_eps, marked))
        mesh = refine(mesh, marked)
        prev = v_h
    if collect_steps:
        return rows, steps
    return rows


def _envelope_error(v_h, exact, hull, quad: QuadRule, linf_samples: int) -> float:
    """Sampled sup of |u - envelope| over quadrature points and cell grids."""
    space = v_h.space
    cells = np.arange(len(space.mesh.cell_ids))
    worst = 0.0
    for ref in (quad.ref_points, _cell_grid(linf_samples)):
        pts = space.cell_points(cells, ref).reshape(-1, 2)
        gamma = hull.evaluate(pts)
        worst = max(
            worst, float(np.max(np.abs(exact.u(pts[:, 0], pts[:, 1]) - gamma)))
        )
    return worst


def emit_dat(rows: list[HistoryRow], path) -> None:
    """Whitespace-separated history file, bit-stable across reruns."""
    if not rows:
        raise ValueError("no rows to emit")
    buf = io.StringIO()
    buf.write("\t".join(DAT_COLUMNS) + "\n")
    for row in rows:
        buf.write("   ".join(f"{row.column(c):.16e}" for c in DAT_COLUMNS) + "\n")
    with open(path, "w", newline="\n") as fh:
        fh.write(buf.getvalue())


def read_dat(path) -> list[HistoryRow]:
    rows = []
    with open(path) as fh:
        header = fh.readline().split()
        if tuple(header) != DAT_COLUMNS:
            raise ValueError(f"unexpected header {header}")
        for line in fh:
            vals = [float(tok) for tok in line.split()]
            kw = dict(zip(DAT_COLUMNS, vals))
            kw["ndof"] = int(kw["ndof"])
            kw["niter"] = int(kw["niter"])
            rows.append(HistoryRow(**kw))
    return rows


def rate_fit(rows: list[HistoryRow], column: str, window: int | None = None) -> float:
    """Least-squares slope of log(column) against log(ndof).

    ``window`` keeps only the trailing rows.  Raises on nonpositive values.
    """
    if window is not None:
        rows = rows[-window:]
    if len(rows) < 2:
        raise ValueError("need at least two rows to fit a rate")
    x = np.log([r.ndof for r in rows])
    vals = np.array([r.column(column) for r in rows])
    if np.any(vals <= 0):
        raise ValueError(f"nonpositive values in column {column}")
    y = np.log(vals)
    slope = np.polyfit(x, y, 1)[0]
    return float(slope)


def with_eps(config: RunConfig, eps: float) -> RunConfig:
    return replace(config, eps=eps)

"""Pointwise HJB operator algebra for n = 2 and the Galerkin solver.

The operator is

    F_eps(f; M) = sup { -A:M + f * sqrt(det A) : A symmetric PSD,
                        tr A = 1, eigenvalues of A >= eps }.

Writing mu1 <= mu2 for the eigenvalues of M and putting the weight
t in [eps, 1-eps] on the mu1 eigendirection, the inner problem is the scalar
maximisation of g(t) = -(t*mu1 + (1-t)*mu2) + f*sqrt(t(1-t)).  For f > 0 the
function g is concave with stationary point t = 1/2 + d / (2*sqrt(f^2+d^2)),
d = mu2 - mu1; for f <= 0 the sqrt term is equal at both endpoints, so the
maximum sits at t = 1-eps (or anywhere when d = 0; ties break toward eps).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .bfs import BfsSpace, FeFunction, QuadRule, Reduction, interpolate_boundary


@dataclass(frozen=True)
class SymMat2:
    """Symmetric 2x2 matrix with eigen-decomposition helpers."""

    m11: float
    m12: float
    m22: float

    @property
    def frobenius(self) -> float:
        return float(np.sqrt(self.m11**2 + 2 * self.m12**2 + self.m22**2))

    def eigenvalues(self) -> tuple[float, float]:
        half = 0.5 * (self.m11 + self.m22)
        rad = float(np.hypot(0.5 * (self.m11 - self.m22), self.m12))
        return half - rad, half + rad

    def angle(self) -> float:
        """Angle of the eigenvector belonging to the larger eigenvalue."""
        return 0.5 * float(np.arctan2(2.0 * self.m12, self.m11 - self.m22))

    def det(self) -> float:
        return self.m11 * self.m22 - self.m12**2

    def as_array(self) -> np.ndarray:
        return np.array([[self.m11, self.m12], [self.m12, self.m22]])


@dataclass(frozen=True)
class Policy:
    """Maximising control A = t v1 v1^T + (1-t) v2 v2^T of the inner problem.

    v1 is the unit eigenvector of the smaller eigenvalue of M and t its
    weight, so A places its larger weight on the flat direction of M.
    """

    t: float
    angle: float  # eigenvector angle of the larger eigenvalue of M
    A: SymMat2


@dataclass(frozen=True)
class HjbProblem:
    """Regularised problem data: F_eps(f; x, D^2 u) = 0, u = g on the boundary."""

    eps: float
    f: object  # f(x, y) -> array
    g: object  # g(x, y) -> array
    grad_g: object  # gradient of an extension of g, used tangentially

    def __post_init__(self):
        _check_eps(self.eps)


def _check_eps(eps):
    eps = np.asarray(eps)
    if not (np.all(eps > 0.0) and np.all(eps <= 0.5)):
        raise ValueError("eps must lie in (0, 1/2] for n = 2")


def _eig_batch(m11, m12, m22):
    half = 0.5 * (m11 + m22)
    rad = np.hypot(0.5 * (m11 - m22), m12)
    phi = 0.5 * np.arctan2(2.0 * m12, m11 - m22)
    return half - rad, half + rad, phi


def optimal_weight(eps, fval, mu1, mu2):
    """Argmax weight t on the mu1 direction (arrays welcome)."""
    d = mu2 - mu1
    denom = np.hypot(fval, d)
    interior = 0.5 + d / np.where(denom > 0.0, 2.0 * denom, 1.0)
    return np.where(
        fval > 0.0,
        np.clip(interior, eps, 1.0 - eps),
        np.where(d > 0.0, 1.0 - eps, eps),
    )


def eval_F_batch(eps, fval, m11, m12, m22):
    """Vectorised operator value and policy parameters (eps may be an array).

    Returns (value, t, a11, a12, a22).
    """
    _check_eps(eps)
    fval = np.asarray(fval, dtype=float)
    mu1, mu2, phi = _eig_batch(
        np.asarray(m11, dtype=float),
        np.asarray(m12, dtype=float),
        np.asarray(m22, dtype=float),
    )
    t = optimal_weight(eps, fval, mu1, mu2)
    value = -(t * mu1 + (1.0 - t) * mu2) + fval * np.sqrt(t * (1.0 - t))
    c, s = np.cos(phi), np.sin(phi)  # eigenvector of mu2 is (c, s)
    a11 = t * s * s + (1.0 - t) * c * c
    a22 = t * c * c + (1.0 - t) * s * s
    a12 = (1.0 - 2.0 * t) * c * s
    return value, t, a11, a12, a22


def eval_F(eps: float, fval: float, M: SymMat2) -> tuple[float, Policy]:
    """Operator value and the maximising policy at a single matrix."""
    value, t, a11, a12, a22 = eval_F_batch(eps, fval, M.m11, M.m12, M.m22)
    pol = Policy(float(t), M.angle(), SymMat2(float(a11), float(a12), float(a22)))
    return float(value), pol


def xi_of_batch(eps, m11, m12, m22):
    """Unique root xi of xi -> F_eps(xi; M), vectorised.

    If M is positive definite and the optimal weight mu2/(mu1+mu2) stays in
    [eps, 1-eps] (equivalently eps*mu2 <= (1-eps)*mu1), the regularisation is
    inactive and xi = 2 sqrt(det M).  Otherwise the argmax is pinned at the
    endpoint t = 1-eps and xi = ((1-eps)*mu1 + eps*mu2) / sqrt(eps(1-eps)).
    """
    _check_eps(eps)
    mu1, mu2, _ = _eig_batch(
        np.asarray(m11, dtype=float),
        np.asarray(m12, dtype=float),
        np.asarray(m22, dtype=float),
    )
    inactive = (mu1 > 0.0) & (eps * mu2 <= (1.0 - eps) * mu1)
    with np.errstate(invalid="ignore"):
        xi_in = 2.0 * np.sqrt(np.maximum(mu1 * mu2, 0.0))
    xi_clip = ((1.0 - eps) * mu1 + eps * mu2) / np.sqrt(eps * (1.0 - eps))
    return np.where(inactive, xi_in, xi_clip)


def xi_of(eps: float, M: SymMat2) -> float:
    """Right-hand side value making the operator vanish at Hessian M."""
    return float(xi_of_batch(eps, M.m11, M.m12, M.m22))


# -- Galerkin solver ----------------------------------------------------------


@dataclass
class SolveResult:
    u_h: FeFunction
    niter: int
    residual: float
    converged: bool


class SolverError(RuntimeError):
    """Linearised system is singular or iterates became non-finite."""


class _Assembler:
    """Per-mesh workspace: tabulations, quadrature geometry, COO index maps."""

    def __init__(self, space: BfsSpace, quad: QuadRule):
        self.space = space
        self.quad = quad
        self.groups = space.level_groups()
        self.ref = quad.ref_points
        self.wref = quad.ref_weights
        cells = np.arange(len(space.mesh.cell_ids))
        self.points = space.cell_points(cells, self.ref)  # (nc, nq, 2)
        areas = space.mesh.cell_sizes() ** 2
        self.weights = areas[:, None] * self.wref[None, :]  # (nc, nq)
        dofs = space.cell_dofs
        self.rows = np.repeat(dofs, 16, axis=1).ravel()
        self.cols = np.tile(dofs, (1, 16)).ravel()

    def tab(self, level: int):
        return self.space.tabulation(level, self.ref, key=("quad", self.quad.degree))

    def hessian_of(self, coeffs: np.ndarray):
        """Piecewise Hessian entries at all quadrature points: (nc, nq) each."""
        nc, nq = self.weights.shape
        m11 = np.empty((nc, nq))
        m12 = np.empty((nc, nq))
        m22 = np.empty((nc, nq))
        local = coeffs[self.space.cell_dofs]
        for level, cells in self.groups:
            tab = self.tab(level)
            m11[cells] = local[cells] @ tab["Nxx"].T
            m12[cells] = local[cells] @ tab["Nxy"].T
            m22[cells] = local[cells] @ tab["Nyy"].T
        return m11, m12, m22

    def residual_full(self, value):
        """Assemble r_i = sum_q w * F(x_q) * Lap(phi_i)(x_q) over all cells."""
        r = np.zeros(self.space.nfull)
        wV = self.weights * value
        for level, cells in self.groups:
            tab = self.tab(level)
            lap = tab["Nxx"] + tab["Nyy"]  # (nq, 16)
            contrib = wV[cells] @ lap  # (ncells, 16)
            r += np.bincount(
                self.space.cell_dofs[cells].ravel(),
                weights=contrib.ravel(),
                minlength=self.space.nfull,
            )
        return r

    def linear_system(self, a11, a12, a22, rhs_vals):
        """Matrix of (A:D^2 w, Lap phi) and load vector of (rhs, Lap phi)."""
        nfull = self.space.nfull
        blocks = np.empty((self.weights.shape[0], 16, 16))
        load = np.zeros(nfull)
        for level, cells in self.groups:
            tab = self.tab(level)
            lap = tab["Nxx"] + tab["Nyy"]
            G = (
                a11[cells, :, None] * tab["Nxx"][None, :, :]
                + 2.0 * a12[cells, :, None] * tab["Nxy"][None, :, :]
                + a22[cells, :, None] * tab["Nyy"][None, :, :]
            )  # (nc, nq, 16)
            w = self.weights[cells]
            blocks[cells] = np.einsum("cq,qi,cqj->cij", w, lap, G, optimize=True)
            contrib = (w * rhs_vals[cells]) @ lap
            load += np.bincount(
                self.space.cell_dofs[cells].ravel(),
                weights=contrib.ravel(),
                minlength=nfull,
            )
        K = sp.coo_matrix(
            (blocks.ravel(), (self.rows, self.cols)),
            shape=(nfull, nfull),
        ).tocsr()
        return K, load


def _policy_fields(eps, fvals, m11, m12, m22):
    value, t, a11, a12, a22 = eval_F_batch(eps, fvals, m11, m12, m22)
    rhs = fvals * np.sqrt(t * (1.0 - t))  # f * sqrt(det A)
    return value, a11, a12, a22, rhs


def solve(
    space: BfsSpace,
    problem: HjbProblem,
    quad: QuadRule,
    tol: float | None = None,
    max_iter: int = 50,
    reduction: Reduction | None = None,
    initial: np.ndarray | None = None,
) -> SolveResult:
    """Policy iteration for the discrete problem (F_eps(f; D^2 u_h), Lap v_h) = 0.

    Starting from the eps = 1/2 case (a Poisson problem, A = I/2), each sweep
    freezes the pointwise argmax policy and solves the resulting linear,
    nonsymmetric system by sparse LU.  Iteration stops when the Euclidean norm
    of the reduced residual falls below the tolerance, when the policy reaches
    a fixed point (the residual then sits at its rounding floor), or after
    ``max_iter`` linear solves (flagged, best iterate returned).

    ``initial`` (a full coefficient vector, e.g. a solution prolongated from
    a coarser mesh) replaces the Poisson warm start: only its policy is used,
    so it need not satisfy the boundary conditions.
    """
    eps = problem.eps
    asm = _Assembler(space, quad)
    pts = asm.points.reshape(-1, 2)
    fvals = np.asarray(problem.f(pts[:, 0], pts[:, 1]), dtype=float)
    if fvals.ndim == 0:
        fvals = np.full(pts.shape[0], float(fvals))
    fvals = fvals.reshape(asm.weights.shape)
    if not np.all(np.isfinite(fvals)):
        raise SolverError("right-hand side not finite at quadrature points")
    if reduction is None:
        fixed = interpolate_boundary(space, problem.g, problem.grad_g)
        reduction = space.reduction(fixed)
    red = reduction
    fnorm = float(np.sqrt(np.sum(asm.weights * fvals**2)))
    if tol is None:
        tol = 1e-11 * (1.0 + fnorm)

    def solve_linear(a11, a12, a22, rhs):
        K, load = asm.linear_system(a11, a12, a22, rhs)
        Kr = red.reduce_matrix(K)
        Fr = red.reduce_vector(load - K @ red.offset)
        try:
            lu = spla.splu(Kr.tocsc())
            u_red = lu.solve(Fr)
        except RuntimeError as exc:  # singular factorisation
            raise SolverError(f"linear solve failed: {exc}") from exc
        if not np.all(np.isfinite(u_red)):
            raise SolverError("linear solve produced non-finite values")
        return red.full_vector(u_red)

    def residual_of(coeffs):
        m11, m12, m22 = asm.hessian_of(coeffs)
        value, a11, a12, a22, rhs = _policy_fields(eps, fvals, m11, m12, m22)
        r = red.reduce_vector(asm.residual_full(value))
        return float(np.linalg.norm(r)), (a11, a12, a22, rhs)

    if initial is None:
        ones = np.ones_like(fvals)
        coeffs = solve_linear(0.5 * ones, 0.0 * ones, 0.5 * ones, 0.5 * fvals)
    else:
        _, start_policy = residual_of(np.asarray(initial, dtype=float))
        coeffs = solve_linear(*start_policy)
    niter = 1
    res, policy = residual_of(coeffs)
    best_res, best_coeffs = res, coeffs
    converged = res <= tol
    # below this, a stalled residual is attributed to rounding in the
    # pointwise Hessians rather than to the outer iteration
    floor = 1e-6 * (1.0 + fnorm)
    stall = 0
    while not converged and niter < max_iter:
        new_coeffs = solve_linear(*policy)
        niter += 1
        new_res, new_policy = residual_of(new_coeffs)
        if new_res > res:
            # damped fallback when the full policy step overshoots
            for alpha in (0.5, 0.25, 0.125):
                trial = coeffs + alpha * (new_coeffs - coeffs)
                trial_res, trial_policy = residual_of(trial)
                if trial_res < new_res:
                    new_coeffs, new_res, new_policy = trial, trial_res, trial_policy
                    break
        improved = new_res < 0.5 * res
        policy_fixed = _policy_close(policy, new_policy)
        coeffs, res, policy = new_coeffs, new_res, new_policy
        if res < best_res:
            best_res, best_coeffs = res, coeffs
        if res <= tol or policy_fixed:
            converged = True
            break
        stall = 0 if improved else stall + 1
        if stall >= 2 and res <= floor:
            converged = True  # residual reached its attainable floor
            break

    return SolveResult(FeFunction(space, best_coeffs), niter, best_res, converged)


def _policy_close(p, q) -> bool:
    scale = 1.0 + max(float(np.max(np.abs(a))) for a in q[:3])
    return all(
        float(np.max(np.abs(a - b))) <= 1e-12 * scale for a, b in zip(p[:3], q[:3])
    )

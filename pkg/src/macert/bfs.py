"""Bogner-Fox-Schmit C1 bicubic finite elements on quadtree meshes.

Each regular vertex carries four degrees of freedom: value, d/dx, d/dy and
the mixed derivative d2/dxdy.  The local basis on a cell is the tensor
product of 1D cubic Hermite pairs, scaled by the cell size so that the
coefficients are the physical nodal derivatives.

Hanging vertices are slaved to the two endpoints of their master edge: the
traces of value and normal derivative along a cell edge are cubics in the
edge parameter, so evaluating those cubics (and their edge derivative) at the
midpoint expresses all four slave DOFs as linear combinations of the eight
master DOFs.  This keeps the space C1 across hanging edges by construction.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .geometry import RectMesh

# DOF kinds per vertex
V, DX, DY, DXY = 0, 1, 2, 3
_KIND_EXPONENTS = ((0, 0), (1, 0), (0, 1), (1, 1))  # (x-kind, y-kind)
# local corner order within a cell, matching RectMesh.cell_corners
_CORNERS = ((0, 0), (1, 0), (0, 1), (1, 1))


def _hermite1d(t: np.ndarray) -> np.ndarray:
    """Cubic Hermite basis on [0,1]: shape (2 corners, 2 kinds, 3 derivs, n).

    Index [a, k, d] is the d-th derivative of the function dual to
    (value if k = 0 else slope) at endpoint a.
    """
    t = np.asarray(t, dtype=float)
    out = np.empty((2, 2, 3) + t.shape)
    t2, t3 = t * t, t * t * t
    out[0, 0, 0] = 1 - 3 * t2 + 2 * t3
    out[0, 0, 1] = -6 * t + 6 * t2
    out[0, 0, 2] = -6 + 12 * t
    out[0, 1, 0] = t - 2 * t2 + t3
    out[0, 1, 1] = 1 - 4 * t + 3 * t2
    out[0, 1, 2] = -4 + 6 * t
    out[1, 0, 0] = 3 * t2 - 2 * t3
    out[1, 0, 1] = 6 * t - 6 * t2
    out[1, 0, 2] = 6 - 12 * t
    out[1, 1, 0] = -t2 + t3
    out[1, 1, 1] = -2 * t + 3 * t2
    out[1, 1, 2] = -2 + 6 * t
    return out


def tabulate_basis(h: float, ref_pts: np.ndarray) -> dict[str, np.ndarray]:
    """All 16 basis functions and derivatives at reference points of a cell.

    ``ref_pts`` has shape (n, 2) with coordinates in [0,1]^2; ``h`` is the
    physical cell size.  Returns arrays of shape (n, 16) for keys
    N, Nx, Ny, Nxx, Nxy, Nyy.  Local DOF ordering is 4*corner + kind with
    corners (0,0), (1,0), (0,1), (1,1) and kinds (V, DX, DY, DXY).
    """
    s = np.asarray(ref_pts)[:, 0]
    t = np.asarray(ref_pts)[:, 1]
    X = _hermite1d(s)
    Y = _hermite1d(t)
    n = s.shape[0]
    out = {key: np.empty((n, 16)) for key in ("N", "Nx", "Ny", "Nxx", "Nxy", "Nyy")}
    derivs = {"N": (0, 0), "Nx": (1, 0), "Ny": (0, 1), "Nxx": (2, 0), "Nxy": (1, 1), "Nyy": (0, 2)}
    for c, (a, b) in enumerate(_CORNERS):
        for k, (kx, ky) in enumerate(_KIND_EXPONENTS):
            j = 4 * c + k
            for key, (mx, my) in derivs.items():
                scale = h ** (kx + ky - mx - my)
                out[key][:, j] = scale * X[a, kx, mx] * Y[b, ky, my]
    return out


def shape_eval(cell, point) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Basis values, gradients and Hessians of one cell at a physical point.

    Returns (values (16,), gradients (16, 2), hessians (16, 2, 2)).
    Raises ValueError if the point lies outside the (closed) cell.
    """
    x, y = point
    if not cell.contains(x, y):
        raise ValueError(f"point {point} outside cell")
    ref = np.array([[(x - cell.x0) / cell.hx, (y - cell.y0) / cell.hy]])
    tab = tabulate_basis(cell.hx, ref)
    grads = np.stack([tab["Nx"][0], tab["Ny"][0]], axis=1)
    hess = np.empty((16, 2, 2))
    hess[:, 0, 0] = tab["Nxx"][0]
    hess[:, 0, 1] = hess[:, 1, 0] = tab["Nxy"][0]
    hess[:, 1, 1] = tab["Nyy"][0]
    return tab["N"][0], grads, hess


@dataclass(frozen=True)
class QuadRule:
    """Tensor Gauss-Legendre rule with ``degree`` points per coordinate.

    Exact for bivariate polynomials up to degree 2*degree - 1 per coordinate;
    all points are interior to the cell.
    """

    degree: int = 5

    def __post_init__(self):
        if self.degree < 1:
            raise ValueError("quadrature degree must be >= 1")

    @property
    def ref_points(self) -> np.ndarray:
        nodes, _ = np.polynomial.legendre.leggauss(self.degree)
        x = 0.5 * (nodes + 1.0)
        xx, yy = np.meshgrid(x, x, indexing="ij")
        return np.column_stack([xx.ravel(), yy.ravel()])

    @property
    def ref_weights(self) -> np.ndarray:
        _, w = np.polynomial.legendre.leggauss(self.degree)
        w = 0.5 * w
        return np.outer(w, w).ravel()

    @property
    def npoints(self) -> int:
        return self.degree * self.degree


class BfsSpace:
    """DOF management for the C1 bicubic space on a quadtree mesh."""

    def __init__(self, mesh: RectMesh):
        self.mesh = mesh
        self.nvertices = len(mesh.vertex_keys)
        self.nfull = 4 * self.nvertices
        self.cell_dofs = (4 * mesh.cell_corners[:, :, None] + np.arange(4)).reshape(-1, 16)
        self._slave_rows = self._hanging_constraints()
        self._tab_cache: dict = {}

    # -- hanging-node constraints ------------------------------------------

    def _hanging_constraints(self) -> dict[int, list[tuple[int, float]]]:
        """Linear combinations expressing each slave DOF in master DOFs."""
        rows: dict[int, list[tuple[int, float]]] = {}
        for s, (p, q, axis, h) in self.mesh.hanging.items():
            if axis == 0:  # edge along x: trace in x couples (V,DX), (DY,DXY)
                pairs = ((V, DX), (DY, DXY))
            else:  # edge along y: trace in y couples (V,DY), (DX,DXY)
                pairs = ((V, DY), (DX, DXY))
            for val_k, der_k in pairs:
                vp, dp = 4 * p + val_k, 4 * p + der_k
                vq, dq = 4 * q + val_k, 4 * q + der_k
                # Hermite cubic through (val, der) at both ends, at t = 1/2
                rows[4 * s + val_k] = [
                    (vp, 0.5), (vq, 0.5), (dp, h / 8.0), (dq, -h / 8.0),
                ]
                rows[4 * s + der_k] = [
                    (vp, -1.5 / h), (vq, 1.5 / h), (dp, -0.25), (dq, -0.25),
                ]
        return rows

    # -- reductions ---------------------------------------------------------

    def reduction(self, fixed: dict[int, float]) -> "Reduction":
        """Prolongation from free DOFs to the full vector, with fixed offsets.

        ``fixed`` maps Dirichlet DOFs to their values.  Slave DOFs are expanded
        recursively (a master may itself be a slave on meshes where level jumps
        chain across corners).
        """
        slave = self._slave_rows
        memo: dict[int, tuple[dict[int, float], float]] = {}

        def expand(dof: int) -> tuple[dict[int, float], float]:
            got = memo.get(dof)
            if got is not None:
                return got
            if dof in fixed:
                res = ({}, fixed[dof])
            elif dof in slave:
                combo: dict[int, float] = {}
                const = 0.0
                for m, c in slave[dof]:
                    sub, sub_const = expand(m)
                    const += c * sub_const
                    for g, cg in sub.items():
                        combo[g] = combo.get(g, 0.0) + c * cg
                res = (combo, const)
            else:
                res = ({dof: 1.0}, 0.0)
            memo[dof] = res
            return res

        free = [d for d in range(self.nfull) if d not in fixed and d not in slave]
        col_of = {d: i for i, d in enumerate(free)}
        rows, cols, vals = [], [], []
        offset = np.zeros(self.nfull)
        for dof in range(self.nfull):
            combo, const = expand(dof)
            offset[dof] = const
            for g, c in combo.items():
                rows.append(dof)
                cols.append(col_of[g])
                vals.append(c)
        P = sp.csr_matrix(
            (vals, (rows, cols)), shape=(self.nfull, len(free))
        )
        return Reduction(self, P, offset, np.array(free, dtype=np.int64))

    # -- batched tabulation --------------------------------------------------

    def level_groups(self) -> list[tuple[int, np.ndarray]]:
        """Cell indices grouped by refinement level (cells share size)."""
        levels = np.array([c[0] for c in self.mesh.cell_ids])
        return [(int(L), np.nonzero(levels == L)[0]) for L in np.unique(levels)]

    def tabulation(self, level: int, ref_pts: np.ndarray, key=None):
        """Cached basis tabulation for one cell size at fixed reference points."""
        cache_key = (level, key if key is not None else ref_pts.tobytes())
        tab = self._tab_cache.get(cache_key)
        if tab is None:
            tab = tabulate_basis(0.5**level, ref_pts)
            self._tab_cache[cache_key] = tab
        return tab

    def cell_points(self, cells: np.ndarray, ref_pts: np.ndarray) -> np.ndarray:
        """Physical coordinates of reference points on each cell: (nc, np, 2)."""
        ids = [self.mesh.cell_ids[c] for c in cells]
        h = np.array([0.5 ** c[0] for c in ids])
        orig = np.array([[c[1], c[2]] for c in ids], dtype=float) * h[:, None]
        return orig[:, None, :] + h[:, None, None] * ref_pts[None, :, :]


@dataclass
class Reduction:
    """Affine map full = P @ free + offset induced by constraints and BCs."""

    space: BfsSpace
    P: sp.csr_matrix
    offset: np.ndarray
    free_dofs: np.ndarray

    @property
    def ndof(self) -> int:
        return self.P.shape[1]

    def full_vector(self, u_free: np.ndarray) -> np.ndarray:
        return self.P @ u_free + self.offset

    def reduce_matrix(self, K: sp.spmatrix) -> sp.csr_matrix:
        return (self.P.T @ (K @ self.P)).tocsr()

    def reduce_vector(self, r: np.ndarray) -> np.ndarray:
        return self.P.T @ r


class FeFunction:
    """Member of a BfsSpace, stored through its full coefficient vector."""

    def __init__(self, space: BfsSpace, coeffs: np.ndarray):
        coeffs = np.asarray(coeffs, dtype=float)
        if coeffs.shape != (space.nfull,):
            raise ValueError("coefficient vector has wrong length")
        self.space = space
        self.coeffs = coeffs

    # -- batched evaluation (fast path) --------------------------------------

    def on_cells(self, cells: np.ndarray, ref_pts: np.ndarray, what=("N",), key=None):
        """Evaluate derivatives at shared reference points on many cells.

        Returns a dict mapping each requested key (subset of N, Nx, Ny, Nxx,
        Nxy, Nyy) to an array of shape (ncells, npoints).
        """
        space = self.space
        local = self.coeffs[space.cell_dofs[cells]]  # (nc, 16)
        out = {}
        levels = np.array([space.mesh.cell_ids[c][0] for c in cells])
        for key_name in what:
            out[key_name] = np.empty((len(cells), ref_pts.shape[0]))
        for L in np.unique(levels):
            m = levels == L
            tab = space.tabulation(int(L), ref_pts, key=key)
            for key_name in what:
                out[key_name][m] = local[m] @ tab[key_name].T
        return out

    # -- pointwise evaluation --------------------------------------------------

    def _eval_points(self, pts: np.ndarray, what):
        space = self.space
        mesh = space.mesh
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        cells = np.array([mesh.locate(x, y) for x, y in pts])
        out = {k: np.empty(len(pts)) for k in what}
        for ci in np.unique(cells):
            m = cells == ci
            cid = mesh.cell_ids[ci]
            h = 0.5 ** cid[0]
            ref = (pts[m] - np.array([cid[1] * h, cid[2] * h])) / h
            tab = tabulate_basis(h, ref)
            local = self.coeffs[space.cell_dofs[ci]]
            for k in what:
                out[k][m] = tab[k] @ local
        return out

    def value(self, pts):
        return self._eval_points(pts, ("N",))["N"]

    def gradient(self, pts):
        r = self._eval_points(pts, ("Nx", "Ny"))
        return np.column_stack([r["Nx"], r["Ny"]])

    def hessian(self, pts):
        r = self._eval_points(pts, ("Nxx", "Nxy", "Nyy"))
        return np.column_stack([r["Nxx"], r["Nxy"], r["Nyy"]])


# -- boundary interpolation -----------------------------------------------


def count_free_dofs(mesh: RectMesh) -> int:
    """Free DOFs after boundary interpolation, without building the space.

    Boundary vertices lose value plus one tangential slope (two at the four
    corners); hanging vertices lose all four DOFs to their master edges.
    """
    nb = int(
        np.count_nonzero(
            mesh.vertex_on_left
            | mesh.vertex_on_right
            | mesh.vertex_on_bottom
            | mesh.vertex_on_top
        )
    )
    return 4 * len(mesh.vertex_keys) - 2 * nb - 4 - 4 * len(mesh.hanging)


def interpolate_boundary(space: BfsSpace, g, grad_g) -> dict[int, float]:
    """Fix boundary vertex DOFs from Dirichlet data.

    Values are set everywhere on the boundary; first-derivative DOFs are set
    only in the tangential direction of each boundary edge (both at corners).
    Normal and mixed derivatives stay free.  ``grad_g`` supplies the gradient
    of an extension of g; only its tangential components are used.
    """
    mesh = space.mesh
    xs = mesh.vertex_coords[:, 0]
    ys = mesh.vertex_coords[:, 1]
    on_h = mesh.vertex_on_bottom | mesh.vertex_on_top  # horizontal edges
    on_v = mesh.vertex_on_left | mesh.vertex_on_right
    on_boundary = on_h | on_v
    fixed: dict[int, float] = {}
    idx = np.nonzero(on_boundary)[0]
    if len(idx) == 0:
        return fixed
    gvals = np.broadcast_to(np.asarray(g(xs[idx], ys[idx]), dtype=float), idx.shape)
    gx, gy = grad_g(xs[idx], ys[idx])
    gx = np.broadcast_to(np.asarray(gx, dtype=float), idx.shape)
    gy = np.broadcast_to(np.asarray(gy, dtype=float), idx.shape)
    for k, vi in enumerate(idx):
        fixed[4 * vi + V] = float(gvals[k])
        if on_h[vi]:
            fixed[4 * vi + DX] = float(gx[k])
        if on_v[vi]:
            fixed[4 * vi + DY] = float(gy[k])
    return fixed


# -- norms -------------------------------------------------------------------


def _cell_grid(n: int) -> np.ndarray:
    t = np.linspace(0.0, 1.0, n)
    xx, yy = np.meshgrid(t, t, indexing="ij")
    return np.column_stack([xx.ravel(), yy.ravel()])


def norms_vs_exact(
    v_h: FeFunction,
    exact,
    quad: QuadRule,
    linf_samples: int = 8,
) -> tuple[float, float, float, float]:
    """(Linf, L2, H1, H2) distances between v_h and an exact solution.

    L2/H1/H2 are full Sobolev norms computed by quadrature; Linf is the max
    over the quadrature points plus a uniform per-cell grid with
    ``linf_samples`` points per direction (cell corners included).
    """
    space = v_h.space
    cells = np.arange(len(space.mesh.cell_ids))
    ref = quad.ref_points
    wref = quad.ref_weights
    pts = space.cell_points(cells, ref)
    flat = pts.reshape(-1, 2)
    areas = space.mesh.cell_sizes() ** 2
    w = (areas[:, None] * wref[None, :]).ravel()

    vals = v_h.on_cells(cells, ref, what=("N", "Nx", "Ny", "Nxx", "Nxy", "Nyy"))
    du = vals["N"].ravel() - exact.u(flat[:, 0], flat[:, 1])
    gx, gy = exact.grad(flat[:, 0], flat[:, 1])
    dgx = vals["Nx"].ravel() - gx
    dgy = vals["Ny"].ravel() - gy
    hxx, hxy, hyy = exact.hess(flat[:, 0], flat[:, 1])
    dxx = vals["Nxx"].ravel() - hxx
    dxy = vals["Nxy"].ravel() - hxy
    dyy = vals["Nyy"].ravel() - hyy

    l2sq = float(w @ du**2)
    h1sq = l2sq + float(w @ (dgx**2 + dgy**2))
    h2sq = h1sq + float(w @ (dxx**2 + 2 * dxy**2 + dyy**2))

    linf = float(np.max(np.abs(du))) if du.size else 0.0
    grid = _cell_grid(linf_samples)
    gpts = space.cell_points(cells, grid).reshape(-1, 2)
    gvals = v_h.on_cells(cells, grid, what=("N",), key=("grid", linf_samples))["N"].ravel()
    linf = max(linf, float(np.max(np.abs(gvals - exact.u(gpts[:, 0], gpts[:, 1])))))
    return linf, np.sqrt(l2sq), np.sqrt(h1sq), np.sqrt(h2sq)

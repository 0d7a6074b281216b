"""Guaranteed a posteriori L-infinity bounds and the adaptive marking rule.

For the unit square (n = 2, Alexandrov constant 1, diam = sqrt(2)) and the
interior band Omega_jd = [jd, 1-jd]^2 the certified bound reads

    RHS0 = mu + (1 - 2jd)/2 * ||f - f_h||_{L2(Omega_jd)}
              + 2**(1/4)/2 * sqrt(jd) * ||f - f_h||_{L2(Omega)}

with mu the boundary residual of the convex envelope and
f_h = 2 * chi_contact * sqrt(det D2_pw v_h).  The HJB variant replaces mu by
the boundary trace error of v_h itself and f_h by the exact pointwise
right-hand side xi(D2_pw v_h) of the regularised operator.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bfs import FeFunction
from .envelope import ContactSet, LowerHull, SampleSet, boundary_residual
from .geometry import CellId, RectMesh, min_edge_length
from .hjb import xi_of_batch

SQRT2 = float(np.sqrt(2.0))


@dataclass
class DataError:
    """Pointwise residual f - f_h at the interior samples, with quadrature data."""

    residual: np.ndarray
    f_h: np.ndarray
    weights: np.ndarray
    cell_index: np.ndarray
    dist: np.ndarray  # distance to the boundary of the unit square

    def global_sq(self) -> float:
        return float(np.sum(self.weights * self.residual**2))

    def inner_sq(self, offset: float) -> float:
        m = self.dist >= offset
        return float(np.sum(self.weights[m] * self.residual[m] ** 2))

    def per_cell_sq(self, offset: float, ncells: int):
        wr2 = self.weights * self.residual**2
        total = np.bincount(self.cell_index, weights=wr2, minlength=ncells)
        m = self.dist >= offset
        inner = np.bincount(
            self.cell_index[m], weights=wr2[m], minlength=ncells
        )
        return total, inner


@dataclass
class ErrorCertificate:
    """Certified bound with its localisation data.

    ``mu_safeguarded``/``rhs0_safeguarded`` hold the conservative variant in
    which the sampled boundary maximum is padded by a Lipschitz bound times
    the boundary sample spacing; they stay None unless requested.
    """

    mu: float
    j: int
    delta: float
    data_err_inner: float
    data_err_global: float
    rhs0: float
    per_element_eta: dict[CellId, float]
    sigma: float
    mu_safeguarded: float | None = None
    rhs0_safeguarded: float | None = None


def contact_density(v_h_hessians, contact: ContactSet) -> np.ndarray:
    """f_h = 2 * chi * sqrt(det D2_pw v_h) at the interior samples."""
    m11, m12, m22 = v_h_hessians
    det = np.clip(m11 * m22 - m12**2, 0.0, None)
    return np.where(contact.flags, 2.0 * np.sqrt(det), 0.0)


def _boundary_dist(pts: np.ndarray) -> np.ndarray:
    x, y = pts[:, 0], pts[:, 1]
    return np.minimum(np.minimum(x, 1.0 - x), np.minimum(y, 1.0 - y))


def make_data_error(samples: SampleSet, fvals: np.ndarray, f_h: np.ndarray) -> DataError:
    return DataError(
        residual=fvals - f_h,
        f_h=f_h,
        weights=samples.weights,
        cell_index=samples.cell_index,
        dist=_boundary_dist(samples.interior),
    )


def data_error_norms(
    v_h: FeFunction,
    f,
    contact: ContactSet,
    samples: SampleSet,
    band,
    hessians=None,
) -> tuple[float, float, dict[CellId, tuple[float, float]]]:
    """(inner norm, global norm, per-cell squares) of f - f_h for one band.

    Per-cell squares map each cell id to (||.||^2 on T, ||.||^2 on the band
    part of T); summed over cells they reproduce the two global squares.
    """
    if hessians is None:
        H = v_h.hessian(samples.interior)
        hessians = (H[:, 0], H[:, 1], H[:, 2])
    fvals = np.asarray(f(samples.interior[:, 0], samples.interior[:, 1]), dtype=float)
    data = make_data_error(samples, fvals, contact_density(hessians, contact))
    ncells = len(samples.mesh.cell_ids)
    total, inner = data.per_cell_sq(band.offset, ncells)
    per_cell = {
        cid: (float(total[i]), float(inner[i]))
        for i, cid in enumerate(samples.mesh.cell_ids)
    }
    return float(np.sqrt(inner.sum())), float(np.sqrt(total.sum())), per_cell


def bound_value(mu: float, jd: float, inner: float, glob: float) -> float:
    return mu + 0.5 * (1.0 - 2.0 * jd) * inner + 0.5 * 2.0**0.25 * np.sqrt(jd) * glob


def select_j(mu: float, data: DataError, delta: float) -> int:
    """Smallest j whose bound is not improved by shrinking the band once more.

    Walks j = 0, 1, ... while j*delta < 1/2 and returns the first j with
    RHS0(j+1) > RHS0(j); the sweep reuses a single distance sort.
    """
    order = np.argsort(data.dist, kind="stable")
    wr2 = (data.weights * data.residual**2)[order]
    dist_sorted = data.dist[order]
    suffix = np.concatenate([np.cumsum(wr2[::-1])[::-1], [0.0]])
    total = float(suffix[0])

    def rhs0_at(j: int) -> float:
        k = np.searchsorted(dist_sorted, j * delta, side="left")
        return bound_value(mu, j * delta, np.sqrt(max(suffix[k], 0.0)), np.sqrt(total))

    j = 0
    current = rhs0_at(0)
    while (j + 1) * delta < 0.5:
        nxt = rhs0_at(j + 1)
        if nxt > current:
            return j
        j += 1
        current = nxt
    return j


def _certificate(mu, data: DataError, mesh: RectMesh, j: int | None) -> ErrorCertificate:
    delta = min_edge_length(mesh)
    if j is None:
        j = select_j(mu, data, delta)
    jd = j * delta
    ncells = len(mesh.cell_ids)
    total, inner = data.per_cell_sq(jd, ncells)
    inner_norm = float(np.sqrt(inner.sum()))
    global_norm = float(np.sqrt(total.sum()))
    rhs0_val = bound_value(mu, jd, inner_norm, global_norm)
    eta = {
        cid: float(jd * SQRT2 * total[i] + (1.0 - 2.0 * jd) ** 2 * inner[i])
        for i, cid in enumerate(mesh.cell_ids)
    }
    return ErrorCertificate(
        mu=float(mu),
        j=int(j),
        delta=delta,
        data_err_inner=inner_norm,
        data_err_global=global_norm,
        rhs0=float(rhs0_val),
        per_element_eta=eta,
        sigma=float(rhs0_val - mu),
    )


def rhs0(
    v_h: FeFunction,
    f,
    g,
    hull: LowerHull,
    contact: ContactSet,
    hessians=None,
    j: int | None = None,
    lipschitz: float | None = None,
) -> ErrorCertificate:
    """Certificate for ||u - envelope(v_h)||_Linf from envelope outputs.

    The sampled boundary maximum can undershoot the true supremum between
    sample points; passing a Lipschitz constant of g - envelope records the
    padded variant mu + L * (max boundary spacing) alongside.
    """
    samples = hull.samples
    if hessians is None:
        H = v_h.hessian(samples.interior)
        hessians = (H[:, 0], H[:, 1], H[:, 2])
    fvals = np.asarray(f(samples.interior[:, 0], samples.interior[:, 1]), dtype=float)
    data = make_data_error(samples, fvals, contact_density(hessians, contact))
    mu = boundary_residual(hull, g)
    cert = _certificate(mu, data, samples.mesh, j)
    if lipschitz is not None:
        spacing = max(
            float(np.max(np.diff(samples.side_params[s]))) for s in samples.side_params
        )
        # midpoints are sampled too, so the unseen gap is half a segment
        cert.mu_safeguarded = mu + lipschitz * 0.5 * spacing
        cert.rhs0_safeguarded = cert.rhs0 - mu + cert.mu_safeguarded
    return cert


def rhs_eps(
    v_h: FeFunction,
    f,
    g,
    eps: float,
    samples: SampleSet,
    hessians=None,
    boundary_err: float | None = None,
    j: int | None = None,
) -> ErrorCertificate:
    """Certificate for ||u_eps - v_h||_Linf via the exact HJB right-hand side.

    f_h(x) = xi(D2_pw v_h(x)) makes the regularised operator vanish at v_h
    pointwise, so the bound needs no envelope; the boundary term is the trace
    error of v_h itself.
    """
    if hessians is None:
        H = v_h.hessian(samples.interior)
        hessians = (H[:, 0], H[:, 1], H[:, 2])
    fvals = np.asarray(f(samples.interior[:, 0], samples.interior[:, 1]), dtype=float)
    f_h = xi_of_batch(eps, *hessians)
    data = make_data_error(samples, fvals, f_h)
    if boundary_err is None:
        boundary_err = max_boundary_trace_error(v_h, g)[1]
    return _certificate(boundary_err, data, samples.mesh, j)


def max_boundary_trace_error(
    v_h: FeFunction, g, points_per_edge: int = 17
) -> tuple[dict[tuple[int, str], float], float]:
    """Per-boundary-edge and global sup of |g - v_h| on the boundary."""
    mesh = v_h.space.mesh
    t = np.linspace(0.0, 1.0, points_per_edge)
    per_edge: dict[tuple[int, str], float] = {}
    global_max = 0.0
    for ci, side in mesh.boundary_edges:
        (xa, ya), (xb, yb) = mesh.boundary_edge_segment(ci, side)
        pts = np.column_stack([xa + (xb - xa) * t, ya + (yb - ya) * t])
        rect = mesh.rect(mesh.cell_ids[ci])
        ref = (pts - [rect.x0, rect.y0]) / rect.hx
        tab_vals = v_h.on_cells(np.array([ci]), ref, what=("N",))["N"][0]
        gv = np.broadcast_to(np.asarray(g(pts[:, 0], pts[:, 1]), dtype=float), t.shape)
        err = float(np.max(np.abs(gv - tab_vals)))
        per_edge[(ci, side)] = err
        global_max = max(global_max, err)
    return per_edge, global_max


def indicators_and_mark(
    certificate: ErrorCertificate,
    edge_errors: dict[tuple[int, str], float],
    mesh: RectMesh,
) -> set[CellId]:
    """Marked cells: boundary-driven fifth or a minimal Doerfler set.

    When sigma/10 < max |g - u_h| on the boundary, the cells owning the top
    fifth (rounded up) of boundary edges by trace error are marked; otherwise
    cells are sorted by indicator and a minimal-cardinality prefix capturing
    half the total is taken, ties broken by cell id.
    """
    boundary_max = max(edge_errors.values()) if edge_errors else 0.0
    if certificate.sigma / 10.0 < boundary_max:
        edges = sorted(edge_errors.items(), key=lambda kv: (-kv[1], kv[0]))
        k = int(np.ceil(len(edges) / 5.0))
        return {mesh.cell_ids[ci] for (ci, _side), _err in edges[:k]}
    eta = certificate.per_element_eta
    total = sum(eta.values())
    if total <= 0.0:
        return set()
    ranked = sorted(eta.items(), key=lambda kv: (-kv[1], kv[0]))
    marked: set[CellId] = set()
    acc = 0.0
    for cid, val in ranked:
        if acc >= 0.5 * total:
            break
        marked.add(cid)
        acc += val
    return marked

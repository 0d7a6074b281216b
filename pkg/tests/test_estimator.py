import numpy as np
import pytest

from macert.bfs import BfsSpace, FeFunction, QuadRule
from macert.envelope import build_samples, contact_set, envelope_gap, lower_hull
from macert.estimator import (
    DataError,
    bound_value,
    contact_density,
    data_error_norms,
    indicators_and_mark,
    make_data_error,
    max_boundary_trace_error,
    rhs0,
    rhs_eps,
    select_j,
)
from macert.geometry import InteriorBand, init_uniform, min_edge_length
from macert.hjb import SymMat2


def quadratic_fe(mesh, m11=1.0, m12=0.0, m22=1.0):
    space = BfsSpace(mesh)
    xs, ys = mesh.vertex_coords[:, 0], mesh.vertex_coords[:, 1]
    coeffs = np.zeros(space.nfull)
    coeffs[0::4] = 0.5 * (m11 * xs**2 + 2 * m12 * xs * ys + m22 * ys**2)
    coeffs[1::4] = m11 * xs + m12 * ys
    coeffs[2::4] = m12 * xs + m22 * ys
    coeffs[3::4] = m12
    return FeFunction(space, coeffs)


def envelope_of(vh, samples):
    values = np.concatenate([vh.value(samples.interior), vh.value(samples.boundary)])
    return lower_hull(samples, values)


class TestDataErrorNorms:
    def test_exact_quadratic_zero_residual(self):
        mesh = init_uniform(2)
        vh = quadratic_fe(mesh)
        samples = build_samples(mesh, QuadRule(5), 16.0)
        hull = envelope_of(vh, samples)
        contact = contact_set(hull, vh)
        inner, glob, per_cell = data_error_norms(
            vh, lambda x, y: 2.0 + 0 * x, contact, samples,
            InteriorBand(1, min_edge_length(mesh)),
        )
        assert glob <= 1e-11
        assert inner <= glob + 1e-15

    def test_constant_f_zero_vh(self):
        # v_h = 0: contact everywhere with zero density, so the residual is f
        mesh = init_uniform(3)
        space = BfsSpace(mesh)
        vh = FeFunction(space, np.zeros(space.nfull))
        samples = build_samples(mesh, QuadRule(5), 16.0)
        hull = envelope_of(vh, samples)
        contact = contact_set(hull, vh)
        assert contact.flags.all()
        delta = min_edge_length(mesh)
        for j in (0, 1, 2):
            inner, glob, per_cell = data_error_norms(
                vh, lambda x, y: 1.0 + 0 * x, contact, samples, InteriorBand(j, delta)
            )
            assert glob == pytest.approx(1.0, abs=1e-13)
            assert inner == pytest.approx(1.0 - 2 * j * delta, abs=1e-12)
            totals = np.array([v[0] for v in per_cell.values()])
            inners = np.array([v[1] for v in per_cell.values()])
            assert totals.sum() == pytest.approx(glob**2, rel=1e-12)
            assert inners.sum() == pytest.approx(inner**2, rel=1e-12)

    def test_residual_scaling_is_linear(self):
        # scaling f - f_h by lam scales both data terms by exactly lam
        rng = np.random.default_rng(2)
        n = 200
        data = DataError(
            residual=rng.uniform(-1, 1, n),
            f_h=np.zeros(n),
            weights=rng.uniform(0, 1, n),
            cell_index=np.zeros(n, dtype=int),
            dist=rng.uniform(0, 0.5, n),
        )
        lam = 3.7
        scaled = DataError(
            lam * data.residual, data.f_h, data.weights, data.cell_index, data.dist
        )
        for off in (0.0, 0.1, 0.3):
            assert np.sqrt(scaled.inner_sq(off)) == pytest.approx(
                lam * np.sqrt(data.inner_sq(off)), rel=1e-12
            )


class TestSelectJ:
    @staticmethod
    def _data_with_rhs0(values_by_j, delta):
        """Synthetic residual field realising a desired RHS0 trend is hard;
        instead drive select_j through a custom mu and residuals."""
        return None

    def test_first_ascent(self):
        # residual concentrated near the boundary: shrinking the band pays
        # off until the global term's sqrt(jd) growth dominates
        rng = np.random.default_rng(0)
        n = 4000
        dist = rng.uniform(0, 0.5, n)
        residual = np.where(dist < 0.05, 10.0, 0.01)
        data = DataError(residual, np.zeros(n), np.full(n, 1.0 / n),
                         np.zeros(n, dtype=int), dist)
        delta = 1 / 32
        j = select_j(0.0, data, delta)
        vals = [
            bound_value(
                0.0, k * delta,
                np.sqrt(data.inner_sq(k * delta)), np.sqrt(data.global_sq()),
            )
            for k in range(j + 2)
        ]
        assert all(vals[k + 1] <= vals[k] for k in range(j))  # descended to j
        assert vals[j + 1] > vals[j]  # first ascent right after

    def test_monotone_increasing_gives_zero(self):
        # residual mass away from the boundary: any band shrink only adds the
        # global term, so j = 0 is the first minimum
        n = 1000
        data = DataError(
            residual=np.ones(n),
            f_h=np.zeros(n),
            weights=np.full(n, 1.0 / n),
            cell_index=np.zeros(n, dtype=int),
            dist=np.full(n, 0.49),
        )
        assert select_j(0.0, data, 1 / 16) == 0


class TestCertificates:
    def test_quadratic_certificate_small(self):
        mesh = init_uniform(2)
        vh = quadratic_fe(mesh)
        samples = build_samples(mesh, QuadRule(5), 512.0)
        hull = envelope_of(vh, samples)
        contact = contact_set(hull, vh)
        g = lambda x, y: 0.5 * (x**2 + y**2)
        cert = rhs0(vh, lambda x, y: 2.0 + 0 * x, g, hull, contact)
        assert cert.rhs0 <= 1e-6
        assert cert.rhs0 >= cert.mu >= 0.0
        assert cert.sigma == pytest.approx(cert.rhs0 - cert.mu, abs=1e-15)

    def test_certificate_formula(self):
        mesh = init_uniform(3)
        space = BfsSpace(mesh)
        vh = FeFunction(space, np.zeros(space.nfull))
        samples = build_samples(mesh, QuadRule(3), 8.0)
        hull = envelope_of(vh, samples)
        contact = contact_set(hull, vh)
        cert = rhs0(vh, lambda x, y: 1.0 + 0 * x, lambda x, y: 0.0 * x, hull, contact)
        jd = cert.j * cert.delta
        expected = (
            cert.mu
            + 0.5 * (1 - 2 * jd) * cert.data_err_inner
            + 0.5 * 2**0.25 * np.sqrt(jd) * cert.data_err_global
        )
        assert cert.rhs0 == pytest.approx(expected, rel=1e-14)
        # eta consistency: per-cell sums reproduce the two global squares
        eta_sum = sum(cert.per_element_eta.values())
        expected_eta = (
            jd * np.sqrt(2) * cert.data_err_global**2
            + (1 - 2 * jd) ** 2 * cert.data_err_inner**2
        )
        assert eta_sum == pytest.approx(expected_eta, rel=1e-12)

    def test_rhs_eps_constant_hessian(self):
        mesh = init_uniform(2)
        vh = quadratic_fe(mesh)
        samples = build_samples(mesh, QuadRule(4), 16.0)
        H = vh.hessian(samples.interior)
        f_h = contact_density((H[:, 0], H[:, 1], H[:, 2]),
                              contact_set(envelope_of(vh, samples), vh))
        assert np.allclose(f_h, 2.0, atol=1e-10)
        g = lambda x, y: 0.5 * (x**2 + y**2)
        cert = rhs_eps(vh, lambda x, y: 2.0 + 0 * x, g, 0.1, samples)
        # xi(I) = 2 = f everywhere and the trace is exact
        assert cert.rhs0 <= 1e-9

    def test_rhs_eps_matches_bisection_oracle(self):
        from oracles import bisect_xi

        mesh = init_uniform(1)
        space = BfsSpace(mesh)
        rng = np.random.default_rng(4)
        vh = FeFunction(space, rng.standard_normal(space.nfull))
        samples = build_samples(mesh, QuadRule(3), 8.0)
        H = vh.hessian(samples.interior)
        eps = 0.07
        from macert.hjb import xi_of_batch

        f_h = xi_of_batch(eps, H[:, 0], H[:, 1], H[:, 2])
        for k in range(0, len(f_h), 5):
            M = SymMat2(H[k, 0], H[k, 1], H[k, 2])
            assert f_h[k] == pytest.approx(bisect_xi(eps, M), abs=1e-9)
        cert = rhs_eps(vh, lambda x, y: 0.0 * x, lambda x, y: 0.0 * x, eps, samples)
        assert cert.rhs0 >= 0.0

    def test_guaranteed_bound_on_quadratic(self):
        # known exact solution: certified bound dominates the sampled error
        mesh = init_uniform(2)
        vh = quadratic_fe(mesh)
        samples = build_samples(mesh, QuadRule(5), 64.0)
        hull = envelope_of(vh, samples)
        contact = contact_set(hull, vh)
        g = lambda x, y: 0.5 * (x**2 + y**2)
        cert = rhs0(vh, lambda x, y: 2.0 + 0 * x, g, hull, contact)
        pts = np.random.default_rng(1).uniform(0, 1, size=(500, 2))
        lhs = float(np.max(np.abs(g(pts[:, 0], pts[:, 1]) - hull.evaluate(pts))))
        # the certified bound controls the true envelope; the computed hull
        # of the nodal interpolant sits above it by at most the envelope gap
        gap = envelope_gap(vh, samples)
        assert lhs <= cert.rhs0 + gap + 1e-10


class TestMarking:
    def _certificate(self, eta, sigma=0.0, mu=0.0):
        from macert.estimator import ErrorCertificate

        return ErrorCertificate(
            mu=mu, j=0, delta=0.25, data_err_inner=0.0, data_err_global=0.0,
            rhs0=mu + sigma, per_element_eta=eta, sigma=sigma,
        )

    def test_bulk_prefix(self):
        mesh = init_uniform(1)
        ids = mesh.cell_ids
        eta = {ids[0]: 4.0, ids[1]: 3.0, ids[2]: 2.0, ids[3]: 1.0}
        cert = self._certificate(eta, sigma=100.0)
        marked = indicators_and_mark(cert, {(0, "bottom"): 0.0}, mesh)
        assert marked == {ids[0], ids[1]}

    def test_boundary_branch_threshold(self):
        mesh = init_uniform(1)
        eta = {cid: 1.0 for cid in mesh.cell_ids}
        cert = self._certificate(eta, sigma=100.0)
        edges = {e: 20.0 for e in mesh.boundary_edges}
        # sigma/10 = 10 < 20: boundary branch fires
        marked = indicators_and_mark(cert, edges, mesh)
        assert len(marked) >= 1
        # one fifth of 8 edges, rounded up = 2 edges
        edges_sorted = sorted(edges.items(), key=lambda kv: (-kv[1], kv[0]))
        owners = {mesh.cell_ids[ci] for (ci, _s), _v in edges_sorted[:2]}
        assert marked == owners

    def test_one_fifth_of_twenty_edges(self):
        mesh = init_uniform(2)  # 16 boundary edges... use level 2: 4*4 = 16
        edges = {e: float(k) for k, e in enumerate(mesh.boundary_edges)}
        eta = {cid: 0.0 for cid in mesh.cell_ids}
        cert = self._certificate(eta, sigma=0.0)
        marked = indicators_and_mark(cert, edges, mesh)
        k = int(np.ceil(len(edges) / 5))
        ranked = sorted(edges.items(), key=lambda kv: (-kv[1], kv[0]))
        assert marked == {mesh.cell_ids[ci] for (ci, _s), _v in ranked[:k]}

    def test_ties_broken_by_cell_id(self):
        mesh = init_uniform(1)
        ids = mesh.cell_ids
        eta = {cid: 1.0 for cid in ids}
        cert = self._certificate(eta, sigma=1000.0)
        marked = indicators_and_mark(cert, {}, mesh)
        assert marked == set(sorted(ids)[:2])

    def test_zero_everything_marks_nothing(self):
        mesh = init_uniform(1)
        eta = {cid: 0.0 for cid in mesh.cell_ids}
        cert = self._certificate(eta, sigma=0.0)
        assert indicators_and_mark(cert, {(0, "bottom"): 0.0}, mesh) == set()


def test_boundary_trace_error_per_edge():
    mesh = init_uniform(1)
    vh = quadratic_fe(mesh)
    per_edge, worst = max_boundary_trace_error(vh, lambda x, y: 0.5 * (x**2 + y**2))
    assert worst <= 1e-12  # quadratic trace is in the space
    per_edge, worst = max_boundary_trace_error(vh, lambda x, y: 0.0 * x)
    assert worst == pytest.approx(1.0, abs=1e-12)  # |g - v_h| peaks at (1,1)

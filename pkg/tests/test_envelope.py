import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import lp_envelope

from macert.bfs import BfsSpace, FeFunction, QuadRule
from macert.envelope import (
    SampleSet,
    _lower_hull_1d,
    boundary_residual,
    build_samples,
    contact_set,
    envelope_gap,
    lower_hull,
)
from macert.geometry import init_uniform


def grid_samples(n, rng=None, values=None):
    t = np.linspace(0.0, 1.0, n)
    xx, yy = np.meshgrid(t, t, indexing="ij")
    pts = np.column_stack([xx.ravel(), yy.ravel()])
    interior = np.array([p for p in pts if 0 < p[0] < 1 and 0 < p[1] < 1])
    boundary = np.array([p for p in pts if not (0 < p[0] < 1 and 0 < p[1] < 1)])
    if len(interior) == 0:
        interior = np.empty((0, 2))
    side_params = {
        "bottom": t.copy(), "top": t.copy(), "left": t.copy(), "right": t.copy()
    }
    mesh = init_uniform(0)
    return SampleSet(
        mesh,
        interior,
        np.zeros(len(interior), dtype=int),
        np.full(len(interior), 1.0 / max(len(interior), 1)),
        boundary,
        side_params,
    )


class TestBuildSamples:
    def test_counts_single_cell(self):
        samples = build_samples(init_uniform(0), QuadRule(1), 2.0)
        assert samples.n_interior == 1
        assert len(samples.boundary) == 8  # 4 corners + 4 edge midpoints

    def test_corners_present(self):
        samples = build_samples(init_uniform(2), QuadRule(2), 4.0)
        bset = {tuple(p) for p in samples.boundary}
        assert {(0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (1.0, 1.0)} <= bset

    def test_doubling_density_halves_gap(self):
        def max_gap(density):
            samples = build_samples(init_uniform(1), QuadRule(2), density)
            gaps = []
            for side in ("bottom", "top", "left", "right"):
                p = samples.side_params[side]
                gaps.append(np.max(np.diff(p)))
            return max(gaps)

        assert max_gap(8.0) == pytest.approx(0.5 * max_gap(4.0))

    def test_interior_points_are_quadrature_points(self):
        quad = QuadRule(3)
        samples = build_samples(init_uniform(1), quad, 4.0)
        assert samples.n_interior == 4 * quad.npoints
        assert samples.weights.sum() == pytest.approx(1.0, abs=1e-14)


class TestLowerHull:
    def test_affine_values(self):
        samples = grid_samples(4)
        pts = samples.points
        values = 0.3 + 1.2 * pts[:, 0] - 0.7 * pts[:, 1]
        hull = lower_hull(samples, values)
        assert hull.planar
        assert hull.on_hull.all()
        q = np.array([[0.3, 0.4], [0.9, 0.1]])
        assert np.allclose(hull.evaluate(q), 0.3 + 1.2 * q[:, 0] - 0.7 * q[:, 1])

    def test_center_spike_ignored(self):
        samples = grid_samples(3)
        pts = samples.points
        values = np.zeros(len(pts))
        center = np.where((pts[:, 0] == 0.5) & (pts[:, 1] == 0.5))[0]
        values[center] = 1.0
        hull = lower_hull(samples, values)
        assert np.allclose(hull.evaluate(pts), 0.0, atol=1e-12)
        assert not hull.on_hull[center].all()

    def test_paraboloid_matches_lp_oracle(self):
        samples = grid_samples(5)
        pts = samples.points
        values = pts[:, 0] ** 2 + pts[:, 1] ** 2
        hull = lower_hull(samples, values)
        assert hull.on_hull.all()  # strictly convex: every sample on the hull
        rng = np.random.default_rng(42)
        queries = rng.uniform(0, 1, size=(50, 2))
        ours = hull.evaluate(queries)
        for q, v in zip(queries, ours):
            assert v == pytest.approx(lp_envelope(pts, values, q), abs=1e-12)

    @pytest.mark.parametrize("n", range(2, 10))
    def test_random_grids_match_lp_oracle(self, n):
        rng = np.random.default_rng(100 + n)
        samples = grid_samples(n)
        values = rng.uniform(-1, 1, size=len(samples.points))
        hull = lower_hull(samples, values)
        queries = rng.uniform(0, 1, size=(50, 2))
        ours = hull.evaluate(queries)
        for q, v in zip(queries, ours):
            assert v == pytest.approx(lp_envelope(samples.points, values, q), abs=1e-10)

    def test_samples_on_or_above_every_plane(self):
        rng = np.random.default_rng(9)
        samples = grid_samples(6)
        values = rng.uniform(-1, 1, size=len(samples.points))
        hull = lower_hull(samples, values)
        pts = samples.points
        scale = 1.0 + np.max(np.abs(values))
        for a0, a1, b in hull.planes:
            assert np.all(values >= a0 * pts[:, 0] + a1 * pts[:, 1] + b - 1e-12 * scale)

    def test_envelope_below_samples(self):
        rng = np.random.default_rng(10)
        samples = grid_samples(7)
        values = rng.uniform(-1, 1, size=len(samples.points))
        hull = lower_hull(samples, values)
        assert np.all(hull.evaluate(samples.points) <= values + 1e-12)

    def test_collinear_input_rejected(self):
        mesh = init_uniform(0)
        pts = np.column_stack([np.linspace(0, 1, 5), np.linspace(0, 1, 5)])
        samples = SampleSet(
            mesh, pts[:0], np.zeros(0, int), np.zeros(0), pts,
            {"bottom": np.zeros(0), "top": np.zeros(0), "left": np.zeros(0), "right": np.zeros(0)},
        )
        with pytest.raises(ValueError):
            lower_hull(samples, pts[:, 0].copy())


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_convexity_spot_checks(seed):
    rng = np.random.default_rng(seed)
    samples = grid_samples(5)
    values = rng.uniform(-1, 1, size=len(samples.points))
    hull = lower_hull(samples, values)
    x = rng.uniform(0, 1, size=(40, 2))
    y = rng.uniform(0, 1, size=(40, 2))
    lam = rng.uniform(0, 1, size=40)
    mid = lam[:, None] * x + (1 - lam[:, None]) * y
    vals = hull.evaluate(np.vstack([x, y, mid]))
    vx, vy, vm = vals[:40], vals[40:80], vals[80:]
    assert np.all(vm <= lam * vx + (1 - lam) * vy + 1e-12)


class TestContactSet:
    def _quadratic_setup(self, fxx=1.0, fxy=0.0, fyy=1.0):
        mesh = init_uniform(2)
        space = BfsSpace(mesh)
        xs, ys = mesh.vertex_coords[:, 0], mesh.vertex_coords[:, 1]
        coeffs = np.zeros(space.nfull)
        coeffs[0::4] = 0.5 * (fxx * xs**2 + 2 * fxy * xs * ys + fyy * ys**2)
        coeffs[1::4] = fxx * xs + fxy * ys
        coeffs[2::4] = fxy * xs + fyy * ys
        coeffs[3::4] = fxy
        vh = FeFunction(space, coeffs)
        quad = QuadRule(3)
        samples = build_samples(mesh, quad, 16.0)
        values = np.concatenate([vh.value(samples.interior), vh.value(samples.boundary)])
        return vh, samples, lower_hull(samples, values)

    def test_convex_quadratic_all_flagged(self):
        vh, samples, hull = self._quadratic_setup()
        contact = contact_set(hull, vh)
        assert contact.flags.all()

    def test_indefinite_hessian_filtered(self):
        # weakly concave in y: some samples still sit on the lower hull, but
        # the PSD filter must reject every one of them
        vh, samples, hull = self._quadratic_setup(fyy=-0.005)
        contact = contact_set(hull, vh)
        assert contact.on_hull.any()
        assert not contact.psd.any()
        assert not contact.flags.any()

    def test_monge_ampere_density_of_quadratic(self):
        # density of the envelope of a PD quadratic equals det M at samples
        for m11, m12, m22 in ((1.0, 0.0, 1.0), (2.0, 0.5, 1.0), (3.0, -1.0, 2.0)):
            vh, samples, hull = self._quadratic_setup(m11, m12, m22)
            contact = contact_set(hull, vh)
            H = vh.hessian(samples.interior)
            det = H[:, 0] * H[:, 2] - H[:, 1] ** 2
            density = np.where(contact.flags, det, 0.0)
            assert np.allclose(density, m11 * m22 - m12**2, atol=1e-9)

    def test_kink_interpolant_fully_flagged(self):
        # nodal data of |x - 1/2| on the single cell: the trace interpolant
        # is convex with curvature only in x, so every point is contact and
        # the resulting density vanishes identically
        mesh = init_uniform(0)
        space = BfsSpace(mesh)
        xs = mesh.vertex_coords[:, 0]
        coeffs = np.zeros(space.nfull)
        coeffs[0::4] = np.abs(xs - 0.5)
        coeffs[1::4] = np.sign(xs - 0.5)
        vh = FeFunction(space, coeffs)
        samples = build_samples(mesh, QuadRule(3), 8.0)
        values = np.concatenate([vh.value(samples.interior), vh.value(samples.boundary)])
        hull = lower_hull(samples, values)
        contact = contact_set(hull, vh)
        assert contact.flags.all()
        H = vh.hessian(samples.interior)
        det = H[:, 0] * H[:, 2] - H[:, 1] ** 2
        assert np.allclose(det, 0.0, atol=1e-12)

    def test_exact_contact_implies_flag(self):
        # brute-force global test: where v equals its true envelope, the
        # sampled approximation must flag the point as contact
        vh, samples, hull = self._quadratic_setup(2.0, 0.0, 1.0)
        contact = contact_set(hull, vh)
        pts = samples.interior
        vals = vh.value(pts)
        for k in range(0, len(pts), 7):
            exact = lp_envelope(samples.points, np.concatenate(
                [vals, vh.value(samples.boundary)]), pts[k])
            if abs(vals[k] - exact) < 1e-13:
                assert contact.flags[k]


class TestBoundaryResidual:
    def test_zero_for_matching_convex_trace(self):
        mesh = init_uniform(1)
        space = BfsSpace(mesh)
        xs, ys = mesh.vertex_coords[:, 0], mesh.vertex_coords[:, 1]
        coeffs = np.zeros(space.nfull)
        coeffs[0::4] = xs + ys
        coeffs[1::4] = 1.0
        coeffs[2::4] = 1.0
        vh = FeFunction(space, coeffs)
        samples = build_samples(mesh, QuadRule(2), 8.0)
        values = np.concatenate([vh.value(samples.interior), vh.value(samples.boundary)])
        hull = lower_hull(samples, values)
        mu = boundary_residual(hull, lambda x, y: x + y)
        assert mu <= 1e-12

    def test_zero_data_nonnegative_function(self):
        mesh = init_uniform(1)
        space = BfsSpace(mesh)
        xs, ys = mesh.vertex_coords[:, 0], mesh.vertex_coords[:, 1]
        coeffs = np.zeros(space.nfull)
        bump = xs * (1 - xs) * ys * (1 - ys)
        coeffs[0::4] = bump
        coeffs[1::4] = (1 - 2 * xs) * ys * (1 - ys)
        coeffs[2::4] = xs * (1 - xs) * (1 - 2 * ys)
        vh = FeFunction(space, coeffs)
        samples = build_samples(mesh, QuadRule(2), 8.0)
        values = np.concatenate([vh.value(samples.interior), vh.value(samples.boundary)])
        hull = lower_hull(samples, values)
        assert boundary_residual(hull, lambda x, y: 0.0 * x) == pytest.approx(0.0, abs=1e-12)

    def test_quadratic_interp_gap(self):
        # convex quadratic data: mu equals the chord gap of the trace hull
        mesh = init_uniform(1)
        space = BfsSpace(mesh)
        xs, ys = mesh.vertex_coords[:, 0], mesh.vertex_coords[:, 1]
        coeffs = np.zeros(space.nfull)
        coeffs[0::4] = 0.5 * (xs**2 + ys**2)
        coeffs[1::4] = xs
        coeffs[2::4] = ys
        vh = FeFunction(space, coeffs)
        density = 16.0
        samples = build_samples(mesh, QuadRule(3), density)
        values = np.concatenate([vh.value(samples.interior), vh.value(samples.boundary)])
        hull = lower_hull(samples, values)
        mu = boundary_residual(hull, lambda x, y: 0.5 * (x**2 + y**2))
        assert mu == pytest.approx((1 / density) ** 2 / 8, rel=1e-10)


class TestEnvelopeGap:
    def _fe(self, mesh, u, ux, uy, uxy):
        space = BfsSpace(mesh)
        xs, ys = mesh.vertex_coords[:, 0], mesh.vertex_coords[:, 1]
        coeffs = np.zeros(space.nfull)
        coeffs[0::4] = u(xs, ys)
        coeffs[1::4] = ux(xs, ys)
        coeffs[2::4] = uy(xs, ys)
        coeffs[3::4] = uxy(xs, ys)
        return FeFunction(space, coeffs)

    def test_affine_gap_zero(self):
        mesh = init_uniform(1)
        vh = self._fe(
            mesh,
            lambda x, y: 1 + 2 * x - y,
            lambda x, y: 2 * np.ones_like(x),
            lambda x, y: -np.ones_like(x),
            lambda x, y: np.zeros_like(x),
        )
        samples = build_samples(mesh, QuadRule(2), 4.0)
        assert envelope_gap(vh, samples) <= 1e-12

    def test_refining_samples_shrinks_gap(self):
        mesh = init_uniform(1)
        vh = self._fe(
            mesh,
            lambda x, y: np.sin(2 * x + y),
            lambda x, y: 2 * np.cos(2 * x + y),
            lambda x, y: np.cos(2 * x + y),
            lambda x, y: -2 * np.sin(2 * x + y),
        )
        coarse = envelope_gap(vh, build_samples(mesh, QuadRule(2), 4.0))
        fine = envelope_gap(vh, build_samples(mesh, QuadRule(5), 10.0))
        assert fine <= 0.5 * coarse


def test_sandwich_inequality():
    # hull of nodal values stays within the interpolation gap of the function
    mesh = init_uniform(2)
    space = BfsSpace(mesh)
    xs, ys = mesh.vertex_coords[:, 0], mesh.vertex_coords[:, 1]
    coeffs = np.zeros(space.nfull)
    coeffs[0::4] = np.exp(xs) + ys**2
    coeffs[1::4] = np.exp(xs)
    coeffs[2::4] = 2 * ys
    vh = FeFunction(space, coeffs)
    samples = build_samples(mesh, QuadRule(3), 12.0)
    values = np.concatenate([vh.value(samples.interior), vh.value(samples.boundary)])
    hull = lower_hull(samples, values)
    delta = envelope_gap(vh, samples)
    check = samples.points
    assert np.all(hull.evaluate(check) - delta <= vh.value(check) + 1e-10)


def test_lower_hull_1d():
    t = np.linspace(0, 1, 6)
    v = np.array([0.0, 0.5, -0.2, 0.3, -0.1, 0.0])
    ht, hv = _lower_hull_1d(t, v)
    # hull vertices are a subset containing both endpoints
    assert ht[0] == 0.0 and ht[-1] == 1.0
    interp = np.interp(t, ht, hv)
    assert np.all(interp <= v + 1e-15)

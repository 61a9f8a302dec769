import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from scanweave import registration as reg
from scanweave import se3
from scanweave.registration import Correspondences, DegenerateGeometryError, SpatialIndex
from scanweave.se3 import Pose
from helpers import brute_nn, random_pose

small_clouds = arrays(np.float64, st.tuples(st.integers(1, 60), st.just(3)),
                      elements=st.floats(-5, 5, allow_nan=False))
grid_clouds = arrays(np.float64, st.tuples(st.integers(1, 60), st.just(3)),
                     elements=st.integers(-3, 3).map(float))


class TestSpatialIndex:
    def test_single_point(self):
        idx = SpatialIndex([[1.0, 2.0, 3.0]])
        d, i = idx.query([[1.5, 2.0, 3.0]], 3.0)
        assert i[0] == 0 and d[0] == pytest.approx(0.5)

    def test_beyond_d_max(self):
        d, i = SpatialIndex([[0.0, 0.0, 0.0]]).query([[10.0, 0.0, 0.0]], 3.0)
        assert i[0] == -1 and np.isinf(d[0])

    def test_empty_target_rejected(self):
        with pytest.raises(ValueError):
            reg.build_index(np.zeros((0, 3)))

    def test_matches_linear_scan(self, rng):
        pts = rng.normal(size=(100, 3))
        qs = rng.normal(size=(100, 3))
        d, i = SpatialIndex(pts).query(qs)
        for q, dk, ik in zip(qs, d, i):
            bi, bd = brute_nn(pts, q)
            assert ik == bi and dk == pytest.approx(bd, abs=1e-12)

    def test_duplicate_points_resolve_to_lowest_index(self):
        pts = np.array([[5.0, 5, 5], [1.0, 0, 0], [0.0, 0, 0], [1.0, 0, 0], [1.0, 0, 0]])
        _, i = SpatialIndex(pts).query([[1.2, 0, 0], [0.9, 0.0, 0.0]])
        assert list(i) == [1, 1]

    def test_equidistant_points_resolve_to_lowest_index(self):
        pts = np.array([[0.0, 0, 1], [0.0, 1, 0], [1.0, 0, 0], [0.0, 0, -1]])
        _, i = SpatialIndex(pts[::-1]).query([[0.0, 0.0, 0.0]])
        assert i[0] == 0

    @given(grid_clouds, grid_clouds)
    def test_matches_linear_scan_with_ties(self, pts, qs):
        # integer grids force many exact ties
        d, i = SpatialIndex(pts).query(qs, 2.5)
        for q, dk, ik in zip(qs, d, i):
            bi, bd = brute_nn(pts, q)
            if bd < 2.5:
                assert ik == bi and dk == bd
            else:
                assert ik == -1


class TestCorrespondences:
    def test_self_pairs(self, rng):
        pts = rng.normal(size=(50, 3))
        c = reg.find_correspondences(pts, SpatialIndex(pts), 3.0)
        np.testing.assert_array_equal(c.a, c.b)
        np.testing.assert_array_equal(c.dist, 0.0)

    def test_displaced_cloud_has_none(self, rng):
        pts = rng.uniform(-1, 1, (50, 3))
        assert len(reg.find_correspondences(pts + [10.0, 0, 0], SpatialIndex(pts), 3.0)) == 0

    def test_two_point_enumeration(self):
        target = np.array([[0.0, 0, 0], [4.0, 0, 0]])
        source = np.array([[1.0, 0, 0], [3.5, 0, 0], [2.0, 5.0, 0]])
        c = reg.find_correspondences(source, SpatialIndex(target), 3.0)
        np.testing.assert_array_equal(c.a, source[:2])
        np.testing.assert_array_equal(c.b, target[[0, 1]])
        np.testing.assert_allclose(c.dist, [1.0, 0.5])

    def test_strictly_below_d_max(self):
        c = reg.find_correspondences([[3.0, 0, 0]], SpatialIndex([[0.0, 0, 0]]), 3.0)
        assert len(c) == 0

    @given(small_clouds, small_clouds, st.floats(0.1, 5.0))
    def test_matches_brute_force(self, target, source, d_max):
        c = reg.find_correspondences(source, SpatialIndex(target), d_max)
        expect = []
        for q in source:
            bi, bd = brute_nn(target, q)
            if bd < d_max:
                expect.append((q, target[bi]))
        assert len(c) == len(expect)
        for (a, b), ca, cb in zip(expect, c.a, c.b):
            np.testing.assert_array_equal(a, ca)
            np.testing.assert_array_equal(b, cb)


class TestKernel:
    def test_values(self):
        assert reg.robust_kernel(0.0) == 0.0
        assert reg.robust_kernel(1.0, 1 / 3) == pytest.approx(0.375, abs=1e-15)
        assert reg.robust_kernel(1e8, 1 / 3) == pytest.approx(0.5, abs=1e-12)

    def test_weight_at_zero(self):
        assert reg.robust_weight(0.0, 0.25) == pytest.approx(4.0)

    def test_weight_is_derivative_over_e(self):
        e = np.linspace(-4, 4, 1001)
        tau = 1 / 3
        dr = tau * e / (tau + e**2) ** 2  # d/de of (e^2/2)/(tau+e^2)
        np.testing.assert_allclose(reg.robust_weight(e, tau) * e, dr, atol=1e-15)


class TestJacobian:
    def test_matches_finite_differences(self, rng):
        h = 1e-6
        for _ in range(100):
            a = rng.normal(size=3) * 10
            J = reg.residual_jacobian(a)[0]
            num = np.zeros((3, 6))
            for k in range(6):
                d = np.zeros(6)
                d[k] = h
                num[:, k] = (se3.exp(d).apply(a) - se3.exp(-d).apply(a)) / (2 * h)
            assert np.abs(J - num).max() <= 1e-5 * max(1.0, np.abs(num).max())


def weighted_lstsq_step(c: Correspondences, tau):
    """Dense IRLS normal equations solved by least squares."""
    w = reg.robust_weight(c.dist, tau)
    J = reg.residual_jacobian(c.a)
    r = c.a - c.b
    sw = np.sqrt(w)[:, None, None]
    A = (sw * J).reshape(-1, 6)
    y = (np.sqrt(w)[:, None] * r).reshape(-1)
    return -np.linalg.lstsq(A, y, rcond=None)[0]


class TestGaussNewton:
    def test_aligned_gives_zero(self, box_cloud):
        c = reg.find_correspondences(box_cloud, SpatialIndex(box_cloud))
        np.testing.assert_array_equal(reg.gauss_newton_step(c), np.zeros(6))

    def test_pure_translation(self, box_cloud):
        b = box_cloud[:2000]
        a = b - [0.01, 0.0, 0.0]
        c = Correspondences(a, b, np.linalg.norm(a - b, axis=1))
        np.testing.assert_allclose(reg.gauss_newton_step(c), [0.01, 0, 0, 0, 0, 0], atol=1e-6)

    def test_matches_dense_least_squares(self, rng):
        b = rng.normal(size=(300, 3)) * 5
        a = random_pose(rng, 0.5, 0.2).apply(b) + rng.normal(size=b.shape) * 0.05
        c = Correspondences(a, b, np.linalg.norm(a - b, axis=1))
        np.testing.assert_allclose(reg.gauss_newton_step(c), weighted_lstsq_step(c, 1 / 3), atol=1e-10)

    def test_collinear_is_degenerate(self):
        a = np.outer(np.linspace(-5, 5, 50), [1.0, 2.0, 0.5])
        c = Correspondences(a, a + 0.1, np.full(50, np.sqrt(0.03)))
        with pytest.raises(DegenerateGeometryError):
            reg.gauss_newton_step(c)

    def test_empty_is_degenerate(self):
        with pytest.raises(DegenerateGeometryError):
            reg.gauss_newton_step(Correspondences(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0)))

    def test_cost_decreases_on_fixed_pairs(self, box_cloud):
        rng = np.random.default_rng(3)
        idx = SpatialIndex(box_cloud)
        for _ in range(20):
            D = random_pose(rng, 1.0, np.deg2rad(10))
            c = reg.find_correspondences(D.apply(box_cloud), idx)
            xi = reg.gauss_newton_step(c)
            moved = Correspondences(se3.exp(xi).apply(c.a), c.b, None)
            assert reg.robust_cost(moved) <= reg.robust_cost(c)


class TestInformation:
    def test_full_structure_positive_definite(self, box_cloud):
        c = reg.find_correspondences(box_cloud, SpatialIndex(box_cloud))
        assert np.linalg.eigvalsh(reg.information_matrix(c)).min() > 0

    def test_linear_in_pair_count(self, box_cloud):
        c = reg.find_correspondences(box_cloud[:500] + 0.01, SpatialIndex(box_cloud))
        c2 = Correspondences(np.vstack([c.a, c.a]), np.vstack([c.b, c.b]), np.concatenate([c.dist, c.dist]))
        np.testing.assert_allclose(reg.information_matrix(c2), 2 * reg.information_matrix(c), rtol=1e-12)

    def test_matches_sum_of_jacobian_products(self, rng):
        a = rng.normal(size=(40, 3)) * 3
        dist = rng.uniform(0, 2, 40)
        c = Correspondences(a, a, dist)
        J = reg.residual_jacobian(a)
        w = reg.robust_weight(dist, 1 / 3)
        expect = np.einsum("n,nki,nkj->ij", w, J, J)
        np.testing.assert_allclose(reg.information_matrix(c), expect, atol=1e-12)

    def test_collinear_null_space(self):
        # rotation about the line itself is unobservable
        u = np.array([1.0, 2.0, 0.5]) / np.linalg.norm([1.0, 2.0, 0.5])
        a = np.outer(np.linspace(-5, 5, 50), u)
        c = Correspondences(a, a, np.zeros(50))
        H = reg.information_matrix(c)
        np.testing.assert_allclose(H @ np.concatenate([np.zeros(3), u]), 0.0, atol=1e-12)

    def test_planar_point_to_point_still_full_rank(self, rng):
        # unlike point-to-plane, matched points pin in-plane sliding
        a = np.column_stack([rng.uniform(-5, 5, (200, 2)), np.zeros(200)])
        H = reg.information_matrix(Correspondences(a, a, np.zeros(200)))
        assert np.linalg.eigvalsh(H).min() > 1.0

    @given(arrays(np.float64, (30, 3), elements=st.floats(-10, 10)),
           arrays(np.float64, (30,), elements=st.floats(0, 5)))
    def test_symmetric_psd(self, a, dist):
        H = reg.information_matrix(Correspondences(a, a, dist))
        np.testing.assert_allclose(H, H.T, atol=1e-9)
        assert np.linalg.eigvalsh(H).min() >= -1e-9 * max(1.0, np.abs(H).max())


class TestIcp:
    def test_identical_clouds(self, box_cloud):
        res = reg.icp(box_cloud, SpatialIndex(box_cloud))
        assert res.iterations == 1 and res.converged
        assert np.abs(res.delta.as_matrix() - np.eye(4)).max() < 1e-9

    def test_recovers_displacement(self, box_cloud):
        D = Pose.from_rotvec([0, 0, np.deg2rad(3)], [0.5, 0.0, 0.0])
        res = reg.icp(D.apply(box_cloud), SpatialIndex(box_cloud))
        err = res.delta @ D
        assert np.linalg.norm(err.t) < 1e-3 and err.angle() < 1e-3

    def test_aborts_without_overlap(self, rng, box_cloud):
        src = rng.normal(size=(50, 3)) + [200.0, 0, 0]
        assert reg.icp(src, SpatialIndex(box_cloud), min_corrs=200) is None

    def test_aborts_on_small_source(self, box_cloud):
        assert reg.icp(box_cloud[:150], SpatialIndex(box_cloud), min_corrs=200) is None

    def test_information_at_final_pairs(self, box_cloud):
        res = reg.icp(box_cloud, SpatialIndex(box_cloud))
        c = reg.find_correspondences(box_cloud, SpatialIndex(box_cloud))
        np.testing.assert_allclose(res.information, reg.information_matrix(c))
        assert res.final_correspondences == len(box_cloud)

    def test_iteration_cap(self, box_cloud):
        D = Pose.from_rotvec([0, 0, 0.1], [0.8, 0.3, 0.0])
        res = reg.icp(D.apply(box_cloud), SpatialIndex(box_cloud), max_iters=2)
        assert res.iterations == 2 and not res.converged

    def test_neighbour_cache_is_exact(self, box_cloud, monkeypatch):
        class FullQuery:
            def __init__(self, index, d_max, margin):
                self.index, self.d_max = index, d_max

            def __call__(self, pts):
                return reg.find_correspondences(pts, self.index, self.d_max)

        rng = np.random.default_rng(11)
        idx = SpatialIndex(box_cloud)
        src = [random_pose(rng, 1.0, np.deg2rad(10)).apply(box_cloud[::3]) for _ in range(5)]
        cached = [reg.icp(s, idx) for s in src]
        monkeypatch.setattr(reg, "_NeighbourCache", FullQuery)
        full = [reg.icp(s, idx) for s in src]
        for a, b in zip(cached, full):
            assert a.iterations == b.iterations
            np.testing.assert_array_equal(a.delta.as_matrix(), b.delta.as_matrix())
            np.testing.assert_array_equal(a.information, b.information)

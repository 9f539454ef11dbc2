import math

import numpy as np
import pytest

from patchalign.errors import (
    DegenerateFrameError,
    InvalidParameterError,
    PointAtInfinityError,
)
from patchalign.geometry import (
    Homography,
    Keypoint,
    PsiParams,
    homography_to_psi,
    psi_to_homography,
    rescale_homography,
    warp_frame_jacobian_psi,
    warp_keypoint,
    warp_keypoint_frames,
    warp_point,
    warp_point_jacobian_psi,
    warp_points,
)


def translation(tx, ty):
    return Homography(np.array([[1.0, 0, tx], [0, 1.0, ty], [0, 0, 1.0]]))


def random_psi(rng, w=160, h=120, scale=2.0):
    return PsiParams(rng.uniform(-scale, scale, 8), w, h)


class TestPsiParameterization:
    def test_zero_psi_is_identity(self):
        H = psi_to_homography(PsiParams.zero(317, 211))
        np.testing.assert_array_equal(H.h, np.eye(3))

    def test_pure_x_translation_component(self):
        # psi[4] = 6.4 with w = 100, alpha = 64 encodes h13 = 100*6.4/64 = 10
        p = PsiParams([0, 0, 0, 0, 6.4, 0, 0, 0], 100, 100, alpha=64.0)
        H = psi_to_homography(p)
        expected = np.eye(3)
        expected[0, 2] = 10.0
        np.testing.assert_allclose(H.h, expected, atol=1e-15)

    def test_identity_maps_to_zero_vector(self):
        p = homography_to_psi(Homography.identity(), 320, 240)
        np.testing.assert_array_equal(p.psi, np.zeros(8))

    def test_perspective_component_scaling(self):
        # h31 = 0.001 with w = 200, alpha = 64 gives psi[6] = 64*0.001*200 = 12.8
        m = np.eye(3)
        m[2, 0] = 0.001
        p = homography_to_psi(Homography(m), 200, 150, alpha=64.0)
        assert p.psi[6] == pytest.approx(12.8, abs=1e-12)
        assert np.all(p.psi[[0, 1, 2, 3, 4, 5, 7]] == 0.0)

    def test_round_trip_exact(self, rng):
        for _ in range(1000):
            w = int(rng.integers(10, 2000))
            h = int(rng.integers(10, 2000))
            p = PsiParams(rng.uniform(-5, 5, 8), w, h, alpha=float(rng.uniform(1, 200)))
            back = homography_to_psi(psi_to_homography(p), w, h, p.alpha)
            assert np.abs(back.psi - p.psi).max() < 1e-12

    def test_normalization_balances_component_scales(self):
        # realistic viewpoint-change homographies: raw entries span many
        # orders of magnitude, normalized components stay comparable
        fixtures = [
            (
                [1.05, 0.031, 41.0, -0.022, 0.97, -26.0, 1.2e-5, -2.1e-5],
                800,
                600,
            ),
            (
                [0.91, -0.045, -18.0, 0.037, 1.08, 33.0, -3.1e-5, 1.4e-5],
                640,
                480,
            ),
        ]
        for (h11, h12, h13, h21, h22, h23, h31, h32), w, h in fixtures:
            m = np.array([[h11, h12, h13], [h21, h22, h23], [h31, h32, 1.0]])
            raw = np.abs(np.array([h11, h12, h13, h21, h22, h23, h31, h32]))
            assert raw.max() / raw.min() >= 1e5
            psi = np.abs(homography_to_psi(Homography(m), w, h).psi)
            assert psi.max() / psi.min() <= 100.0

    def test_invalid_inputs(self):
        with pytest.raises(InvalidParameterError):
            PsiParams([np.nan] + [0.0] * 7, 10, 10)
        with pytest.raises(InvalidParameterError):
            homography_to_psi(Homography.identity(), -5, 10)
        with pytest.raises(InvalidParameterError):
            homography_to_psi(Homography.identity(), 10, 10, alpha=0.0)


class TestWarpPoint:
    def test_identity(self):
        assert warp_point(Homography.identity(), 10.0, 20.0) == (10.0, 20.0)

    def test_translation(self):
        assert warp_point(translation(5, -3), 10.0, 20.0) == (15.0, 17.0)

    def test_perspective_division(self):
        m = np.eye(3)
        m[2, 0] = 0.01
        xp, yp = warp_point(Homography(m), 10.0, 0.0)
        assert xp == pytest.approx(10.0 / 1.1, rel=1e-12)
        assert yp == 0.0

    def test_point_at_infinity(self):
        m = np.eye(3)
        m[2, 0] = -0.1
        with pytest.raises(PointAtInfinityError):
            warp_point(Homography(m), 10.0, 0.0)

    def test_vectorized_matches_scalar(self, rng):
        m = np.eye(3) + rng.uniform(-0.1, 0.1, (3, 3))
        m[2, 2] = 1.0
        H = Homography(m)
        pts = rng.uniform(-50, 50, (40, 2))
        out, valid = warp_points(H, pts)
        assert valid.all()
        for row, (x, y) in zip(out, pts):
            np.testing.assert_allclose(row, warp_point(H, x, y), rtol=1e-14)


class TestWarpKeypoint:
    def test_identity_fixed_point(self):
        k = Keypoint(12.0, 7.0, 1.25, 3.0)
        kp = warp_keypoint(Homography.identity(), k)
        assert (kp.x, kp.y, kp.phi, kp.s) == (k.x, k.y, k.phi, k.s)

    def test_rotation_by_quarter_turn(self):
        m = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
        kp = warp_keypoint(Homography(m), Keypoint(5.0, 5.0, 0.0, 2.0))
        assert kp.phi == pytest.approx(math.pi / 2, abs=1e-12)
        assert kp.s == pytest.approx(2.0, abs=1e-12)

    def test_uniform_scale(self):
        m = np.diag([2.0, 2.0, 1.0])
        kp = warp_keypoint(Homography(m), Keypoint(3.0, 4.0, 0.3, 1.5))
        assert kp.phi == pytest.approx(0.3, abs=1e-12)
        assert kp.s == pytest.approx(3.0, abs=1e-12)

    def test_affine_matches_endpoint_transport(self, rng):
        # for affine maps the linearized frame transport is exact: compare
        # against warping the frame-vector endpoint directly
        for _ in range(200):
            m = np.eye(3)
            m[:2, :2] += rng.uniform(-0.4, 0.4, (2, 2))
            m[0, 2], m[1, 2] = rng.uniform(-30, 30, 2)
            if abs(np.linalg.det(m[:2, :2])) < 0.1:
                continue
            H = Homography(m)
            k = Keypoint(*rng.uniform(5, 50, 2), rng.uniform(0, 2 * math.pi),
                         rng.uniform(0.5, 8.0))
            kp = warp_keypoint(H, k)
            v0, v1 = k.frame_vector()
            ox, oy = warp_point(H, k.x, k.y)
            ex, ey = warp_point(H, k.x + v0, k.y + v1)
            s_ref = math.hypot(ex - ox, ey - oy)
            phi_ref = math.atan2(ey - oy, ex - ox) % (2 * math.pi)
            assert abs(kp.s - s_ref) / s_ref < 1e-9
            dphi = abs(kp.phi - phi_ref)
            assert min(dphi, 2 * math.pi - dphi) < 1e-9

    def test_degenerate_frame_rejected(self):
        # a singular-direction map collapses a frame aligned with its kernel
        m = np.array([[1.0, 0.0, 0.0], [0.0, 1e-14, 0.0], [0.0, 0.0, 1.0]])
        with pytest.raises((DegenerateFrameError, InvalidParameterError)):
            warp_keypoint(Homography(m), Keypoint(1.0, 1.0, math.pi / 2, 1.0))

    def test_batched_frames_match_scalar(self, rng):
        m = np.eye(3) + rng.uniform(-0.05, 0.05, (3, 3))
        m[2, 0] *= 0.01
        m[2, 1] *= 0.01
        m[2, 2] = 1.0
        H = Homography(m)
        frames = np.column_stack(
            [
                rng.uniform(5, 100, 25),
                rng.uniform(5, 80, 25),
                rng.uniform(0, 2 * math.pi, 25),
                rng.uniform(0.5, 10, 25),
            ]
        )
        out, valid = warp_keypoint_frames(H, frames)
        assert valid.all()
        for row, (x, y, phi, s) in zip(out, frames):
            kp = warp_keypoint(H, Keypoint(x, y, phi, s))
            assert math.hypot(row[2], row[3]) == pytest.approx(kp.s, rel=1e-12)
            assert (math.atan2(row[3], row[2]) % (2 * math.pi)) == pytest.approx(
                kp.phi, abs=1e-12
            )
            assert (row[0], row[1]) == pytest.approx((kp.x, kp.y), rel=1e-12)


class TestJacobians:
    def test_identity_origin_columns(self):
        # at psi = 0 and the origin only the x-translation column is nonzero
        J = warp_point_jacobian_psi(PsiParams.zero(100, 100), 0.0, 0.0)
        np.testing.assert_allclose(J[0, 4], 100.0 / 64.0)
        np.testing.assert_allclose(J[1, 5], 100.0 / 64.0)
        J_zeroed = J.copy()
        J_zeroed[0, 4] = J_zeroed[1, 5] = 0.0
        np.testing.assert_array_equal(J_zeroed, np.zeros((2, 8)))

    def test_coordinate_swap_symmetry(self):
        # swapping (x, y) at identity with square dims permutes the rows and
        # the column roles consistently
        p = PsiParams.zero(100, 100)
        J1 = warp_point_jacobian_psi(p, 13.0, 29.0)
        J2 = warp_point_jacobian_psi(p, 29.0, 13.0)
        perm = [3, 2, 1, 0, 5, 4, 7, 6]
        np.testing.assert_allclose(J2, J1[::-1][:, perm])

    def test_matches_finite_differences(self, rng):
        h = 1e-4
        for _ in range(40):
            p = random_psi(rng)
            x, y = rng.uniform(5, 150), rng.uniform(5, 110)
            J = warp_point_jacobian_psi(p, x, y)
            for k in range(8):
                e = np.zeros(8)
                e[k] = h
                fp = warp_point(psi_to_homography(p.replace_psi(p.psi + e)), x, y)
                fm = warp_point(psi_to_homography(p.replace_psi(p.psi - e)), x, y)
                fd = (np.asarray(fp) - np.asarray(fm)) / (2 * h)
                rel = np.abs(J[:, k] - fd) / (1.0 + np.abs(J[:, k]))
                assert rel.max() < 1e-5

    def test_frame_jacobian_matches_finite_differences(self, rng):
        h = 1e-4
        p = random_psi(rng, scale=1.0)
        frames = np.column_stack(
            [
                rng.uniform(10, 150, 10),
                rng.uniform(10, 110, 10),
                rng.uniform(0, 2 * math.pi, 10),
                rng.uniform(0.5, 8, 10),
            ]
        )
        J = warp_frame_jacobian_psi(p, frames)
        for k in range(8):
            e = np.zeros(8)
            e[k] = h
            wp, _ = warp_keypoint_frames(psi_to_homography(p.replace_psi(p.psi + e)), frames)
            wm, _ = warp_keypoint_frames(psi_to_homography(p.replace_psi(p.psi - e)), frames)
            fd = (wp - wm) / (2 * h)
            rel = np.abs(J[:, :, k] - fd) / (1.0 + np.abs(J[:, :, k]))
            assert rel.max() < 1e-5


class TestRescale:
    def test_identity_is_fixed(self):
        H = rescale_homography(Homography.identity(), 3.0, 0.25)
        np.testing.assert_allclose(H.h, np.eye(3))

    def test_translation_scales(self):
        H = rescale_homography(translation(5, 0), 2.0, 2.0)
        np.testing.assert_allclose(H.h, translation(10, 0).h)

    def test_warp_consistency(self, rng):
        for _ in range(50):
            m = np.eye(3) + rng.uniform(-0.1, 0.1, (3, 3))
            m[2, :2] *= 0.01
            m[2, 2] = 1.0
            H = Homography(m)
            Hs = rescale_homography(H, 2.0, 2.0)
            x, y = rng.uniform(-20, 20, 2)
            xp, yp = warp_point(H, x, y)
            xs, ys = warp_point(Hs, 2 * x, 2 * y)
            assert abs(xs - 2 * xp) < 1e-9 and abs(ys - 2 * yp) < 1e-9

    def test_bad_scales_rejected(self):
        with pytest.raises(InvalidParameterError):
            rescale_homography(Homography.identity(), 0.0, 1.0)


class TestHomographyType:
    def test_requires_unit_corner(self):
        m = np.eye(3)
        m[2, 2] = 2.0
        with pytest.raises(InvalidParameterError):
            Homography(m)

    def test_from_flat_renormalizes(self):
        H = Homography.from_flat([2, 0, 0, 0, 2, 0, 0, 0, 2])
        np.testing.assert_allclose(H.h, np.eye(3))

    def test_singular_rejected(self):
        with pytest.raises(InvalidParameterError):
            Homography(np.array([[1.0, 0, 0], [1.0, 0, 0], [0, 0, 1.0]]))

    def test_inverse_round_trip(self, rng):
        m = np.eye(3) + rng.uniform(-0.2, 0.2, (3, 3))
        m[2, 2] = 1.0
        H = Homography(m)
        np.testing.assert_allclose(H.inverse().inverse().h, H.h, atol=1e-12)


class TestKeypointType:
    def test_phi_normalized(self):
        k = Keypoint(0.0, 0.0, -math.pi / 2, 1.0)
        assert 0.0 <= k.phi < 2 * math.pi
        assert k.phi == pytest.approx(1.5 * math.pi)

    def test_positive_scale_required(self):
        with pytest.raises(InvalidParameterError):
            Keypoint(0.0, 0.0, 0.0, 0.0)

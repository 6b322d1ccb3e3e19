"""Tests for rigid transforms, rotation metrics and parameterizations."""

import numpy as np
import pytest
from scipy.linalg import expm
from scipy.spatial.transform import Rotation

from vemreg.errors import ValidationError
from vemreg.geometry import (
    PsoCoordinates,
    RigidTransform,
    TangentVector,
    exp_at,
    pairwise_rotation_distances,
    rotation_distance,
    rotation_distances,
    sample_uniform_rotations,
    skew,
)

IDENTITY_Q = np.array([1.0, 0.0, 0.0, 0.0])


def z_rotation(degrees: float) -> np.ndarray:
    return RigidTransform.from_rotvec([0.0, 0.0, np.radians(degrees)]).rotation


class TestRigidTransform:
    """Tests for RigidTransform construction and algebra."""

    def test_canonical_sign(self):
        """Quaternions are stored with a nonnegative real part."""
        T = RigidTransform(np.array([-0.5, 0.5, 0.5, 0.5]))
        assert T.rotation[0] >= 0
        np.testing.assert_allclose(T.rotation, [0.5, -0.5, -0.5, -0.5])

    def test_unit_norm_after_construction(self):
        """A scaled quaternion is normalized."""
        T = RigidTransform(np.array([2.0, 0.0, 0.0, 2.0]), [1, 2, 3])
        assert np.linalg.norm(T.rotation) == pytest.approx(1.0, abs=1e-9)

    def test_compose_with_inverse_is_identity(self):
        """T composed with its inverse is the identity."""
        rng = np.random.default_rng(0)
        for _ in range(20):
            T = RigidTransform.from_rotvec(rng.normal(size=3), rng.normal(size=3) * 100)
            I = T.compose(T.inverse())
            assert rotation_distance(I.rotation, IDENTITY_Q) < 1e-6
            assert np.linalg.norm(I.translation) < 1e-9 * 1000

    def test_compose_applies_other_first(self):
        """compose(other) applies other first."""
        A = RigidTransform.from_rotvec([0, 0, np.pi / 2])
        B = RigidTransform(IDENTITY_Q, [10.0, 0.0, 0.0])
        point = np.array([[1.0, 0.0, 0.0]])
        np.testing.assert_allclose(A.compose(B).apply(point), A.apply(B.apply(point)), atol=1e-12)
        np.testing.assert_allclose(A.compose(B).apply(point), [[0.0, 11.0, 0.0]], atol=1e-12)

    def test_matrix_round_trip(self):
        """from_matrix inverts matrix."""
        T = RigidTransform.from_rotvec([0.3, -0.2, 0.9], [5.0, 6.0, 7.0])
        back = RigidTransform.from_matrix(T.matrix)
        np.testing.assert_allclose(back.rotation, T.rotation, atol=1e-12)
        np.testing.assert_allclose(back.translation, T.translation)

    def test_from_matrix_rejects_wrong_shape(self):
        """A 3x3 matrix is not a transform."""
        with pytest.raises(ValidationError):
            RigidTransform.from_matrix(np.eye(3))

    def test_dict_form(self):
        """JSON form has q and t."""
        T = RigidTransform.from_rotvec([0.0, 0.0, 0.1], [1.0, 2.0, 3.0])
        data = T.to_dict()
        assert set(data) == {"q", "t"}
        assert data["t"] == [1.0, 2.0, 3.0]
        np.testing.assert_allclose(RigidTransform.from_dict(data).rotation, T.rotation)

    def test_from_dict_rejects_short_quaternion(self):
        """A 3-element q is rejected."""
        with pytest.raises(ValidationError):
            RigidTransform.from_dict({"q": [1, 0, 0], "t": [0, 0, 0]})

    def test_from_dict_rejects_missing_key(self):
        """Missing t is rejected."""
        with pytest.raises(ValidationError):
            RigidTransform.from_dict({"q": [1, 0, 0, 0]})


class TestRotationDistance:
    """Tests for the bi-invariant rotation metric."""

    def test_identity(self):
        """Identity to identity is 0 degrees."""
        assert rotation_distance(IDENTITY_Q, IDENTITY_Q) == pytest.approx(0.0, abs=1e-9)

    def test_thirty_degrees(self):
        """Identity to a 30 degree z rotation is 30 degrees."""
        assert rotation_distance(IDENTITY_Q, z_rotation(30)) == pytest.approx(30.0, abs=1e-9)

    def test_double_cover(self):
        """q and -q are the same rotation."""
        q = z_rotation(75)
        assert rotation_distance(q, -q) == pytest.approx(0.0, abs=1e-6)

    def test_non_unit_rejected(self):
        """Non-unit quaternions raise a validation error."""
        with pytest.raises(ValidationError):
            rotation_distance(np.array([1.1, 0, 0, 0]), IDENTITY_Q)

    def test_symmetric_and_bounded(self):
        """Distance is symmetric and at most 180 degrees."""
        quats = sample_uniform_rotations(50, seed=1)
        for a, b in zip(quats[:25], quats[25:]):
            d = rotation_distance(a, b)
            assert 0.0 <= d <= 180.0 + 1e-9
            assert d == pytest.approx(rotation_distance(b, a), abs=1e-9)

    def test_triangle_inequality(self):
        """Triangle inequality holds on random triples."""
        quats = sample_uniform_rotations(3000, seed=2).reshape(1000, 3, 4)
        for a, b, c in quats:
            assert rotation_distance(a, c) <= rotation_distance(a, b) + rotation_distance(b, c) + 1e-6

    def test_bi_invariance(self):
        """Common left or right rotations leave the distance unchanged."""
        quats = sample_uniform_rotations(30, seed=3)
        for a, b, q in quats.reshape(10, 3, 4):
            A, B, Q = (RigidTransform(x) for x in (a, b, q))
            base = rotation_distance(a, b)
            left = rotation_distance(Q.compose(A).rotation, Q.compose(B).rotation)
            right = rotation_distance(A.compose(Q).rotation, B.compose(Q).rotation)
            assert left == pytest.approx(base, abs=1e-6)
            assert right == pytest.approx(base, abs=1e-6)

    def test_vectorized_forms_agree(self):
        """Batched distances match the scalar metric."""
        quats = sample_uniform_rotations(8, seed=4)
        matrix = pairwise_rotation_distances(quats, quats)
        row = rotation_distances(quats[0], quats)
        for j in range(8):
            expected = rotation_distance(quats[0], quats[j])
            assert matrix[0, j] == pytest.approx(expected, abs=1e-5)
            assert row[j] == pytest.approx(expected, abs=1e-5)


class TestExpAt:
    """Tests for the tangent-space update."""

    def test_zero_returns_same_transform(self):
        """A zero step returns T itself."""
        T = RigidTransform.from_rotvec([0.1, 0.2, 0.3], [4, 5, 6])
        assert exp_at(T, TangentVector.zero()) is T

    def test_quarter_turn_about_z(self):
        """u = (0, 0, pi/2) at identity is a 90 degree z rotation."""
        T = exp_at(RigidTransform.identity(), [0, 0, np.pi / 2, 0, 0, 0])
        np.testing.assert_allclose(T.rotation_matrix, [[0, -1, 0], [1, 0, 0], [0, 0, 1]], atol=1e-12)

    def test_matches_matrix_exponential(self):
        """Rotation is expm([u]x) R and translation t + v."""
        rng = np.random.default_rng(5)
        for _ in range(20):
            T = RigidTransform.from_rotvec(rng.normal(size=3), rng.normal(size=3) * 100)
            m = rng.normal(size=6) * 0.05
            moved = exp_at(T, m)
            np.testing.assert_allclose(moved.rotation_matrix, expm(skew(m[:3])) @ T.rotation_matrix, atol=1e-8)
            np.testing.assert_allclose(moved.translation, T.translation + m[3:], atol=1e-12)

    def test_translation_only(self):
        """u = 0 leaves the rotation unchanged."""
        T = RigidTransform.from_rotvec([0.4, 0.0, 0.0])
        moved = exp_at(T, [0, 0, 0, 1, 2, 3])
        np.testing.assert_allclose(moved.rotation, T.rotation, atol=1e-12)
        np.testing.assert_allclose(moved.translation, [1, 2, 3])


class TestUniformRotations:
    """Tests for Haar-uniform rotation sampling."""

    def test_count_and_unit_norm(self):
        """1600 samples, all unit quaternions with w >= 0."""
        quats = sample_uniform_rotations(1600, seed=0)
        assert quats.shape == (1600, 4)
        np.testing.assert_allclose(np.linalg.norm(quats, axis=1), 1.0, atol=1e-12)
        assert np.all(quats[:, 0] >= 0)

    def test_deterministic(self):
        """Same seed, same sequence."""
        np.testing.assert_array_equal(sample_uniform_rotations(10, 7), sample_uniform_rotations(10, 7))

    def test_mean_angle_matches_haar_measure(self):
        """Mean angle to identity is about 126.5 degrees."""
        quats = sample_uniform_rotations(100_000, seed=11)
        angles = np.degrees(Rotation.from_quat(quats[:, [1, 2, 3, 0]]).magnitude())
        assert angles.mean() == pytest.approx(126.5, abs=1.0)

    def test_rejects_zero_count(self):
        """n must be at least 1."""
        with pytest.raises(ValidationError):
            sample_uniform_rotations(0, seed=0)


class TestPsoCoordinates:
    """Tests for the quaternion-vector chart used by regular particles."""

    def test_round_trip(self):
        """Transform to chart and back is the identity map."""
        for q in sample_uniform_rotations(50, seed=6):
            T = RigidTransform(q, [1.0, -2.0, 3.0])
            back = PsoCoordinates.from_transform(T).to_transform()
            np.testing.assert_allclose(back.rotation, T.rotation, atol=1e-9)
            np.testing.assert_allclose(back.translation, T.translation)

    def test_renormalizes_outside_ball(self):
        """Vector parts longer than 1 are projected back onto the unit ball."""
        coords = PsoCoordinates.from_vector([3.0, 4.0, 0.0, 0, 0, 0])
        assert np.linalg.norm(coords.q) == pytest.approx(1.0)
        T = coords.to_transform()
        assert T.rotation[0] == pytest.approx(0.0, abs=1e-12)

"""SE(3)/SO(3) arithmetic, rotation metrics and parameterizations.

Quaternions are stored scalar-first ``(w, x, y, z)`` with ``w >= 0``.
Translations are in millimeters. scipy's ``Rotation`` is scalar-last, so
every conversion goes through ``_to_scipy`` / ``_from_scipy``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Iterable

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import ValidationError

UNIT_TOLERANCE = 1e-6


def _to_scipy(quats: np.ndarray) -> Rotation:
    quats = np.asarray(quats, dtype=float)
    return Rotation.from_quat(quats[..., [1, 2, 3, 0]])


def _from_scipy(rotation: Rotation) -> np.ndarray:
    return canonical_quaternion(rotation.as_quat()[..., [3, 0, 1, 2]])


def canonical_quaternion(quats: np.ndarray) -> np.ndarray:
    """Normalize quaternion(s) and flip the sign so that ``w >= 0``."""
    quats = np.array(quats, dtype=float)
    norms = np.linalg.norm(quats, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise ValidationError("zero quaternion has no rotation")
    quats = quats / norms
    sign = np.where(quats[..., :1] < 0, -1.0, 1.0)
    return quats * sign


def skew(a: np.ndarray) -> np.ndarray:
    """Cross-product matrix ``[a]x`` for a 3-vector or a stack of them."""
    a = np.asarray(a, dtype=float)
    out = np.zeros(a.shape[:-1] + (3, 3))
    out[..., 0, 1] = -a[..., 2]
    out[..., 0, 2] = a[..., 1]
    out[..., 1, 0] = a[..., 2]
    out[..., 1, 2] = -a[..., 0]
    out[..., 2, 0] = -a[..., 1]
    out[..., 2, 1] = a[..., 0]
    return out


def rotation_matrices(quats: np.ndarray) -> np.ndarray:
    """Rotation matrices for a ``(K, 4)`` stack of quaternions."""
    return _to_scipy(np.atleast_2d(quats)).as_matrix()


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Element of SE(3): unit quaternion rotation plus translation in mm."""

    rotation: np.ndarray
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = canonical_quaternion(np.asarray(self.rotation, dtype=float).reshape(4))
        t = np.array(self.translation, dtype=float).reshape(3)
        q.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", q)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> RigidTransform:
        return cls(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))

    @classmethod
    def from_rotvec(cls, rotvec: Iterable[float], translation: Iterable[float] = (0, 0, 0)) -> RigidTransform:
        """Build from an axis-angle vector (radians) and a translation."""
        return cls(_from_scipy(Rotation.from_rotvec(np.asarray(rotvec, dtype=float))), translation)

    @classmethod
    def from_matrix(cls, matrix: np.ndarray) -> RigidTransform:
        """Build from a 4x4 homogeneous matrix."""
        matrix = np.asarray(matrix, dtype=float)
        if matrix.shape != (4, 4):
            raise ValidationError("transform matrix must be 4x4", details={"shape": list(matrix.shape)})
        return cls(_from_scipy(Rotation.from_matrix(matrix[:3, :3])), matrix[:3, 3])

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> RigidTransform:
        """Parse ``{"q": [w, x, y, z], "t": [x, y, z]}``."""
        try:
            q = np.asarray(data["q"], dtype=float)
            t = np.asarray(data["t"], dtype=float)
        except (KeyError, TypeError, ValueError) as e:
            raise ValidationError(
                "transform JSON must contain 'q' (4 numbers) and 't' (3 numbers)",
                details={"error": str(e)},
            )
        if q.shape != (4,) or t.shape != (3,):
            raise ValidationError(
                "transform JSON must contain 'q' (4 numbers) and 't' (3 numbers)",
                details={"q": list(q.shape), "t": list(t.shape)},
            )
        return cls(q, t)

    def to_dict(self) -> dict[str, list[float]]:
        return {"q": [float(v) for v in self.rotation], "t": [float(v) for v in self.translation]}

    @property
    def rotation_matrix(self) -> np.ndarray:
        return _to_scipy(self.rotation).as_matrix()

    @property
    def matrix(self) -> np.ndarray:
        out = np.eye(4)
        out[:3, :3] = self.rotation_matrix
        out[:3, 3] = self.translation
        return out

    def inverse(self) -> RigidTransform:
        inv = _to_scipy(self.rotation).inv()
        return RigidTransform(_from_scipy(inv), -inv.apply(self.translation))

    def compose(self, other: RigidTransform) -> RigidTransform:
        """Return ``self * other`` (``other`` is applied first)."""
        rot = _to_scipy(self.rotation)
        return RigidTransform(
            _from_scipy(rot * _to_scipy(other.rotation)),
            rot.apply(other.translation) + self.translation,
        )

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform an ``(N, 3)`` array of points."""
        points = np.asarray(points, dtype=float)
        return points @ self.rotation_matrix.T + self.translation

    def rotate(self, vectors: np.ndarray) -> np.ndarray:
        """Rotate an ``(N, 3)`` array of direction vectors."""
        return np.asarray(vectors, dtype=float) @ self.rotation_matrix.T

    def __repr__(self) -> str:
        q = ", ".join(f"{v:.6f}" for v in self.rotation)
        t = ", ".join(f"{v:.3f}" for v in self.translation)
        return f"RigidTransform(q=[{q}], t=[{t}])"


@dataclass(frozen=True, eq=False)
class TangentVector:
    """Tangent-space coordinates ``m = [u, v]`` at a transform.

    ``u`` is a rotation vector in radians, ``v`` a translation in mm.
    """

    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "u", np.array(self.u, dtype=float).reshape(3))
        object.__setattr__(self, "v", np.array(self.v, dtype=float).reshape(3))

    @classmethod
    def from_vector(cls, m: Iterable[float]) -> TangentVector:
        m = np.asarray(m, dtype=float).reshape(6)
        return cls(m[:3], m[3:])

    @classmethod
    def zero(cls) -> TangentVector:
        return cls(np.zeros(3), np.zeros(3))

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.u, self.v])


def exp_at(T: RigidTransform, m: TangentVector | np.ndarray) -> RigidTransform:
    """Move ``T`` along the tangent vector ``m``: ``(exp([u]x) R, t + v)``."""
    if not isinstance(m, TangentVector):
        m = TangentVector.from_vector(m)
    if not np.any(m.u) and not np.any(m.v):
        return T
    rotation = Rotation.from_rotvec(m.u) * _to_scipy(T.rotation)
    return RigidTransform(_from_scipy(rotation), T.translation + m.v)


def _check_unit(q: np.ndarray, name: str) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    if q.shape[-1] != 4:
        raise ValidationError(f"{name} must be a quaternion (w, x, y, z)")
    norms = np.linalg.norm(q, axis=-1)
    if np.any(np.abs(norms - 1.0) > UNIT_TOLERANCE):
        raise ValidationError(
            f"{name} is not a unit quaternion",
            details={"norm": float(np.max(np.abs(norms - 1.0)) + 1.0)},
        )
    return q


def rotation_distance(Ra: np.ndarray, Rb: np.ndarray) -> float:
    """Bi-invariant SO(3) distance in degrees, ``theta(log(Rb^-1 Ra))``."""
    qa = _check_unit(Ra, "Ra")
    qb = _check_unit(Rb, "Rb")
    angle = (_to_scipy(qb).inv() * _to_scipy(qa)).magnitude()
    return float(np.degrees(angle))


def rotation_error_deg(estimate: RigidTransform, truth: RigidTransform) -> float:
    """Rotation error between two transforms; translation is ignored."""
    return rotation_distance(estimate.rotation, truth.rotation)


def rotation_distances(q: np.ndarray, others: np.ndarray) -> np.ndarray:
    """Distances in degrees between ``q`` and every row of ``others``."""
    others = np.atleast_2d(others)
    dots = np.clip(np.abs(others @ np.asarray(q, dtype=float)), 0.0, 1.0)
    return np.degrees(2.0 * np.arccos(dots))


def pairwise_rotation_distances(qa: np.ndarray, qb: np.ndarray) -> np.ndarray:
    """``(A, B)`` matrix of rotation distances in degrees."""
    dots = np.clip(np.abs(np.atleast_2d(qa) @ np.atleast_2d(qb).T), 0.0, 1.0)
    return np.degrees(2.0 * np.arccos(dots))


def sample_uniform_rotations(n: int, seed: int) -> np.ndarray:
    """Shoemake's subgroup algorithm: ``n`` Haar-uniform unit quaternions."""
    if n < 1:
        raise ValidationError("rotation sample count must be at least 1", details={"n": n})
    rng = np.random.default_rng(seed)
    u1, u2, u3 = rng.random((3, n))
    r1 = np.sqrt(1.0 - u1)
    r2 = np.sqrt(u1)
    quats = np.column_stack(
        [
            r2 * np.cos(2.0 * np.pi * u3),
            r1 * np.sin(2.0 * np.pi * u2),
            r1 * np.cos(2.0 * np.pi * u2),
            r2 * np.sin(2.0 * np.pi * u3),
        ]
    )
    return canonical_quaternion(quats)


def random_transform(rng: np.random.Generator, max_translation: float) -> RigidTransform:
    """Uniform rotation and a translation uniform in a ball."""
    q = sample_uniform_rotations(1, int(rng.integers(0, 2**63 - 1)))[0]
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    radius = max_translation * rng.random() ** (1.0 / 3.0)
    return RigidTransform(q, direction * radius)


@dataclass(frozen=True, eq=False)
class PsoCoordinates:
    """Chart used by regular particles: quaternion vector part and translation.

    ``q`` determines the rotation up to the sign of the real part, which is
    taken nonnegative.
    """

    q: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        q = np.array(self.q, dtype=float).reshape(3)
        norm = np.linalg.norm(q)
        if norm > 1.0:
            q = q / norm
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "t", np.array(self.t, dtype=float).reshape(3))

    @classmethod
    def from_transform(cls, T: RigidTransform) -> PsoCoordinates:
        return cls(T.rotation[1:].copy(), T.translation.copy())

    @classmethod
    def from_vector(cls, p: Iterable[float]) -> PsoCoordinates:
        p = np.asarray(p, dtype=float).reshape(6)
        return cls(p[:3], p[3:])

    def to_transform(self) -> RigidTransform:
        w = np.sqrt(max(0.0, 1.0 - float(self.q @ self.q)))
        return RigidTransform(np.concatenate([[w], self.q]), self.t)

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.q, self.t])

"""Visibility error metric.

Each point of one scan is looked at from the other scan's camera and lands
in one of three regions:

- ``O``: behind the first surface on its ray; consistent, no cost.
- ``F``: in front of that surface; residual ``x - I(x)``.
- ``B``: its ray leaves through a no-return pixel or the image border;
  residual is the view-plane offset to the nearest projected target point.

For a transform ``T`` mapping scan 2 into scan 1's frame the energy is
``d(T^-1 P1, P2) + d(T P2, P1)``. Cameras never move: each direction is
judged from the untransformed scan's own camera.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DegenerateInputError, ValidationError
from .geometry import RigidTransform, TangentVector, exp_at, rotation_matrices, skew
from .scan import (
    DEFAULT_MAX_SPREAD,
    PartialScan,
    lookup_depth,
    project_to_view_plane,
    ray_intersect,
    surface_depth,
)

logger = logging.getLogger(__name__)

OCCLUSION_TOLERANCE = 1e-6
DEFAULT_F_GATE = 3.0
# Upper bound on transformed points held in memory per batched evaluation.
CHUNK_POINTS = 200_000

LABEL_O, LABEL_F, LABEL_B = 0, 1, 2
# Direction codes: scan 1 seen by camera 2, scan 2 seen by camera 1.
DIRECTION_12, DIRECTION_21 = 0, 1
DIRECTION_NAMES = {DIRECTION_12: "1->2", DIRECTION_21: "2->1"}


class RegionLabel(str, Enum):
    O = "O"
    F = "F"
    B = "B"


LABELS = (RegionLabel.O, RegionLabel.F, RegionLabel.B)


@dataclass(frozen=True, eq=False)
class VemBreakdown:
    """Region sizes and energy terms of one evaluation (energies in mm^2).

    Per-point arrays are only filled when requested; ``labels`` holds
    ``LABEL_*`` codes and ``directions`` holds ``DIRECTION_*`` codes.
    """

    count_O: int
    count_F: int
    count_B: int
    energy_F: float
    energy_B: float
    labels: np.ndarray | None = None
    residuals: np.ndarray | None = None
    directions: np.ndarray | None = None
    point_indices: np.ndarray | None = None

    @property
    def total(self) -> float:
        return self.energy_F + self.energy_B

    @property
    def n_points(self) -> int:
        return self.count_O + self.count_F + self.count_B

    @property
    def normalized_total(self) -> float:
        return self.total / self.n_points if self.n_points else 0.0

    def to_dict(self) -> dict[str, float | int]:
        return {
            "count_O": self.count_O,
            "count_F": self.count_F,
            "count_B": self.count_B,
            "energy_F": self.energy_F,
            "energy_B": self.energy_B,
            "total": self.total,
            "normalized_total": self.normalized_total,
        }


def classify_points(
    points: np.ndarray,
    target: PartialScan,
    max_spread: float,
    workers: int = 1,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Labels, residuals and anchors of ``points`` against ``target``.

    The anchor is ``I(x)`` for F points and the 2D-nearest target point for
    B points; F residuals are ``x - anchor`` and B residuals the projection
    of ``x - anchor`` onto the target's view plane.
    """
    camera = target.camera
    z, d = lookup_depth(camera, target.index.grid, points, max_spread)
    labels = np.full(len(points), LABEL_B, dtype=np.int8)
    anchors = points.copy()
    residuals = np.zeros_like(points)

    hit = d > 0
    occluded = hit & (z >= d - OCCLUSION_TOLERANCE)
    front = hit & ~occluded
    miss = ~hit
    labels[occluded] = LABEL_O
    labels[front] = LABEL_F

    if np.any(front):
        scale = (d[front] / z[front])[:, None]
        anchors[front] = camera.position + (points[front] - camera.position) * scale
        residuals[front] = points[front] - anchors[front]
    if np.any(miss):
        _, nearest = target.index.nearest_2d(camera.view_plane_coords(points[miss]), workers)
        anchors[miss] = target.points[nearest]
        residuals[miss] = project_to_view_plane(camera, points[miss] - anchors[miss])
    return labels, residuals, anchors


def counted_energies(
    cam: np.ndarray,
    target: PartialScan,
    max_spread: float,
    f_gate: float,
    workers: int = 1,
) -> np.ndarray:
    """Counted squared residuals of points given in ``target``'s camera coordinates.

    Same labels and residual norms as ``classify_points`` without building
    anchors: an F residual has norm ``|x - c| (1 - d / z)`` and a B residual
    is the 2D distance returned by the view-plane index.
    """
    camera = target.camera
    z = cam[:, 2]
    u, v = camera.pixels(cam)
    d = surface_depth(camera, target.index.grid, u, v, max_spread)
    sq = np.zeros(len(cam))

    front = (d > 0) & (z < d - OCCLUSION_TOLERANCE)
    if np.any(front):
        ratio = 1.0 - d[front] / z[front]
        e = np.einsum("ij,ij->i", cam[front], cam[front]) * ratio * ratio
        sq[front] = np.where(e >= f_gate * f_gate, e, 0.0)
    miss = d <= 0
    if np.any(miss):
        dist, _ = target.index.nearest_2d(cam[miss, :2] + camera.view_plane_origin, workers)
        sq[miss] = dist * dist
    return sq


def counted_mask(labels: np.ndarray, residuals: np.ndarray, f_gate: float) -> np.ndarray:
    """Points whose residual enters the energy: all B and F at or beyond the gate."""
    norms = np.linalg.norm(residuals, axis=1)
    return (labels == LABEL_B) | ((labels == LABEL_F) & (norms >= f_gate))


def classify_point(
    x: np.ndarray,
    target: PartialScan,
    max_spread: float = DEFAULT_MAX_SPREAD,
) -> tuple[RegionLabel, np.ndarray]:
    """Region label and residual of a single point against ``target``."""
    x = np.asarray(x, dtype=float).reshape(3)
    # Raises on a query at the camera position.
    ray_intersect(target, x)
    labels, residuals, _ = classify_points(x[None], target, max_spread)
    return LABELS[labels[0]], residuals[0]


def directed_energy(
    source: PartialScan,
    target: PartialScan,
    f_gate: float = DEFAULT_F_GATE,
    max_spread: float = DEFAULT_MAX_SPREAD,
    keep_points: bool = False,
) -> VemBreakdown:
    """Energy of ``source``'s points seen from ``target``'s camera, both in one frame."""
    if len(target) == 0:
        raise DegenerateInputError("target scan has no points")
    labels, residuals, _ = classify_points(source.points, target, max_spread)
    return _summarize([(labels, residuals, DIRECTION_21)], f_gate, keep_points)


def _summarize(
    parts: Sequence[tuple[np.ndarray, np.ndarray, int]],
    f_gate: float,
    keep_points: bool,
) -> VemBreakdown:
    counts = np.zeros(3, dtype=np.int64)
    energy_F = 0.0
    energy_B = 0.0
    for labels, residuals, _ in parts:
        counts += np.bincount(labels, minlength=3)
        sq = np.einsum("ij,ij->i", residuals, residuals)
        counted = counted_mask(labels, residuals, f_gate)
        energy_F += float(np.sum(sq[counted & (labels == LABEL_F)]))
        energy_B += float(np.sum(sq[counted & (labels == LABEL_B)]))

    extra = {}
    if keep_points:
        extra = {
            "labels": np.concatenate([labels for labels, _, _ in parts]),
            "residuals": np.concatenate([res for _, res, _ in parts]),
            "directions": np.concatenate([np.full(len(labels), code) for labels, _, code in parts]),
            "point_indices": np.concatenate([np.arange(len(labels)) for labels, _, _ in parts]),
        }
    return VemBreakdown(
        count_O=int(counts[LABEL_O]),
        count_F=int(counts[LABEL_F]),
        count_B=int(counts[LABEL_B]),
        energy_F=energy_F,
        energy_B=energy_B,
        **extra,
    )


@dataclass(frozen=True, eq=False)
class Linearization:
    """Residuals and Jacobian at a transform under frozen correspondences.

    Row block ``k`` is ``M_k (p_k - a_k)`` where ``p_k`` is the moved source
    point, ``a_k`` its frozen anchor and ``M_k`` the identity (F) or the
    target's view-plane projector (B). Columns follow ``m = [u, v]``.
    """

    transform: RigidTransform
    directions: np.ndarray
    point_indices: np.ndarray
    sources: np.ndarray
    anchors: np.ndarray
    projectors: np.ndarray
    residuals: np.ndarray
    jacobian: np.ndarray
    weights: np.ndarray

    @property
    def energy(self) -> float:
        return float(self.residuals @ self.residuals)

    def residuals_at(self, m: TangentVector | np.ndarray) -> np.ndarray:
        """Residual vector at ``exp_at(transform, m)`` with correspondences held fixed."""
        T = exp_at(self.transform, m)
        moved = _move_sources(T, self.sources, self.directions)
        blocks = np.einsum("kij,kj->ki", self.projectors, moved - self.anchors)
        return (blocks * self.weights[:, None]).reshape(-1)


def _move_sources(T: RigidTransform, sources: np.ndarray, directions: np.ndarray) -> np.ndarray:
    """Apply ``T^-1`` to scan 1 points and ``T`` to scan 2 points."""
    moved = np.empty_like(sources)
    first = directions == DIRECTION_12
    moved[first] = T.inverse().apply(sources[first])
    moved[~first] = T.apply(sources[~first])
    return moved


def point_jacobians(T: RigidTransform, sources: np.ndarray, directions: np.ndarray) -> np.ndarray:
    """``(N, 3, 6)`` derivatives of the moved source points w.r.t. ``m = [u, v]``.

    Scan 2 points ``R y + t`` give ``[-[R y]x, I]``; scan 1 points
    ``R^T (x - t)`` give ``[R^T [x - t]x, -R^T]``.
    """
    R = T.rotation_matrix
    out = np.empty((len(sources), 3, 6))
    first = directions == DIRECTION_12
    x = sources[first] - T.translation
    out[first, :, :3] = R.T @ skew(x)
    out[first, :, 3:] = -R.T
    y = sources[~first] @ R.T
    out[~first, :, :3] = -skew(y)
    out[~first, :, 3:] = np.eye(3)
    return out


class VisibilityMetric:
    """Visibility error metric of a fixed scan pair.

    Both scans are indexed once; evaluations of many transforms share the
    indexes and reduce per transform in a fixed order, so a batched energy
    equals the single-transform energy bit for bit. ``workers`` is passed to
    the view-plane nearest-neighbor queries.
    """

    def __init__(
        self,
        P1: PartialScan,
        P2: PartialScan,
        f_gate: float = DEFAULT_F_GATE,
        max_spread: float = DEFAULT_MAX_SPREAD,
        workers: int = 1,
    ):
        if len(P1) == 0 or len(P2) == 0:
            raise DegenerateInputError(
                "cannot evaluate visibility against an empty scan",
                details={"points_1": len(P1), "points_2": len(P2)},
            )
        self.P1 = P1
        self.P2 = P2
        self.f_gate = f_gate
        self.max_spread = max_spread
        self.workers = workers
        # Build both indexes up front; evaluation may run in worker threads.
        P1.index
        P2.index

    @property
    def n_points(self) -> int:
        return len(self.P1) + len(self.P2)

    def _directions(self, T: RigidTransform):
        yield DIRECTION_12, T.inverse().apply(self.P1.points), self.P2
        yield DIRECTION_21, T.apply(self.P2.points), self.P1

    def breakdown(self, T: RigidTransform, keep_points: bool = False) -> VemBreakdown:
        parts = [
            (*classify_points(points, target, self.max_spread, self.workers)[:2], code)
            for code, points, target in self._directions(T)
        ]
        return _summarize(parts, self.f_gate, keep_points)

    def energy(self, T: RigidTransform) -> float:
        return float(self.energies([T])[0])

    def energies(self, transforms: Sequence[RigidTransform]) -> np.ndarray:
        """Total energies of many transforms in one vectorized pass."""
        if not len(transforms):
            return np.zeros(0)
        quats = np.array([T.rotation for T in transforms])
        trans = np.array([T.translation for T in transforms])
        return self.energies_array(quats, trans)

    def energies_array(self, quats: np.ndarray, trans: np.ndarray) -> np.ndarray:
        """Energies for ``(K, 4)`` quaternions and ``(K, 3)`` translations."""
        K = len(quats)
        R = rotation_matrices(quats)
        per_chunk = max(1, CHUNK_POINTS // self.n_points)
        out = np.empty(K)
        for start in range(0, K, per_chunk):
            stop = min(K, start + per_chunk)
            out[start:stop] = self._chunk_energies(R[start:stop], trans[start:stop])
        return out

    def _chunk_energies(self, R: np.ndarray, t: np.ndarray) -> np.ndarray:
        K = len(R)
        total = np.zeros(K)
        cam_1, cam_2 = self.P1.camera, self.P2.camera
        W1, W2 = cam_1.world_to_camera, cam_2.world_to_camera
        # Scan 1 under T^-1 in camera 2: (x - t) R W2^T - c2 W2^T, as row vectors.
        seen_by_2 = (self.P1.points[None] - t[:, None]) @ (R @ W2.T) - cam_2.position @ W2.T
        # Scan 2 under T in camera 1: y R^T W1^T + (t - c1) W1^T.
        seen_by_1 = self.P2.points[None] @ (R.transpose(0, 2, 1) @ W1.T) + ((t - cam_1.position) @ W1.T)[:, None]
        for cam, target in ((seen_by_2, self.P2), (seen_by_1, self.P1)):
            n = cam.shape[1]
            sq = counted_energies(cam.reshape(-1, 3), target, self.max_spread, self.f_gate, self.workers)
            total += sq.reshape(K, n).sum(axis=1)
        return total

    def linearize(self, T: RigidTransform, normalized: bool = False) -> Linearization:
        """Freeze labels and anchors at ``T`` and build ``r`` and ``J``.

        With ``normalized`` each direction's rows are scaled by
        ``sqrt(1 / N_source)`` so that ``r^T r`` is a per-point energy.
        """
        directions, indices, sources, anchors, projectors, weights = [], [], [], [], [], []
        originals = {DIRECTION_12: self.P1.points, DIRECTION_21: self.P2.points}
        for code, points, target in self._directions(T):
            labels, residuals, anchor = classify_points(points, target, self.max_spread, self.workers)
            keep = np.flatnonzero(counted_mask(labels, residuals, self.f_gate))
            directions.append(np.full(len(keep), code))
            indices.append(keep)
            sources.append(originals[code][keep])
            anchors.append(anchor[keep])
            proj = np.broadcast_to(np.eye(3), (len(keep), 3, 3)).copy()
            proj[labels[keep] == LABEL_B] = target.camera.projector
            projectors.append(proj)
            weight = 1.0 / np.sqrt(len(points)) if normalized else 1.0
            weights.append(np.full(len(keep), weight))

        directions = np.concatenate(directions)
        sources = np.concatenate(sources).reshape(-1, 3)
        anchors = np.concatenate(anchors).reshape(-1, 3)
        projectors = np.concatenate(projectors).reshape(-1, 3, 3)
        weights = np.concatenate(weights)

        moved = _move_sources(T, sources, directions)
        blocks = np.einsum("kij,kj->ki", projectors, moved - anchors) * weights[:, None]
        jac = np.einsum("kij,kjl->kil", projectors, point_jacobians(T, sources, directions))
        jac *= weights[:, None, None]
        return Linearization(
            transform=T,
            directions=directions,
            point_indices=np.concatenate(indices),
            sources=sources,
            anchors=anchors,
            projectors=projectors,
            residuals=blocks.reshape(-1),
            jacobian=jac.reshape(-1, 6),
            weights=weights,
        )


def vem(
    T: RigidTransform,
    P1: PartialScan,
    P2: PartialScan,
    f_gate: float = DEFAULT_F_GATE,
    max_spread: float = DEFAULT_MAX_SPREAD,
    keep_points: bool = False,
) -> VemBreakdown:
    """Visibility error of ``T`` aligning ``P2`` to ``P1``."""
    return VisibilityMetric(P1, P2, f_gate, max_spread).breakdown(T, keep_points)


def residual_vector(
    T: RigidTransform,
    P1: PartialScan,
    P2: PartialScan,
    f_gate: float = DEFAULT_F_GATE,
    max_spread: float = DEFAULT_MAX_SPREAD,
) -> tuple[np.ndarray, np.ndarray]:
    """Stacked residuals of both directions and their ``(direction, point)`` provenance."""
    lin = VisibilityMetric(P1, P2, f_gate, max_spread).linearize(T)
    return lin.residuals, np.column_stack([lin.directions, lin.point_indices])


def write_vem_dump(breakdown: VemBreakdown, path: str | Path) -> None:
    """Write per-point labels and residual norms as CSV."""
    if breakdown.labels is None:
        raise ValidationError("breakdown was computed without per-point records")
    norms = np.linalg.norm(breakdown.residuals, axis=1)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["point_index", "direction", "label", "residual_norm_mm"])
        for index, code, label, norm in zip(
            breakdown.point_indices, breakdown.directions, breakdown.labels, norms
        ):
            writer.writerow([int(index), DIRECTION_NAMES[int(code)], LABELS[label].value, f"{norm:.6f}"])
    logger.info("Wrote %d per-point records to %s", len(norms), path)

"""Synthetic range scans with ground truth.

Meshes are rendered by exact per-pixel ray casting into depth grids, pairs
of views are placed so that their overlap covers the whole range evenly, and
scan 2 of each pair is moved by a random rigid perturbation whose inverse is
the ground-truth alignment.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegenerateInputError, NotFoundError, ScanFormatError, ValidationError, VemregError
from .geometry import RigidTransform, random_transform
from .scan import Camera, PartialScan, save_scan

logger = logging.getLogger(__name__)

TILE = 16
DET_EPSILON = 1e-9
HIT_EPSILON = 1e-6
# Minimum cosine between a stored normal and the direction to the camera.
MIN_FACING = 1e-3
TRIANGLE_CHUNK = 1024
BISECTION_STEPS = 7
MESH_SUFFIXES = (".ply", ".obj")
BENCH_MESHES = ("blob", "bracket", "lump")


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    """Indexed triangle mesh in mm. Zero-area triangles are dropped on construction."""

    vertices: np.ndarray
    triangles: np.ndarray
    name: str = "mesh"

    def __post_init__(self):
        vertices = np.array(self.vertices, dtype=float).reshape(-1, 3)
        triangles = np.array(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(triangles) and (triangles.min() < 0 or triangles.max() >= len(vertices)):
            raise ScanFormatError(f"mesh {self.name} has out-of-range triangle indices", field="faces")
        v0, v1, v2 = (vertices[triangles[:, k]] for k in range(3))
        area = 0.5 * np.linalg.norm(np.cross(v1 - v0, v2 - v0), axis=1)
        triangles = triangles[area > 1e-12]
        vertices.setflags(write=False)
        triangles.setflags(write=False)
        object.__setattr__(self, "vertices", vertices)
        object.__setattr__(self, "triangles", triangles)

    def __len__(self) -> int:
        return len(self.triangles)

    def corners(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return tuple(self.vertices[self.triangles[:, k]] for k in range(3))

    @cached_property
    def face_normals(self) -> np.ndarray:
        v0, v1, v2 = self.corners()
        n = np.cross(v1 - v0, v2 - v0)
        return n / np.linalg.norm(n, axis=1, keepdims=True)

    @cached_property
    def vertex_normals(self) -> np.ndarray:
        """Area-weighted average of adjacent face normals."""
        v0, v1, v2 = self.corners()
        weighted = np.cross(v1 - v0, v2 - v0)
        acc = np.zeros_like(self.vertices)
        for k in range(3):
            np.add.at(acc, self.triangles[:, k], weighted)
        norms = np.linalg.norm(acc, axis=1, keepdims=True)
        return np.divide(acc, norms, out=np.zeros_like(acc), where=norms > 0)

    @property
    def centroid(self) -> np.ndarray:
        return self.vertices.mean(axis=0)

    @property
    def diameter(self) -> float:
        """Diameter of the centroid-centered bounding sphere."""
        return 2.0 * float(np.max(np.linalg.norm(self.vertices - self.centroid, axis=1)))

    @property
    def signed_volume(self) -> float:
        v0, v1, v2 = self.corners()
        return float(np.sum(np.einsum("ij,ij->i", v0, np.cross(v1, v2)))) / 6.0

    def oriented(self) -> TriangleMesh:
        """Flip the winding if it encloses negative volume."""
        if self.signed_volume >= 0:
            return self
        return TriangleMesh(self.vertices, self.triangles[:, ::-1], self.name)

    def transformed(self, T: RigidTransform) -> TriangleMesh:
        return TriangleMesh(T.apply(self.vertices), self.triangles, self.name)


def normalize_mesh(mesh: TriangleMesh, diameter: float = 1000.0) -> TriangleMesh:
    """Center on the vertex centroid and scale to the given bounding-sphere diameter."""
    if mesh.diameter <= 0:
        raise DegenerateInputError(f"mesh {mesh.name} has no extent")
    scale = diameter / mesh.diameter
    return TriangleMesh((mesh.vertices - mesh.centroid) * scale, mesh.triangles, mesh.name)


def _from_open3d(mesh: Any, name: str) -> TriangleMesh:
    return TriangleMesh(np.asarray(mesh.vertices), np.asarray(mesh.triangles), name).oriented()


def load_mesh(path: str | Path) -> TriangleMesh:
    """Read a PLY or OBJ mesh (positions and faces only)."""
    import open3d as o3d

    path = Path(path)
    if not path.exists():
        raise NotFoundError(f"mesh file not found: {path}", details={"path": str(path)})
    if path.suffix.lower() not in MESH_SUFFIXES:
        raise ScanFormatError(f"unsupported mesh format: {path.suffix}", field="format")
    mesh = o3d.io.read_triangle_mesh(str(path))
    if len(mesh.triangles) == 0:
        raise ScanFormatError(f"mesh {path} has no triangles", field="faces")
    return _from_open3d(mesh, path.stem)


def _bumpy_sphere(seed: int, bumps: int, amplitude: float) -> Any:
    import open3d as o3d

    mesh = o3d.geometry.TriangleMesh.create_sphere(radius=1.0, resolution=40)
    vertices = np.asarray(mesh.vertices)
    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(bumps, 3))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    heights = amplitude * rng.uniform(-0.5, 1.0, size=bumps)
    widths = rng.uniform(0.25, 0.6, size=bumps)
    directions = vertices / np.linalg.norm(vertices, axis=1, keepdims=True)
    sq = np.sum((directions[:, None, :] - centers[None]) ** 2, axis=2)
    radius = 1.0 + np.sum(heights * np.exp(-sq / widths**2), axis=1)
    mesh.vertices = o3d.utility.Vector3dVector(directions * radius[:, None])
    return mesh


def builtin_mesh(name: str) -> TriangleMesh:
    """Procedural test meshes, already normalized to 1000 mm."""
    import open3d as o3d

    if name == "sphere":
        mesh = o3d.geometry.TriangleMesh.create_sphere(radius=1.0, resolution=40)
    elif name == "box":
        mesh = o3d.geometry.TriangleMesh.create_box(width=1.0, height=0.6, depth=0.4)
    elif name == "cylinder":
        mesh = o3d.geometry.TriangleMesh.create_cylinder(radius=0.3, height=1.0, resolution=48, split=4)
    elif name == "torus":
        mesh = o3d.geometry.TriangleMesh.create_torus(torus_radius=1.0, tube_radius=0.35)
    elif name == "blob":
        mesh = _bumpy_sphere(seed=0, bumps=8, amplitude=0.35)
    elif name == "lump":
        mesh = _bumpy_sphere(seed=11, bumps=5, amplitude=0.6)
    elif name == "bracket":
        base = o3d.geometry.TriangleMesh.create_box(width=1.0, height=0.25, depth=0.6)
        upright = o3d.geometry.TriangleMesh.create_box(width=0.25, height=0.9, depth=0.6)
        fin = o3d.geometry.TriangleMesh.create_box(width=0.5, height=0.15, depth=0.15)
        fin.translate((0.25, 0.55, 0.45))
        mesh = base + upright + fin
    else:
        raise ValidationError(
            f"unknown builtin mesh: {name}",
            suggestions=["Use one of: sphere, box, cylinder, torus, blob, lump, bracket"],
        )
    return normalize_mesh(_from_open3d(mesh, name))


@dataclass(frozen=True)
class RenderSettings:
    width: int = 160
    height: int = 120
    fx: float = 200.0
    fy: float = 200.0
    distance_factor: float = 2.0

    def camera(self, position: np.ndarray, target: np.ndarray, up_hint: np.ndarray) -> Camera:
        return Camera.look_at(
            position, target, up_hint, fx=self.fx, fy=self.fy, width=self.width, height=self.height
        )


# =============================================================================
# Rendering
# =============================================================================


def _tile_lists(mesh: TriangleMesh, camera: Camera, candidates: np.ndarray) -> dict[tuple[int, int], np.ndarray]:
    """Triangles whose screen-space bounding box touches each 16x16 pixel tile."""
    corners = np.stack([c[candidates] for c in mesh.corners()], axis=1)
    cam = camera.to_camera(corners.reshape(-1, 3)).reshape(-1, 3, 3)
    z = cam[:, :, 2]
    in_front = z > HIT_EPSILON
    crossing = in_front.any(axis=1) & ~in_front.all(axis=1)
    visible = in_front.all(axis=1)

    safe_z = np.where(in_front, z, 1.0)
    u = camera.fx * cam[:, :, 0] / safe_z + camera.cx
    v = camera.fy * cam[:, :, 1] / safe_z + camera.cy
    tiles_x = -(-camera.width // TILE)
    tiles_y = -(-camera.height // TILE)
    tx0 = np.floor(u.min(axis=1)).astype(np.int64) // TILE
    tx1 = np.ceil(u.max(axis=1)).astype(np.int64) // TILE
    ty0 = np.floor(v.min(axis=1)).astype(np.int64) // TILE
    ty1 = np.ceil(v.max(axis=1)).astype(np.int64) // TILE

    lists = {}
    for ty in range(tiles_y):
        for tx in range(tiles_x):
            boxed = visible & (tx0 <= tx) & (tx1 >= tx) & (ty0 <= ty) & (ty1 >= ty)
            members = candidates[boxed | crossing]
            if len(members):
                lists[(ty, tx)] = members
    return lists


def _cast(
    origin: np.ndarray,
    directions: np.ndarray,
    v0: np.ndarray,
    e1: np.ndarray,
    e2: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Nearest front-facing hit per ray (Moeller-Trumbore).

    Returns ray parameter ``t`` (``inf`` for a miss), local triangle index
    and barycentric ``u, v``.
    """
    p = np.cross(directions[:, None, :], e2[None, :, :])
    det = np.einsum("tk,rtk->rt", e1, p)
    valid = det > DET_EPSILON
    inv = np.where(valid, 1.0 / np.where(valid, det, 1.0), 0.0)
    s = origin - v0
    u = np.einsum("tk,rtk->rt", s, p) * inv
    q = np.cross(s, e1)
    v = (directions @ q.T) * inv
    t = np.einsum("tk,tk->t", e2, q)[None, :] * inv
    valid &= (u >= 0) & (v >= 0) & (u + v <= 1) & (t > HIT_EPSILON)
    t = np.where(valid, t, np.inf)
    best = np.argmin(t, axis=1)
    rows = np.arange(len(directions))
    return t[rows, best], best, u[rows, best], v[rows, best]


def render_scan(mesh: TriangleMesh, camera: Camera) -> PartialScan:
    """Ray-cast ``mesh`` into a depth grid and back-project the hits.

    Depth is distance along ``view_dir``; back faces are culled and normals
    are interpolated vertex normals turned toward the camera.
    """
    v0, v1, v2 = mesh.corners()
    facing = np.einsum("ij,ij->i", mesh.face_normals, camera.position - v0) > 0
    candidates = np.flatnonzero(facing)
    rays = camera.pixel_rays()
    grid = np.zeros((camera.height, camera.width))
    hit_tri = np.full((camera.height, camera.width), -1, dtype=np.int64)
    bary = np.zeros((camera.height, camera.width, 2))

    for (ty, tx), members in sorted(_tile_lists(mesh, camera, candidates).items()):
        rows = slice(ty * TILE, min((ty + 1) * TILE, camera.height))
        cols = slice(tx * TILE, min((tx + 1) * TILE, camera.width))
        directions = rays[rows, cols].reshape(-1, 3)
        best_t = np.full(len(directions), np.inf)
        best_tri = np.full(len(directions), -1, dtype=np.int64)
        best_uv = np.zeros((len(directions), 2))
        for start in range(0, len(members), TRIANGLE_CHUNK):
            chunk = members[start : start + TRIANGLE_CHUNK]
            t, local, u, v = _cast(camera.position, directions, v0[chunk], v1[chunk] - v0[chunk], v2[chunk] - v0[chunk])
            closer = t < best_t
            best_t[closer] = t[closer]
            best_tri[closer] = chunk[local[closer]]
            best_uv[closer] = np.column_stack([u, v])[closer]
        shape = grid[rows, cols].shape
        grid[rows, cols] = np.where(np.isfinite(best_t), best_t, 0.0).reshape(shape)
        hit_tri[rows, cols] = best_tri.reshape(shape)
        bary[rows, cols] = best_uv.reshape(shape + (2,))

    hit = hit_tri >= 0
    if not np.any(hit):
        raise DegenerateInputError(
            "mesh out of frustum",
            details={"mesh": mesh.name, "camera": camera.to_dict()},
        )
    depth = grid[hit]
    points = camera.position + rays[hit] * depth[:, None]
    tri = mesh.triangles[hit_tri[hit]]
    u, v = bary[hit, 0], bary[hit, 1]
    vn = mesh.vertex_normals
    normals = (1 - u - v)[:, None] * vn[tri[:, 0]] + u[:, None] * vn[tri[:, 1]] + v[:, None] * vn[tri[:, 2]]
    norms = np.linalg.norm(normals, axis=1, keepdims=True)
    normals = np.divide(normals, norms, out=np.zeros_like(normals), where=norms > 0)
    to_camera = camera.position - points
    to_camera /= np.linalg.norm(to_camera, axis=1, keepdims=True)
    facing = np.einsum("ij,ij->i", normals, to_camera)
    normals[facing < 0] *= -1
    # Grazing interpolated normals fall back to the (front-facing) face normal.
    grazing = np.abs(facing) < MIN_FACING
    normals[grazing] = mesh.face_normals[hit_tri[hit][grazing]]
    # Returns must still face the camera after float32 storage.
    keep = np.einsum("ij,ij->i", normals, to_camera) >= MIN_FACING
    return PartialScan(points[keep], normals[keep], camera, grid)


# =============================================================================
# Overlap
# =============================================================================


def _coverage(source: PartialScan, target: PartialScan) -> float:
    """Fraction of ``source`` points with a ``target`` point within twice its median spacing."""
    if len(source) == 0:
        return 0.0
    if len(target) < 2:
        return 0.0
    spacing, _ = target.index.tree_3d.query(target.points, k=2)
    tau = 2.0 * float(np.median(spacing[:, 1]))
    distance, _ = target.index.nearest_3d(source.points)
    return float(np.mean(distance <= tau))


def overlap_ratio(P1: PartialScan, P2_aligned: PartialScan, symmetric: bool = True) -> float:
    """Share of ``P2`` points with a ``P1`` counterpart; ``symmetric`` takes the min of both directions."""
    forward = _coverage(P2_aligned, P1)
    if not symmetric:
        return forward
    return min(forward, _coverage(P1, P2_aligned))


# =============================================================================
# Benchmark generation
# =============================================================================


@dataclass
class PairSpec:
    """One synthetic pair. ``gt_transform`` maps scan 2 into scan 1's frame."""

    pair_id: str
    mesh: str
    camera_1: Camera
    camera_2: Camera
    perturbation: RigidTransform
    gt_transform: RigidTransform
    overlap_ratio: float
    scan_1: str
    scan_2: str
    target_overlap: float | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.pair_id,
            "mesh": self.mesh,
            "scan_1": self.scan_1,
            "scan_2": self.scan_2,
            "camera_1": self.camera_1.to_dict(),
            "camera_2": self.camera_2.to_dict(),
            "perturbation": self.perturbation.to_dict(),
            "gt_transform": self.gt_transform.to_dict(),
            "overlap_ratio": self.overlap_ratio,
            "target_overlap": self.target_overlap,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> PairSpec:
        try:
            return cls(
                pair_id=str(data["id"]),
                mesh=str(data["mesh"]),
                camera_1=Camera.from_dict(data["camera_1"]),
                camera_2=Camera.from_dict(data["camera_2"]),
                perturbation=RigidTransform.from_dict(data["perturbation"]),
                gt_transform=RigidTransform.from_dict(data["gt_transform"]),
                overlap_ratio=float(data["overlap_ratio"]),
                scan_1=str(data["scan_1"]),
                scan_2=str(data["scan_2"]),
                target_overlap=data.get("target_overlap"),
            )
        except KeyError as e:
            raise ScanFormatError(f"manifest entry is missing {e}", field=str(e).strip("'"))


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def _orbit(axis: np.ndarray, perpendicular: np.ndarray, angle_deg: float) -> np.ndarray:
    a = np.radians(angle_deg)
    return np.cos(a) * axis + np.sin(a) * perpendicular


def render_pair(
    mesh: TriangleMesh,
    target_overlap: float,
    rng: np.random.Generator,
    settings: RenderSettings | None = None,
) -> tuple[PartialScan, PartialScan, float]:
    """Two views of ``mesh`` whose separation is bisected toward ``target_overlap``.

    Both scans are returned in the mesh frame with their measured overlap.
    """
    settings = settings or RenderSettings()
    distance = settings.distance_factor * mesh.diameter
    center = mesh.centroid
    axis = _unit(rng.normal(size=3))
    perpendicular = _unit(np.cross(axis, _unit(rng.normal(size=3))))
    up_1 = _unit(rng.normal(size=3))
    up_2 = _unit(rng.normal(size=3))

    def view(direction: np.ndarray, up: np.ndarray) -> PartialScan:
        return render_scan(mesh, settings.camera(center + distance * direction, center, up))

    scan_1 = view(axis, up_1)
    lo, hi = 0.0, 180.0
    best = None
    for _ in range(BISECTION_STEPS):
        angle = 0.5 * (lo + hi)
        try:
            scan_2 = view(_orbit(axis, perpendicular, angle), up_2)
            overlap = overlap_ratio(scan_1, scan_2)
        except DegenerateInputError:
            scan_2, overlap = None, 0.0
        if scan_2 is not None and (best is None or abs(overlap - target_overlap) < abs(best[1] - target_overlap)):
            best = (scan_2, overlap)
        if overlap > target_overlap:
            lo = angle
        else:
            hi = angle
    if best is None:
        raise DegenerateInputError("mesh out of frustum", details={"mesh": mesh.name})
    return scan_1, best[0], best[1]


def stratified_targets(n_pairs: int, low: float = 0.05, high: float = 0.95) -> np.ndarray:
    """Evenly spaced overlap targets covering ``[low, high]``."""
    return low + (high - low) * (np.arange(n_pairs) + 0.5) / n_pairs


def collect_meshes(sources: Iterable[str | Path] | None) -> list[TriangleMesh]:
    """Load mesh files and directories; unreadable meshes are skipped with a warning.

    With no sources the builtin benchmark meshes are used.
    """
    if sources is None:
        return [builtin_mesh(name) for name in BENCH_MESHES]
    paths: list[Path] = []
    for source in sources:
        source = Path(source)
        if source.is_dir():
            paths += sorted(p for p in source.iterdir() if p.suffix.lower() in MESH_SUFFIXES)
        else:
            paths.append(source)
    meshes = []
    for path in paths:
        try:
            meshes.append(normalize_mesh(load_mesh(path)))
        except VemregError as e:
            logger.warning("Skipping mesh %s: %s", path, e.message)
    return meshes


def generate_benchmark(
    meshes: Sequence[TriangleMesh],
    n_pairs: int,
    seed: int,
    out_dir: str | Path,
    settings: RenderSettings | None = None,
) -> list[PairSpec]:
    """Render ``n_pairs`` perturbed pairs with stratified overlap and write the manifest."""
    if n_pairs < 1:
        raise ValidationError("n_pairs must be at least 1", details={"n_pairs": n_pairs})
    if not meshes:
        raise DegenerateInputError("no usable meshes for benchmark generation")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    targets = stratified_targets(n_pairs)

    specs: list[PairSpec] = []
    for i, target in enumerate(targets):
        mesh = meshes[i % len(meshes)]
        rng = np.random.default_rng([seed, i])
        pair_id = f"pair_{i:04d}"
        try:
            scan_1, scan_2, overlap = render_pair(mesh, float(target), rng, settings)
        except DegenerateInputError as e:
            logger.warning("Skipping %s (%s): %s", pair_id, mesh.name, e.message)
            continue
        perturbation = random_transform(rng, 0.5 * mesh.diameter)
        moved = scan_2.transformed(perturbation)
        name_1, name_2 = f"{pair_id}_1.ply", f"{pair_id}_2.ply"
        save_scan(scan_1, out_dir / name_1)
        save_scan(moved, out_dir / name_2)
        specs.append(
            PairSpec(
                pair_id=pair_id,
                mesh=mesh.name,
                camera_1=scan_1.camera,
                camera_2=moved.camera,
                perturbation=perturbation,
                gt_transform=perturbation.inverse(),
                overlap_ratio=overlap,
                scan_1=name_1,
                scan_2=name_2,
                target_overlap=float(target),
            )
        )
        logger.info("Generated %s from %s, overlap %.3f (target %.3f)", pair_id, mesh.name, overlap, target)

    if len(specs) < n_pairs / 2:
        raise DegenerateInputError(
            "too few pairs could be generated",
            details={"generated": len(specs), "requested": n_pairs},
        )
    write_manifest(specs, out_dir / "manifest.json")
    return specs


def write_manifest(specs: Sequence[PairSpec], path: str | Path) -> None:
    Path(path).write_text(json.dumps([spec.to_dict() for spec in specs], indent=2, sort_keys=True) + "\n")

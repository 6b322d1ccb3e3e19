"""Partial scans: camera model, ray/projection queries and scan file I/O.

A scan lives in its own frame together with the camera that captured it.
All lengths are millimeters; a depth value of 0 means "no return".
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Any

import numpy as np
from scipy.spatial import cKDTree

from .errors import NotFoundError, ScanFormatError, ValidationError
from .geometry import RigidTransform

logger = logging.getLogger(__name__)

ORTHO_TOLERANCE = 1e-9
REPROJECTION_TOLERANCE = 0.5
DEFAULT_MAX_SPREAD = 20.0
CAMERA_FIELDS = ("position", "view_dir", "up", "fx", "fy", "cx", "cy", "width", "height")
VERTEX_PROPERTIES = ("x", "y", "z", "nx", "ny", "nz")
# Scan files store float32 vertex properties in either PLY encoding.
PLY_VERTEX_DTYPE = np.dtype([(name, "<f4") for name in VERTEX_PROPERTIES])


@dataclass(frozen=True, eq=False)
class Camera:
    """Pinhole range camera: pose in the scan frame plus intrinsics.

    The image x axis points along ``view_dir x up`` and the image y axis
    along ``-up``; pixel centers sit on integer coordinates.
    """

    position: np.ndarray
    view_dir: np.ndarray
    up: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        for name in ("position", "view_dir", "up"):
            value = np.array(getattr(self, name), dtype=float).reshape(3)
            value.setflags(write=False)
            object.__setattr__(self, name, value)
        for name in ("fx", "fy", "cx", "cy"):
            object.__setattr__(self, name, float(getattr(self, name)))
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))

        if abs(np.linalg.norm(self.view_dir) - 1.0) > ORTHO_TOLERANCE:
            raise ValidationError("camera view_dir must be a unit vector", details={"field": "view_dir"})
        if abs(np.linalg.norm(self.up) - 1.0) > ORTHO_TOLERANCE:
            raise ValidationError("camera up must be a unit vector", details={"field": "up"})
        if abs(float(self.view_dir @ self.up)) > ORTHO_TOLERANCE:
            raise ValidationError("camera up must be orthogonal to view_dir", details={"field": "up"})
        if self.fx <= 0 or self.fy <= 0:
            raise ValidationError("focal lengths must be positive", details={"field": "fx"})
        if self.width < 1 or self.height < 1:
            raise ValidationError("image size must be positive", details={"field": "width"})

    @classmethod
    def look_at(
        cls,
        position: np.ndarray,
        target: np.ndarray,
        up_hint: np.ndarray = (0.0, 0.0, 1.0),
        *,
        fx: float,
        fy: float,
        width: int,
        height: int,
        cx: float | None = None,
        cy: float | None = None,
    ) -> Camera:
        """Camera at ``position`` looking at ``target``."""
        position = np.asarray(position, dtype=float)
        forward = np.asarray(target, dtype=float) - position
        if np.linalg.norm(forward) == 0:
            raise ValidationError("camera target coincides with its position")
        forward /= np.linalg.norm(forward)
        up = np.asarray(up_hint, dtype=float)
        up = up - (up @ forward) * forward
        if np.linalg.norm(up) < 1e-6:
            fallback = np.eye(3)[np.argmin(np.abs(forward))]
            up = fallback - (fallback @ forward) * forward
        up /= np.linalg.norm(up)
        return cls(
            position=position,
            view_dir=forward,
            up=up,
            fx=fx,
            fy=fy,
            cx=(width - 1) / 2.0 if cx is None else cx,
            cy=(height - 1) / 2.0 if cy is None else cy,
            width=width,
            height=height,
        )

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> Camera:
        for name in CAMERA_FIELDS:
            if name not in data:
                raise ScanFormatError(f"camera sidecar is missing '{name}'", field=name)
        try:
            return cls(**{name: data[name] for name in CAMERA_FIELDS})
        except (TypeError, ValueError) as e:
            raise ScanFormatError(f"camera sidecar has an invalid value: {e}", field="camera")

    def to_dict(self) -> dict[str, Any]:
        return {
            "position": [float(v) for v in self.position],
            "view_dir": [float(v) for v in self.view_dir],
            "up": [float(v) for v in self.up],
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
        }

    @cached_property
    def right(self) -> np.ndarray:
        return np.cross(self.view_dir, self.up)

    @cached_property
    def down(self) -> np.ndarray:
        return -self.up

    @cached_property
    def world_to_camera(self) -> np.ndarray:
        """Rows are the camera axes (right, down, forward) in scan coordinates."""
        return np.stack([self.right, self.down, self.view_dir])

    @cached_property
    def projector(self) -> np.ndarray:
        """Orthographic projector ``I - c_v c_v^T`` onto the view plane."""
        return np.eye(3) - np.outer(self.view_dir, self.view_dir)

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=float) - self.position) @ self.world_to_camera.T

    def project(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Perspective projection; returns pixel coordinates ``u, v`` and depth ``z``.

        Points at or behind the camera plane get ``u = v = nan``.
        """
        cam = self.to_camera(points)
        u, v = self.pixels(cam)
        return u, v, cam[:, 2]

    def pixels(self, cam: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Pixel coordinates of points already in camera coordinates."""
        z = cam[:, 2]
        front = z > 0
        u = np.full(len(cam), np.nan)
        v = np.full(len(cam), np.nan)
        u[front] = self.fx * cam[front, 0] / z[front] + self.cx
        v[front] = self.fy * cam[front, 1] / z[front] + self.cy
        return u, v

    def pixel_rays(self) -> np.ndarray:
        """``(height, width, 3)`` ray directions with unit depth along ``view_dir``."""
        cols, rows = np.meshgrid(np.arange(self.width), np.arange(self.height))
        local = np.stack(
            [(cols - self.cx) / self.fx, (rows - self.cy) / self.fy, np.ones(cols.shape)],
            axis=-1,
        )
        return local @ self.world_to_camera

    def view_plane_coords(self, points: np.ndarray) -> np.ndarray:
        """2D coordinates of points orthographically projected along ``view_dir``."""
        return np.asarray(points, dtype=float) @ np.stack([self.right, self.down]).T

    @cached_property
    def view_plane_origin(self) -> np.ndarray:
        """View-plane coordinates of the camera; camera ``x, y`` plus this give ``view_plane_coords``."""
        return self.view_plane_coords(self.position[None])[0]

    def transformed(self, T: RigidTransform) -> Camera:
        R = T.rotation_matrix
        return Camera(
            position=T.apply(self.position[None])[0],
            view_dir=R @ self.view_dir,
            up=R @ self.up,
            fx=self.fx,
            fy=self.fy,
            cx=self.cx,
            cy=self.cy,
            width=self.width,
            height=self.height,
        )


def project_to_view_plane(camera: Camera, x: np.ndarray) -> np.ndarray:
    """Apply ``I - c_v c_v^T`` to a point or an ``(N, 3)`` array of points."""
    x = np.asarray(x, dtype=float)
    return x - np.multiply.outer(x @ camera.view_dir, camera.view_dir)


def _pixel_indices(camera: Camera, u: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    finite = np.isfinite(u) & np.isfinite(v)
    col = np.full(len(u), -1, dtype=np.int64)
    row = np.full(len(v), -1, dtype=np.int64)
    col[finite] = np.rint(u[finite]).astype(np.int64)
    row[finite] = np.rint(v[finite]).astype(np.int64)
    inside = finite & (col >= 0) & (col < camera.width) & (row >= 0) & (row < camera.height)
    return row, col, inside


@dataclass(frozen=True, eq=False)
class PartialScan:
    """Oriented point set captured from a single viewpoint."""

    points: np.ndarray
    normals: np.ndarray
    camera: Camera
    depth_grid: np.ndarray | None = None

    def __post_init__(self):
        points = np.array(self.points, dtype=float).reshape(-1, 3)
        normals = np.array(self.normals, dtype=float).reshape(-1, 3)
        points.setflags(write=False)
        normals.setflags(write=False)
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "normals", normals)
        if self.depth_grid is not None:
            grid = np.array(self.depth_grid, dtype=float)
            grid.setflags(write=False)
            object.__setattr__(self, "depth_grid", grid)
        self._validate()

    def _validate(self):
        if len(self.points) != len(self.normals):
            raise ValidationError(
                "normal/point count mismatch",
                details={"points": len(self.points), "normals": len(self.normals)},
            )
        if len(self.points) == 0:
            return
        lengths = np.linalg.norm(self.normals, axis=1)
        if np.any(np.abs(lengths - 1.0) > 1e-3):
            raise ValidationError("normals must be unit vectors", details={"field": "normals"})
        facing = np.einsum("ij,ij->i", self.normals, self.camera.position - self.points)
        if np.any(facing <= 0):
            raise ValidationError(
                "every normal must face the camera",
                details={"field": "normals", "violations": int(np.sum(facing <= 0))},
            )
        u, v, z = self.camera.project(self.points)
        row, col, inside = _pixel_indices(self.camera, u, v)
        if not np.all(inside):
            raise ValidationError(
                "points must project inside the camera image",
                details={"field": "points", "violations": int(np.sum(~inside))},
            )
        if self.depth_grid is not None:
            if self.depth_grid.shape != (self.camera.height, self.camera.width):
                raise ValidationError(
                    "depth grid shape must match the camera image",
                    details={"field": "depth_grid", "shape": list(self.depth_grid.shape)},
                )
            error = np.abs(self.depth_grid[row, col] - z)
            # Relative slack covers float32 coordinates read back from scan files.
            if np.any(error > REPROJECTION_TOLERANCE + 1e-6 * (1.0 + np.abs(z))):
                raise ValidationError(
                    "points disagree with the depth grid",
                    details={"field": "depth_grid", "max_error_mm": float(np.max(error))},
                )

    def __len__(self) -> int:
        return len(self.points)

    @cached_property
    def index(self) -> ScanIndex:
        return ScanIndex.build(self)

    def transformed(self, T: RigidTransform) -> PartialScan:
        """Rigidly move the whole capture: points, normals and camera."""
        return PartialScan(T.apply(self.points), T.rotate(self.normals), self.camera.transformed(T), self.depth_grid)

    def subset(self, indices: np.ndarray) -> PartialScan:
        return PartialScan(self.points[indices], self.normals[indices], self.camera, self.depth_grid)


@dataclass(frozen=True, eq=False)
class ScanIndex:
    """Exact nearest-neighbor indexes and the depth grid used for ray queries."""

    tree_3d: cKDTree
    tree_2d: cKDTree
    grid: np.ndarray

    @classmethod
    def build(cls, scan: PartialScan) -> ScanIndex:
        grid = scan.depth_grid if scan.depth_grid is not None else splat_depth_grid(scan)
        return cls(
            tree_3d=cKDTree(scan.points),
            tree_2d=cKDTree(scan.camera.view_plane_coords(scan.points)),
            grid=grid,
        )

    def nearest_3d(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return self.tree_3d.query(np.asarray(points, dtype=float), k=1)

    def nearest_2d(self, coords: np.ndarray, workers: int = 1) -> tuple[np.ndarray, np.ndarray]:
        """Distances and indices of the nearest view-plane neighbors, one query for the whole batch."""
        return self.tree_2d.query(np.asarray(coords, dtype=float), k=1, workers=workers)


def splat_depth_grid(scan: PartialScan) -> np.ndarray:
    """Rasterize the points into a depth grid, keeping the nearest point per pixel."""
    camera = scan.camera
    grid = np.full(camera.height * camera.width, np.inf)
    if len(scan):
        u, v, z = camera.project(scan.points)
        row, col, inside = _pixel_indices(camera, u, v)
        np.minimum.at(grid, row[inside] * camera.width + col[inside], z[inside])
    grid[np.isinf(grid)] = 0.0
    return grid.reshape(camera.height, camera.width)


def lookup_depth(
    camera: Camera,
    grid: np.ndarray,
    points: np.ndarray,
    max_spread: float = DEFAULT_MAX_SPREAD,
) -> tuple[np.ndarray, np.ndarray]:
    """Surface depth along the ray through each point.

    Returns ``(z, d)``: the point's own depth along ``view_dir`` and the depth
    of the first surface on its ray, 0 where the ray leaves through a
    no-return pixel or the image border. Nearest-pixel depth is refined
    bilinearly only when the 4 surrounding pixels are all valid and within
    ``max_spread`` mm of each other.
    """
    u, v, z = camera.project(points)
    return z, surface_depth(camera, grid, u, v, max_spread)


def surface_depth(
    camera: Camera,
    grid: np.ndarray,
    u: np.ndarray,
    v: np.ndarray,
    max_spread: float = DEFAULT_MAX_SPREAD,
) -> np.ndarray:
    """First-surface depth at pixel coordinates ``u, v``; 0 where there is none."""
    row, col, inside = _pixel_indices(camera, u, v)
    d = np.zeros(len(u))
    d[inside] = grid[row[inside], col[inside]]
    valid = d > 0
    if not np.any(valid):
        return d

    idx = np.flatnonzero(valid)
    uu, vv = u[idx], v[idx]
    c0 = np.floor(uu).astype(np.int64)
    r0 = np.floor(vv).astype(np.int64)
    ok = (c0 >= 0) & (c0 + 1 < camera.width) & (r0 >= 0) & (r0 + 1 < camera.height)
    idx, uu, vv, c0, r0 = idx[ok], uu[ok], vv[ok], c0[ok], r0[ok]
    d00 = grid[r0, c0]
    d01 = grid[r0, c0 + 1]
    d10 = grid[r0 + 1, c0]
    d11 = grid[r0 + 1, c0 + 1]
    corners = np.stack([d00, d01, d10, d11])
    smooth = np.all(corners > 0, axis=0) & (corners.max(axis=0) - corners.min(axis=0) <= max_spread)
    fu = (uu - c0)[smooth]
    fv = (vv - r0)[smooth]
    d[idx[smooth]] = (
        d00[smooth] * (1 - fu) * (1 - fv)
        + d01[smooth] * fu * (1 - fv)
        + d10[smooth] * (1 - fu) * fv
        + d11[smooth] * fu * fv
    )
    return d


def ray_intersect(scan: PartialScan, x: np.ndarray) -> np.ndarray | None:
    """First surface point of ``scan`` on the ray from its camera through ``x``."""
    x = np.asarray(x, dtype=float).reshape(3)
    camera = scan.camera
    if np.linalg.norm(x - camera.position) == 0:
        raise ValidationError("query point coincides with the camera position")
    z, d = lookup_depth(camera, scan.index.grid, x[None])
    if d[0] <= 0:
        return None
    return camera.position + (x - camera.position) * (d[0] / z[0])


def downsample(scan: PartialScan, target: int, seed: int) -> PartialScan:
    """Deterministic uniform random subset of ``target`` point/normal pairs."""
    if target < 1:
        raise ValidationError("downsample target must be at least 1", details={"target": target})
    if target >= len(scan):
        return scan
    rng = np.random.default_rng(seed)
    indices = np.sort(rng.choice(len(scan), size=target, replace=False))
    return scan.subset(indices)


# =============================================================================
# Scan file I/O
# =============================================================================


def sidecar_paths(path: str | Path) -> tuple[Path, Path]:
    """Camera JSON and depth PNG paths belonging to a scan PLY."""
    path = Path(path)
    stem = path.with_suffix("")
    return stem.parent / f"{stem.name}.camera.json", stem.parent / f"{stem.name}.depth.png"


def read_ply_header(path: Path) -> dict[str, Any]:
    """Validate a PLY header and return its format, vertex count and properties."""
    with open(path, "rb") as f:
        head = f.read(65536)
    end = head.find(b"end_header")
    if not head.startswith(b"ply") or end < 0:
        raise ScanFormatError(f"malformed PLY header in {path}", field="header")
    lines = head[:end].decode("ascii", errors="replace").splitlines()

    fmt = None
    count = None
    properties: list[str] = []
    in_vertex = False
    for line in lines[1:]:
        tokens = line.split()
        if not tokens or tokens[0] in ("comment", "obj_info"):
            continue
        if tokens[0] == "format" and len(tokens) >= 2:
            fmt = tokens[1]
        elif tokens[0] == "element" and len(tokens) == 3:
            in_vertex = tokens[1] == "vertex"
            if in_vertex:
                try:
                    count = int(tokens[2])
                except ValueError:
                    raise ScanFormatError(f"malformed vertex count in {path}", field="element vertex")
        elif tokens[0] == "property" and in_vertex:
            properties.append(tokens[-1])

    if fmt not in ("ascii", "binary_little_endian"):
        raise ScanFormatError(
            f"unsupported PLY format {fmt!r} in {path}",
            field="format",
            suggestions=["Write scans as ascii or binary_little_endian PLY"],
        )
    if count is None:
        raise ScanFormatError(f"PLY file {path} has no vertex element", field="element vertex")
    for name in VERTEX_PROPERTIES:
        if name not in properties:
            raise ScanFormatError(
                f"PLY file {path} is missing vertex property '{name}'",
                field=name,
                suggestions=["Scans need x, y, z, nx, ny, nz per vertex"],
            )
    return {"format": fmt, "count": count, "properties": properties}


def load_scan(path: str | Path) -> PartialScan:
    """Load a scan PLY with its camera sidecar and optional depth PNG."""
    import open3d as o3d

    path = Path(path)
    if not path.exists():
        raise NotFoundError(f"scan file not found: {path}", details={"path": str(path)})
    header = read_ply_header(path)
    camera_path, depth_path = sidecar_paths(path)
    if not camera_path.exists():
        raise ScanFormatError(
            "camera sidecar not found",
            field="camera",
            details={"path": str(camera_path)},
        )
    try:
        camera = Camera.from_dict(json.loads(camera_path.read_text()))
    except json.JSONDecodeError as e:
        raise ScanFormatError(f"camera sidecar is not valid JSON: {e}", field="camera")
    except ValidationError as e:
        raise ScanFormatError(e.message, field=e.details.get("field", "camera"))

    cloud = o3d.io.read_point_cloud(str(path), format="ply")
    points = np.asarray(cloud.points, dtype=float)
    normals = np.asarray(cloud.normals, dtype=float)
    if len(points) != header["count"]:
        raise ScanFormatError(
            f"PLY file {path} declares {header['count']} vertices but {len(points)} were read",
            field="element vertex",
        )
    if len(normals) != len(points):
        raise ScanFormatError("normal/point count mismatch", field="normals")

    depth_grid = None
    if depth_path.exists():
        depth_grid = np.asarray(o3d.io.read_image(str(depth_path))).astype(float)

    try:
        scan = PartialScan(points, normals, camera, depth_grid)
    except ValidationError as e:
        raise ScanFormatError(e.message, field=e.details.get("field", "points"), details=e.details)
    logger.debug("Loaded %d points from %s", len(scan), path)
    return scan



def write_ply(path: Path, points: np.ndarray, normals: np.ndarray, binary: bool = True) -> None:
    """Write oriented points as a PLY with float32 ``x y z nx ny nz`` properties."""
    vertices = np.empty(len(points), dtype=PLY_VERTEX_DTYPE)
    for axis, name in enumerate(VERTEX_PROPERTIES[:3]):
        vertices[name] = points[:, axis]
    for axis, name in enumerate(VERTEX_PROPERTIES[3:]):
        vertices[name] = normals[:, axis]
    fmt = "binary_little_endian" if binary else "ascii"
    header = ["ply", f"format {fmt} 1.0", f"element vertex {len(vertices)}"]
    header += [f"property float {name}" for name in VERTEX_PROPERTIES]
    header.append("end_header")
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            f.write(vertices.tobytes())
        else:
            table = np.column_stack([vertices[name] for name in VERTEX_PROPERTIES])
            np.savetxt(f, table, fmt="%.9g")


def save_scan(scan: PartialScan, path: str | Path, binary: bool = True) -> None:
    """Write the PLY, the camera sidecar and, if present, the 16-bit depth PNG."""
    import open3d as o3d

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    write_ply(path, scan.points, scan.normals, binary)

    camera_path, depth_path = sidecar_paths(path)
    camera_path.write_text(json.dumps(scan.camera.to_dict(), indent=2) + "\n")
    if scan.depth_grid is not None:
        depth = np.clip(np.rint(scan.depth_grid), 0, np.iinfo(np.uint16).max).astype(np.uint16)
        o3d.io.write_image(str(depth_path), o3d.geometry.Image(np.ascontiguousarray(depth)))
    logger.debug("Saved %d points to %s", len(scan), path)

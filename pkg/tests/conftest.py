"""Pytest configuration and fixtures for vemreg tests."""

from pathlib import Path

import numpy as np
import pytest

from vemreg.config import SwarmConfig
from vemreg.geometry import RigidTransform
from vemreg.scan import Camera, PartialScan, save_scan
from vemreg.synth import PairSpec, RenderSettings, builtin_mesh, render_pair, write_manifest

FIXTURES_DIR = Path(__file__).parent / "fixtures"


def _camera(width: int, height: int, f: float, cx: float, cy: float) -> Camera:
    return Camera(
        position=(0.0, 0.0, 0.0),
        view_dir=(0.0, 0.0, 1.0),
        up=(0.0, -1.0, 0.0),
        fx=f,
        fy=f,
        cx=cx,
        cy=cy,
        width=width,
        height=height,
    )


def make_plane_scan(depth: float = 1000.0, width: int = 32, height: int = 24, f: float = 1000.0) -> PartialScan:
    """Fronto-parallel wall: one point per pixel, camera at the origin looking down +z."""
    cx, cy = width / 2.0, height / 2.0
    camera = _camera(width, height, f, cx, cy)
    cols, rows = np.meshgrid(np.arange(width), np.arange(height))
    points = np.column_stack(
        [
            ((cols - cx) / f * depth).ravel(),
            ((rows - cy) / f * depth).ravel(),
            np.full(cols.size, depth),
        ]
    )
    normals = np.tile([0.0, 0.0, -1.0], (len(points), 1))
    return PartialScan(points, normals, camera, np.full((height, width), depth))


def make_paraboloid_scan(a: float = 0.02, b: float = 0.05, c: float = 0.0005) -> PartialScan:
    """Curved anisotropic patch without a depth grid, 1 mm sample spacing.

    The cubic term leaves the patch with no rotational self-symmetry.
    """
    camera = _camera(64, 48, 1000.0, 32.0, 24.0)
    x, y = np.meshgrid(np.arange(-20, 21, dtype=float), np.arange(-12, 13, dtype=float))
    x, y = x.ravel(), y.ravel()
    points = np.column_stack([x, y, 1000.0 + a * x**2 + b * y**2 + c * x**3])
    normals = np.column_stack([2 * a * x + 3 * c * x**2, 2 * b * y, -np.ones_like(x)])
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return PartialScan(points, normals, camera)


@pytest.fixture
def plane_scan():
    """Factory for fronto-parallel wall scans."""
    return make_plane_scan


@pytest.fixture
def paraboloid_patch():
    """Factory for curved patch scans."""
    return make_paraboloid_scan


@pytest.fixture
def paraboloid_scan():
    """Curved patch scan."""
    return make_paraboloid_scan()


@pytest.fixture
def paraboloid_views(paraboloid_scan):
    """Three captures of the same patch, each moved rigidly with its camera.

    Returns the scans and the ground-truth transforms mapping each scan into
    scan 0's frame.
    """
    motions = [
        RigidTransform.identity(),
        RigidTransform.from_rotvec([0.2, -0.3, 0.4], [120.0, -40.0, 60.0]),
        RigidTransform.from_rotvec([-0.5, 0.1, 0.2], [-80.0, 90.0, -30.0]),
    ]
    scans = [paraboloid_scan.transformed(S) for S in motions]
    return scans, [S.inverse() for S in motions]


@pytest.fixture(scope="session")
def small_render_settings():
    """Low-resolution camera that still frames a 1 m mesh at 2 m."""
    return RenderSettings(width=64, height=48, fx=80.0, fy=80.0)


@pytest.fixture(scope="session")
def blob_pair(small_render_settings):
    """Two renderings of the blob mesh in a common frame, about half overlapping."""
    mesh = builtin_mesh("blob")
    P1, P2, overlap = render_pair(mesh, 0.5, np.random.default_rng(3), small_render_settings)
    return P1, P2, overlap


@pytest.fixture
def fast_swarm():
    """Swarm settings small enough for unit tests."""
    return SwarmConfig(
        n_particles=64,
        max_iterations=4,
        min_iterations=2,
        eval_points=300,
        refine_points=600,
        hough_samples=100,
        post_refine_iterations=3,
        seed=5,
    )


@pytest.fixture
def tiny_scan_path():
    """Three-point ASCII PLY with a camera sidecar."""
    return FIXTURES_DIR / "tiny_scan.ply"


@pytest.fixture
def config_valid_path():
    return FIXTURES_DIR / "config_valid.json"


@pytest.fixture
def config_typo_path():
    return FIXTURES_DIR / "config_typo.json"


@pytest.fixture
def paraboloid_motion():
    """Rigid motion applied to the second capture of the saved paraboloid pair."""
    return RigidTransform.from_rotvec([0.3, -0.5, 0.8], [150.0, 40.0, -60.0])


@pytest.fixture
def paraboloid_manifest(tmp_path, paraboloid_scan, paraboloid_motion):
    """Manifest of one saved pair: the patch and a rigidly moved capture of it."""
    save_scan(paraboloid_scan, tmp_path / "pair_0000_1.ply")
    moved = paraboloid_scan.transformed(paraboloid_motion)
    save_scan(moved, tmp_path / "pair_0000_2.ply")
    spec = PairSpec(
        pair_id="pair_0000",
        mesh="paraboloid",
        camera_1=paraboloid_scan.camera,
        camera_2=moved.camera,
        perturbation=paraboloid_motion,
        gt_transform=paraboloid_motion.inverse(),
        overlap_ratio=1.0,
        scan_1="pair_0000_1.ply",
        scan_2="pair_0000_2.ply",
    )
    path = tmp_path / "manifest.json"
    write_manifest([spec], path)
    return path

"""Benchmark harness: run registration methods over generated pairs and report success rates.

A trial succeeds when the estimated rotation is within 10 degrees of the
ground truth; translation is not scored.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import shlex
import subprocess
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .config import GlobalConfig
from .errors import DegenerateInputError, NotFoundError, ScanFormatError, ValidationError, VemregError
from .geometry import RigidTransform, rotation_error_deg
from .pairwise import evaluation_metric, register_pair
from .scan import PartialScan, load_scan
from .synth import PairSpec

logger = logging.getLogger(__name__)

SUCCESS_THRESHOLD_DEG = 10.0
FAILURE_ERROR_DEG = 180.0
PCA_NEIGHBORS = 8
EIGEN_GAP = 1e-2
EXTERNAL_TIMEOUT_S = 600

# Method name -> swarm scheme for the swarm-based methods.
SWARM_METHODS = {
    "vem-pso": "full",
    "vem-pso-no-guides": "no-guides",
    "vem-guides-only": "guides-only",
    "vem-initial-only": "initial-only",
}
METHODS = (*SWARM_METHODS, "pca", "external-adapter")

# Sign patterns with determinant +1.
RIGHT_HANDED_SIGNS = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=float)


@dataclass
class BenchRecord:
    pair_id: str
    method: str
    overlap_ratio: float
    rotation_error_deg: float
    wall_time_s: float
    transform: RigidTransform | None = None
    error: str | None = None

    @property
    def success(self) -> bool:
        return self.rotation_error_deg < SUCCESS_THRESHOLD_DEG


@dataclass
class ReportRow:
    method: str
    bin_low: int
    bin_high: int
    n: int
    successes: int
    mean_time_s: float | None

    @property
    def success_pct(self) -> float:
        return 100.0 * self.successes / self.n if self.n else 0.0


@dataclass
class BenchReport:
    rows: list[ReportRow] = field(default_factory=list)
    mean_runtime: dict[str, float] = field(default_factory=dict)
    overall_success: dict[str, float] = field(default_factory=dict)

    def summary(self) -> dict[str, dict[str, float]]:
        return {
            method: {"success_pct": self.overall_success[method], "mean_time_s": self.mean_runtime[method]}
            for method in sorted(self.overall_success)
        }


# =============================================================================
# Weighted PCA baseline
# =============================================================================


def _principal_axes(scan: PartialScan) -> tuple[np.ndarray, np.ndarray]:
    """Area-weighted centroid and right-handed principal axes (columns)."""
    points = scan.points
    if len(points) < 4:
        raise DegenerateInputError("degenerate principal axes", details={"points": len(points)})
    k = min(PCA_NEIGHBORS + 1, len(points))
    distance, _ = cKDTree(points).query(points, k=k)
    weights = np.mean(distance[:, 1:], axis=1) ** 2
    if weights.sum() <= 0:
        raise DegenerateInputError("degenerate principal axes", details={"reason": "zero weights"})
    centroid = weights @ points / weights.sum()
    centered = points - centroid
    covariance = (centered * weights[:, None]).T @ centered / weights.sum()
    eigenvalues, axes = np.linalg.eigh(covariance)
    scale = eigenvalues[-1]
    if scale <= 0 or eigenvalues[0] <= 1e-12 * scale or np.any(np.diff(eigenvalues) < EIGEN_GAP * scale):
        raise DegenerateInputError(
            "degenerate principal axes",
            details={"eigenvalues": [float(v) for v in eigenvalues]},
        )
    if np.linalg.det(axes) < 0:
        axes[:, 2] *= -1
    return centroid, axes


def pca_align(P1: PartialScan, P2: PartialScan, cfg: GlobalConfig | None = None) -> RigidTransform:
    """Align weighted principal axes; the sign ambiguity is settled by the lowest VEM."""
    cfg = cfg or GlobalConfig()
    c1, E1 = _principal_axes(P1)
    c2, E2 = _principal_axes(P2)
    candidates = []
    for signs in RIGHT_HANDED_SIGNS:
        matrix = np.eye(4)
        matrix[:3, :3] = E1 @ np.diag(signs) @ E2.T
        matrix[:3, 3] = c1 - matrix[:3, :3] @ c2
        candidates.append(RigidTransform.from_matrix(matrix))
    energies = evaluation_metric(P1, P2, cfg.swarm).energies(candidates)
    return candidates[int(np.argmin(energies))]


# =============================================================================
# Methods
# =============================================================================


def external_align(scan_1: Path, scan_2: Path, command: str | None) -> RigidTransform:
    """Run an external registration binary: two scan paths on stdin, transform JSON on stdout."""
    if not command:
        raise ValidationError(
            "external-adapter needs a command",
            suggestions=["Set external_command in the config or VEMREG_EXTERNAL_COMMAND"],
        )
    completed = subprocess.run(
        shlex.split(command),
        input=f"{scan_1}\n{scan_2}\n",
        capture_output=True,
        text=True,
        timeout=EXTERNAL_TIMEOUT_S,
    )
    if completed.returncode != 0:
        raise VemregError(
            "external_error",
            f"external command exited with status {completed.returncode}",
            details={"stderr": completed.stderr[-2000:]},
        )
    try:
        return RigidTransform.from_dict(json.loads(completed.stdout))
    except json.JSONDecodeError as e:
        raise VemregError("external_error", f"external command printed invalid JSON: {e}")


def _method_runner(method: str, cfg: GlobalConfig) -> Callable[[PartialScan, PartialScan, PairSpec, Path, int], RigidTransform]:
    if method in SWARM_METHODS:
        scheme = SWARM_METHODS[method]

        def run(P1, P2, spec, base_dir, index):
            swarm = cfg.swarm.with_scheme(scheme).replace(seed=cfg.swarm.seed + index)
            return register_pair(P1, P2, swarm).transform

        return run
    if method == "pca":
        return lambda P1, P2, spec, base_dir, index: pca_align(P1, P2, cfg)
    if method == "external-adapter":
        return lambda P1, P2, spec, base_dir, index: external_align(
            base_dir / spec.scan_1, base_dir / spec.scan_2, cfg.external_command
        )
    raise ValidationError(
        f"unknown method: {method}",
        details={"method": method},
        suggestions=[f"Use one of: {', '.join(METHODS)}"],
    )


def _trial(method: str, runner, spec: PairSpec, base_dir: Path, index: int) -> BenchRecord:
    start = time.perf_counter()
    try:
        P1 = load_scan(base_dir / spec.scan_1)
        P2 = load_scan(base_dir / spec.scan_2)
        estimate = runner(P1, P2, spec, base_dir, index)
    except Exception as e:
        message = e.message if isinstance(e, VemregError) else f"{e.__class__.__name__}: {e}"
        logger.warning("%s failed on %s: %s", method, spec.pair_id, message)
        return BenchRecord(spec.pair_id, method, spec.overlap_ratio, FAILURE_ERROR_DEG, time.perf_counter() - start, error=message)
    elapsed = time.perf_counter() - start
    error = rotation_error_deg(estimate, spec.gt_transform)
    logger.info("%s on %s: rotation error %.2f deg in %.2f s", method, spec.pair_id, error, elapsed)
    return BenchRecord(spec.pair_id, method, spec.overlap_ratio, error, elapsed, transform=estimate)


def evaluate_method(
    method: str,
    pairs: Sequence[PairSpec],
    cfg: GlobalConfig | None = None,
    base_dir: str | Path = ".",
) -> list[BenchRecord]:
    """Run ``method`` on every pair; failures are recorded with a 180 degree error."""
    cfg = cfg or GlobalConfig()
    runner = _method_runner(method, cfg)
    base_dir = Path(base_dir)
    with ThreadPoolExecutor(max_workers=cfg.worker_count) as pool:
        records = list(pool.map(lambda item: _trial(method, runner, item[1], base_dir, item[0]), enumerate(pairs)))
    return records


# =============================================================================
# Reporting
# =============================================================================


def overlap_bin(overlap: float, bin_width: float = 0.1) -> int:
    """Index of the ``bin_width``-wide overlap bin; 100% falls in the top bin."""
    width = round(bin_width * 100, 9)
    top = math.ceil(round(100 / width, 9)) - 1
    return min(int(math.floor(round(overlap * 100, 9) / width)), top)


def report(records: Sequence[BenchRecord], bin_width: float = 0.1) -> BenchReport:
    """Per-method, per-overlap-bin success percentages in a fixed row order."""
    if not records:
        raise ValidationError("cannot report on an empty record list")
    if not 0 < bin_width <= 1:
        raise ValidationError("bin_width must lie in (0, 1]", details={"bin_width": bin_width})
    width = round(bin_width * 100, 9)
    methods = sorted({r.method for r in records})
    bins = sorted({overlap_bin(r.overlap_ratio, bin_width) for r in records})

    result = BenchReport()
    for method in methods:
        mine = [r for r in records if r.method == method]
        for b in bins:
            members = [r for r in mine if overlap_bin(r.overlap_ratio, bin_width) == b]
            times = [r.wall_time_s for r in members]
            result.rows.append(
                ReportRow(
                    method=method,
                    bin_low=int(round(b * width)),
                    bin_high=int(round((b + 1) * width)),
                    n=len(members),
                    successes=sum(r.success for r in members),
                    mean_time_s=float(np.mean(times)) if times else None,
                )
            )
        result.mean_runtime[method] = float(np.mean([r.wall_time_s for r in mine]))
        result.overall_success[method] = 100.0 * sum(r.success for r in mine) / len(mine)
    return result


def write_report_csv(bench_report: BenchReport, path: str | Path, deterministic: bool = False) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["method", "bin_low", "bin_high", "n", "success_pct", "mean_time_s", "successes"])
        for row in bench_report.rows:
            if deterministic or row.mean_time_s is None:
                mean_time = "NA"
            else:
                mean_time = f"{row.mean_time_s:.4f}"
            writer.writerow(
                [row.method, row.bin_low, row.bin_high, row.n, f"{row.success_pct:.4f}", mean_time, row.successes]
            )


def write_records_csv(records: Sequence[BenchRecord], path: str | Path, deterministic: bool = False) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["pair_id", "method", "overlap_ratio", "rotation_error_deg", "success", "wall_time_s", "error"])
        for r in records:
            writer.writerow(
                [
                    r.pair_id,
                    r.method,
                    # Round-trips exactly, so overlap bins can be recomputed.
                    repr(float(r.overlap_ratio)),
                    f"{r.rotation_error_deg:.6f}",
                    int(r.success),
                    "NA" if deterministic else f"{r.wall_time_s:.4f}",
                    r.error or "",
                ]
            )


def load_manifest(path: str | Path) -> list[PairSpec]:
    """Read a pair manifest; scan paths stay relative to the manifest's directory."""
    path = Path(path)
    if not path.exists():
        raise NotFoundError(f"manifest not found: {path}", details={"path": str(path)})
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ScanFormatError(f"manifest is not valid JSON: {e}", field="manifest")
    if not isinstance(data, list):
        raise ScanFormatError("manifest must be a JSON list of pairs", field="manifest")
    return [PairSpec.from_dict(item) for item in data]


def run_benchmark(
    manifest: str | Path,
    methods: Sequence[str],
    cfg: GlobalConfig | None = None,
) -> tuple[list[BenchRecord], BenchReport]:
    cfg = cfg or GlobalConfig()
    for method in methods:
        _method_runner(method, cfg)
    specs = load_manifest(manifest)
    base_dir = Path(manifest).parent
    records: list[BenchRecord] = []
    for method in methods:
        logger.info("Running %s on %d pairs", method, len(specs))
        records += evaluate_method(method, specs, cfg, base_dir)
    return records, report(records)

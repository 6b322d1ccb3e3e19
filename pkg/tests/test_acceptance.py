"""End-to-end registration runs on rendered scans.

These take minutes; run them with ``pytest -m slow``.
"""

import json
import time

import numpy as np
import pytest

from vemreg.bench import run_benchmark
from vemreg.cli import main
from vemreg.config import GlobalConfig, SwarmConfig
from vemreg.geometry import RigidTransform, random_transform, rotation_error_deg
from vemreg.multiview import register_multiview
from vemreg.pairwise import _hough_particles, evaluation_metric, initialize_swarm, register_pair
from vemreg.scan import downsample, load_scan
from vemreg.synth import BENCH_MESHES, RenderSettings, builtin_mesh, generate_benchmark, render_pair, render_scan

pytestmark = pytest.mark.slow

SUCCESS_DEG = 10.0


def perturbed_pair(mesh_name, overlap, seed, settings=None):
    """Rendered pair with scan 2 moved away; returns the scans and the ground truth."""
    mesh = builtin_mesh(mesh_name)
    rng = np.random.default_rng(seed)
    P1, P2, measured = render_pair(mesh, overlap, rng, settings)
    perturbation = random_transform(rng, 0.5 * mesh.diameter)
    return P1, P2.transformed(perturbation), perturbation.inverse(), measured


def rotation_grid(step_deg: float = 20.0) -> np.ndarray:
    """Unit quaternions of every rotation vector on a cubic lattice inside the pi ball."""
    k = int(np.ceil(180.0 / step_deg))
    axis = np.radians(step_deg) * np.arange(-k, k + 1)
    rotvecs = np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), axis=-1).reshape(-1, 3)
    rotvecs = rotvecs[np.linalg.norm(rotvecs, axis=1) <= np.pi]
    return np.array([RigidTransform.from_rotvec(v).rotation for v in rotvecs])


@pytest.fixture(scope="module")
def benchmark_run(tmp_path_factory):
    """200 generated pairs over the builtin meshes, run with every swarm scheme and PCA."""
    out = tmp_path_factory.mktemp("bench")
    generate_benchmark([builtin_mesh(name) for name in BENCH_MESHES], 200, 1, out)
    methods = ["vem-pso", "vem-guides-only", "vem-pso-no-guides", "vem-initial-only", "pca"]
    records, _ = run_benchmark(out / "manifest.json", methods, GlobalConfig(swarm=SwarmConfig(seed=1)))
    return out, records


def success_pct(records, method, low=0.0, high=1.01) -> float:
    mine = [r for r in records if r.method == method and low <= r.overlap_ratio < high]
    return 100.0 * sum(r.success for r in mine) / len(mine)


class TestPairwiseRegistration:
    """Registration of rendered pairs across the overlap range."""

    def test_majority_of_pairs_succeed(self):
        """Most medium-overlap pairs land within 10 degrees."""
        successes = 0
        for seed, overlap in enumerate((0.35, 0.5, 0.7)):
            P1, P2, truth, _ = perturbed_pair("blob", overlap, seed)
            result = register_pair(P1, P2, SwarmConfig(seed=seed))
            successes += rotation_error_deg(result.transform, truth) < SUCCESS_DEG
        assert successes >= 2

    def test_symmetric_object_is_not_worse_than_truth(self):
        """On a cylinder the result may differ from the truth but scores no worse."""
        P1, P2, truth, _ = perturbed_pair("cylinder", 0.5, 21)
        cfg = SwarmConfig(seed=2)
        result = register_pair(P1, P2, cfg)
        truth_energy = evaluation_metric(P1, P2, cfg, cfg.refine_points).energy(truth)
        assert result.energy <= 1.05 * truth_energy + 1.0


class TestMultiviewRegistration:
    """Three overlapping views registered jointly."""

    def test_three_views(self):
        """Every view is recovered within 10 degrees of the truth."""
        mesh = builtin_mesh("lump")
        settings = RenderSettings()
        scans, truths = [], []
        rng = np.random.default_rng(5)
        for k, angle in enumerate(np.radians([0.0, 35.0, 70.0])):
            position = 2000.0 * np.array([np.sin(angle), 0.0, np.cos(angle)])
            scan = render_scan(mesh, settings.camera(position, np.zeros(3), np.array([0.0, 1.0, 0.0])))
            if k == 0:
                scans.append(scan)
                truths.append(None)
                continue
            motion = random_transform(rng, 500.0)
            scans.append(scan.transformed(motion))
            truths.append(motion.inverse())

        result = register_multiview(scans, GlobalConfig(swarm=SwarmConfig(seed=4)))
        assert result.size == 3
        for T, truth in zip(result.transforms[1:], truths[1:]):
            assert rotation_error_deg(T, truth) < SUCCESS_DEG


class TestCommandLine:
    """Deterministic command-line runs."""

    def test_register_pair_is_byte_identical(self, tmp_path, capsys):
        """The same seed gives byte-identical transform files."""
        assert main(["synth", "--pairs", "1", "--seed", "3", "--out", str(tmp_path / "data")]) == 0
        capsys.readouterr()
        config = tmp_path / "config.json"
        config.write_text(json.dumps({"n_particles": 300, "max_iterations": 8}))
        scan_1, scan_2 = tmp_path / "data" / "pair_0000_1.ply", tmp_path / "data" / "pair_0000_2.ply"
        for name in ("a.json", "b.json"):
            argv = ["register-pair", str(scan_1), str(scan_2), "--deterministic", "--seed", "3"]
            argv += ["--config", str(config), "--out", str(tmp_path / name)]
            assert main(argv) == 0
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


class TestSwarmStages:
    """Initial sampling and full registration against known poses."""

    def test_initial_swarm_starts_near_truth_at_high_overlap(self):
        """At 80% overlap or more the lowest-energy initial particle is within 30 degrees in 95 of 100 trials."""
        near = trials = 0
        for seed in range(40):
            if trials == 100:
                break
            mesh = builtin_mesh(BENCH_MESHES[seed % len(BENCH_MESHES)])
            rng = np.random.default_rng(seed)
            P1, P2, measured = render_pair(mesh, 0.85, rng)
            if measured < 0.8:
                continue
            for k in range(5):
                perturbation = random_transform(rng, 0.5 * mesh.diameter)
                particles = initialize_swarm(P1, P2.transformed(perturbation), SwarmConfig(seed=100 * seed + k))
                best = min(particles, key=lambda p: p.energy)
                near += rotation_error_deg(best.state, perturbation.inverse()) < 30.0
                trials += 1
        assert trials == 100
        assert near >= 95

    def test_sixty_percent_overlap(self):
        """Nine of ten 60% overlap pairs land within 10 degrees."""
        successes = 0
        for seed in range(10):
            P1, P2, truth, _ = perturbed_pair(BENCH_MESHES[seed % len(BENCH_MESHES)], 0.6, 30 + seed)
            result = register_pair(P1, P2, SwarmConfig(seed=seed))
            successes += rotation_error_deg(result.transform, truth) < SUCCESS_DEG
        assert successes >= 9

    def test_no_worse_than_rotation_grid(self):
        """On small pairs the swarm matches an exhaustive 20 degree grid with Hough translations."""
        settings = RenderSettings(width=64, height=48, fx=80.0, fy=80.0)
        quats = rotation_grid(20.0)
        for seed in range(10):
            P1, P2, truth, _ = perturbed_pair(BENCH_MESHES[seed % len(BENCH_MESHES)], 0.6, 60 + seed, settings)
            P1, P2 = downsample(P1, 400, seed), downsample(P2, 400, seed)
            cfg = SwarmConfig(seed=seed, eval_points=400, refine_points=400)
            metric = evaluation_metric(P1, P2, cfg)
            trans, ok = _hough_particles(quats, P1, P2, cfg)
            energies = metric.energies_array(quats[ok], trans[ok])
            k = int(np.argmin(energies))
            grid_best = RigidTransform(quats[ok][k], trans[ok][k])

            result = register_pair(P1, P2, cfg)
            assert result.energy <= energies[k] + 1e-6
            if rotation_error_deg(grid_best, truth) < SUCCESS_DEG:
                assert rotation_error_deg(result.transform, truth) < SUCCESS_DEG


class TestBenchmark:
    """Success curve and ablation ordering on 200 generated pairs."""

    def test_success_curve(self, benchmark_run):
        """The full swarm clears 85% overall, 70% at 15-30% overlap and four times PCA."""
        _, records = benchmark_run
        full = success_pct(records, "vem-pso")
        pca = success_pct(records, "pca")
        assert full >= 85.0
        assert success_pct(records, "vem-pso", 0.15, 0.30) >= 70.0
        assert pca < 30.0
        assert full >= 4.0 * pca

    def test_ablation_ordering(self, benchmark_run):
        """Dropping guides, then swarm moves, never helps by more than 3 points."""
        _, records = benchmark_run
        schemes = ["vem-pso", "vem-guides-only", "vem-pso-no-guides", "vem-initial-only"]
        rates = [success_pct(records, method) for method in schemes]
        for better, worse in zip(rates, rates[1:]):
            assert better >= worse - 3.0

    def test_single_thread_time_per_pair(self, benchmark_run):
        """One worker registers a benchmark pair within the 200-pairs-in-2-hours budget."""
        out, _ = benchmark_run
        manifest = json.loads((out / "manifest.json").read_text())
        elapsed = []
        for spec in manifest[::40]:
            P1, P2 = load_scan(out / spec["scan_1"]), load_scan(out / spec["scan_2"])
            start = time.perf_counter()
            register_pair(P1, P2, SwarmConfig(seed=1), workers=1)
            elapsed.append(time.perf_counter() - start)
        assert np.mean(elapsed) < 7200.0 / 200

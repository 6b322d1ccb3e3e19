"""Pairwise global registration by a guide-particle swarm.

Particles are candidate transforms mapping scan 2 into scan 1's frame. Each
iteration promotes well-separated low-energy particles to guides, moves the
guides by one Levenberg-Marquardt step on the visibility error metric and
moves the remaining particles with a PSO update toward their local guide.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np

from .config import SwarmConfig
from .errors import DegenerateInputError, NoCompatiblePairsError
from .geometry import (
    PsoCoordinates,
    RigidTransform,
    exp_at,
    pairwise_rotation_distances,
    rotation_distances,
    rotation_matrices,
    sample_uniform_rotations,
)
from .scan import PartialScan, downsample
from .vem import VisibilityMetric

logger = logging.getLogger(__name__)

MIN_SCAN_POINTS = 50
# Hough bin keys are packed into one int64; offsets keep them nonnegative.
_KEY_OFFSET = 1 << 20
_KEY_SPAN = 1 << 21


@dataclass
class Particle:
    """Swarm member: current transform, PSO chart coordinates and memory."""

    state: RigidTransform
    coords: PsoCoordinates
    velocity: np.ndarray
    energy: float
    best_coords: PsoCoordinates
    best_energy: float
    is_guide: bool = False

    @classmethod
    def start(cls, T: RigidTransform, energy: float) -> Particle:
        coords = PsoCoordinates.from_transform(T)
        return cls(T, coords, np.zeros(6), energy, coords, energy)

    def moved_to(self, T: RigidTransform, energy: float) -> Particle:
        """Copy at a new transform, with the personal best updated."""
        coords = PsoCoordinates.from_transform(T)
        return self._with(T, coords, self.velocity, energy)

    def _with(self, T: RigidTransform, coords: PsoCoordinates, velocity: np.ndarray, energy: float) -> Particle:
        improved = energy < self.best_energy
        return replace(
            self,
            state=T,
            coords=coords,
            velocity=velocity,
            energy=energy,
            best_coords=coords if improved else self.best_coords,
            best_energy=energy if improved else self.best_energy,
        )


@dataclass
class RegistrationResult:
    """Best transform found and the optimization history.

    ``trace`` and ``guide_history`` hold one entry per swarm iteration at
    the evaluation budget; ``energy`` is the returned transform re-scored at
    the refinement budget.
    """

    transform: RigidTransform
    energy: float
    iterations: int
    trace: list[float] = field(default_factory=list)
    guide_history: list[int] = field(default_factory=list)
    initial_energy: float = float("inf")
    evaluations: int = 0

    def to_dict(self) -> dict[str, Any]:
        return {
            "transform": self.transform.to_dict(),
            "energy": self.energy,
            "iterations": self.iterations,
            "initial_energy": self.initial_energy,
            "evaluations": self.evaluations,
            "trace": list(self.trace),
            "guide_history": list(self.guide_history),
        }


@dataclass(frozen=True)
class LmOutcome:
    transform: RigidTransform
    energy: float
    accepted: bool
    step_norm: float
    singular: bool = False
    evaluations: int = 0


# =============================================================================
# Hough translation voting
# =============================================================================


def _vote(
    points_1: np.ndarray,
    normals_1: np.ndarray,
    points_2: np.ndarray,
    normals_2: np.ndarray,
    cfg: SwarmConfig,
) -> np.ndarray:
    cos_max = np.cos(np.radians(cfg.normal_angle_max))
    ia, ib = np.nonzero(normals_1 @ normals_2.T > cos_max)
    if len(ia) == 0:
        raise NoCompatiblePairsError(details={"samples_1": len(points_1), "samples_2": len(points_2)})
    votes = points_1[ia] - points_2[ib]
    keys = np.rint(votes / cfg.hough_bin).astype(np.int64) + _KEY_OFFSET
    codes = (keys[:, 0] * _KEY_SPAN + keys[:, 1]) * _KEY_SPAN + keys[:, 2]
    _, inverse, counts = np.unique(codes, return_inverse=True, return_counts=True)
    winner = np.argmax(counts)
    return votes[inverse.reshape(-1) == winner].mean(axis=0)


def hough_translation(P1: PartialScan, P2_rotated: PartialScan, cfg: SwarmConfig) -> np.ndarray:
    """Translation aligning the already-rotated ``P2`` to ``P1``.

    Normal-compatible sample pairs ``(x, y)`` vote for ``x - y`` in cubic
    bins; the centroid of the votes in the fullest bin is returned.
    """
    a = downsample(P1, cfg.hough_samples, cfg.seed)
    b = downsample(P2_rotated, cfg.hough_samples, cfg.seed)
    return _vote(a.points, a.normals, b.points, b.normals, cfg)


# =============================================================================
# Swarm
# =============================================================================


def evaluation_metric(
    P1: PartialScan,
    P2: PartialScan,
    cfg: SwarmConfig,
    budget: int | None = None,
    workers: int = 1,
) -> VisibilityMetric:
    """Metric over both scans downsampled to the evaluation budget."""
    budget = budget or cfg.eval_points
    return VisibilityMetric(
        downsample(P1, budget, cfg.seed),
        downsample(P2, budget, cfg.seed),
        cfg.f_gate_mm,
        cfg.bilinear_max_spread_mm,
        workers,
    )


def _hough_particles(
    quats: np.ndarray,
    P1: PartialScan,
    P2: PartialScan,
    cfg: SwarmConfig,
) -> tuple[np.ndarray, np.ndarray]:
    """Hough translation per rotation; failed particles get ``nan`` translations."""
    a = downsample(P1, cfg.hough_samples, cfg.seed)
    b = downsample(P2, cfg.hough_samples, cfg.seed)
    R = rotation_matrices(quats)
    trans = np.full((len(quats), 3), np.nan)
    for k in range(len(quats)):
        try:
            trans[k] = _vote(a.points, a.normals, b.points @ R[k].T, b.normals @ R[k].T, cfg)
        except NoCompatiblePairsError:
            logger.debug("No compatible normal pairs for particle %d", k)
    return trans, np.isfinite(trans[:, 0])


def _score(metric: VisibilityMetric, quats: np.ndarray, trans: np.ndarray, ok: np.ndarray) -> np.ndarray:
    energies = np.full(len(quats), np.inf)
    if np.any(ok):
        energies[ok] = metric.energies_array(quats[ok], trans[ok])
    return energies


def initialize_swarm(
    P1: PartialScan,
    P2: PartialScan,
    cfg: SwarmConfig,
    metric: VisibilityMetric | None = None,
) -> list[Particle]:
    """Uniform rotations, each paired with its Hough translation and scored."""
    metric = metric or evaluation_metric(P1, P2, cfg)
    quats = sample_uniform_rotations(cfg.n_particles, cfg.seed)
    trans, ok = _hough_particles(quats, P1, P2, cfg)
    failed = int(np.sum(~ok))
    if failed > cfg.max_inf_fraction * cfg.n_particles:
        raise DegenerateInputError(
            "too many particles without compatible normal pairs",
            details={"failed": failed, "particles": cfg.n_particles, "max_fraction": cfg.max_inf_fraction},
            suggestions=["Check that both scans carry normals facing their cameras"],
        )
    energies = _score(metric, quats, trans, ok)
    trans[~ok] = 0.0
    return [Particle.start(RigidTransform(q, t), float(e)) for q, t, e in zip(quats, trans, energies)]


def select_guides(particles: list[Particle], cfg: SwarmConfig) -> list[int]:
    """Greedy rotational non-maximum suppression by energy.

    The lowest-energy remaining particle becomes a guide and suppresses
    every particle within ``theta_r`` of it. Infinite-energy particles are
    never guides.
    """
    energies = np.array([p.energy for p in particles])
    quats = np.array([p.state.rotation for p in particles])
    remaining = np.isfinite(energies)
    guides: list[int] = []
    for i in np.argsort(energies, kind="stable"):
        if not remaining[i]:
            continue
        guides.append(int(i))
        remaining &= rotation_distances(quats[i], quats) > cfg.theta_r
    return guides


def lm_step(
    T: RigidTransform,
    P1: PartialScan,
    P2: PartialScan,
    cfg: SwarmConfig,
    metric: VisibilityMetric | None = None,
    energy: float | None = None,
) -> LmOutcome:
    """One damped Gauss-Newton step on the metric with frozen correspondences.

    The step is accepted only if the re-classified energy decreases;
    otherwise the damping grows tenfold for up to ``lm_retries`` retries.
    """
    metric = metric or evaluation_metric(P1, P2, cfg)
    evaluations = 0
    if energy is None:
        energy = metric.energy(T)
        evaluations += 1
    (outcome,) = lm_steps([T], [energy], metric, cfg)
    return replace(outcome, evaluations=outcome.evaluations + evaluations)


def lm_steps(
    states: list[RigidTransform],
    energies: list[float],
    metric: VisibilityMetric,
    cfg: SwarmConfig,
) -> list[LmOutcome]:
    """``lm_step`` for many transforms at once.

    Each damping round scores the candidates of every still-pending
    transform in one batched evaluation; the outcome of each transform is
    the one it would get on its own.
    """
    outcomes: list[LmOutcome | None] = [None] * len(states)
    systems: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    for i, T in enumerate(states):
        lin = metric.linearize(T)
        J = lin.jacobian
        systems[i] = (J.T @ J, J.T @ lin.residuals)

    lam = np.full(len(states), cfg.lambda_lm)
    step_norms = np.zeros(len(states))
    evaluations = np.zeros(len(states), dtype=np.int64)
    pending = list(range(len(states)))
    for _ in range(cfg.lm_retries + 1):
        candidates: list[tuple[int, RigidTransform]] = []
        for i in pending:
            A, g = systems[i]
            try:
                delta = np.linalg.solve(A + lam[i] * np.eye(6), -g)
            except np.linalg.LinAlgError:
                delta = np.full(6, np.nan)
            if not np.all(np.isfinite(delta)):
                logger.debug("Singular normal equations at %r", states[i])
                outcomes[i] = LmOutcome(
                    states[i], energies[i], False, 0.0, singular=True, evaluations=int(evaluations[i])
                )
                continue
            step_norms[i] = float(np.linalg.norm(delta))
            candidates.append((i, exp_at(states[i], delta)))
        if not candidates:
            pending = []
            break

        scores = metric.energies([candidate for _, candidate in candidates])
        pending = []
        for (i, candidate), candidate_energy in zip(candidates, scores):
            evaluations[i] += 1
            if candidate_energy < energies[i]:
                outcomes[i] = LmOutcome(
                    candidate, float(candidate_energy), True, step_norms[i], evaluations=int(evaluations[i])
                )
            else:
                lam[i] *= 10.0
                pending.append(i)

    for i in pending:
        logger.debug("LM step rejected after %d attempts (energy %.4f)", cfg.lm_retries + 1, energies[i])
        outcomes[i] = LmOutcome(states[i], energies[i], False, step_norms[i], evaluations=int(evaluations[i]))
    return outcomes


def refine(
    T: RigidTransform,
    P1: PartialScan,
    P2: PartialScan,
    cfg: SwarmConfig,
    metric: VisibilityMetric | None = None,
) -> LmOutcome:
    """Iterate LM steps until one is rejected or the iteration cap is hit."""
    metric = metric or evaluation_metric(P1, P2, cfg, cfg.refine_points)
    energy = metric.energy(T)
    evaluations = 1
    accepted_any = False
    for _ in range(cfg.post_refine_iterations):
        outcome = lm_step(T, P1, P2, cfg, metric=metric, energy=energy)
        evaluations += outcome.evaluations
        if not outcome.accepted:
            break
        T, energy, accepted_any = outcome.transform, outcome.energy, True
    return LmOutcome(T, energy, accepted_any, 0.0, evaluations=evaluations)


def pso_step(
    particle: Particle,
    local_best: PsoCoordinates,
    cfg: SwarmConfig,
    rng: np.random.Generator,
    metric: VisibilityMetric | None = None,
) -> Particle:
    """Classic PSO move in the quaternion-vector/translation chart.

    ``p <- p + w_p v + w_b xi_b (b - p) + w_g xi_g (g - p)`` with ``xi``
    uniform per component (or 1 when random weights are off). The velocity
    becomes the displacement actually applied after renormalization. With a
    metric the new position is scored; otherwise the energy is left for a
    batched evaluation.
    """
    p = particle.coords.as_vector()
    b = particle.best_coords.as_vector()
    g = local_best.as_vector()
    if cfg.random_weights:
        xi_b = rng.random(6)
        xi_g = rng.random(6)
    else:
        xi_b = xi_g = np.ones(6)
    moved = p + cfg.omega_p * particle.velocity + cfg.omega_b * xi_b * (b - p) + cfg.omega_g * xi_g * (g - p)
    coords = PsoCoordinates.from_vector(moved)
    T = coords.to_transform()
    energy = metric.energy(T) if metric is not None else particle.energy
    updated = particle._with(T, coords, coords.as_vector() - p, energy)
    return replace(updated, is_guide=False)


def local_bests(
    particles: list[Particle],
    guides: list[int],
    cfg: SwarmConfig,
    fallback: PsoCoordinates,
) -> list[PsoCoordinates]:
    """Lowest-energy pool member within ``theta_r`` of each particle.

    The pool is the guide set, or every finite particle when guides are
    disabled; particles with nobody in range follow ``fallback``.
    """
    energies = np.array([p.energy for p in particles])
    quats = np.array([p.state.rotation for p in particles])
    pool = np.asarray(guides, dtype=np.int64) if cfg.use_guides else np.flatnonzero(np.isfinite(energies))
    if len(pool) == 0:
        return [fallback] * len(particles)
    dist = pairwise_rotation_distances(quats, quats[pool])
    masked = np.where(dist <= cfg.theta_r, energies[pool][None, :], np.inf)
    pick = np.argmin(masked, axis=1)
    found = np.isfinite(masked[np.arange(len(particles)), pick])
    return [particles[pool[j]].coords if ok else fallback for j, ok in zip(pick, found)]


def _reseed(
    particles: list[Particle],
    P1: PartialScan,
    P2: PartialScan,
    cfg: SwarmConfig,
    metric: VisibilityMetric,
    rng: np.random.Generator,
) -> int:
    """Give infinite-energy particles fresh rotations and Hough translations."""
    dead = [i for i, p in enumerate(particles) if not np.isfinite(p.energy)]
    if not dead:
        return 0
    quats = sample_uniform_rotations(len(dead), int(rng.integers(0, 2**63 - 1)))
    trans, ok = _hough_particles(quats, P1, P2, cfg)
    energies = _score(metric, quats, trans, ok)
    trans[~ok] = 0.0
    for i, q, t, e in zip(dead, quats, trans, energies):
        particles[i] = Particle.start(RigidTransform(q, t), float(e))
    logger.debug("Re-seeded %d particles, %d still without a translation", len(dead), int(np.sum(~ok)))
    return len(dead)


def _best(particles: list[Particle]) -> tuple[RigidTransform, float]:
    i = int(np.argmin([p.energy for p in particles]))
    return particles[i].state, particles[i].energy


def _move_guides(
    particles: list[Particle],
    guides: list[int],
    stalled: dict[int, RigidTransform],
    metric: VisibilityMetric,
    cfg: SwarmConfig,
) -> int:
    """One LM step for every guide, in place; returns the evaluations spent.

    ``stalled`` maps a particle to the transform at which its last step was
    rejected. The step is deterministic, so a guide still sitting there is
    kept without being linearized again.
    """
    active = [i for i in guides if stalled.get(i) is not particles[i].state]
    outcomes = lm_steps(
        [particles[i].state for i in active],
        [particles[i].energy for i in active],
        metric,
        cfg,
    )
    results = dict(zip(active, outcomes))
    for i, outcome in results.items():
        if outcome.accepted:
            stalled.pop(i, None)
        else:
            stalled[i] = outcome.transform
    for i in guides:
        p = particles[i]
        T, energy = (results[i].transform, results[i].energy) if i in results else (p.state, p.energy)
        particles[i] = replace(p.moved_to(T, energy), is_guide=True)
    if len(active) < len(guides):
        logger.debug("Skipped %d stalled guides", len(guides) - len(active))
    return sum(outcome.evaluations for outcome in outcomes)


def register_pair(
    P1: PartialScan,
    P2: PartialScan,
    cfg: SwarmConfig | None = None,
    workers: int = 1,
) -> RegistrationResult:
    """Globally register ``P2`` to ``P1``; the result maps scan 2 into scan 1's frame.

    ``workers`` threads serve the nearest-neighbor queries of each batched evaluation.
    """
    cfg = cfg or SwarmConfig()
    for name, scan in (("scan 1", P1), ("scan 2", P2)):
        if len(scan) < MIN_SCAN_POINTS:
            raise DegenerateInputError(
                f"{name} has too few points to register",
                details={"scan": name, "points": len(scan), "minimum": MIN_SCAN_POINTS},
            )

    metric = evaluation_metric(P1, P2, cfg, workers=workers)
    rng = np.random.default_rng([cfg.seed, 1])
    particles = initialize_swarm(P1, P2, cfg, metric)
    evaluations = sum(np.isfinite(p.energy) for p in particles)
    best_T, best_E = _best(particles)
    initial_energy = best_E
    logger.info("Initialized %d particles, best energy %.3f", len(particles), best_E)

    trace: list[float] = []
    guide_history: list[int] = []
    stalled: dict[int, RigidTransform] = {}
    lead_E = best_E
    iterations = 0
    for k in range(1, cfg.max_iterations + 1):
        iterations = k
        particles = [replace(p, is_guide=False) if p.is_guide else p for p in particles]
        guides = select_guides(particles, cfg) if cfg.use_guides else []
        evaluations += _move_guides(particles, guides, stalled, metric, cfg)
        guide_E = min((particles[i].energy for i in guides), default=np.inf)

        if cfg.move_regular:
            guide_set = set(guides)
            targets = local_bests(particles, guides, cfg, PsoCoordinates.from_transform(best_T))
            moved = [i for i in range(len(particles)) if i not in guide_set]
            for i in moved:
                particles[i] = pso_step(particles[i], targets[i], cfg, rng)
            quats = np.array([particles[i].state.rotation for i in moved]).reshape(-1, 4)
            trans = np.array([particles[i].state.translation for i in moved]).reshape(-1, 3)
            energies = metric.energies_array(quats, trans) if moved else np.zeros(0)
            evaluations += len(moved)
            for i, e in zip(moved, energies):
                p = particles[i]
                particles[i] = p._with(p.state, p.coords, p.velocity, float(e))

        if k == 1:
            _reseed(particles, P1, P2, cfg, metric, rng)

        swarm_T, swarm_E = _best(particles)
        if swarm_E < best_E:
            best_T, best_E = swarm_T, swarm_E
        # Convergence follows the best guide; without guides, the swarm best.
        previous, lead_E = lead_E, (guide_E if guides else best_E)
        trace.append(best_E)
        guide_history.append(len(guides))
        logger.info("Iteration %d: best energy %.3f, %d guides", k, best_E, len(guides))

        if k >= cfg.min_iterations and previous - lead_E <= cfg.termination_eps:
            break

    refine_metric = evaluation_metric(P1, P2, cfg, cfg.refine_points, workers)
    if cfg.post_refine:
        outcome = refine(best_T, P1, P2, cfg, metric=refine_metric)
        evaluations += outcome.evaluations
        best_T, final_energy = outcome.transform, outcome.energy
    else:
        final_energy = refine_metric.energy(best_T)
        evaluations += 1

    logger.info("Registered pair in %d iterations, energy %.3f", iterations, final_energy)
    return RegistrationResult(
        transform=best_T,
        energy=final_energy,
        iterations=iterations,
        trace=trace,
        guide_history=guide_history,
        initial_energy=initial_energy,
        evaluations=int(evaluations),
    )


def write_trace_csv(result: RegistrationResult, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["iteration", "best_energy", "guide_count"])
        for k, (energy, guides) in enumerate(zip(result.trace, result.guide_history), start=1):
            writer.writerow([k, f"{energy:.6f}", guides])

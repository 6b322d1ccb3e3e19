"""Multi-view registration: pairwise graph, spanning-tree selection and joint LM.

Scan 0 is the reference frame. A transform set holds ``T_0i`` mapping scan
``i`` into scan 0's frame for every scan, ``T_00`` being the identity.
"""

from __future__ import annotations

import itertools
import logging
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Iterable, Sequence

import numpy as np

from .config import GlobalConfig, SwarmConfig
from .errors import RegistrationFailedError, ValidationError, VemregError
from .geometry import RigidTransform, exp_at, skew
from .pairwise import RegistrationResult, register_pair
from .scan import PartialScan, downsample
from .vem import LABEL_B, classify_points, counted_mask

logger = logging.getLogger(__name__)

MAX_TREE_SCANS = 6

Edge = tuple[int, int]


@dataclass
class GraphEdge:
    """Pairwise result for ``i < j``; ``transform`` maps scan ``j`` into scan ``i``'s frame."""

    i: int
    j: int
    transform: RigidTransform
    energy: float
    result: RegistrationResult | None = None
    error: str | None = None

    @property
    def failed(self) -> bool:
        return not np.isfinite(self.energy)


@dataclass
class RegistrationGraph:
    """Complete graph of pairwise registrations over ``M`` scans."""

    scans: list[PartialScan]
    edges: dict[Edge, GraphEdge] = field(default_factory=dict)

    @property
    def size(self) -> int:
        return len(self.scans)

    def transform(self, a: int, b: int) -> RigidTransform:
        """Transform mapping scan ``b`` into scan ``a``'s frame."""
        if a < b:
            return self.edges[(a, b)].transform
        return self.edges[(b, a)].transform.inverse()

    def diagnostics(self) -> dict[str, Any]:
        return {
            f"{e.i}-{e.j}": {"energy": e.energy if np.isfinite(e.energy) else None, "error": e.error}
            for e in self.edges.values()
        }


@dataclass
class TransformSet:
    """Transforms of every scan into scan 0's frame, with their energies."""

    transforms: list[RigidTransform]
    energy: float = float("inf")
    normalized_energy: float = float("inf")
    source: str = "tree"

    @property
    def size(self) -> int:
        return len(self.transforms)

    def relative(self, i: int, j: int) -> RigidTransform:
        """``T_0j^-1 T_0i``: maps scan ``i`` into scan ``j``'s frame."""
        return self.transforms[j].inverse().compose(self.transforms[i])

    def to_dict(self) -> dict[str, Any]:
        return {
            "transforms": [T.to_dict() for T in self.transforms[1:]],
            "energy": self.energy if np.isfinite(self.energy) else None,
            "normalized_energy": self.normalized_energy if np.isfinite(self.normalized_energy) else None,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> TransformSet:
        if not isinstance(data, dict) or not isinstance(data.get("transforms"), list):
            raise ValidationError("transform set JSON must contain a 'transforms' list")
        transforms = [RigidTransform.identity()]
        transforms += [RigidTransform.from_dict(item) for item in data["transforms"]]
        return cls(transforms, source="prior")


# =============================================================================
# Energy
# =============================================================================


class MultiviewMetric:
    """Overall visibility error of a transform set over fixed scans."""

    def __init__(self, scans: Sequence[PartialScan], f_gate: float = 3.0, max_spread: float = 20.0):
        if len(scans) < 2:
            raise ValidationError("multiview registration needs at least two scans", details={"scans": len(scans)})
        self.scans = list(scans)
        self.f_gate = f_gate
        self.max_spread = max_spread
        for scan in self.scans:
            scan.index

    @classmethod
    def for_config(cls, scans: Sequence[PartialScan], cfg: SwarmConfig) -> MultiviewMetric:
        subsets = [downsample(scan, cfg.eval_points, cfg.seed) for scan in scans]
        return cls(subsets, cfg.f_gate_mm, cfg.bilinear_max_spread_mm)

    def _pairs(self) -> Iterable[Edge]:
        return itertools.permutations(range(len(self.scans)), 2)

    def energy(self, ts: TransformSet, normalized: bool = False) -> float:
        """Sum of directed energies of scan ``i`` seen from scan ``j`` over ordered pairs."""
        if ts.size != len(self.scans):
            raise ValidationError(
                "transform set size does not match the scan count",
                details={"transforms": ts.size, "scans": len(self.scans)},
            )
        total = 0.0
        for i, j in self._pairs():
            points = ts.relative(i, j).apply(self.scans[i].points)
            labels, residuals, _ = classify_points(points, self.scans[j], self.max_spread)
            counted = counted_mask(labels, residuals, self.f_gate)
            term = float(np.sum(np.einsum("ij,ij->i", residuals[counted], residuals[counted])))
            total += term / len(points) if normalized else term
        return total

    def score(self, ts: TransformSet) -> TransformSet:
        ts.energy = self.energy(ts)
        ts.normalized_energy = self.energy(ts, normalized=True)
        return ts

    def linearize(self, ts: TransformSet, normalized: bool = True) -> tuple[np.ndarray, np.ndarray]:
        """Stacked residuals and Jacobian over ``m_1 .. m_{M-1}`` with frozen correspondences.

        For source ``x`` of scan ``i`` seen by scan ``j`` the moved point is
        ``p = R_j^T (R_i x + t_i - t_j)``.
        """
        M = len(self.scans)
        residual_blocks = []
        jacobian_blocks = []
        for i, j in self._pairs():
            Ti, Tj = ts.transforms[i], ts.transforms[j]
            source = self.scans[i].points
            p = ts.relative(i, j).apply(source)
            labels, residuals, _ = classify_points(p, self.scans[j], self.max_spread)
            keep = counted_mask(labels, residuals, self.f_gate)
            if not np.any(keep):
                continue
            n = int(np.sum(keep))
            proj = np.broadcast_to(np.eye(3), (n, 3, 3)).copy()
            proj[labels[keep] == LABEL_B] = self.scans[j].camera.projector
            weight = 1.0 / np.sqrt(len(source)) if normalized else 1.0

            Ri = Ti.rotation_matrix
            RjT = Tj.rotation_matrix.T
            rotated = source[keep] @ Ri.T
            world = rotated + Ti.translation
            jac = np.zeros((n, 3, 6 * (M - 1)))
            if i > 0:
                c = 6 * (i - 1)
                jac[:, :, c : c + 3] = RjT @ -skew(rotated)
                jac[:, :, c + 3 : c + 6] = RjT
            if j > 0:
                c = 6 * (j - 1)
                jac[:, :, c : c + 3] = RjT @ skew(world - Tj.translation)
                jac[:, :, c + 3 : c + 6] = -RjT
            jac = np.einsum("kab,kbc->kac", proj, jac) * weight
            residual_blocks.append(residuals[keep].reshape(-1) * weight)
            jacobian_blocks.append(jac.reshape(-1, 6 * (M - 1)))
        if not residual_blocks:
            return np.zeros(0), np.zeros((0, 6 * (M - 1)))
        return np.concatenate(residual_blocks), np.concatenate(jacobian_blocks)


def overall_vem(
    ts: TransformSet,
    scans: Sequence[PartialScan],
    normalized: bool = False,
    literal: bool = False,
    f_gate: float = 3.0,
    max_spread: float = 20.0,
) -> float:
    """Overall visibility error of a transform set.

    Each ordered pair contributes one directed term, so two scans give the
    pairwise energy. ``literal`` counts both terms of every ordered pair,
    doubling the value.
    """
    energy = MultiviewMetric(scans, f_gate, max_spread).energy(ts, normalized)
    return 2.0 * energy if literal else energy


# =============================================================================
# Graph and candidates
# =============================================================================


def _register_edge(scans: Sequence[PartialScan], i: int, j: int, cfg: SwarmConfig) -> GraphEdge:
    try:
        result = register_pair(scans[i], scans[j], cfg)
    except VemregError as e:
        logger.warning("Pair %d-%d failed: %s", i, j, e.message)
        return GraphEdge(i, j, RigidTransform.identity(), float("inf"), error=e.message)
    return GraphEdge(i, j, result.transform, result.energy, result=result)


def build_registration_graph(
    scans: Sequence[PartialScan],
    cfg: SwarmConfig | None = None,
    jobs: int = 1,
) -> RegistrationGraph:
    """Register every unordered pair; failed pairs become infinite-energy edges."""
    cfg = cfg or SwarmConfig()
    pairs = list(itertools.combinations(range(len(scans)), 2))
    logger.info("Registering %d pairs over %d scans", len(pairs), len(scans))
    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        edges = list(pool.map(lambda ij: _register_edge(scans, ij[0], ij[1], cfg), pairs))
    return RegistrationGraph(list(scans), {(e.i, e.j): e for e in edges})


def enumerate_spanning_trees(M: int) -> list[list[Edge]]:
    """All ``M^(M-2)`` spanning trees of the complete graph, decoded from Pruefer sequences."""
    if M < 2:
        raise ValidationError("spanning trees need at least two vertices", details={"M": M})
    if M > MAX_TREE_SCANS:
        raise ValidationError(
            "multiview fanout cap",
            details={"M": M, "maximum": MAX_TREE_SCANS},
            suggestions=[f"Register at most {MAX_TREE_SCANS} scans per frame"],
        )
    trees = []
    for sequence in itertools.product(range(M), repeat=M - 2):
        degree = [1] * M
        for v in sequence:
            degree[v] += 1
        edges = []
        for v in sequence:
            leaf = next(u for u in range(M) if degree[u] == 1)
            edges.append((min(leaf, v), max(leaf, v)))
            degree[leaf] -= 1
            degree[v] -= 1
        a, b = [u for u in range(M) if degree[u] == 1]
        edges.append((a, b))
        trees.append(sorted(edges))
    return trees


def compose_tree(graph: RegistrationGraph, tree: Sequence[Edge]) -> TransformSet:
    """Walk the tree from scan 0 and chain edge transforms into ``T_0i``."""
    adjacency: dict[int, list[int]] = {v: [] for v in range(graph.size)}
    for a, b in tree:
        adjacency[a].append(b)
        adjacency[b].append(a)
    transforms: dict[int, RigidTransform] = {0: RigidTransform.identity()}
    queue = deque([0])
    while queue:
        a = queue.popleft()
        for b in sorted(adjacency[a]):
            if b not in transforms:
                transforms[b] = transforms[a].compose(graph.transform(a, b))
                queue.append(b)
    failed = any(graph.edges[edge].failed for edge in tree)
    ts = TransformSet([transforms[v] for v in range(graph.size)])
    if failed:
        ts.source = "tree-with-failed-edge"
    return ts


def candidate_sets(graph: RegistrationGraph) -> list[tuple[list[Edge], TransformSet]]:
    return [(tree, compose_tree(graph, tree)) for tree in enumerate_spanning_trees(graph.size)]


def select_transform_set(
    graph: RegistrationGraph,
    cfg: SwarmConfig | None = None,
    prior: TransformSet | None = None,
    jobs: int = 1,
) -> TransformSet:
    """Score every tree candidate (plus the prior) and keep the lowest normalized energy."""
    cfg = cfg or SwarmConfig()
    metric = MultiviewMetric.for_config(graph.scans, cfg)
    candidates = [ts for _, ts in candidate_sets(graph)]
    if prior is not None:
        if prior.size != graph.size:
            raise ValidationError(
                "prior transform set size does not match the scan count",
                details={"prior": prior.size, "scans": graph.size},
            )
        candidates.append(TransformSet(list(prior.transforms), source="prior"))

    def score(ts: TransformSet) -> TransformSet:
        if ts.source == "tree-with-failed-edge":
            return ts
        return metric.score(ts)

    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        scored = list(pool.map(score, candidates))
    energies = np.array([ts.normalized_energy for ts in scored])
    if not np.any(np.isfinite(energies)):
        raise RegistrationFailedError(
            "every candidate transform set has infinite energy",
            details={"edges": graph.diagnostics()},
        )
    best = scored[int(np.argmin(energies))]
    logger.info("Selected %s candidate of %d, normalized energy %.4f", best.source, len(scored), best.normalized_energy)
    return best


def refine_transform_set(
    ts: TransformSet,
    scans: Sequence[PartialScan],
    cfg: SwarmConfig | None = None,
    iterations: int = 10,
    metric: MultiviewMetric | None = None,
) -> TransformSet:
    """Joint LM over all non-reference transforms; steps that raise the energy are rejected."""
    cfg = cfg or SwarmConfig()
    metric = metric or MultiviewMetric.for_config(scans, cfg)
    current = metric.score(TransformSet(list(ts.transforms), source=ts.source))
    M = current.size
    for iteration in range(iterations):
        r, J = metric.linearize(current)
        A = J.T @ J
        g = J.T @ r
        lam = cfg.lambda_lm
        accepted = False
        for _ in range(cfg.lm_retries + 1):
            try:
                delta = np.linalg.solve(A + lam * np.eye(6 * (M - 1)), -g)
            except np.linalg.LinAlgError:
                break
            moved = [current.transforms[0]]
            moved += [exp_at(current.transforms[i], delta[6 * (i - 1) : 6 * i]) for i in range(1, M)]
            candidate = metric.score(TransformSet(moved, source=current.source))
            if candidate.normalized_energy < current.normalized_energy:
                current = candidate
                accepted = True
                break
            lam *= 10.0
        if not accepted:
            logger.debug("Joint refinement stopped after %d iterations", iteration)
            break
    return current


def register_multiview(
    scans: Sequence[PartialScan],
    cfg: GlobalConfig | None = None,
    prior: TransformSet | None = None,
) -> TransformSet:
    """Register ``M`` scans into scan 0's frame."""
    cfg = cfg or GlobalConfig()
    if len(scans) < 2:
        raise ValidationError("multiview registration needs at least two scans", details={"scans": len(scans)})
    if len(scans) > MAX_TREE_SCANS:
        raise ValidationError("multiview fanout cap", details={"M": len(scans), "maximum": MAX_TREE_SCANS})
    graph = build_registration_graph(scans, cfg.swarm, cfg.worker_count)
    selected = select_transform_set(graph, cfg.swarm, prior, cfg.worker_count)
    return refine_transform_set(selected, scans, cfg.swarm, cfg.multiview_refine_iterations)


def register_sequence(
    frames: Sequence[Sequence[PartialScan]],
    cfg: GlobalConfig | None = None,
    prior: TransformSet | None = None,
) -> list[TransformSet]:
    """Register frame after frame, offering each frame's result to the next as a candidate."""
    results = []
    for index, scans in enumerate(frames):
        logger.info("Frame %d of %d", index + 1, len(frames))
        prior = register_multiview(scans, cfg, prior)
        results.append(prior)
    return results

"""Accuracy and hit rate of a candidate sampler against the exhaustive oracle."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from ..candgen import oracle_valid_set, random_baseline
from ..geometry import Scene, scene_features
from ..gfn import GfnParams, encode_scene, sample_trajectories
from ..tracer import PathCandidate


@dataclass(frozen=True)
class SceneMetrics:
    draws: int
    valid_draws: int
    distinct_valid: int
    oracle_size: int

    @property
    def accuracy(self) -> float:
        return self.valid_draws / self.draws if self.draws else 0.0

    @property
    def hit_rate(self) -> float | None:
        return self.distinct_valid / self.oracle_size if self.oracle_size else None


@dataclass(frozen=True)
class EvalMetrics:
    accuracy: float
    hit_rate: float
    per_scene: tuple[SceneMetrics, ...] = field(default=(), repr=False)


def scene_metrics(candidates: Iterable, oracle: Iterable[PathCandidate]) -> SceneMetrics:
    """Score one scene's draws; duplicates count toward accuracy, not hit rate."""
    valid = set(oracle)
    draws = [c if isinstance(c, PathCandidate) else PathCandidate(tuple(c)) for c in candidates]
    hits = [c for c in draws if c in valid]
    return SceneMetrics(len(draws), len(hits), len(set(hits)), len(valid))


def aggregate(per_scene: Sequence[SceneMetrics]) -> EvalMetrics:
    """Pool draws over scenes.

    Scenes without any valid path are left out of the hit rate; if no scene
    has one, the hit rate is 0.
    """
    draws = sum(s.draws for s in per_scene)
    valid = sum(s.valid_draws for s in per_scene)
    reachable = [s for s in per_scene if s.oracle_size]
    found = sum(s.distinct_valid for s in reachable)
    total = sum(s.oracle_size for s in reachable)
    return EvalMetrics(
        accuracy=valid / draws if draws else 0.0,
        hit_rate=found / total if total else 0.0,
        per_scene=tuple(per_scene),
    )


def oracle_sets(scenes: Sequence[Scene], k: int, workers: int = 1) -> list[frozenset[PathCandidate]]:
    return [frozenset(oracle_valid_set(s, k, workers=workers)) for s in scenes]


def evaluate_sampler(
    sample_fn: Callable[[int, Scene], Sequence],
    scenes: Sequence[Scene],
    k: int,
    oracles: Sequence[frozenset] | None = None,
) -> EvalMetrics:
    """Metrics for an arbitrary sampler ``sample_fn(scene_index, scene) -> candidates``."""
    oracles = oracle_sets(scenes, k) if oracles is None else oracles
    return aggregate([scene_metrics(sample_fn(i, s), o) for i, (s, o) in enumerate(zip(scenes, oracles))])


def evaluate(
    params: GfnParams,
    scenes: Sequence[Scene],
    k: int,
    m: int,
    rng,
    oracles: Sequence[frozenset] | None = None,
) -> EvalMetrics:
    """Draw ``m`` candidates per scene from the model and score them."""
    if m < 1:
        raise ValueError("need at least one sample per scene")
    rng = np.random.default_rng(rng)

    def sample(_, scene):
        enc = encode_scene(scene_features(scene), params)
        return [t.candidate for t in sample_trajectories(enc, k, params, rng, m)]

    return evaluate_sampler(sample, scenes, k, oracles)


def evaluate_random(scenes: Sequence[Scene], k: int, m: int, seed, oracles=None) -> EvalMetrics:
    """Same metrics for the uniform sampler over the masked candidate space."""
    seeds = np.random.SeedSequence(seed).spawn(len(scenes))
    return evaluate_sampler(lambda i, s: random_baseline(len(s), k, m, seeds[i]), scenes, k, oracles)

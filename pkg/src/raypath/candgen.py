"""Exhaustive candidate enumeration, the brute-force oracle and the uniform baseline.

The candidate space is the search tree of K-long facet sequences with
immediate repeats removed: the first facet is any of N, each later one any of
the N - 1 facets different from its predecessor. Candidates are addressed by
their rank in lexicographic order, which lets enumeration be sharded without
materializing anything.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from typing import Iterator

import numpy as np

from .geometry import Scene
from .tracer import PathCandidate, RayPath, trace_and_validate

INT_LIMIT = 2**63 - 1
ORACLE_CAP = 10_000_000


class OracleCapError(RuntimeError):
    pass


def count_candidates(n: int, k: int) -> int:
    """Number of length-``k`` sequences over ``n`` facets without immediate repeats."""
    if n < 1 or k < 1:
        raise ValueError(f"need n >= 1 and k >= 1, got n={n}, k={k}")
    total = n * (n - 1) ** (k - 1)
    if total > INT_LIMIT:
        raise OverflowError(f"count_candidates({n}, {k}) exceeds the int64 range")
    return total


def candidate_at(index: int, n: int, k: int) -> PathCandidate:
    """The ``index``-th candidate in lexicographic order."""
    if not 0 <= index < count_candidates(n, k):
        raise IndexError(f"candidate index {index} out of range for n={n}, k={k}")
    ids = []
    rest = index
    tail = (n - 1) ** (k - 1)
    first, rest = divmod(rest, tail)
    ids.append(first)
    for _ in range(1, k):
        tail //= n - 1
        digit, rest = divmod(rest, tail)
        ids.append(digit if digit < ids[-1] else digit + 1)
    return PathCandidate(tuple(ids))


def enumerate_candidates(n: int, k: int, start: int = 0, stop: int | None = None) -> Iterator[PathCandidate]:
    """Stream candidates in lexicographic order, optionally restricted to a rank range."""
    total = count_candidates(n, k)
    stop = total if stop is None else min(stop, total)
    if start >= stop:
        return
    if start == 0 and stop == total:
        yield from _dfs(n, k)
        return
    for index in range(start, stop):
        yield candidate_at(index, n, k)


def _dfs(n: int, k: int) -> Iterator[PathCandidate]:
    prefix: list[int] = []

    def walk():
        if len(prefix) == k:
            yield PathCandidate(tuple(prefix))
            return
        last = prefix[-1] if prefix else -1
        for i in range(n):
            if i == last:
                continue
            prefix.append(i)
            yield from walk()
            prefix.pop()

    yield from walk()


def _oracle_shard(scene: Scene, k: int, start: int, stop: int) -> list[tuple[PathCandidate, RayPath]]:
    found = []
    for cand in enumerate_candidates(len(scene.facets), k, start, stop):
        path, report = trace_and_validate(scene, cand)
        if report.valid:
            found.append((cand, path))
    return found


def oracle_valid_set(scene: Scene, k: int, cap: int = ORACLE_CAP, workers: int = 1) -> dict[PathCandidate, RayPath]:
    """Every candidate that traces to a valid path, keyed in enumeration order."""
    total = count_candidates(len(scene.facets), k)
    if total > cap:
        raise OracleCapError(f"{total} candidates exceed the oracle cap of {cap}")
    if workers <= 1 or total < 1000:
        return dict(_oracle_shard(scene, k, 0, total))
    bounds = np.linspace(0, total, workers + 1).astype(int)
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(_oracle_shard, scene, k, int(a), int(b)) for a, b in zip(bounds, bounds[1:])]
        result: dict[PathCandidate, RayPath] = {}
        for fut in futures:
            result.update(fut.result())
    return result


def random_baseline(n: int, k: int, m: int, seed) -> list[PathCandidate]:
    """``m`` uniform draws over the masked candidate space."""
    if count_candidates(n, k) < 1:
        raise ValueError(f"no candidates for n={n}, k={k}")
    rng = np.random.default_rng(seed)
    ids = np.empty((m, k), dtype=np.int64)
    ids[:, 0] = rng.integers(0, n, size=m)
    for depth in range(1, k):
        draw = rng.integers(0, n - 1, size=m)
        ids[:, depth] = draw + (draw >= ids[:, depth - 1])
    return [PathCandidate(tuple(row)) for row in ids.tolist()]

"""Scan-line preserving subsampling and the nested point pyramid.

A point ``gap = target_group - point_group`` groups denser than the target is
kept only when both its scan row and column are multiples of ``2**gap``.
Points at or below the target density are never touched by that rule.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .errors import MetadataRequired, TargetTooLarge
from .spatial import NeighborTable, build_index, knn, nearest


def ds_lidar_keep(col, row, delta_gap):
    """True where ``col % 2**gap == 0`` and ``row % 2**gap == 0``."""
    col = np.asarray(col, dtype=np.int64)
    row = np.asarray(row, dtype=np.int64)
    gap = np.maximum(0, np.asarray(delta_gap, dtype=np.int64))
    mask = (np.int64(1) << np.minimum(gap, 62)) - 1
    return ((col & mask) == 0) & ((row & mask) == 0)


def grid_keep_mask(rows, cols, groups, target_group: int) -> np.ndarray:
    gap = np.maximum(0, target_group - np.asarray(groups, dtype=np.int64))
    return ds_lidar_keep(cols, rows, gap)


@dataclass
class GridResult:
    indices: np.ndarray  # kept indices, ascending
    target_group: int  # coarsest grid target fully applied
    grid_kept: np.ndarray  # subset of ``indices`` that passed the grid rule at ``target_group``
    random_fill: np.ndarray  # subset drawn at random from the next tier


def lidar_grid_subsample(rows, cols, groups, target_group: Optional[int] = None,
                         target_count: Optional[int] = None, rng=None) -> GridResult:
    """Grid-subsample to a density group, or to an exact point count.

    For a count target, the grid target is raised one group at a time until no
    more than ``target_count`` points survive. The points dropped by that last
    step form the tier from which the shortfall is drawn uniformly at random.
    """
    if rows is None or cols is None:
        raise MetadataRequired("LiDAR-grid subsampling needs scan_row/scan_col")
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    groups = np.asarray(groups, dtype=np.int64)
    n = rows.shape[0]
    if (target_group is None) == (target_count is None):
        raise ValueError("give exactly one of target_group / target_count")

    if target_group is not None:
        keep = np.flatnonzero(grid_keep_mask(rows, cols, groups, target_group))
        return GridResult(keep, target_group, keep, np.empty(0, np.int64))

    if target_count > n:
        raise TargetTooLarge(f"cannot keep {target_count} of {n} points")
    if target_count < 0:
        raise ValueError("target_count must be non-negative")
    rng = np.random.default_rng(rng)
    everything = np.arange(n)
    if target_count == n:
        return GridResult(everything, int(groups.min(initial=0)), everything, np.empty(0, np.int64))

    start = int(groups.min()) if n else 0
    span = int(max(rows.max(initial=0), cols.max(initial=0))).bit_length() + 1
    stop = int(groups.max()) + span + 1
    previous = np.ones(n, dtype=bool)
    target = start
    current = previous
    for target in range(start, stop + 1):
        current = grid_keep_mask(rows, cols, groups, target)
        if np.count_nonzero(current) <= target_count:
            break
        previous = current
    else:
        # grid rule bottomed out (many points on row 0 / col 0); sample from the survivors
        previous, current = current, np.zeros(n, dtype=bool)

    base = np.flatnonzero(current)
    tier = np.flatnonzero(previous & ~current)
    need = target_count - base.size
    fill = np.sort(rng.choice(tier, size=need, replace=False)) if need else np.empty(0, np.int64)
    kept = np.sort(np.concatenate([base, fill]))
    return GridResult(kept, target, base, fill)


def random_subsample(n: int, target_count: int, rng=None) -> np.ndarray:
    if target_count > n:
        raise TargetTooLarge(f"cannot keep {target_count} of {n} points")
    if target_count == n:
        return np.arange(n)
    rng = np.random.default_rng(rng)
    return np.sort(rng.choice(n, size=target_count, replace=False))


def geometric_counts(n1: int, levels: int = 5, ratio: int = 4) -> List[int]:
    return [max(1, n1 // ratio ** i) for i in range(levels)]


@dataclass
class PyramidState:
    """Nested subsets ``P^(1) ⊇ ... ⊇ P^(5)``.

    ``base`` maps P^(1) into the source cloud. ``levels[d]`` lists P^(d+1) as
    indices into P^(1); ``down[d]`` lists P^(d+1) as indices into P^(d);
    ``up[d]`` gives, for every point of P^(d), its nearest point of P^(d+1).
    """

    base: np.ndarray
    levels: List[np.ndarray]
    down: List[np.ndarray]
    up: List[np.ndarray]
    neighbors: List[NeighborTable]
    counts: List[int]
    lidar_grid: bool
    grid_info: List[Optional[GridResult]] = field(default_factory=list)

    def xyz(self, cloud_xyz, d: int):
        return cloud_xyz[self.base[self.levels[d]]]

    def source_indices(self, d: int) -> np.ndarray:
        return self.base[self.levels[d]]


def build_pyramid(cloud, groups, counts: Sequence[int], k: int = 16, seed=0) -> PyramidState:
    """Subsample ``cloud`` to ``counts[0]`` points, then each level from the previous one.

    Neighbour tables use ``min(k, N_d - 1)`` neighbours so tiny levels stay valid.
    """
    counts = [int(c) for c in counts]
    if any(b >= a for a, b in zip(counts, counts[1:])):
        raise ValueError("level counts must strictly decrease")
    if counts[-1] < 2:
        raise ValueError("every level needs at least two points for its neighbour table")
    xyz = cloud.xyz
    n = xyz.shape[0]
    if counts[0] > n:
        raise TargetTooLarge(f"cloud has {n} points, first level needs {counts[0]}")
    groups = np.asarray(groups, dtype=np.int64)
    rng = np.random.default_rng(seed)
    use_grid = cloud.rows is not None

    infos = []
    if use_grid:
        res = lidar_grid_subsample(cloud.rows, cloud.cols, groups, target_count=counts[0], rng=rng)
        base = res.indices
        infos.append(res)
    else:
        base = random_subsample(n, counts[0], rng)
        infos.append(None)

    levels = [np.arange(counts[0])]
    down = []
    for count in counts[1:]:
        prev = levels[-1]
        src = base[prev]
        if use_grid:
            res = lidar_grid_subsample(cloud.rows[src], cloud.cols[src], groups[src],
                                       target_count=count, rng=rng)
            local = res.indices
            infos.append(res)
        else:
            local = random_subsample(len(prev), count, rng)
            infos.append(None)
        down.append(local)
        levels.append(prev[local])

    level_xyz = [xyz[base[lv]] for lv in levels]
    neighbors = [knn(build_index(p), min(k, p.shape[0] - 1)) for p in level_xyz]
    up = [nearest(build_index(level_xyz[d + 1]), level_xyz[d]) for d in range(len(levels) - 1)]
    return PyramidState(base=base, levels=levels, down=down, up=up, neighbors=neighbors,
                        counts=counts, lidar_grid=use_grid, grid_info=infos)


def preprocess_indices(cloud, groups, t0: float, delta_max: Optional[int] = None) -> np.ndarray:
    """Thin everything denser than ``t0`` with the grid rule; keeps all else.

    Clouds without scan metadata are returned whole.
    """
    from .density import DEFAULT_DELTA_MAX, group_thresholds

    n = cloud.xyz.shape[0]
    if cloud.rows is None:
        return np.arange(n)
    gt = group_thresholds(DEFAULT_DELTA_MAX if delta_max is None else delta_max)
    top = int(np.count_nonzero(gt >= t0)) - 1  # last group whose threshold is at least t0
    if top < 0:
        return np.arange(n)
    return np.flatnonzero(grid_keep_mask(cloud.rows, cloud.cols, groups, top + 1))

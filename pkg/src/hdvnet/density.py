"""Per-point density estimates, density groups and density states.

Groups quarter in density from ``T0 = 2e6`` points per cubic metre. States are
coarser tiers made of contiguous groups; ``I^(d)`` holds points with
``t_d < rho <= t_{d-1}`` (``t_{-1} = inf``, ``t_5 = 0``).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import CalibrationError, DegenerateNeighborhood
from .spatial import NeighborTable, build_index, knn

T0 = 2.0e6
DEFAULT_DELTA_MAX = 17
N_STATES = 6
# reference values calibrated on the authors' mine dataset; not reproducible here
MINE_REFERENCE_THRESHOLDS = (30558.0, 1739.0, 31.0, 1.9, 0.12, 0.0)


@dataclass
class DensityProfile:
    rho: np.ndarray
    group: np.ndarray
    k_used: int


@dataclass
class StateThresholds:
    t: np.ndarray  # t_0..t_5
    delta_max: int = DEFAULT_DELTA_MAX
    k_used: int = 16
    state_of_group: dict = field(default_factory=dict)

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.float64)
        if self.t.shape != (N_STATES,):
            raise CalibrationError(f"need {N_STATES} thresholds, got {self.t.shape}")
        if self.t[-1] != 0 or np.any(np.diff(self.t) >= 0):
            raise CalibrationError("thresholds must strictly decrease to t_5 = 0")
        if not self.state_of_group:
            self.state_of_group = state_map(self.t, self.delta_max)

    def to_json(self) -> str:
        return json.dumps({"t": [float(v) for v in self.t], "k_used": self.k_used,
                           "delta_max": self.delta_max}, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "StateThresholds":
        d = json.loads(text)
        return cls(t=d["t"], delta_max=d.get("delta_max", DEFAULT_DELTA_MAX),
                   k_used=d.get("k_used", 16))

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path) -> "StateThresholds":
        with open(path) as fh:
            return cls.from_json(fh.read())


def group_thresholds(delta_max: int = DEFAULT_DELTA_MAX) -> np.ndarray:
    """``t_delta = t_{delta-1} / 4`` starting at ``2e6``; length ``delta_max + 1``."""
    if delta_max < 0:
        raise ValueError("delta_max must be non-negative")
    t = np.empty(delta_max + 1)
    t[0] = T0
    for i in range(1, delta_max + 1):
        t[i] = t[i - 1] / 4.0
    return t


def assign_groups(rho, thresholds) -> np.ndarray:
    """Smallest delta with ``rho > t_delta``; ``len(thresholds)`` when below all of them."""
    rho = np.asarray(rho, dtype=np.float64)
    t = np.asarray(thresholds, dtype=np.float64)
    ascending = t[::-1]
    below = np.searchsorted(ascending, rho, side="left")  # thresholds strictly below rho
    return (len(t) - below).astype(np.int64)


def jitter_duplicates(xyz, scale: float = 1e-9) -> np.ndarray:
    """Displace exact duplicates by a deterministic offset so every radius is positive.

    The first occurrence stays put; the j-th repeat moves ``j * scale`` along a
    fixed diagonal.
    """
    xyz = np.array(xyz, dtype=np.float64, copy=True)
    _, inverse, counts = np.unique(xyz, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    if counts.max(initial=1) <= 1:
        return xyz
    order = np.argsort(inverse, kind="stable")
    sorted_inv = inverse[order]
    starts = np.r_[0, np.flatnonzero(np.diff(sorted_inv)) + 1]
    rank = np.arange(len(order)) - np.repeat(starts, np.diff(np.r_[starts, len(order)]))
    offsets = np.empty(len(order))
    offsets[order] = rank
    direction = np.array([1.0, 0.7548776662, 0.5698402910])
    return xyz + offsets[:, None] * scale * direction


def estimate_density(neighbors: NeighborTable, delta_max: int = DEFAULT_DELTA_MAX) -> DensityProfile:
    """``rho = k / (4/3 pi r^3)`` with ``r`` the distance to the k-th neighbour."""
    radii = np.asarray(neighbors.radii, dtype=np.float64)
    if np.any(radii <= 0):
        bad = int(np.count_nonzero(radii <= 0))
        raise DegenerateNeighborhood(
            f"{bad} points have at least k={neighbors.k} exact duplicates; "
            "enable duplicate jitter or clean the cloud")
    rho = neighbors.k / (4.0 / 3.0 * math.pi * radii ** 3)
    return DensityProfile(rho=rho, group=assign_groups(rho, group_thresholds(delta_max)),
                          k_used=neighbors.k)


def density_profile(cloud, k: int = 16, jitter: bool = False,
                    delta_max: int = DEFAULT_DELTA_MAX) -> DensityProfile:
    xyz = getattr(cloud, "xyz", cloud)
    if jitter:
        xyz = jitter_duplicates(xyz)
    return estimate_density(knn(build_index(xyz), k), delta_max)


def remaining_fraction(groups, target_group: int) -> float:
    """Expected share of points kept when grid-subsampling to ``target_group``.

    A point ``delta`` groups denser than the target keeps one in ``4**delta``.
    """
    gap = np.maximum(0, target_group - np.asarray(groups))
    return float(np.mean(np.ldexp(1.0, -2 * gap)))


def calibrate_states(profiles: Sequence, target_fractions: Sequence[float],
                     delta_max: int = DEFAULT_DELTA_MAX) -> StateThresholds:
    """Pick ``t_0..t_4`` from the pooled training densities.

    ``target_fractions`` are ``N_1..N_5`` relative to ``N_1``. For state
    ``d - 1`` the chosen group threshold is the one whose grid-subsampling keeps
    the share of points closest to ``N_d / N_1``. Ties go to the sparser
    threshold, and each threshold must lie strictly below the previous one.
    """
    rhos = [np.asarray(getattr(p, "rho", p), dtype=np.float64) for p in profiles]
    rhos = [r for r in rhos if r.size]
    if not rhos:
        raise CalibrationError("no training densities to calibrate from")
    f = np.asarray(target_fractions, dtype=np.float64)
    if f.shape != (N_STATES - 1,) or np.any(np.diff(f) >= 0) or np.any(f <= 0):
        raise CalibrationError("need five strictly decreasing positive target fractions")
    f = f / f[0]
    gt = group_thresholds(delta_max)
    groups = assign_groups(np.concatenate(rhos), gt)
    # thinning to threshold t_delta keeps groups > delta untouched
    kept = np.array([remaining_fraction(groups, delta + 1) for delta in range(delta_max + 1)])
    chosen = []
    lo = 0
    for target in f:
        if lo > delta_max:
            raise CalibrationError("ran out of density groups; raise delta_max")
        err = np.abs(kept[lo:] - target)
        best = lo + int(np.flatnonzero(err == err.min())[-1])
        chosen.append(best)
        lo = best + 1
    t = np.r_[gt[chosen], 0.0]
    k_used = next((p.k_used for p in profiles if hasattr(p, "k_used")), 16)
    return StateThresholds(t=t, delta_max=delta_max, k_used=k_used)


def state_map(t, delta_max: int = DEFAULT_DELTA_MAX) -> dict:
    """Group index to state index, including the overflow group ``delta_max + 1``."""
    gt = group_thresholds(delta_max)
    # a group's inclusive upper bound is a member of that group
    probes = np.r_[2.0 * gt[0], gt]
    states = inherent_state(probes, t)
    return {delta: int(s) for delta, s in enumerate(states)}


def inherent_state(rho, thresholds) -> np.ndarray:
    """State ``d`` with ``t_d < rho <= t_{d-1}``; 0 for anything above ``t_0``."""
    t = np.asarray(getattr(thresholds, "t", thresholds), dtype=np.float64)
    rho = np.asarray(getattr(rho, "rho", rho), dtype=np.float64)
    return assign_groups(rho, t[:-1]).astype(np.int64)


def density_histogram(groups, delta_max: int = DEFAULT_DELTA_MAX) -> np.ndarray:
    """Percentage of points per group, overflow group last."""
    groups = np.asarray(getattr(groups, "group", groups))
    counts = np.bincount(groups, minlength=delta_max + 2).astype(np.float64)
    if counts.sum() == 0:
        return counts
    return 100.0 * counts / counts.sum()

"""Synthetic terrestrial scans of open-pit-like scenes.

A scanner sweeps a regular grid of elevation (rows) by azimuth (cols). Each
ray hits the nearest primitive within range, so point density falls with the
square of distance just as it does for a real static scanner.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import List, Optional

import numpy as np

from .errors import SpecTooSparse, ValidationError
from .pcio import PointCloud

WALL, GROUND, OTHER = 0, 1, 2
CLASS_NAMES = ("wall", "ground", "other")
_KINDS = ("plane", "disc", "cylinder", "sphere", "box")


@dataclass
class SceneSpec:
    scanner: List[float] = field(default_factory=lambda: [0.0, 0.0, 1.5])
    rows: int = 48
    cols: int = 360
    elevation_deg: List[float] = field(default_factory=lambda: [-40.0, 40.0])
    max_range: float = 120.0
    noise_sigma: float = 0.01
    primitives: List[dict] = field(default_factory=list)
    min_points: int = 1
    class_count: int = 3

    def validate(self):
        if self.rows < 1 or self.cols < 1:
            raise ValidationError("rows and cols must be positive")
        if self.max_range <= 0 or self.noise_sigma < 0:
            raise ValidationError("max_range must be positive and noise_sigma non-negative")
        lo, hi = self.elevation_deg
        if not -90.0 <= lo < hi <= 90.0:
            raise ValidationError("elevation range must satisfy -90 <= lo < hi <= 90")
        for p in self.primitives:
            if p.get("kind") not in _KINDS:
                raise ValidationError(f"unknown primitive kind {p.get('kind')!r}")
            if not 0 <= int(p.get("label", -1)) < self.class_count:
                raise ValidationError(f"primitive label out of range: {p}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "SceneSpec":
        return cls(**json.loads(text))

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path) -> "SceneSpec":
        with open(path) as fh:
            return cls.from_json(fh.read())


# --------------------------------------------------------------------------
# ray / primitive intersections; each returns the hit distance (inf on miss)
# --------------------------------------------------------------------------

def _plane(o, d, p):
    c = np.asarray(p["centre"], float)
    n = np.asarray(p["normal"], float)
    n = n / np.linalg.norm(n)
    u = np.cross(n, [0.0, 0.0, 1.0])
    if np.linalg.norm(u) < 1e-9:
        u = np.array([1.0, 0.0, 0.0])
    u = u / np.linalg.norm(u)
    v = np.cross(n, u)
    denom = d @ n
    with np.errstate(divide="ignore", invalid="ignore"):
        t = ((c - o) @ n) / denom
    hit = o + t[:, None] * d - c
    w, h = p["size"]
    ok = (np.abs(denom) > 1e-12) & (t > 0) & (np.abs(hit @ u) <= w / 2) & (np.abs(hit @ v) <= h / 2)
    return np.where(ok, t, np.inf)


def _disc(o, d, p):
    cx, cy, z = p["centre"]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (z - o[2]) / d[:, 2]
    x = o[0] + t * d[:, 0] - cx
    y = o[1] + t * d[:, 1] - cy
    r = np.sqrt(x * x + y * y)
    ok = (np.abs(d[:, 2]) > 1e-12) & (t > 0) & (r >= p.get("r_inner", 0.0)) & (r <= p["r_outer"])
    return np.where(ok, t, np.inf)


def _cylinder(o, d, p):
    """Vertical cylinder wall between ``z0`` and ``z1`` (no caps)."""
    cx, cy = p["centre"]
    ox, oy = o[0] - cx, o[1] - cy
    a = d[:, 0] ** 2 + d[:, 1] ** 2
    b = 2 * (ox * d[:, 0] + oy * d[:, 1])
    c = ox * ox + oy * oy - p["radius"] ** 2
    disc = b * b - 4 * a * c
    best = np.full(d.shape[0], np.inf)
    with np.errstate(divide="ignore", invalid="ignore"):
        root = np.sqrt(np.maximum(disc, 0.0))
        for sign in (-1.0, 1.0):
            t = (-b + sign * root) / (2 * a)
            z = o[2] + t * d[:, 2]
            ok = (disc >= 0) & (a > 1e-12) & (t > 0) & (z >= p["z0"]) & (z <= p["z1"])
            best = np.where(ok & (t < best), t, best)
    return best


def _sphere(o, d, p):
    oc = o - np.asarray(p["centre"], float)
    b = d @ oc
    c = oc @ oc - p["radius"] ** 2
    disc = b * b - c
    root = np.sqrt(np.maximum(disc, 0.0))
    t0, t1 = -b - root, -b + root
    t = np.where(t0 > 0, t0, t1)
    return np.where((disc >= 0) & (t > 0), t, np.inf)


def _box(o, d, p):
    lo = np.asarray(p["min"], float)
    hi = np.asarray(p["max"], float)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (lo - o) * inv
        t2 = (hi - o) * inv
    t1 = np.nan_to_num(t1, nan=-np.inf)
    t2 = np.nan_to_num(t2, nan=np.inf)
    tmin = np.minimum(t1, t2).max(axis=1)
    tmax = np.maximum(t1, t2).min(axis=1)
    t = np.where(tmin > 0, tmin, tmax)
    return np.where((tmax >= tmin) & (t > 0), t, np.inf)


_HIT = {"plane": _plane, "disc": _disc, "cylinder": _cylinder, "sphere": _sphere, "box": _box}


def ray_directions(spec: SceneSpec):
    lo, hi = np.radians(spec.elevation_deg)
    el = np.linspace(lo, hi, spec.rows)
    az = np.arange(spec.cols) * (2 * np.pi / spec.cols)
    rows, cols = np.meshgrid(np.arange(spec.rows), np.arange(spec.cols), indexing="ij")
    e, a = el[rows.ravel()], az[cols.ravel()]
    d = np.stack([np.cos(e) * np.cos(a), np.cos(e) * np.sin(a), np.sin(e)], axis=1)
    return d, rows.ravel(), cols.ravel()


def generate_scene(spec: SceneSpec, seed: int = 0, source_id: str = "synthetic") -> PointCloud:
    """Ray-cast ``spec``; one point per ray that hits something within range."""
    spec.validate()
    o = np.asarray(spec.scanner, float)
    d, rows, cols = ray_directions(spec)
    best = np.full(d.shape[0], np.inf)
    owner = np.full(d.shape[0], -1)
    for i, prim in enumerate(spec.primitives):
        t = _HIT[prim["kind"]](o, d, prim)
        closer = t < best
        best[closer] = t[closer]
        owner[closer] = i
    hit = np.flatnonzero((owner >= 0) & (best <= spec.max_range))
    if hit.size < spec.min_points:
        raise SpecTooSparse(f"scene yields {hit.size} points, need {spec.min_points}")

    # range noise from one stream per scan row, so rows can be generated independently
    noise = np.zeros(d.shape[0])
    for r in np.unique(rows[hit]):
        sel = hit[rows[hit] == r]
        stream = np.random.default_rng([seed, int(r)])
        noise[sel] = stream.normal(0.0, spec.noise_sigma, size=sel.size) if spec.noise_sigma else 0.0
    rng_t = best[hit] + noise[hit]
    xyz = o + rng_t[:, None] * d[hit]
    albedo = np.array([spec.primitives[i].get("albedo", [0.5, 0.5, 0.5]) for i in range(len(spec.primitives))])
    labels = np.array([int(p["label"]) for p in spec.primitives], dtype=np.int64)
    own = owner[hit]
    shade = 0.75 + 0.25 * np.abs(d[hit, 2])
    rgb = np.clip(albedo[own] * shade[:, None], 0.0, 1.0)
    return PointCloud(xyz=xyz, rgb=rgb, rows=rows[hit].astype(np.int64),
                      cols=cols[hit].astype(np.int64), labels=labels[own],
                      class_count=spec.class_count, source_id=source_id)


def mine_scene_spec(seed: int = 0, tiers: int = 3, rows: int = 48, cols: int = 360,
                    min_points: int = 1) -> SceneSpec:
    """A benched pit: a floor, ``tiers`` vertical walls with benches between, plus clutter."""
    rng = np.random.default_rng(seed)
    height = float(rng.uniform(6.0, 9.0))
    radius = float(rng.uniform(14.0, 20.0))
    prims = [{"kind": "disc", "label": GROUND, "centre": [0.0, 0.0, 0.0],
              "r_inner": 0.0, "r_outer": radius, "albedo": [0.55, 0.45, 0.35]}]
    for i in range(tiers):
        z0, z1 = i * height, (i + 1) * height
        prims.append({"kind": "cylinder", "label": WALL, "centre": [0.0, 0.0], "radius": radius,
                      "z0": z0, "z1": z1, "albedo": [0.6, 0.3, 0.2]})
        bench = float(rng.uniform(6.0, 12.0))
        prims.append({"kind": "disc", "label": GROUND, "centre": [0.0, 0.0, z1],
                      "r_inner": radius, "r_outer": radius + bench, "albedo": [0.5, 0.5, 0.4]})
        radius += bench
    for _ in range(int(rng.integers(3, 7))):
        ang = rng.uniform(0, 2 * np.pi)
        dist = rng.uniform(6.0, 0.8 * prims[0]["r_outer"])
        x, y = dist * np.cos(ang), dist * np.sin(ang)
        if rng.random() < 0.5:
            r = float(rng.uniform(0.6, 1.5))
            prims.append({"kind": "sphere", "label": OTHER, "centre": [x, y, r * 0.7],
                          "radius": r, "albedo": [0.2, 0.3, 0.7]})
        else:
            w, l, h = rng.uniform(1.5, 4.0), rng.uniform(1.5, 4.0), rng.uniform(1.0, 3.0)
            prims.append({"kind": "box", "label": OTHER, "min": [x - w / 2, y - l / 2, 0.0],
                          "max": [x + w / 2, y + l / 2, h], "albedo": [0.8, 0.7, 0.1]})
    scanner = [float(rng.uniform(-1.5, 1.5)), float(rng.uniform(-1.5, 1.5)), 1.5]
    return SceneSpec(scanner=scanner, rows=rows, cols=cols, elevation_deg=[-45.0, 45.0],
                     max_range=150.0, noise_sigma=0.01, primitives=prims, min_points=min_points)
